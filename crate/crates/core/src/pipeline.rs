//! Stage orchestration over a run directory.
//!
//! A run directory holds `config.resolved`, `data/`, `checkpoints/`,
//! `reports/` and `logs/`. Each stage reads its inputs from files written by
//! earlier stages and writes its own outputs, so stages can run in separate
//! processes. Every artifact carries the config hash and seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::ExperimentConfig;
use crate::corpus::{load_manifest, save_manifest, Corpus};
use crate::error::{Error, Result};
use crate::evalkit::{
    chapter_cluster_metric, cross_modal_stats, score_lm, style_space_svg, summarize, Conditioning, EvalReport,
};
use crate::featbin;
use crate::featext::{Registry, SpeechFeatureExtractor, TextFeatureExtractor};
use crate::lmtts::{
    decode_tokens_to_mel, generate, train_lm, train_mel_decoder, MelDecoder, SemanticTokenSequence,
    SemanticTokenizer, StyleSourcePolicy, TokenLM, TrainingStage,
};
use crate::styles::{train_speech_style_encoder, train_text_style_space, SpeechStyleEncoder, TextStyleEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenData,
    TrainSpeechStyle,
    TrainTextStyle,
    PretrainLm,
    FinetuneContext,
    Eval,
    Synth,
}

impl Stage {
    /// Pipeline order.
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::TrainSpeechStyle,
        Stage::TrainTextStyle,
        Stage::PretrainLm,
        Stage::FinetuneContext,
        Stage::Eval,
        Stage::Synth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainSpeechStyle => "train-speech-style",
            Stage::TrainTextStyle => "train-text-style",
            Stage::PretrainLm => "pretrain-lm",
            Stage::FinetuneContext => "finetune-context",
            Stage::Eval => "eval",
            Stage::Synth => "synth",
        }
    }

    /// Stages whose outputs this stage always reads. `eval` and `synth`
    /// additionally use the fine-tuned LM and style encoders when present.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::GenData => &[],
            Stage::TrainSpeechStyle => &[Stage::GenData],
            Stage::TrainTextStyle => &[Stage::GenData, Stage::TrainSpeechStyle],
            Stage::PretrainLm => &[Stage::GenData],
            Stage::FinetuneContext => &[
                Stage::GenData,
                Stage::TrainSpeechStyle,
                Stage::TrainTextStyle,
                Stage::PretrainLm,
            ],
            Stage::Eval | Stage::Synth => &[Stage::GenData, Stage::PretrainLm],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Paths inside one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `runs/<name>` relative to the working directory.
    pub fn default_for(cfg: &ExperimentConfig) -> Self {
        Self::new(Path::new("runs").join(&cfg.name))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.resolved")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("data").join("manifest.jsonl")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn log(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{}.log", stage.name()))
    }

    pub fn speech_encoder(&self) -> PathBuf {
        self.checkpoint("speech_style")
    }

    pub fn text_encoder(&self) -> PathBuf {
        self.checkpoint("text_style")
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.checkpoint("semantic_tokenizer")
    }

    pub fn decoder(&self) -> PathBuf {
        self.checkpoint("mel_decoder")
    }

    pub fn base_lm(&self) -> PathBuf {
        self.checkpoint("base_lm")
    }

    pub fn taca_lm(&self) -> PathBuf {
        self.checkpoint("taca_lm")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.report("eval_report.json")
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.report("synth")
    }

    /// Files a stage must produce; the first one marks the stage as done.
    pub fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::GenData => vec![self.manifest()],
            Stage::TrainSpeechStyle => vec![self.speech_encoder(), self.report("speech_style.json")],
            Stage::TrainTextStyle => vec![self.text_encoder(), self.report("text_style.json")],
            Stage::PretrainLm => vec![
                self.base_lm(),
                self.tokenizer(),
                self.decoder(),
                self.report("pretrain_lm.json"),
            ],
            Stage::FinetuneContext => vec![self.taca_lm(), self.report("finetune_context.json")],
            Stage::Eval => vec![self.eval_report()],
            Stage::Synth => vec![self.synth_dir()],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides `runs/<name>`.
    pub run_dir: Option<PathBuf>,
    /// Overwrite existing outputs of the stage.
    pub force: bool,
}

/// Files written by one stage.
#[derive(Clone, Debug, Default)]
pub struct StageOutcome {
    pub artifacts: Vec<PathBuf>,
}

/// Runs one stage. Checks the config against the run directory, checks
/// prerequisites and refuses to overwrite outputs unless `opts.force`.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage, opts: &RunOptions) -> Result<StageOutcome> {
    cfg.validate()?;
    let dir = opts.run_dir.clone().map(RunDir::new).unwrap_or_else(|| RunDir::default_for(cfg));
    let mut ctx = StageCtx {
        cfg,
        dir,
        hash: cfg.hash()?,
        log: Vec::new(),
        artifacts: Vec::new(),
    };
    ctx.check_config(opts.force)?;
    for &pre in stage.prerequisites() {
        let marker = ctx.dir.outputs(pre).remove(0);
        if !marker.exists() {
            return Err(Error::Dependency {
                stage: stage.name().into(),
                prerequisite: pre.name().into(),
                artifact: marker,
            });
        }
    }
    if !opts.force {
        if let Some(p) = ctx.dir.outputs(stage).into_iter().find(|p| p.exists()) {
            return Err(Error::Exists(p));
        }
    }
    ctx.note(format!("stage {stage} config_hash {} seed {}", ctx.hash, cfg.seed));
    let res = match stage {
        Stage::GenData => ctx.gen_data(),
        Stage::TrainSpeechStyle => ctx.train_speech_style(),
        Stage::TrainTextStyle => ctx.train_text_style(),
        Stage::PretrainLm => ctx.pretrain_lm(),
        Stage::FinetuneContext => ctx.finetune_context(),
        Stage::Eval => ctx.eval(),
        Stage::Synth => ctx.synth(),
    };
    if let Err(e) = &res {
        ctx.note(format!("failed: {e}"));
    }
    ctx.flush_log(stage)?;
    res?;
    Ok(StageOutcome {
        artifacts: ctx.artifacts,
    })
}

/// Runs every stage in order.
pub fn run_all(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<StageOutcome> {
    let mut out = StageOutcome::default();
    for st in Stage::ALL {
        out.artifacts.extend(run_stage(cfg, st, opts)?.artifacts);
    }
    Ok(out)
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: T,
}

struct StageCtx<'a> {
    cfg: &'a ExperimentConfig,
    dir: RunDir,
    hash: String,
    log: Vec<String>,
    artifacts: Vec<PathBuf>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn losses_line(name: &str, v: &[f32]) -> String {
    let tail = &v[v.len().saturating_sub(10)..];
    let mean = tail.iter().sum::<f32>() / tail.len().max(1) as f32;
    format!(
        "{name}: {} steps, first {:.4}, mean of last {} {:.4}",
        v.len(),
        v.first().copied().unwrap_or(f32::NAN),
        tail.len(),
        mean
    )
}

impl StageCtx<'_> {
    fn note(&mut self, line: String) {
        log::info!("{line}");
        self.log.push(line);
    }

    fn flush_log(&self, stage: Stage) -> Result<()> {
        let mut text = self.log.join("\n");
        text.push('\n');
        write_file(&self.dir.log(stage), text.as_bytes())
    }

    /// Writes `config.resolved` on first use; afterwards the run directory
    /// only accepts the same resolved config unless forced.
    fn check_config(&mut self, force: bool) -> Result<()> {
        let path = self.dir.config();
        let resolved = self.cfg.to_toml()?;
        if path.exists() && !force {
            let old = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if old != resolved {
                return Err(Error::Config(format!(
                    "{} was created with a different config (pass --force to replace it)",
                    self.dir.root().display()
                )));
            }
            return Ok(());
        }
        write_file(&path, resolved.as_bytes())
    }

    fn put(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        write_file(&path, bytes)?;
        self.artifacts.push(path);
        Ok(())
    }

    fn put_json<T: Serialize>(&mut self, path: PathBuf, body: T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&Stamped {
            config_hash: &self.hash,
            seed: self.cfg.seed,
            body,
        })?;
        s.push('\n');
        self.put(path, s.as_bytes())
    }

    fn put_checkpoint(&mut self, path: PathBuf, ck: Checkpoint) -> Result<()> {
        ck.write(&path)?;
        self.artifacts.push(path);
        Ok(())
    }

    fn read_checkpoint(&mut self, path: &Path) -> Result<Checkpoint> {
        let ck = Checkpoint::read(path)?;
        if ck.meta.config_hash != self.hash {
            let msg = format!(
                "warning: {} was written under config {}, running with {}",
                path.display(),
                ck.meta.config_hash,
                self.hash
            );
            log::warn!("{msg}");
            self.log.push(msg);
        }
        Ok(ck)
    }

    fn corpus(&self) -> Result<Corpus> {
        load_manifest(&self.dir.manifest())
    }

    fn split(&self, corpus: &Corpus) -> (Vec<usize>, Vec<usize>) {
        corpus.holdout_split(self.cfg.corpus.holdout_every)
    }

    fn speech_extractor(&self, corpus: &Corpus) -> Result<Arc<dyn SpeechFeatureExtractor>> {
        Registry::default().speech(&self.cfg.extractor.speech, corpus.feat_dim())
    }

    fn text_extractor(&self) -> Result<Arc<dyn TextFeatureExtractor>> {
        Registry::default().text(&self.cfg.extractor.text)
    }

    fn load_speech(&mut self, corpus: &Corpus) -> Result<SpeechStyleEncoder> {
        let ck = self.read_checkpoint(&self.dir.speech_encoder())?;
        checkpoint::load_speech_encoder(&ck, self.speech_extractor(corpus)?)
    }

    fn load_text(&mut self) -> Result<TextStyleEncoder> {
        let ck = self.read_checkpoint(&self.dir.text_encoder())?;
        checkpoint::load_text_encoder(&ck, self.text_extractor()?)
    }

    fn load_lm(&mut self, path: &Path) -> Result<TokenLM> {
        let ck = self.read_checkpoint(path)?;
        checkpoint::load_token_lm(&ck, self.text_extractor()?)
    }

    fn semantic(&mut self, corpus: &Corpus) -> Result<(SemanticTokenizer, Vec<SemanticTokenSequence>)> {
        let ck = self.read_checkpoint(&self.dir.tokenizer())?;
        let tok = checkpoint::load_tokenizer(&ck)?;
        let sem = tok.tokenize_corpus(corpus)?;
        Ok((tok, sem))
    }

    fn gen_data(&mut self) -> Result<()> {
        let corpus = match &self.cfg.corpus.manifest {
            Some(p) => load_manifest(p)?,
            None => self.cfg.corpus.synthetic.generate(),
        };
        let (train, held) = self.split(&corpus);
        self.note(format!(
            "{} utterances in {} chapters, {} train / {} held out, label coverage {:.2}",
            corpus.len(),
            corpus.chapter_ids().len(),
            train.len(),
            held.len(),
            corpus.label_coverage()
        ));
        let path = self.dir.manifest();
        save_manifest(&corpus, &path)?;
        self.artifacts.push(path);
        Ok(())
    }

    fn train_speech_style(&mut self) -> Result<()> {
        let corpus = self.corpus()?;
        let (train, _) = self.split(&corpus);
        let sub = corpus.subset(&train);
        let (enc, report) = train_speech_style_encoder(&sub, self.speech_extractor(&corpus)?, &self.cfg.speech_train())?;
        self.note(losses_line("loss", &report.losses));
        self.note(format!("speech encoder fingerprint {}", enc.fingerprint()));
        let ck = checkpoint::save_speech_encoder(&enc, &self.hash, self.cfg.seed)?;
        self.put_checkpoint(self.dir.speech_encoder(), ck)?;
        #[derive(Serialize)]
        struct Body {
            fingerprint: String,
            report: crate::styles::TrainReport,
        }
        let body = Body {
            fingerprint: enc.fingerprint(),
            report,
        };
        self.put_json(self.dir.report("speech_style.json"), body)
    }

    fn train_text_style(&mut self) -> Result<()> {
        let corpus = self.corpus()?;
        let (train, held) = self.split(&corpus);
        let speech = self.load_speech(&corpus)?;
        let before = speech.fingerprint();
        let sub = corpus.subset(&train);
        let (text, report) = train_text_style_space(&sub, &speech, self.text_extractor()?, &self.cfg.text_train())?;
        if speech.fingerprint() != before {
            return Err(Error::Integrity("speech encoder changed during text-stage training".into()));
        }
        let held_c = corpus.subset(&held);
        let stats = cross_modal_stats(&text.encode_corpus(&held_c)?, &speech.encode_corpus(&held_c)?)?;
        self.note(losses_line("loss", &report.losses));
        self.note(format!(
            "held-out matched cosine {:.4}, retrieval top-1 {:.4}",
            stats.matched_cosine_mean, stats.retrieval_top1
        ));
        let ck = checkpoint::save_text_encoder(&text, &self.hash, self.cfg.seed)?;
        self.put_checkpoint(self.dir.text_encoder(), ck)?;
        #[derive(Serialize)]
        struct Body {
            speech_fingerprint: String,
            held_out: crate::evalkit::CrossModalStats,
            report: crate::styles::TrainReport,
        }
        let body = Body {
            speech_fingerprint: before,
            held_out: stats,
            report,
        };
        self.put_json(self.dir.report("text_style.json"), body)
    }

    fn pretrain_lm(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let corpus = self.corpus()?;
        let (train, _) = self.split(&corpus);
        let tok = SemanticTokenizer::fit(&corpus, &train, &cfg.semantic_cfg())?;
        let sem = tok.tokenize_corpus(&corpus)?;
        let (dec, dec_losses) = train_mel_decoder(&corpus, &sem, &train, tok.k(), &cfg.decoder_cfg())?;
        self.note(losses_line("decoder L1", &dec_losses));
        let lm0 = TokenLM::new(
            cfg.lm.clone(),
            cfg.context.clone(),
            tok.k(),
            cfg.d_style,
            self.text_extractor()?,
            cfg.lm_seed(),
        )?;
        let (lm, report) = train_lm(&corpus, &sem, &train, TrainingStage::Pretrain, None, Some(lm0), &cfg.pretrain_cfg())?;
        self.note(losses_line("lm loss", &report.losses));
        self.note(format!("max_new_tokens {}", report.max_new_tokens));
        let (h, s) = (self.hash.clone(), cfg.seed);
        self.put_checkpoint(self.dir.tokenizer(), checkpoint::save_tokenizer(&tok, &h, s)?)?;
        self.put_checkpoint(self.dir.decoder(), checkpoint::save_decoder(&dec, &h, s)?)?;
        self.put_checkpoint(self.dir.base_lm(), checkpoint::save_token_lm(&lm, &h, s)?)?;
        #[derive(Serialize)]
        struct Body {
            decoder_losses: Vec<f32>,
            lm: crate::lmtts::LmTrainReport,
        }
        let body = Body {
            decoder_losses: dec_losses,
            lm: report,
        };
        self.put_json(self.dir.report("pretrain_lm.json"), body)
    }

    fn finetune_context(&mut self) -> Result<()> {
        let corpus = self.corpus()?;
        let (train, _) = self.split(&corpus);
        let speech = self.load_speech(&corpus)?;
        let text = self.load_text()?;
        let base = self.load_lm(&self.dir.base_lm())?;
        let (_, sem) = self.semantic(&corpus)?;
        let policy = StyleSourcePolicy::new(self.cfg.finetune.style_source_p, &speech, &text)?;
        let (lm, report) = train_lm(
            &corpus,
            &sem,
            &train,
            TrainingStage::ContextFinetune,
            Some(&policy),
            Some(base),
            &self.cfg.finetune_cfg(),
        )?;
        self.note(losses_line("lm loss", &report.losses));
        self.note(format!(
            "style sources: {} speech, {} text",
            report.speech_draws, report.text_draws
        ));
        let ck = checkpoint::save_token_lm(&lm, &self.hash, self.cfg.seed)?;
        self.put_checkpoint(self.dir.taca_lm(), ck)?;
        self.put_json(self.dir.report("finetune_context.json"), report)
    }

    /// Scores Base-LM and, when fine-tuned, TACA-LM on the held-out split.
    /// The report's primary system is the most trained LM available.
    fn eval(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let corpus = self.corpus()?;
        let (_, held) = self.split(&corpus);
        let (_, sem) = self.semantic(&corpus)?;
        let dec = checkpoint::load_decoder(&self.read_checkpoint(&self.dir.decoder())?)?;
        let text = if self.dir.text_encoder().exists() {
            Some(self.load_text()?)
        } else {
            None
        };
        let speech = if self.dir.speech_encoder().exists() {
            Some(self.load_speech(&corpus)?)
        } else {
            None
        };
        let mut systems = Vec::new();
        let base = self.load_lm(&self.dir.base_lm())?;
        let recs = score_lm(&base, Conditioning::Null, &dec, &corpus, &sem, &held, &cfg.eval.sampling, cfg.eval.n_ceps)?;
        systems.push(("Base-LM", recs));
        if let (true, Some(t)) = (self.dir.taca_lm().exists(), &text) {
            let taca = self.load_lm(&self.dir.taca_lm())?;
            let recs = score_lm(&taca, Conditioning::Context(t), &dec, &corpus, &sem, &held, &cfg.eval.sampling, cfg.eval.n_ceps)?;
            systems.push(("TACA-LM", recs));
        }
        let summaries: Vec<_> = systems.iter().map(|(n, r)| summarize(n, r)).collect();
        for s in &summaries {
            self.note(format!("{}: mean MCD {:.4} dB, mean TER {:.4}", s.system, s.mean_mcd, s.mean_ter));
        }

        let held_c = corpus.subset(&held);
        let mut matched = None;
        let mut silhouette = None;
        if let Some(t) = &text {
            let te = t.encode_corpus(&held_c)?;
            let chapters: Vec<&str> = held_c.utterances().iter().map(|u| u.chapter_id.as_str()).collect();
            if let Ok(s) = chapter_cluster_metric(&te, &chapters) {
                silhouette = Some(s);
            }
            if let Some(sp) = &speech {
                let se = sp.encode_corpus(&held_c)?;
                matched = Some(cross_modal_stats(&te, &se)?.matched_cosine_mean);
                if cfg.eval.svg {
                    let all: Vec<&str> = corpus.utterances().iter().map(|u| u.chapter_id.as_str()).collect();
                    let svg = style_space_svg(&t.encode_corpus(&corpus)?, &sp.encode_corpus(&corpus)?, &all)?;
                    let body = svg.replacen(
                        "<svg ",
                        &format!("<!-- config_hash {} seed {} -->\n<svg ", self.hash, cfg.seed),
                        1,
                    );
                    self.put(self.dir.report("style_space.svg"), body.as_bytes())?;
                }
            }
        }

        let (primary, records) = systems.pop().expect("base system is always scored");
        let mut report = EvalReport::new(
            primary,
            records,
            matched,
            silhouette,
            &self.hash,
            cfg.seed,
            serde_json::to_value(cfg)?,
        )?;
        report.comparisons = summaries.into_iter().filter(|s| s.system != primary).collect();
        report.validate()?;
        self.put(self.dir.eval_report(), report.to_json()?.as_bytes())
    }

    /// Generates mel for the configured utterances (default: held-out split)
    /// with the most trained LM available.
    fn synth(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let corpus = self.corpus()?;
        let targets: Vec<usize> = if cfg.synth.utterances.is_empty() {
            self.split(&corpus).1
        } else {
            cfg.synth.utterances.iter().map(|id| corpus.index_of(id)).collect::<Result<_>>()?
        };
        let dec: MelDecoder = checkpoint::load_decoder(&self.read_checkpoint(&self.dir.decoder())?)?;
        let taca = self.dir.taca_lm().exists() && self.dir.text_encoder().exists();
        let (lm, text) = if taca {
            (self.load_lm(&self.dir.taca_lm())?, Some(self.load_text()?))
        } else {
            (self.load_lm(&self.dir.base_lm())?, None)
        };
        let cond = match &text {
            Some(t) => Conditioning::Context(t),
            None => Conditioning::Null,
        };
        let system = if taca { "TACA-LM" } else { "Base-LM" };
        self.note(format!("synthesizing {} utterances with {system}", targets.len()));
        let out_dir = self.dir.synth_dir();
        if out_dir.exists() {
            fs::remove_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        }
        for (k, &i) in targets.iter().enumerate() {
            let u = &corpus.utterances()[i];
            let bundle = crate::evalkit::inference_bundle(&lm, cond, &corpus, i)?;
            let sampling = crate::lmtts::SamplingConfig {
                seed: cfg.synth.sampling.seed.wrapping_add(k as u64),
                ..cfg.synth.sampling.clone()
            };
            let gen = generate(&lm, &bundle, bundle.current_tokens(), &sampling)?;
            let mel = decode_tokens_to_mel(&gen.tokens, &dec)?;
            let stem = out_dir.join(u.id.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-' && c != '_', "_"));
            let mel_path = stem.with_extension("mel.bin");
            self.put(mel_path, &featbin::encode(&mel))?;
            #[derive(Serialize)]
            struct Body<'a> {
                utt_id: &'a str,
                system: &'a str,
                n_tokens: usize,
                truncated: bool,
                sampling_seed: u64,
            }
            let body = Body {
                utt_id: &u.id,
                system,
                n_tokens: gen.tokens.len(),
                truncated: gen.truncated,
                sampling_seed: sampling.seed,
            };
            self.put_json(stem.with_extension("json"), body)?;
        }
        self.artifacts.push(out_dir);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::tiny();
        c.corpus.synthetic.n_chapters = 2;
        c.corpus.synthetic.utts_per_chapter = 10;
        c.speech_style.schedule.steps = 5;
        c.text_style.schedule.steps = 5;
        c.pretrain.schedule.steps = 3;
        c.finetune.schedule.steps = 2;
        c.decoder.schedule.steps = 3;
        c.eval.sampling.max_new_tokens = Some(8);
        c.synth.sampling.max_new_tokens = Some(8);
        c
    }

    fn opts(dir: &Path, force: bool) -> RunOptions {
        RunOptions {
            run_dir: Some(dir.to_path_buf()),
            force,
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for st in Stage::ALL {
            assert_eq!(st.name().parse::<Stage>().unwrap(), st);
            for pre in st.prerequisites() {
                assert!(pre < &st, "{pre} must precede {st}");
            }
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn finetune_without_pretrain_is_a_dependency_error() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        run_stage(&cfg, Stage::GenData, &opts(tmp.path(), false)).unwrap();
        run_stage(&cfg, Stage::TrainSpeechStyle, &opts(tmp.path(), false)).unwrap();
        run_stage(&cfg, Stage::TrainTextStyle, &opts(tmp.path(), false)).unwrap();
        match run_stage(&cfg, Stage::FinetuneContext, &opts(tmp.path(), false)) {
            Err(Error::Dependency { prerequisite, .. }) => assert_eq!(prerequisite, "pretrain-lm"),
            other => panic!("expected dependency error, got {other:?}"),
        }
    }

    #[test]
    fn full_pipeline_is_stamped_and_reproducible() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        run_all(&cfg, &opts(tmp.path(), false)).unwrap();
        let dir = RunDir::new(tmp.path());
        let first = fs::read(dir.eval_report()).unwrap();
        let report = EvalReport::from_json(std::str::from_utf8(&first).unwrap()).unwrap();
        report.validate().unwrap();
        assert_eq!(report.system, "TACA-LM");
        assert_eq!(report.comparisons[0].system, "Base-LM");
        assert_eq!(report.config_hash, cfg.hash().unwrap());
        assert!(dir.report("style_space.svg").exists());

        let ck = Checkpoint::read(&dir.taca_lm()).unwrap();
        assert_eq!(ck.meta.stage, Some(TrainingStage::ContextFinetune));
        assert_eq!(ck.meta.config_hash, report.config_hash);
        let synth: Vec<_> = fs::read_dir(dir.synth_dir()).unwrap().collect();
        assert!(!synth.is_empty());

        assert!(matches!(
            run_stage(&cfg, Stage::Eval, &opts(tmp.path(), false)),
            Err(Error::Exists(_))
        ));
        run_stage(&cfg, Stage::Eval, &opts(tmp.path(), true)).unwrap();
        assert_eq!(fs::read(dir.eval_report()).unwrap(), first);

        let mut other = cfg.clone();
        other.seed = 5;
        assert!(matches!(
            run_stage(&other, Stage::Eval, &opts(tmp.path(), false)),
            Err(Error::Config(_))
        ));
    }
}
