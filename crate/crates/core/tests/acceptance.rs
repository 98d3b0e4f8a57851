//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line before asserting.
//!
//! Runs in release-level optimisation under `cargo test` (see the workspace
//! profile). The long criteria (5 and 10) take several minutes each.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taca::checkpoint::{self, Checkpoint};
use taca::config::ExperimentConfig;
use taca::context::ContextConfig;
use taca::corpus::{Corpus, SyntheticSpec};
use taca::evalkit::{
    chapter_cluster_metric, cross_modal_stats, inference_bundle, mcd_dtw, score_lm, summarize, Conditioning,
    EvalReport,
};
use taca::featext::{HashedTextExtractor, IdentitySpeechExtractor, TextFeatureExtractor};
use taca::lmtts::{
    generate, lm_sequence_pack, train_lm, train_mel_decoder, LmConfig, LmTrainConfig, MelDecoderConfig,
    SamplingConfig, SemanticConfig, SemanticTokenizer, StyleSourcePolicy, TokenLM, TrainingStage,
};
use taca::nn::{Schedule, Tensor};
use taca::pipeline::{run_stage, RunDir, RunOptions, Stage};
use taca::styles::{
    build_pairs, contrastive_closed_form, contrastive_loss, train_speech_style_encoder, train_text_style_space,
    PairLabel, PairLabelMatrix, PairingConfig, SpeechStyleEncoder, TextStyleEncoder,
};
use taca::vq::Codebook;

fn verdict(n: u32, ok: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Shared style-space run (criteria 1 and 8)

struct StyleRun {
    corpus: Corpus,
    held: Vec<usize>,
    speech: SpeechStyleEncoder,
    text: TextStyleEncoder,
    speech_hash_before_text: String,
    secs: f64,
}

fn style_run() -> &'static StyleRun {
    static RUN: OnceLock<StyleRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let t0 = Instant::now();
        let cfg = ExperimentConfig::desk();
        // 4 styles x 4 chapters x 25 utterances, corpus seed 7.
        let corpus = SyntheticSpec::default().generate();
        let (train, held) = corpus.holdout_split(5);
        let sub = corpus.subset(&train);
        let (speech, _) = train_speech_style_encoder(
            &sub,
            Arc::new(IdentitySpeechExtractor::new(corpus.feat_dim())),
            &cfg.speech_train(),
        )
        .unwrap();
        let speech_hash_before_text = speech.fingerprint();
        let (text, _) =
            train_text_style_space(&sub, &speech, Arc::new(HashedTextExtractor::default()), &cfg.text_train()).unwrap();
        StyleRun {
            corpus,
            held,
            speech,
            text,
            speech_hash_before_text,
            secs: t0.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn c01_cross_modal_alignment() {
    let r = style_run();
    let ho = r.corpus.subset(&r.held);
    let s = cross_modal_stats(&r.text.encode_corpus(&ho).unwrap(), &r.speech.encode_corpus(&ho).unwrap()).unwrap();
    let ok = s.matched_cosine_mean >= 0.8 && s.retrieval_top1 >= 0.9 && r.secs <= 600.0;
    verdict(
        1,
        ok,
        format!(
            "held-out matched_cosine_mean {:.4} (>= 0.8), retrieval_top1 {:.4} (>= 0.9), {} held out, {:.0} s (<= 600)",
            s.matched_cosine_mean,
            s.retrieval_top1,
            ho.len(),
            r.secs
        ),
    );
}

// ---------------------------------------------------------------------------
// 2: pair builder against a brute-force double loop

#[test]
fn c02_pair_builder_oracle() {
    let cfg = PairingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut boundary_hits = 0;
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=64);
        let mut sim = vec![0.0f32; n * n];
        for i in 0..n {
            sim[i * n + i] = 1.0;
            for j in 0..i {
                let v = match rng.random_range(0..6) {
                    0 => cfg.alpha,
                    1 => cfg.beta,
                    _ => rng.random_range(-1.0..1.0),
                };
                sim[i * n + j] = v;
                sim[j * n + i] = v;
            }
        }
        let got = build_pairs(&Tensor::from_vec(&[n, n], sim.clone()), &cfg).unwrap();
        for i in 0..n {
            for j in 0..n {
                let v = sim[i * n + j];
                let want = if i == j || v > cfg.beta {
                    PairLabel::Pos
                } else if v < cfg.alpha {
                    PairLabel::Neg
                } else {
                    PairLabel::Unk
                };
                if i != j && (v == cfg.alpha || v == cfg.beta) {
                    boundary_hits += 1;
                }
                mismatches += usize::from(got.get(i, j) != want);
            }
        }
    }
    verdict(
        2,
        mismatches == 0 && boundary_hits > 0,
        format!("200 matrices, {mismatches} mismatches, {boundary_hits} boundary cells"),
    );
}

// ---------------------------------------------------------------------------
// 3: contrastive loss value and gradient

#[test]
fn c03_contrastive_loss_correctness() {
    let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let canonical = contrastive_loss(&t, &t, &PairLabelMatrix::identity(2), 1.0).unwrap();
    let hand = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
    let value_ok = (canonical - 0.3133).abs() <= 1e-4 && (canonical - hand).abs() < 1e-12;

    let (n, d) = (4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v = Vec::with_capacity(n * d);
            for _ in 0..n {
                let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.extend(row.iter().map(|x| x / norm));
            }
            v
        };
        let (tv, sv) = (unit(&mut rng), unit(&mut rng));
        let labels = PairLabelMatrix::from_fn(n, |i, j| {
            if i == j {
                PairLabel::Pos
            } else {
                [PairLabel::Pos, PairLabel::Neg, PairLabel::Unk][(i * 7 + j * 3 + rng.random_range(0..3)) % 3]
            }
        });
        // Keep the labels symmetric.
        let labels = PairLabelMatrix::from_fn(n, |i, j| labels.get(i.min(j), i.max(j)));
        let inv = rng.random_range(1.0..20.0);
        let g = contrastive_closed_form(&tv, &sv, d, &labels, inv).unwrap();
        let loss = |t: &[f64], s: &[f64], inv: f64| contrastive_closed_form(t, s, d, &labels, inv).unwrap().loss;
        let h = 1e-6;
        let mut fd = Vec::new();
        let mut an = Vec::new();
        for k in 0..n * d {
            let (mut p, mut m) = (tv.clone(), tv.clone());
            p[k] += h;
            m[k] -= h;
            fd.push((loss(&p, &sv, inv) - loss(&m, &sv, inv)) / (2.0 * h));
            an.push(g.d_t[k]);
            let (mut p, mut m) = (sv.clone(), sv.clone());
            p[k] += h;
            m[k] -= h;
            fd.push((loss(&tv, &p, inv) - loss(&tv, &m, inv)) / (2.0 * h));
            an.push(g.d_s[k]);
        }
        fd.push((loss(&tv, &sv, inv + h) - loss(&tv, &sv, inv - h)) / (2.0 * h));
        an.push(g.d_inv_tau);
        let num: f64 = fd.iter().zip(&an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(num / den);
    }
    verdict(
        3,
        value_ok && worst <= 1e-4,
        format!("canonical loss {canonical:.6} (0.3133 +- 1e-4), worst gradient relative error {worst:.2e} over 20 random 4x8 batches (<= 1e-4)"),
    );
}

// ---------------------------------------------------------------------------
// 4: VQ contract

fn brute_nearest(entries: &Tensor, x: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for k in 0..entries.rows() {
        let d: f32 = entries.row(k).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

#[test]
fn c04_vq_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut oracle_ok = true;
    let mut idem_ok = true;
    let mut fixed_ok = true;
    for &k in &[1usize, 7, 64, 333, 1024] {
        let d = rng.random_range(1..=16);
        let cb = Codebook::new(k, d, k as u64);
        let x = Tensor::randn(&[64, d], 1.0, &mut rng);
        let q = cb.lookup(&x).unwrap();
        for i in 0..64 {
            oracle_ok &= q.indices[i] == brute_nearest(cb.entries(), x.row(i));
        }
        let again = cb.lookup(&q.q).unwrap();
        idem_ok &= again.q == q.q && again.indices == q.indices;
        let at_entries = cb.lookup(cb.entries()).unwrap();
        fixed_ok &= at_entries.commit_loss == 0.0;
    }

    // Utilisation of the style codebook after context fine-tuning (EMA with
    // reseeding on), over one pass of the projected training styles.
    let run = desk_pipeline();
    let dir = RunDir::new(run.root.path());
    let corpus = taca::corpus::load_manifest(&dir.manifest()).unwrap();
    let (train, _) = corpus.holdout_split(5);
    let sub = corpus.subset(&train);
    let tx: Arc<dyn TextFeatureExtractor> = Arc::new(HashedTextExtractor::default());
    let lm = checkpoint::load_token_lm(&Checkpoint::read(&dir.taca_lm()).unwrap(), tx.clone()).unwrap();
    let speech = checkpoint::load_speech_encoder(
        &Checkpoint::read(&dir.speech_encoder()).unwrap(),
        Arc::new(IdentitySpeechExtractor::new(corpus.feat_dim())),
    )
    .unwrap();
    let text = checkpoint::load_text_encoder(&Checkpoint::read(&dir.text_encoder()).unwrap(), tx).unwrap();
    let mut rows = speech.encode_corpus(&sub).unwrap().to_rows();
    rows.extend(text.encode_corpus(&sub).unwrap().to_rows());
    let projected = lm.context().project_styles(&Tensor::from_rows(&rows)).unwrap();
    let cb = lm.context().codebook();
    let util = cb.utilization(&projected);
    let reseed = lm.context().config().vq.reseed;

    verdict(
        4,
        oracle_ok && idem_ok && fixed_ok && reseed && util >= 0.5,
        format!(
            "nearest-neighbour oracle {oracle_ok} (K up to 1024), idempotent {idem_ok}, zero commit at entries {fixed_ok}, style codebook utilisation {util:.3} of {} entries (>= 0.5, reseeding {reseed})",
            cb.k()
        ),
    );
}

// ---------------------------------------------------------------------------
// 5: context benefit

struct ContextSeed {
    base_ter: f64,
    taca_ter: f64,
    base_mcd: f64,
    taca_mcd: f64,
}

fn context_seed(seed: u64) -> ContextSeed {
    // The current sentence's frames carry a pattern of the previous
    // sentence's style; style_gain 0 keeps the style half out of the tokens.
    let corpus = SyntheticSpec {
        n_chapters: 16,
        utts_per_chapter: 100,
        context_carry: 1.0,
        style_gain: 0.0,
        seed,
        ..SyntheticSpec::default()
    }
    .generate();
    let (train, held) = corpus.holdout_split(5);
    let tok = SemanticTokenizer::fit(
        &corpus,
        &train,
        &SemanticConfig {
            seed,
            ..SemanticConfig::default()
        },
    )
    .unwrap();
    let sem = tok.tokenize_corpus(&corpus).unwrap();

    let cfg = ExperimentConfig::desk();
    let sub = corpus.subset(&train);
    let tx: Arc<dyn TextFeatureExtractor> = Arc::new(HashedTextExtractor::default());
    let speech_cfg = taca::styles::SpeechStyleTrainConfig {
        seed,
        ..cfg.speech_train()
    };
    let (speech, _) =
        train_speech_style_encoder(&sub, Arc::new(IdentitySpeechExtractor::new(corpus.feat_dim())), &speech_cfg)
            .unwrap();
    let text_cfg = taca::styles::TextStyleTrainConfig {
        seed: seed + 1,
        ..cfg.text_train()
    };
    let (text, _) = train_text_style_space(&sub, &speech, tx.clone(), &text_cfg).unwrap();

    let ctx = ContextConfig {
        h_cond: 64,
        layers: 1,
        heads: 2,
        ..ContextConfig::default()
    };
    let lm0 = TokenLM::new(LmConfig::tiny(), ctx, tok.k(), cfg.d_style, tx, seed).unwrap();
    let schedule = Schedule {
        steps: 1500,
        batch_size: 16,
        lr: 3e-3,
        warmup: 20,
        ..Schedule::default()
    };
    let pre = LmTrainConfig {
        schedule: schedule.clone(),
        seed,
        ..LmTrainConfig::default()
    };
    let (base, _) = train_lm(&corpus, &sem, &train, TrainingStage::Pretrain, None, Some(lm0), &pre).unwrap();
    let policy = StyleSourcePolicy::new(0.5, &speech, &text).unwrap();
    let ft = LmTrainConfig {
        schedule: Schedule { steps: 800, ..schedule },
        seed: seed + 1,
        ..LmTrainConfig::default()
    };
    let (taca_lm, _) = train_lm(
        &corpus,
        &sem,
        &train,
        TrainingStage::ContextFinetune,
        Some(&policy),
        Some(base.clone()),
        &ft,
    )
    .unwrap();
    let (dec, _) = train_mel_decoder(
        &corpus,
        &sem,
        &train,
        tok.k(),
        &MelDecoderConfig {
            seed,
            ..MelDecoderConfig::default()
        },
    )
    .unwrap();
    let sampling = SamplingConfig::default();
    let b = summarize(
        "Base-LM",
        &score_lm(&base, Conditioning::Null, &dec, &corpus, &sem, &held, &sampling, 13).unwrap(),
    );
    let t = summarize(
        "TACA-LM",
        &score_lm(&taca_lm, Conditioning::Context(&text), &dec, &corpus, &sem, &held, &sampling, 13).unwrap(),
    );
    ContextSeed {
        base_ter: b.mean_ter,
        taca_ter: t.mean_ter,
        base_mcd: b.mean_mcd,
        taca_mcd: t.mean_mcd,
    }
}

#[test]
fn c05_context_benefit() {
    let t0 = Instant::now();
    let mut ter_wins = 0;
    let mut mcd_wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        let r = context_seed(seed);
        ter_wins += usize::from(r.taca_ter < r.base_ter);
        mcd_wins += usize::from(r.taca_mcd <= r.base_mcd);
        rows.push(format!(
            "seed {seed}: TER {:.3} vs {:.3}, MCD {:.3} vs {:.3}",
            r.taca_ter, r.base_ter, r.taca_mcd, r.base_mcd
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    for r in &rows {
        println!("  criterion 5 {r} (TACA vs Base)");
    }
    verdict(
        5,
        ter_wins == 5 && mcd_wins >= 4 && secs <= 1800.0,
        format!("TACA-LM TER lower on {ter_wins}/5 seeds (need 5), MCD <= on {mcd_wins}/5 (need 4), {secs:.0} s (<= 1800)"),
    );
}

// ---------------------------------------------------------------------------
// 6: LM sanity

#[test]
fn c06_lm_overfit_and_causality() {
    let corpus = SyntheticSpec {
        n_chapters: 2,
        utts_per_chapter: 25,
        seed: 6,
        ..SyntheticSpec::default()
    }
    .generate();
    let all: Vec<usize> = (0..corpus.len()).collect();
    let tok = SemanticTokenizer::fit(&corpus, &all, &SemanticConfig::default()).unwrap();
    let sem = tok.tokenize_corpus(&corpus).unwrap();
    let tx: Arc<dyn TextFeatureExtractor> = Arc::new(HashedTextExtractor::default());
    let ctx = ContextConfig {
        h_cond: 32,
        layers: 1,
        heads: 2,
        ..ContextConfig::default()
    };
    let lm0 = TokenLM::new(LmConfig::tiny(), ctx, tok.k(), 16, tx, 6).unwrap();
    let cfg = LmTrainConfig {
        schedule: Schedule {
            steps: 1200,
            batch_size: 16,
            lr: 3e-3,
            warmup: 20,
            ..Schedule::default()
        },
        seed: 6,
        ..LmTrainConfig::default()
    };
    let (lm, _) = train_lm(&corpus, &sem, &all, TrainingStage::Pretrain, None, Some(lm0), &cfg).unwrap();

    let (mut hit, mut total, mut exact) = (0, 0, 0);
    for &i in &all {
        let b = inference_bundle(&lm, Conditioning::Null, &corpus, i).unwrap();
        for (p, y) in lm.teacher_forced(&b, &sem[i]).unwrap() {
            total += 1;
            hit += usize::from(p == y);
        }
        let g = generate(&lm, &b, b.current_tokens(), &SamplingConfig::default()).unwrap();
        exact += usize::from(g.tokens == sem[i] && !g.truncated);
    }
    let acc = hit as f64 / total as f64;
    let repro = exact as f64 / all.len() as f64;

    // Causality: flipping the token at position t leaves logits before t
    // untouched and changes the logits at t.
    let mut probed = 0;
    let mut causal = true;
    for &i in &all[..5] {
        let b = inference_bundle(&lm, Conditioning::Null, &corpus, i).unwrap();
        let packed = lm_sequence_pack(lm.vocab(), &b, b.current_tokens(), Some(&sem[i]), lm.config().max_len).unwrap();
        let base = lm.logits(&b, &packed).unwrap();
        for t in 1..packed.len() {
            let mut m = packed.clone();
            m.ids[t] = (m.ids[t] + 1) % lm.vocab().size();
            let out = lm.logits(&b, &m).unwrap();
            causal &= (0..t).all(|r| out.row(r) == base.row(r)) && out.row(t) != base.row(t);
            probed += 1;
        }
    }
    verdict(
        6,
        acc >= 0.99 && repro >= 0.9 && causal,
        format!(
            "teacher-forced accuracy {acc:.4} (>= 0.99), exact greedy reproduction {repro:.3} (>= 0.9) over 50 utterances, causality held at {probed} probed positions: {causal}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 7: MCD metric

/// Orthonormal DCT-II coefficients 1..=n of `x`, written out directly.
fn dct_ceps(x: &[f32], n: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (1..=n)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v as f64 * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * m)).cos())
                .sum();
            s * (2.0 / m).sqrt()
        })
        .collect()
}

#[test]
fn c07_mcd_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n_ceps = 13;
    let a = Tensor::randn(&[9, 20], 1.0, &mut rng);
    let identity = mcd_dtw(&a, &a, n_ceps).unwrap();

    let dup = Tensor::from_rows(&(0..18).map(|t| a.row(t / 2).to_vec()).collect::<Vec<_>>());
    let warp = mcd_dtw(&a, &dup, n_ceps).unwrap();

    // Constant spectra: every frame of x is u, every frame of y is v, so the
    // optimal path cost is |c(u) - c(v)| per step.
    let u: Vec<f32> = (0..20).map(|i| (i as f32 * 0.3).sin()).collect();
    let v: Vec<f32> = (0..20).map(|i| 0.5 + (i as f32 * 0.2).cos()).collect();
    let x = Tensor::from_rows(&vec![u.clone(); 5]);
    let y = Tensor::from_rows(&vec![v.clone(); 7]);
    let (cu, cv) = (dct_ceps(&u, n_ceps), dct_ceps(&v, n_ceps));
    let dist = cu.iter().zip(&cv).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let hand = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt() * dist;
    let got = mcd_dtw(&x, &y, n_ceps).unwrap();
    let const_err = (got - hand).abs();

    let mut asym = 0;
    for _ in 0..100 {
        let (la, lb) = (rng.random_range(1..15), rng.random_range(1..15));
        let p = Tensor::randn(&[la, 20], 1.0, &mut rng);
        let q = Tensor::randn(&[lb, 20], 1.0, &mut rng);
        asym += usize::from(mcd_dtw(&p, &q, n_ceps).unwrap() != mcd_dtw(&q, &p, n_ceps).unwrap());
    }
    verdict(
        7,
        identity == 0.0 && warp == 0.0 && const_err <= 1e-6 && asym == 0,
        format!(
            "MCD(x,x) = {identity}, duplicated-frame warp = {warp}, constant-spectra error {const_err:.2e} (<= 1e-6), {asym}/100 asymmetric pairs"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8: chapter clustering

#[test]
fn c08_chapter_clustering() {
    let r = style_run();
    let emb = r.text.encode_corpus(&r.corpus).unwrap();
    let mut labels: Vec<String> = r.corpus.utterances().iter().map(|u| u.chapter_id.clone()).collect();
    let observed = chapter_cluster_metric(&emb, &labels).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut null = Vec::with_capacity(100);
    for _ in 0..100 {
        labels.shuffle(&mut rng);
        null.push(chapter_cluster_metric(&emb, &labels).unwrap());
    }
    null.sort_by(f64::total_cmp);
    // Nearest-rank 95th percentile of 100 values.
    let p95 = null[94];
    verdict(
        8,
        observed > p95,
        format!("text-style silhouette {observed:.4} vs shuffled 95th percentile {p95:.4}"),
    );
}

// ---------------------------------------------------------------------------
// 9: freezing and determinism

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn c09_freeze_and_determinism() {
    let r = style_run();
    let frozen = r.speech.fingerprint() == r.speech_hash_before_text;

    let cfg = ExperimentConfig::from_toml_str("preset = \"tiny\"\nname = \"determinism\"\nseed = 9\n").unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut differing = Vec::new();
    let mut trees = Vec::new();
    for d in &dirs {
        let opts = RunOptions {
            run_dir: Some(d.path().to_path_buf()),
            force: false,
        };
        for st in Stage::ALL {
            run_stage(&cfg, st, &opts).unwrap();
        }
        trees.push(tree_bytes(d.path()));
    }
    for (k, v) in &trees[0] {
        if trees[1].get(k) != Some(v) {
            differing.push(k.clone());
        }
    }
    let same_files = trees[0].len() == trees[1].len();
    verdict(
        9,
        frozen && differing.is_empty() && same_files,
        format!(
            "speech encoder hash unchanged through text stage: {frozen}; {} artifacts from 7 stages byte-identical across two runs (differing: {differing:?})",
            trees[0].len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 10: desk pipeline

struct DeskRun {
    root: tempfile::TempDir,
    secs: f64,
    error: Option<String>,
}

fn desk_pipeline() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig::desk();
        let root = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            run_dir: Some(root.path().to_path_buf()),
            force: false,
        };
        let t0 = Instant::now();
        let mut error = None;
        for st in Stage::ALL {
            if let Err(e) = run_stage(&cfg, st, &opts) {
                error = Some(format!("{st}: {e}"));
                break;
            }
        }
        DeskRun {
            root,
            secs: t0.elapsed().as_secs_f64(),
            error,
        }
    })
}

#[test]
fn c10_desk_pipeline() {
    let run = desk_pipeline();
    let dir = RunDir::new(run.root.path());
    let report = fs::read_to_string(dir.eval_report())
        .map_err(|e| e.to_string())
        .and_then(|s| {
            let r = EvalReport::from_json(&s).map_err(|e| e.to_string())?;
            r.validate().map_err(|e| e.to_string())?;
            Ok(r)
        });
    let summary = match &report {
        Ok(r) => format!(
            "{} held-out records, {} TER {:.3} / MCD {:.3} dB, comparisons {:?}",
            r.records.len(),
            r.system,
            r.aggregates.mean_ter,
            r.aggregates.mean_mcd,
            r.comparisons.iter().map(|c| (&c.system, c.mean_ter, c.mean_mcd)).collect::<Vec<_>>()
        ),
        Err(e) => format!("report invalid: {e}"),
    };
    verdict(
        10,
        run.error.is_none() && report.is_ok() && run.secs <= 2700.0,
        format!(
            "7 stages on the desk preset in {:.0} s (<= 2700), errors {:?}, schema-valid eval_report.json: {summary}",
            run.secs, run.error
        ),
    );
}
