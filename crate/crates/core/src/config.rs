//! Experiment configuration: a TOML key tree layered over a named preset.
//!
//! A config file picks a preset with `preset = "desk" | "paper" | "tiny"`
//! (default `desk`); every other key overrides the preset value at the same
//! path. Unknown keys and type mismatches are reported with their dotted
//! path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::ContextConfig;
use crate::corpus::SyntheticSpec;
use crate::error::{Error, Result};
use crate::lmtts::{LmConfig, LmTrainConfig, MelDecoderConfig, SamplingConfig, SemanticConfig};
use crate::nn::Schedule;
use crate::styles::{
    PairingConfig, SpeechEncoderConfig, SpeechStyleTrainConfig, TextEncoderConfig, TextStyleTrainConfig,
};
use crate::vq::VqConfig;

pub const PRESETS: &[&str] = &["desk", "paper", "tiny"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Manifest of a corpus on disk; the synthetic generator is used when
    /// absent.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Every `holdout_every`-th utterance of a chapter is held out.
    pub holdout_every: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: SyntheticSpec::default(),
            holdout_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub speech: String,
    pub text: String,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            speech: "identity".into(),
            text: "hashed".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeechStyleStage {
    pub hidden: usize,
    pub crop_min: f32,
    pub feature_noise: f32,
    pub instance_weight: f32,
    pub schedule: Schedule,
}

impl Default for SpeechStyleStage {
    fn default() -> Self {
        let d = SpeechStyleTrainConfig::default();
        Self {
            hidden: d.encoder.hidden,
            crop_min: d.crop_min,
            feature_noise: d.feature_noise,
            instance_weight: d.instance_weight,
            schedule: d.schedule,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextStyleStage {
    pub hidden: usize,
    /// Weight of the cosine alignment term.
    pub lambda: f32,
    pub schedule: Schedule,
}

impl Default for TextStyleStage {
    fn default() -> Self {
        let d = TextStyleTrainConfig::default();
        Self {
            hidden: d.encoder.hidden,
            lambda: d.lambda,
            schedule: d.schedule,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmStage {
    pub schedule: Schedule,
    pub commit_weight: f32,
}

impl Default for LmStage {
    fn default() -> Self {
        let d = LmTrainConfig::default();
        Self {
            schedule: d.schedule,
            commit_weight: d.commit_weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneStage {
    pub schedule: Schedule,
    pub commit_weight: f32,
    /// Probability of drawing the style embedding from speech.
    pub style_source_p: f64,
}

impl Default for FinetuneStage {
    fn default() -> Self {
        let d = LmStage::default();
        Self {
            schedule: d.schedule,
            commit_weight: d.commit_weight,
            style_source_p: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_ceps: usize,
    pub sampling: SamplingConfig,
    /// Also write `style_space.svg`.
    pub svg: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_ceps: crate::evalkit::DEFAULT_N_CEPS,
            sampling: SamplingConfig::default(),
            svg: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Utterance ids to synthesize; empty means the held-out split.
    pub utterances: Vec<String>,
    pub sampling: SamplingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub preset: String,
    /// Run directory name under `runs/`.
    pub name: String,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub extractor: ExtractorConfig,
    pub d_style: usize,
    pub tau_init: f32,
    pub pairing: PairingConfig,
    pub speech_style: SpeechStyleStage,
    pub text_style: TextStyleStage,
    pub context: ContextConfig,
    pub semantic: SemanticConfig,
    pub lm: LmConfig,
    pub pretrain: LmStage,
    pub finetune: FinetuneStage,
    pub decoder: MelDecoderConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Scaled-down model that trains end to end within minutes on one core.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            name: "desk".into(),
            seed: 0,
            corpus: CorpusConfig::default(),
            extractor: ExtractorConfig::default(),
            d_style: 384,
            tau_init: 0.07,
            pairing: PairingConfig::default(),
            speech_style: SpeechStyleStage::default(),
            text_style: TextStyleStage::default(),
            context: ContextConfig::default(),
            semantic: SemanticConfig::default(),
            lm: LmConfig::desk(),
            pretrain: LmStage {
                schedule: Schedule {
                    steps: 600,
                    batch_size: 16,
                    lr: 1e-3,
                    warmup: 30,
                    ..Schedule::default()
                },
                commit_weight: 0.25,
            },
            finetune: FinetuneStage {
                schedule: Schedule {
                    steps: 300,
                    batch_size: 16,
                    lr: 1e-3,
                    warmup: 20,
                    ..Schedule::default()
                },
                commit_weight: 0.25,
                style_source_p: 0.5,
            },
            decoder: MelDecoderConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }

    /// Published model sizes. Too large to train on a laptop; kept so the
    /// full-scale shapes are one switch away.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = "paper".into();
        c.name = "paper".into();
        c.semantic = SemanticConfig {
            codebook_size: 1024,
            code_dim: 128,
            ..SemanticConfig::default()
        };
        c.lm = LmConfig::paper();
        c.context.h_cond = 768;
        c.context.heads = 12;
        c.finetune.schedule.grad_accum = 10;
        c.pretrain.schedule.grad_accum = 10;
        c
    }

    /// Small widths and short schedules for smoke tests.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.preset = "tiny".into();
        c.name = "tiny".into();
        c.d_style = 32;
        c.speech_style.hidden = 32;
        c.speech_style.schedule.steps = 60;
        c.text_style.hidden = 32;
        c.text_style.schedule.steps = 60;
        c.context = ContextConfig {
            h_cond: 32,
            layers: 1,
            heads: 2,
            max_positions: 128,
            style_codebook_size: 16,
            style_code_dim: 8,
            vq: VqConfig {
                reseed_after: 20,
                ..VqConfig::default()
            },
            ..ContextConfig::default()
        };
        c.semantic.codebook_size = 32;
        c.semantic.code_dim = 8;
        c.lm = LmConfig::tiny();
        c.pretrain.schedule.steps = 40;
        c.pretrain.schedule.batch_size = 8;
        c.finetune.schedule.steps = 20;
        c.finetune.schedule.batch_size = 8;
        c.decoder.schedule.steps = 50;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Schema {
                key: "preset".into(),
                msg: format!("unknown preset {other:?}, expected one of {PRESETS:?}"),
            }),
        }
    }

    /// Parses TOML text layered over its preset.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Schema {
            key: "<root>".into(),
            msg: e.message().to_string(),
        })?;
        let preset = match user.get("preset") {
            None => "desk".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => {
                return Err(Error::Schema {
                    key: "preset".into(),
                    msg: "must be a string".into(),
                })
            }
        };
        let base = Self::preset(&preset)?;
        let mut tree = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut tree, user);
        let de = toml::Value::Table(tree);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            key: e.path().to_string(),
            msg: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Cross-field checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let schema = |key: &str, msg: String| Err(Error::Schema { key: key.into(), msg });
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == ".." {
            return schema("name", format!("{:?} is not a valid run name", self.name));
        }
        if self.d_style == 0 {
            return schema("d_style", "must be positive".into());
        }
        if self.tau_init.is_nan() || self.tau_init <= 0.0 {
            return schema("tau_init", "must be positive".into());
        }
        self.pairing.validate()?;
        self.lm.validate()?;
        if self.context.heads == 0 || !self.context.h_cond.is_multiple_of(self.context.heads) {
            return schema(
                "context.heads",
                format!("{} heads do not divide h_cond {}", self.context.heads, self.context.h_cond),
            );
        }
        if self.context.style_codebook_size == 0 || self.context.style_code_dim == 0 {
            return schema("context.style_codebook_size", "style codebook must be non-empty".into());
        }
        if !(0.0..1.0).contains(&self.context.vq.decay) {
            return schema("context.vq.decay", format!("{} is outside [0, 1)", self.context.vq.decay));
        }
        if self.semantic.codebook_size == 0 || self.semantic.code_dim == 0 {
            return schema("semantic.codebook_size", "semantic codebook must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.finetune.style_source_p) {
            return schema(
                "finetune.style_source_p",
                format!("{} is not a probability", self.finetune.style_source_p),
            );
        }
        if self.corpus.holdout_every < 2 {
            return schema("corpus.holdout_every", "must be at least 2".into());
        }
        if self.eval.n_ceps == 0 {
            return schema("eval.n_ceps", "must be positive".into());
        }
        for (key, s) in [
            ("speech_style.schedule", &self.speech_style.schedule),
            ("text_style.schedule", &self.text_style.schedule),
            ("pretrain.schedule", &self.pretrain.schedule),
            ("finetune.schedule", &self.finetune.schedule),
            ("decoder.schedule", &self.decoder.schedule),
        ] {
            if s.batch_size == 0 {
                return schema(&format!("{key}.batch_size"), "must be positive".into());
            }
            if s.lr.is_nan() || s.lr <= 0.0 {
                return schema(&format!("{key}.lr"), "must be positive".into());
            }
        }
        Ok(())
    }

    /// Canonical TOML of the fully resolved config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved TOML.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn speech_train(&self) -> SpeechStyleTrainConfig {
        SpeechStyleTrainConfig {
            encoder: SpeechEncoderConfig {
                d_style: self.d_style,
                hidden: self.speech_style.hidden,
            },
            tau_init: self.tau_init,
            crop_min: self.speech_style.crop_min,
            feature_noise: self.speech_style.feature_noise,
            instance_weight: self.speech_style.instance_weight,
            schedule: self.speech_style.schedule.clone(),
            seed: self.seed,
        }
    }

    pub fn text_train(&self) -> TextStyleTrainConfig {
        TextStyleTrainConfig {
            encoder: TextEncoderConfig {
                d_style: self.d_style,
                hidden: self.text_style.hidden,
            },
            pairing: PairingConfig {
                tau_init: self.tau_init,
                ..self.pairing.clone()
            },
            lambda: self.text_style.lambda,
            schedule: self.text_style.schedule.clone(),
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn semantic_cfg(&self) -> SemanticConfig {
        SemanticConfig {
            seed: self.seed.wrapping_add(2),
            ..self.semantic.clone()
        }
    }

    pub fn pretrain_cfg(&self) -> LmTrainConfig {
        LmTrainConfig {
            schedule: self.pretrain.schedule.clone(),
            commit_weight: self.pretrain.commit_weight,
            seed: self.seed.wrapping_add(3),
        }
    }

    pub fn finetune_cfg(&self) -> LmTrainConfig {
        LmTrainConfig {
            schedule: self.finetune.schedule.clone(),
            commit_weight: self.finetune.commit_weight,
            seed: self.seed.wrapping_add(4),
        }
    }

    pub fn decoder_cfg(&self) -> MelDecoderConfig {
        MelDecoderConfig {
            seed: self.seed.wrapping_add(5),
            ..self.decoder.clone()
        }
    }

    /// Seed of the freshly initialised LM.
    pub fn lm_seed(&self) -> u64 {
        self.seed.wrapping_add(6)
    }
}

/// Recursively overlays `over` onto `base`. Tables merge key by key; any
/// other value replaces the base value.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
