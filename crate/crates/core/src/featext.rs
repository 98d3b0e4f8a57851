//! Feature-extractor interfaces and the deterministic toy implementations
//! that stand in for pretrained speech and text models.
//!
//! Downstream code only sees the traits; an extractor is picked by name
//! through [`Registry`], so a real pretrained model can be registered
//! without touching any training code.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub trait SpeechFeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    /// `[n_frames x output_dim]`.
    fn extract(&self, utt: &Utterance) -> Result<Tensor>;
}

pub trait TextFeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    /// Size of the token-id space produced by [`Self::tokenize`].
    fn vocab_size(&self) -> usize;
    fn tokenize(&self, text: &str) -> Vec<usize>;
    /// `[n_tokens x output_dim]`; errors on empty text.
    fn extract(&self, text: &str) -> Result<Tensor>;
    /// Token embedding table, for extractors that are a lookup followed by
    /// a position mix. Encoders use it to build a trainable copy.
    fn token_table(&self) -> Option<&Tensor> {
        None
    }
    /// Positional term added to the looked-up rows, `[n x output_dim]`.
    fn position_mix(&self, n: usize) -> Tensor {
        Tensor::zeros(&[n, self.output_dim()])
    }
}

/// Returns the stored frames unchanged.
#[derive(Clone, Debug)]
pub struct IdentitySpeechExtractor {
    dim: usize,
}

impl IdentitySpeechExtractor {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl SpeechFeatureExtractor for IdentitySpeechExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, utt: &Utterance) -> Result<Tensor> {
        let f = &utt.speech_frames;
        if f.numel() == 0 || f.rows() == 0 {
            return Err(Error::Data(format!("utterance {} has no speech frames", utt.id)));
        }
        if f.cols() != self.dim {
            return Err(Error::Shape(format!(
                "utterance {} frames have width {}, extractor expects {}",
                utt.id,
                f.cols(),
                self.dim
            )));
        }
        Ok(f.clone())
    }
}

pub const TOY_TEXT_VOCAB: usize = 2048;
pub const TOY_TEXT_DIM: usize = 64;
const TOY_TEXT_SEED: u64 = 0x7a_ca_7e_57;
const POSITION_GAIN: f32 = 0.1;

/// FNV-1a over the lowercased token.
pub fn fnv1a(token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.to_lowercase().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Bucket id of a whitespace token under the toy tokenizer.
pub fn toy_bucket(token: &str, vocab: usize) -> usize {
    (fnv1a(token) % vocab as u64) as usize
}

/// Whitespace tokenizer, hashed lookup into a fixed random table, plus a
/// small sinusoidal position term.
#[derive(Clone, Debug)]
pub struct HashedTextExtractor {
    vocab: usize,
    dim: usize,
    table: Tensor,
}

impl Default for HashedTextExtractor {
    fn default() -> Self {
        Self::new(TOY_TEXT_VOCAB, TOY_TEXT_DIM)
    }
}

impl HashedTextExtractor {
    pub fn new(vocab: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TOY_TEXT_SEED);
        let table = Tensor::randn(&[vocab, dim], 1.0 / (dim as f32).sqrt(), &mut rng);
        Self { vocab, dim, table }
    }
}

pub(crate) fn sinusoid(n: usize, dim: usize, gain: f32) -> Tensor {
    let mut out = Tensor::zeros(&[n, dim]);
    for pos in 0..n {
        let row = out.row_mut(pos);
        for (i, v) in row.iter_mut().enumerate() {
            let freq = 1.0 / 10000f32.powf((2 * (i / 2)) as f32 / dim as f32);
            let a = pos as f32 * freq;
            *v = gain * if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

impl TextFeatureExtractor for HashedTextExtractor {
    fn name(&self) -> &str {
        "hashed"
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| toy_bucket(w, self.vocab))
            .collect()
    }

    fn extract(&self, text: &str) -> Result<Tensor> {
        let ids = self.tokenize(text);
        if ids.is_empty() {
            return Err(Error::Input("empty text".into()));
        }
        let mut out = self.position_mix(ids.len());
        for (pos, &id) in ids.iter().enumerate() {
            for (o, v) in out.row_mut(pos).iter_mut().zip(self.table.row(id)) {
                *o += v;
            }
        }
        Ok(out)
    }

    fn token_table(&self) -> Option<&Tensor> {
        Some(&self.table)
    }

    fn position_mix(&self, n: usize) -> Tensor {
        sinusoid(n, self.dim, POSITION_GAIN)
    }
}

type SpeechFactory = Box<dyn Fn(usize) -> Arc<dyn SpeechFeatureExtractor> + Send + Sync>;
type TextFactory = Box<dyn Fn() -> Arc<dyn TextFeatureExtractor> + Send + Sync>;

/// Name → constructor map for extractors. The speech factory receives the
/// corpus feature width.
pub struct Registry {
    speech: BTreeMap<String, SpeechFactory>,
    text: BTreeMap<String, TextFactory>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self {
            speech: BTreeMap::new(),
            text: BTreeMap::new(),
        };
        r.register_speech("identity", |dim| Arc::new(IdentitySpeechExtractor::new(dim)));
        r.register_text("hashed", || Arc::new(HashedTextExtractor::default()));
        r
    }
}

impl Registry {
    pub fn register_speech(
        &mut self,
        name: &str,
        f: impl Fn(usize) -> Arc<dyn SpeechFeatureExtractor> + Send + Sync + 'static,
    ) {
        self.speech.insert(name.to_string(), Box::new(f));
    }

    pub fn register_text(
        &mut self,
        name: &str,
        f: impl Fn() -> Arc<dyn TextFeatureExtractor> + Send + Sync + 'static,
    ) {
        self.text.insert(name.to_string(), Box::new(f));
    }

    pub fn speech(&self, name: &str, feat_dim: usize) -> Result<Arc<dyn SpeechFeatureExtractor>> {
        self.speech
            .get(name)
            .map(|f| f(feat_dim))
            .ok_or_else(|| Error::Schema {
                key: "extractor.speech".into(),
                msg: format!("unknown speech extractor '{name}'"),
            })
    }

    pub fn text(&self, name: &str) -> Result<Arc<dyn TextFeatureExtractor>> {
        self.text
            .get(name)
            .map(|f| f())
            .ok_or_else(|| Error::Schema {
                key: "extractor.text".into(),
                msg: format!("unknown text extractor '{name}'"),
            })
    }

    pub fn speech_names(&self) -> impl Iterator<Item = &str> {
        self.speech.keys().map(String::as_str)
    }

    pub fn text_names(&self) -> impl Iterator<Item = &str> {
        self.text.keys().map(String::as_str)
    }
}
