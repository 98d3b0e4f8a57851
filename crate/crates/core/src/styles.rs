//! The shared text/speech style space.
//!
//! The speech style encoder is trained first (supervised contrastive on
//! labelled utterances plus instance discrimination over frame crops) and
//! then frozen. The text style encoder is trained against it: per batch the
//! speech embeddings define positive/negative/unknown pairs through two
//! similarity thresholds, and a masked multi-positive symmetric InfoNCE plus
//! a cosine alignment term pulls matched text embeddings onto them.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::featbin;
use crate::featext::{SpeechFeatureExtractor, TextFeatureExtractor};
use crate::nn::{
    dot, param_node, AdamW, Embedding, Graph, Linear, Mlp, Mode, NodeId, ParamId, ParamStore,
    Schedule, Tensor,
};

pub const MIN_INV_TAU: f64 = 1.0;
pub const MAX_INV_TAU: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding {
    pub v: Vec<f32>,
    pub modality: Modality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairingConfig {
    pub alpha: f32,
    pub beta: f32,
    /// Initial temperature of the learnable logit scale.
    pub tau_init: f32,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.60,
            beta: 0.95,
            tau_init: 0.07,
        }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Error::Schema {
            key: format!("pairing.{key}"),
            msg,
        };
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(bad("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(bad("beta", format!("must lie in (0, 1), got {}", self.beta)));
        }
        if self.alpha >= self.beta {
            return Err(bad("beta", format!("must exceed alpha ({} >= {})", self.alpha, self.beta)));
        }
        let inv = 1.0 / self.tau_init as f64;
        if !(MIN_INV_TAU..=MAX_INV_TAU).contains(&inv) {
            return Err(bad("tau_init", format!("must lie in [1e-3, 1], got {}", self.tau_init)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PairLabel {
    Pos,
    Neg,
    Unk,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairLabelMatrix {
    n: usize,
    labels: Vec<PairLabel>,
}

impl PairLabelMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> PairLabel) -> Self {
        let mut labels = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                labels.push(f(i, j));
            }
        }
        Self { n, labels }
    }

    /// POS on the diagonal, NEG elsewhere.
    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { PairLabel::Pos } else { PairLabel::Neg })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> PairLabel {
        self.labels[i * self.n + j]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn count(&self, label: PairLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

fn classify(v: f32, cfg: &PairingConfig) -> PairLabel {
    if v < cfg.alpha {
        PairLabel::Neg
    } else if v > cfg.beta {
        PairLabel::Pos
    } else {
        PairLabel::Unk
    }
}

/// Thresholds a cosine-similarity matrix: strictly below `alpha` is NEG,
/// strictly above `beta` is POS, anything else (boundaries included) is UNK.
/// The diagonal is always POS. Decisions read the upper triangle so the
/// result is exactly symmetric.
pub fn build_pairs(sim: &Tensor, cfg: &PairingConfig) -> Result<PairLabelMatrix> {
    if sim.shape().len() != 2 || sim.rows() != sim.cols() {
        return Err(Error::Shape(format!("similarity matrix must be square, got {:?}", sim.shape())));
    }
    let n = sim.rows();
    let at = |i: usize, j: usize| sim.data()[i * n + j];
    for i in 0..n {
        for j in 0..n {
            let v = at(i, j);
            if !v.is_finite() {
                return Err(Error::Validation(format!("similarity [{i}][{j}] is not finite")));
            }
            if j < i && (v - at(j, i)).abs() > 1e-5 {
                return Err(Error::Validation(format!(
                    "similarity matrix is not symmetric at [{i}][{j}]: {v} vs {}",
                    at(j, i)
                )));
            }
        }
    }
    Ok(PairLabelMatrix::from_fn(n, |i, j| {
        if i == j {
            PairLabel::Pos
        } else {
            classify(at(i.min(j), i.max(j)), cfg)
        }
    }))
}

/// Row-by-row cosine similarity `A B^T` of unit vectors.
pub fn similarity_matrix(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), b.rows());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            out.data_mut()[i * m + j] = dot(a.row(i), b.row(j));
        }
    }
    out
}

/// Value and gradients of [`contrastive_loss`].
#[derive(Clone, Debug)]
pub struct ContrastiveGrad {
    pub loss: f64,
    /// Row-major `[n x d]`.
    pub d_t: Vec<f64>,
    pub d_s: Vec<f64>,
    pub d_inv_tau: f64,
    /// Rows (over both directions) that had at least one positive.
    pub rows_used: usize,
}

/// Masked multi-positive symmetric InfoNCE.
///
/// Logits are `inv_tau * T_i . S_j`. For text row `i` the target is uniform
/// over its POS columns and the softmax runs over the non-UNK columns only;
/// the speech direction does the same per column. Rows without a positive are
/// skipped; the loss is the mean of the two per-direction means.
pub fn contrastive_loss_grad(
    t: &Tensor,
    s: &Tensor,
    labels: &PairLabelMatrix,
    inv_tau: f64,
) -> Result<ContrastiveGrad> {
    let n = labels.n();
    if t.rows() != n || s.rows() != n || t.cols() != s.cols() {
        return Err(Error::Shape(format!(
            "contrastive loss: T {:?}, S {:?}, labels {n}x{n}",
            t.shape(),
            s.shape()
        )));
    }
    let t64: Vec<f64> = t.data().iter().map(|v| *v as f64).collect();
    let s64: Vec<f64> = s.data().iter().map(|v| *v as f64).collect();
    contrastive_closed_form(&t64, &s64, t.cols(), labels, inv_tau)
}

/// [`contrastive_loss_grad`] on row-major `f64` buffers of width `d`.
pub fn contrastive_closed_form(
    t: &[f64],
    s: &[f64],
    d: usize,
    labels: &PairLabelMatrix,
    inv_tau: f64,
) -> Result<ContrastiveGrad> {
    let n = labels.n();
    if t.len() != n * d || s.len() != n * d {
        return Err(Error::Shape(format!("contrastive loss: buffers do not match {n}x{d}")));
    }
    let mut sims = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            sims[i * n + j] = t[i * d..(i + 1) * d].iter().zip(&s[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
        }
    }

    // dloss/dlogit, accumulated per direction before normalisation.
    let mut g_dir = [vec![0.0f64; n * n], vec![0.0f64; n * n]];
    let mut loss_dir = [0.0f64; 2];
    let mut rows_dir = [0usize; 2];
    for dir in 0..2 {
        for a in 0..n {
            let idx = |b: usize| if dir == 0 { a * n + b } else { b * n + a };
            let lab = |b: usize| if dir == 0 { labels.get(a, b) } else { labels.get(b, a) };
            let cand: Vec<usize> = (0..n).filter(|&b| lab(b) != PairLabel::Unk).collect();
            let n_pos = cand.iter().filter(|&&b| lab(b) == PairLabel::Pos).count();
            if n_pos == 0 {
                continue;
            }
            let z: Vec<f64> = cand.iter().map(|&b| inv_tau * sims[idx(b)]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            let mut pos_mean = 0.0;
            for (k, &b) in cand.iter().enumerate() {
                let p = (z[k] - m).exp() / sum;
                let target = if lab(b) == PairLabel::Pos { 1.0 / n_pos as f64 } else { 0.0 };
                pos_mean += target * z[k];
                g_dir[dir][idx(b)] += p - target;
            }
            loss_dir[dir] += lse - pos_mean;
            rows_dir[dir] += 1;
        }
    }
    let dirs_used = rows_dir.iter().filter(|&&r| r > 0).count();
    if dirs_used == 0 {
        return Err(Error::DegenerateBatch("no row has a positive pair".into()));
    }
    let mut loss = 0.0;
    let mut gl = vec![0.0f64; n * n];
    for dir in 0..2 {
        if rows_dir[dir] == 0 {
            continue;
        }
        let w = 1.0 / (dirs_used as f64 * rows_dir[dir] as f64);
        loss += loss_dir[dir] * w;
        for (o, g) in gl.iter_mut().zip(&g_dir[dir]) {
            *o += g * w;
        }
    }

    let mut d_t = vec![0.0f64; n * d];
    let mut d_s = vec![0.0f64; n * d];
    let mut d_inv_tau = 0.0;
    for i in 0..n {
        for j in 0..n {
            let g = gl[i * n + j];
            if g == 0.0 {
                continue;
            }
            d_inv_tau += g * sims[i * n + j];
            let gs = g * inv_tau;
            let (ti, sj) = (&t[i * d..(i + 1) * d], &s[j * d..(j + 1) * d]);
            for k in 0..d {
                d_t[i * d + k] += gs * sj[k];
                d_s[j * d + k] += gs * ti[k];
            }
        }
    }
    Ok(ContrastiveGrad {
        loss,
        d_t,
        d_s,
        d_inv_tau,
        rows_used: rows_dir[0] + rows_dir[1],
    })
}

/// Loss value only; `tau` is the temperature (logits are divided by it).
pub fn contrastive_loss(t: &Tensor, s: &Tensor, labels: &PairLabelMatrix, tau: f64) -> Result<f64> {
    Ok(contrastive_loss_grad(t, s, labels, 1.0 / tau)?.loss)
}

/// `1 - mean_i T_i . S_i`.
pub fn cosine_alignment_loss(t: &Tensor, s: &Tensor) -> Result<f64> {
    if t.shape() != s.shape() || t.rows() == 0 {
        return Err(Error::Shape(format!(
            "cosine alignment: T {:?} vs S {:?}",
            t.shape(),
            s.shape()
        )));
    }
    let n = t.rows();
    let sum: f64 = (0..n)
        .map(|i| t.row(i).iter().zip(s.row(i)).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>())
        .sum();
    Ok(1.0 - sum / n as f64)
}

/// Inverse temperature from its log parameter, clamped to
/// `[MIN_INV_TAU, MAX_INV_TAU]`. The flag is true when clamping is active.
pub fn inv_tau_from_log(theta: f32) -> (f64, bool) {
    let v = (theta as f64).exp();
    if v < MIN_INV_TAU {
        (MIN_INV_TAU, true)
    } else if v > MAX_INV_TAU {
        (MAX_INV_TAU, true)
    } else {
        (v, false)
    }
}

fn to_f32_tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.iter().map(|x| *x as f32).collect())
}

/// Learned-query attention pooling.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub query: ParamId,
}

impl AttentionPool {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, h: usize, rng: &mut R) -> Self {
        Self {
            query: store.randn(format!("{name}.query"), &[h], 1.0 / (h as f32).sqrt(), rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mode: Mode,
        x: NodeId,
        lens: &[usize],
        seq: usize,
    ) -> NodeId {
        let q = param_node(g, store, self.query, mode);
        g.attn_pool(x, q, lens, seq)
    }
}

/// Pools `features` `[n x h]` with query `q`; returns `(pooled, weights)`.
pub fn attention_pool(features: &Tensor, query: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
    if features.shape().len() != 2 || features.rows() == 0 {
        return Err(Error::Shape("attention pooling needs at least one row".into()));
    }
    if features.cols() != query.len() {
        return Err(Error::Shape(format!(
            "attention pooling: features have width {}, query has {}",
            features.cols(),
            query.len()
        )));
    }
    let n = features.rows();
    let mut g = Graph::inference();
    let x = g.constant(features.clone());
    let q = g.constant(Tensor::from_vec(&[query.len()], query.to_vec()));
    let p = g.attn_pool(x, q, &[n], n);
    let w = g.pool_weights(p).expect("pool node").to_vec();
    Ok((g.value(p).data().to_vec(), w))
}

/// Stacks variable-length sequences into `[B*T x F]` with zero padding.
fn pad_rows(seqs: &[&Tensor]) -> (Tensor, Vec<usize>, usize) {
    let t = seqs.iter().map(|s| s.rows()).max().unwrap_or(0);
    let f = seqs.first().map_or(0, |s| s.cols());
    let mut out = Tensor::zeros(&[seqs.len() * t, f]);
    for (b, s) in seqs.iter().enumerate() {
        let dst = &mut out.data_mut()[b * t * f..(b * t + s.rows()) * f];
        dst.copy_from_slice(s.data());
    }
    (out, seqs.iter().map(|s| s.rows()).collect(), t)
}

const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeechEncoderConfig {
    pub d_style: usize,
    pub hidden: usize,
}

impl Default for SpeechEncoderConfig {
    fn default() -> Self {
        Self {
            d_style: 384,
            hidden: 128,
        }
    }
}

/// Frame MLP, attention pooling, projection and L2 normalisation.
#[derive(Clone)]
pub struct SpeechStyleEncoder {
    cfg: SpeechEncoderConfig,
    extractor: Arc<dyn SpeechFeatureExtractor>,
    store: ParamStore,
    frame: Mlp,
    pool: AttentionPool,
    proj: Linear,
    log_inv_tau: ParamId,
}

impl fmt::Debug for SpeechStyleEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpeechStyleEncoder")
            .field("cfg", &self.cfg)
            .field("extractor", &self.extractor.name())
            .field("params", &self.store.num_scalars())
            .finish()
    }
}

impl SpeechStyleEncoder {
    pub fn new(cfg: SpeechEncoderConfig, extractor: Arc<dyn SpeechFeatureExtractor>, seed: u64, tau_init: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fd = extractor.output_dim();
        let frame = Mlp::new(&mut store, "speech.frame", fd, cfg.hidden, cfg.hidden, &mut rng);
        let pool = AttentionPool::new(&mut store, "speech.pool", cfg.hidden, &mut rng);
        let proj = Linear::new(&mut store, "speech.proj", cfg.hidden, cfg.d_style, true, &mut rng);
        let log_inv_tau = store.add("speech.log_inv_tau", Tensor::from_vec(&[1], vec![(1.0 / tau_init).ln()]));
        Self {
            cfg,
            extractor,
            store,
            frame,
            pool,
            proj,
            log_inv_tau,
        }
    }

    pub fn config(&self) -> &SpeechEncoderConfig {
        &self.cfg
    }

    pub fn extractor(&self) -> &Arc<dyn SpeechFeatureExtractor> {
        &self.extractor
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn d_style(&self) -> usize {
        self.cfg.d_style
    }

    /// Parameter hash; unchanged as long as the encoder is frozen.
    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    /// `[B x d_style]` unit rows for feature sequences `feats`.
    pub fn forward(&self, g: &mut Graph, mode: Mode, feats: &[&Tensor]) -> NodeId {
        let (x, lens, seq) = pad_rows(feats);
        let x = g.constant(x);
        let h = self.frame.forward(g, &self.store, mode, x);
        let h = g.gelu(h);
        let p = self.pool.forward(g, &self.store, mode, h, &lens, seq);
        let y = self.proj.forward(g, &self.store, mode, p);
        g.l2_normalize(y)
    }

    /// Inference over feature matrices; returns `[n x d_style]`.
    pub fn embed_features(&self, feats: &[&Tensor]) -> Tensor {
        let mut rows = Vec::with_capacity(feats.len() * self.cfg.d_style);
        for chunk in feats.chunks(INFER_CHUNK) {
            let mut g = Graph::inference();
            let out = self.forward(&mut g, Mode::Frozen, chunk);
            rows.extend_from_slice(g.value(out).data());
        }
        Tensor::from_vec(&[feats.len(), self.cfg.d_style], rows)
    }

    pub fn encode(&self, utt: &Utterance) -> Result<StyleEmbedding> {
        let f = self.extractor.extract(utt)?;
        Ok(StyleEmbedding {
            v: self.embed_features(&[&f]).into_data(),
            modality: Modality::Speech,
        })
    }

    /// Embeddings of every utterance, in corpus order.
    pub fn encode_corpus(&self, corpus: &Corpus) -> Result<Tensor> {
        let feats = extract_all(self.extractor.as_ref(), corpus)?;
        let refs: Vec<&Tensor> = feats.iter().collect();
        Ok(self.embed_features(&refs))
    }
}

fn extract_all(ex: &dyn SpeechFeatureExtractor, corpus: &Corpus) -> Result<Vec<Tensor>> {
    corpus.utterances().iter().map(|u| ex.extract(u)).collect()
}

pub fn encode_speech_style(enc: &SpeechStyleEncoder, x: &Utterance) -> Result<StyleEmbedding> {
    enc.encode(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub d_style: usize,
    pub hidden: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            d_style: 384,
            hidden: 256,
        }
    }
}

#[derive(Clone, Debug)]
enum TextFront {
    /// Trainable copy of the extractor's token table.
    Table(Embedding),
    /// Extractor output held fixed, followed by a trainable linear map.
    Adapter(Linear),
}

/// Text features (fine-tuned), attention pooling, MLP head and L2
/// normalisation.
#[derive(Clone)]
pub struct TextStyleEncoder {
    cfg: TextEncoderConfig,
    extractor: Arc<dyn TextFeatureExtractor>,
    store: ParamStore,
    front: TextFront,
    pool: AttentionPool,
    head: Mlp,
    log_inv_tau: ParamId,
}

impl fmt::Debug for TextStyleEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TextStyleEncoder")
            .field("cfg", &self.cfg)
            .field("extractor", &self.extractor.name())
            .field("params", &self.store.num_scalars())
            .finish()
    }
}

impl TextStyleEncoder {
    pub fn new(cfg: TextEncoderConfig, extractor: Arc<dyn TextFeatureExtractor>, seed: u64, tau_init: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dim = extractor.output_dim();
        let front = match extractor.token_table() {
            Some(table) => TextFront::Table(Embedding {
                table: store.add("text.tokens.table", table.clone()),
            }),
            None => TextFront::Adapter(Linear::new(&mut store, "text.adapter", dim, dim, true, &mut rng)),
        };
        let pool = AttentionPool::new(&mut store, "text.pool", dim, &mut rng);
        let head = Mlp::new(&mut store, "text.head", dim, cfg.hidden, cfg.d_style, &mut rng);
        let log_inv_tau = store.add("text.log_inv_tau", Tensor::from_vec(&[1], vec![(1.0 / tau_init).ln()]));
        Self {
            cfg,
            extractor,
            store,
            front,
            pool,
            head,
            log_inv_tau,
        }
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn extractor(&self) -> &Arc<dyn TextFeatureExtractor> {
        &self.extractor
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn d_style(&self) -> usize {
        self.cfg.d_style
    }

    /// `[B x d_style]` unit rows. Errors on empty text.
    pub fn forward(&self, g: &mut Graph, mode: Mode, texts: &[&str]) -> Result<NodeId> {
        let dim = self.extractor.output_dim();
        let (x, lens, seq) = match &self.front {
            TextFront::Table(emb) => {
                let ids: Vec<Vec<usize>> = texts.iter().map(|t| self.extractor.tokenize(t)).collect();
                if let Some(k) = ids.iter().position(|v| v.is_empty()) {
                    return Err(Error::Input(format!("empty text at batch position {k}")));
                }
                let seq = ids.iter().map(Vec::len).max().unwrap_or(0);
                let mut flat = Vec::with_capacity(texts.len() * seq);
                let mut pos = Tensor::zeros(&[texts.len() * seq, dim]);
                for (b, v) in ids.iter().enumerate() {
                    flat.extend_from_slice(v);
                    flat.extend(std::iter::repeat_n(0, seq - v.len()));
                    let mix = self.extractor.position_mix(v.len());
                    pos.data_mut()[b * seq * dim..(b * seq + v.len()) * dim].copy_from_slice(mix.data());
                }
                let tok = emb.forward(g, &self.store, mode, &flat);
                let pos = g.constant(pos);
                (g.add(tok, pos), ids.iter().map(Vec::len).collect::<Vec<_>>(), seq)
            }
            TextFront::Adapter(lin) => {
                let feats: Vec<Tensor> = texts.iter().map(|t| self.extractor.extract(t)).collect::<Result<_>>()?;
                let refs: Vec<&Tensor> = feats.iter().collect();
                let (x, lens, seq) = pad_rows(&refs);
                let x = g.constant(x);
                (lin.forward(g, &self.store, mode, x), lens, seq)
            }
        };
        let p = self.pool.forward(g, &self.store, mode, x, &lens, seq);
        let y = self.head.forward(g, &self.store, mode, p);
        Ok(g.l2_normalize(y))
    }

    pub fn embed_texts(&self, texts: &[&str]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(texts.len() * self.cfg.d_style);
        for chunk in texts.chunks(INFER_CHUNK) {
            let mut g = Graph::inference();
            let out = self.forward(&mut g, Mode::Frozen, chunk)?;
            rows.extend_from_slice(g.value(out).data());
        }
        Ok(Tensor::from_vec(&[texts.len(), self.cfg.d_style], rows))
    }

    pub fn encode(&self, text: &str) -> Result<StyleEmbedding> {
        Ok(StyleEmbedding {
            v: self.embed_texts(&[text])?.into_data(),
            modality: Modality::Text,
        })
    }

    pub fn encode_corpus(&self, corpus: &Corpus) -> Result<Tensor> {
        let texts: Vec<&str> = corpus.utterances().iter().map(|u| u.text.as_str()).collect();
        self.embed_texts(&texts)
    }
}

pub fn encode_text_style(enc: &TextStyleEncoder, t: &str) -> Result<StyleEmbedding> {
    enc.encode(t)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Total loss per micro-batch.
    pub losses: Vec<f32>,
    /// Mean matched cosine per micro-batch (text stage only).
    pub matched_cosine: Vec<f32>,
    pub skipped_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeechStyleTrainConfig {
    pub encoder: SpeechEncoderConfig,
    pub tau_init: f32,
    /// Crops keep a uniformly drawn fraction in `[crop_min, 1]` of the frames.
    pub crop_min: f32,
    /// Std of a Gaussian offset drawn per view and added to all its frames.
    pub feature_noise: f32,
    /// Weight of the instance-discrimination term.
    pub instance_weight: f32,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for SpeechStyleTrainConfig {
    fn default() -> Self {
        Self {
            encoder: SpeechEncoderConfig::default(),
            tau_init: 0.07,
            crop_min: 0.5,
            feature_noise: 0.8,
            instance_weight: 3.0,
            schedule: Schedule::default(),
            seed: 0,
        }
    }
}

fn crop(rng: &mut ChaCha8Rng, t: &Tensor, min_frac: f32, noise: f32) -> Tensor {
    let n = t.rows();
    let lo = ((min_frac * n as f32).ceil() as usize).clamp(1, n);
    let len = rng.random_range(lo..=n);
    let start = rng.random_range(0..=n - len);
    let f = t.cols();
    let mut out = Tensor::from_vec(&[len, f], t.data()[start * f..(start + len) * f].to_vec());
    if noise > 0.0 {
        let shift = Tensor::randn(&[f], noise, rng);
        for r in 0..len {
            for (v, d) in out.row_mut(r).iter_mut().zip(shift.data()) {
                *v += d;
            }
        }
    }
    out
}

fn sample_batch(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, b.min(n)).into_vec()
}

/// Trains the speech style encoder and returns it frozen.
///
/// Every batch element contributes two random frame crops. The loss is an
/// instance-discrimination term (own crop positive, every other item
/// negative) plus a supervised term over labelled pairs (same label
/// positive, different label negative, anything involving an unlabelled item
/// unknown).
pub fn train_speech_style_encoder(
    corpus: &Corpus,
    extractor: Arc<dyn SpeechFeatureExtractor>,
    cfg: &SpeechStyleTrainConfig,
) -> Result<(SpeechStyleEncoder, TrainReport)> {
    if corpus.label_coverage() == 0.0 {
        return Err(Error::Config(
            "speech style training needs labelled utterances (label coverage is 0)".into(),
        ));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "pairing needs at least two utterances, corpus has {n}"
        )));
    }
    let feats = extract_all(extractor.as_ref(), corpus)?;
    let labels: Vec<Option<&str>> = corpus.utterances().iter().map(|u| u.style_label.as_deref()).collect();
    let mut enc = SpeechStyleEncoder::new(cfg.encoder.clone(), extractor, cfg.seed, cfg.tau_init);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eec_4000);
    let sched = &cfg.schedule;
    let mut opt = AdamW::new(sched.adam());
    let mut report = TrainReport::default();
    let b = sched.batch_size.clamp(2, n);

    for step in 0..sched.steps {
        opt.set_lr(sched.lr_at(step));
        for _ in 0..sched.grad_accum.max(1) {
            let idx = sample_batch(&mut rng, n, b);
            let mut views: Vec<Tensor> = idx.iter().map(|&i| crop(&mut rng, &feats[i], cfg.crop_min, cfg.feature_noise)).collect();
            views.extend(idx.iter().map(|&i| crop(&mut rng, &feats[i], cfg.crop_min, cfg.feature_noise)));
            let refs: Vec<&Tensor> = views.iter().collect();

            let mut g = Graph::new();
            let out = enc.forward(&mut g, Mode::Train, &refs);
            let va = g.gather(out, &(0..b).collect::<Vec<_>>());
            let vb = g.gather(out, &(b..2 * b).collect::<Vec<_>>());
            let tau = g.param(&enc.store, enc.log_inv_tau);
            let (inv, clamped) = inv_tau_from_log(g.value(tau).item());

            let sup = PairLabelMatrix::from_fn(b, |i, j| {
                if i == j {
                    return PairLabel::Pos;
                }
                match (labels[idx[i]], labels[idx[j]]) {
                    (Some(x), Some(y)) if x == y => PairLabel::Pos,
                    (Some(_), Some(_)) => PairLabel::Neg,
                    _ => PairLabel::Unk,
                }
            });
            let (ta, tb) = (g.value(va).clone(), g.value(vb).clone());
            let c1 = contrastive_loss_grad(&ta, &tb, &PairLabelMatrix::identity(b), inv)?;
            let c2 = contrastive_loss_grad(&ta, &tb, &sup, inv)?;
            let wi = cfg.instance_weight as f64;
            let loss = wi * c1.loss + c2.loss;
            let sum = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| wi * x + y).collect::<Vec<_>>();
            let d_theta = if clamped { 0.0 } else { (wi * c1.d_inv_tau + c2.d_inv_tau) * inv };
            let d = enc.cfg.d_style;
            let l = g.precomputed(
                loss as f32,
                &[va, vb, tau],
                vec![
                    to_f32_tensor(&[b, d], &sum(&c1.d_t, &c2.d_t)),
                    to_f32_tensor(&[b, d], &sum(&c1.d_s, &c2.d_s)),
                    Tensor::from_vec(&[1], vec![d_theta as f32]),
                ],
            );
            opt.accumulate(g.backward(l).into_params());
            report.losses.push(loss as f32);
        }
        opt.step(&mut enc.store);
    }
    Ok((enc, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextStyleTrainConfig {
    pub encoder: TextEncoderConfig,
    pub pairing: PairingConfig,
    /// Weight of the cosine alignment term.
    pub lambda: f32,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TextStyleTrainConfig {
    fn default() -> Self {
        Self {
            encoder: TextEncoderConfig::default(),
            pairing: PairingConfig::default(),
            lambda: 1.0,
            schedule: Schedule {
                steps: 600,
                ..Schedule::default()
            },
            seed: 0,
        }
    }
}

/// Trains the text style encoder against a frozen speech encoder. Only
/// text-side parameters (including the extractor's token table copy) move.
pub fn train_text_style_space(
    corpus: &Corpus,
    speech_enc: &SpeechStyleEncoder,
    extractor: Arc<dyn TextFeatureExtractor>,
    cfg: &TextStyleTrainConfig,
) -> Result<(TextStyleEncoder, TrainReport)> {
    cfg.pairing.validate()?;
    if speech_enc.d_style() != cfg.encoder.d_style {
        return Err(Error::Config(format!(
            "text encoder d_style {} differs from speech encoder d_style {}",
            cfg.encoder.d_style,
            speech_enc.d_style()
        )));
    }
    let n = corpus.len();
    if n == 0 {
        return Err(Error::Input("empty corpus".into()));
    }
    let speech = speech_enc.encode_corpus(corpus)?;
    let texts: Vec<&str> = corpus.utterances().iter().map(|u| u.text.as_str()).collect();
    let mut enc = TextStyleEncoder::new(cfg.encoder.clone(), extractor, cfg.seed, cfg.pairing.tau_init);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e47_4000);
    let sched = &cfg.schedule;
    let mut opt = AdamW::new(sched.adam());
    let mut report = TrainReport::default();
    let b = sched.batch_size.clamp(1, n);
    let d = cfg.encoder.d_style;

    for step in 0..sched.steps {
        opt.set_lr(sched.lr_at(step));
        for _ in 0..sched.grad_accum.max(1) {
            let idx = sample_batch(&mut rng, n, b);
            let batch_texts: Vec<&str> = idx.iter().map(|&i| texts[i]).collect();
            let s_rows: Vec<Vec<f32>> = idx.iter().map(|&i| speech.row(i).to_vec()).collect();
            let s = Tensor::from_rows(&s_rows);
            let pairs = build_pairs(&similarity_matrix(&s, &s), &cfg.pairing)?;

            let mut g = Graph::new();
            let t_node = enc.forward(&mut g, Mode::Train, &batch_texts)?;
            let tau = g.param(&enc.store, enc.log_inv_tau);
            let (inv, clamped) = inv_tau_from_log(g.value(tau).item());
            let t = g.value(t_node).clone();
            let c = match contrastive_loss_grad(&t, &s, &pairs, inv) {
                Ok(c) => c,
                Err(Error::DegenerateBatch(msg)) => {
                    log::warn!("text style step {step}: skipped batch ({msg})");
                    report.skipped_batches += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let align = cosine_alignment_loss(&t, &s)?;
            let lam = cfg.lambda as f64;
            let mut d_t = c.d_t.clone();
            for i in 0..b {
                for k in 0..d {
                    d_t[i * d + k] -= lam * s.row(i)[k] as f64 / b as f64;
                }
            }
            let loss = c.loss + lam * align;
            let d_theta = if clamped { 0.0 } else { c.d_inv_tau * inv };
            let l = g.precomputed(
                loss as f32,
                &[t_node, tau],
                vec![to_f32_tensor(&[b, d], &d_t), Tensor::from_vec(&[1], vec![d_theta as f32])],
            );
            opt.accumulate(g.backward(l).into_params());
            report.losses.push(loss as f32);
            report.matched_cosine.push((1.0 - align) as f32);
        }
        opt.step(&mut enc.store);
    }
    Ok((enc, report))
}

#[derive(Serialize)]
struct SidecarLine<'a> {
    id: &'a str,
    modality: Modality,
}

/// Writes embeddings as one `[n x d]` feature file plus a JSON-lines sidecar
/// with one `{id, modality}` object per row.
pub fn export_embeddings(bin_path: &Path, sidecar_path: &Path, items: &[(String, StyleEmbedding)]) -> Result<()> {
    let d = items.first().map_or(0, |(_, e)| e.v.len());
    if items.iter().any(|(_, e)| e.v.len() != d) {
        return Err(Error::Shape("embeddings of mixed width".into()));
    }
    let mut data = Vec::with_capacity(items.len() * d);
    let mut side = Vec::new();
    for (id, e) in items {
        data.extend_from_slice(&e.v);
        serde_json::to_writer(&mut side, &SidecarLine { id, modality: e.modality })?;
        side.push(b'\n');
    }
    featbin::write(bin_path, &Tensor::from_vec(&[items.len(), d], data))?;
    if let Some(dir) = sidecar_path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    f.write_all(&side).map_err(|e| Error::io(sidecar_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::make_synthetic_corpus;
    use crate::featext::{HashedTextExtractor, IdentitySpeechExtractor};
    use proptest::prelude::*;

    fn mat(n: usize, v: &[f32]) -> Tensor {
        Tensor::from_vec(&[n, v.len() / n], v.to_vec())
    }

    #[test]
    fn build_pairs_examples() {
        let cfg = PairingConfig::default();
        let l = build_pairs(&mat(2, &[1.0, 0.5, 0.5, 1.0]), &cfg).unwrap();
        assert_eq!(l.get(0, 0), PairLabel::Pos);
        assert_eq!(l.get(0, 1), PairLabel::Neg);
        assert_eq!(l.get(1, 0), PairLabel::Neg);
        assert_eq!(l.get(1, 1), PairLabel::Pos);
        let l = build_pairs(&mat(2, &[1.0, 0.7, 0.7, 1.0]), &cfg).unwrap();
        assert_eq!(l.get(0, 1), PairLabel::Unk);
        let l = build_pairs(&mat(2, &[1.0, 0.6, 0.6, 1.0]), &cfg).unwrap();
        assert_eq!(l.get(0, 1), PairLabel::Unk);
        let l = build_pairs(&mat(2, &[1.0, 0.95, 0.95, 1.0]), &cfg).unwrap();
        assert_eq!(l.get(0, 1), PairLabel::Unk);
        let l = build_pairs(&mat(2, &[1.0, 0.96, 0.96, 1.0]), &cfg).unwrap();
        assert_eq!(l.get(0, 1), PairLabel::Pos);
    }

    #[test]
    fn build_pairs_rejects_asymmetry() {
        let r = build_pairs(&mat(2, &[1.0, 0.5, 0.2, 1.0]), &PairingConfig::default());
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn pairing_config_validation() {
        assert!(PairingConfig::default().validate().is_ok());
        let bad = PairingConfig {
            alpha: 0.9,
            beta: 0.8,
            ..PairingConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Schema { key, .. }) if key == "pairing.beta"));
    }

    #[test]
    fn contrastive_canonical_value() {
        let t = mat(2, &[1.0, 0.0, 0.0, 1.0]);
        let loss = contrastive_loss(&t, &t, &PairLabelMatrix::identity(2), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((loss - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn contrastive_all_unknown_is_zero() {
        let t = mat(3, &[1.0, 0.0, 0.0, 1.0, 0.6, 0.8]);
        let labels = PairLabelMatrix::from_fn(3, |i, j| if i == j { PairLabel::Pos } else { PairLabel::Unk });
        assert_eq!(contrastive_loss(&t, &t, &labels, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_without_positives_is_degenerate() {
        let t = mat(2, &[1.0, 0.0, 0.0, 1.0]);
        let labels = PairLabelMatrix::from_fn(2, |_, _| PairLabel::Neg);
        assert!(matches!(contrastive_loss(&t, &t, &labels, 1.0), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn contrastive_decreases_when_negative_moves_away() {
        // Rotate S_2 away from T_1 while keeping T_2 . S_2 fixed is not
        // possible in 2-D, so use 3-D: T_1 = e1, S_2 = cos a e2 + sin a e1.
        let loss_at = |a: f32| {
            let t = mat(2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
            let s = mat(2, &[1.0, 0.0, 0.0, a.sin(), a.cos(), 0.0]);
            contrastive_loss(&t, &s, &PairLabelMatrix::identity(2), 0.5).unwrap()
        };
        assert!(loss_at(0.2) < loss_at(0.4));
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let (n, d) = (4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t: Vec<f64> = (0..n * d).map(|_| <ChaCha8Rng as rand::Rng>::random::<f64>(&mut rng) - 0.5).collect();
        let s: Vec<f64> = (0..n * d).map(|_| <ChaCha8Rng as rand::Rng>::random::<f64>(&mut rng) - 0.5).collect();
        let labels = PairLabelMatrix::from_fn(n, |i, j| match (i + 2 * j) % 3 {
            _ if i == j => PairLabel::Pos,
            0 => PairLabel::Unk,
            1 => PairLabel::Neg,
            _ => PairLabel::Pos,
        });
        let labels = PairLabelMatrix::from_fn(n, |i, j| labels.get(i.min(j), i.max(j)));
        let inv = 2.5;
        let g = contrastive_closed_form(&t, &s, d, &labels, inv).unwrap();
        let f = |t: &[f64], s: &[f64], inv: f64| contrastive_closed_form(t, s, d, &labels, inv).unwrap().loss;
        let h = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        for k in 0..n * d {
            let (mut tp, mut tm) = (t.clone(), t.clone());
            tp[k] += h;
            tm[k] -= h;
            assert!(rel((f(&tp, &s, inv) - f(&tm, &s, inv)) / (2.0 * h), g.d_t[k]) < 1e-4);
            let (mut sp, mut sm) = (s.clone(), s.clone());
            sp[k] += h;
            sm[k] -= h;
            assert!(rel((f(&t, &sp, inv) - f(&t, &sm, inv)) / (2.0 * h), g.d_s[k]) < 1e-4);
        }
        let fd = (f(&t, &s, inv + h) - f(&t, &s, inv - h)) / (2.0 * h);
        assert!(rel(fd, g.d_inv_tau) < 1e-4);
    }

    #[test]
    fn cosine_alignment_examples() {
        let t = mat(2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(cosine_alignment_loss(&t, &t).unwrap(), 0.0);
        let neg = mat(2, &[-1.0, 0.0, 0.0, -1.0]);
        assert_eq!(cosine_alignment_loss(&t, &neg).unwrap(), 2.0);
        let s = mat(2, &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(cosine_alignment_loss(&t, &s).unwrap(), 0.5);
        assert!(matches!(cosine_alignment_loss(&t, &mat(1, &[1.0, 0.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_pool_examples() {
        let same = Tensor::from_rows(&vec![vec![0.5, -1.0, 2.0]; 4]);
        let (p, w) = attention_pool(&same, &[0.3, 0.1, -0.7]).unwrap();
        for (a, b) in p.iter().zip(&[0.5, -1.0, 2.0]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let one = Tensor::from_rows(&[vec![1.5, 2.5]]);
        assert_eq!(attention_pool(&one, &[9.0, -3.0]).unwrap().0, vec![1.5, 2.5]);
        assert!(matches!(attention_pool(&Tensor::zeros(&[0, 2]), &[0.0, 0.0]), Err(Error::Shape(_))));
    }

    fn quick_speech_cfg(steps: usize) -> SpeechStyleTrainConfig {
        SpeechStyleTrainConfig {
            encoder: SpeechEncoderConfig { d_style: 16, hidden: 16 },
            schedule: Schedule {
                steps,
                batch_size: 8,
                ..Schedule::default()
            },
            seed: 3,
            ..SpeechStyleTrainConfig::default()
        }
    }

    #[test]
    fn speech_training_preconditions() {
        let c = make_synthetic_corpus(1, 1, 1, 0);
        let ex = Arc::new(IdentitySpeechExtractor::new(c.feat_dim()));
        let one = c.utterances()[0].clone();
        let labelled = Corpus::new(vec![Utterance {
            style_label: Some("s".into()),
            ..one.clone()
        }])
        .unwrap();
        let r = train_speech_style_encoder(&labelled, ex.clone(), &quick_speech_cfg(1));
        assert!(matches!(r, Err(Error::DegenerateBatch(_))));
        let unlabelled = Corpus::new(vec![Utterance { style_label: None, ..one }]).unwrap();
        let r = train_speech_style_encoder(&unlabelled, ex, &quick_speech_cfg(1));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn speech_training_is_deterministic_and_unit_norm() {
        let c = make_synthetic_corpus(2, 6, 2, 1);
        let ex = Arc::new(IdentitySpeechExtractor::new(c.feat_dim()));
        let (a, ra) = train_speech_style_encoder(&c, ex.clone(), &quick_speech_cfg(5)).unwrap();
        let (b, rb) = train_speech_style_encoder(&c, ex, &quick_speech_cfg(5)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(ra, rb);
        for u in c.utterances() {
            let e = encode_speech_style(&a, u).unwrap();
            assert_eq!(e.v.len(), 16);
            assert!((crate::nn::l2_norm(&e.v) - 1.0).abs() < 1e-5);
            assert_eq!(e, encode_speech_style(&a, u).unwrap());
        }
    }

    #[test]
    fn text_training_keeps_speech_encoder_frozen() {
        let c = make_synthetic_corpus(2, 6, 2, 1);
        let ex = Arc::new(IdentitySpeechExtractor::new(c.feat_dim()));
        let (speech, _) = train_speech_style_encoder(&c, ex, &quick_speech_cfg(3)).unwrap();
        let before = speech.fingerprint();
        let cfg = TextStyleTrainConfig {
            encoder: TextEncoderConfig { d_style: 16, hidden: 16 },
            schedule: Schedule {
                steps: 3,
                batch_size: 6,
                ..Schedule::default()
            },
            ..TextStyleTrainConfig::default()
        };
        let (text, report) = train_text_style_space(&c, &speech, Arc::new(HashedTextExtractor::default()), &cfg).unwrap();
        assert_eq!(speech.fingerprint(), before);
        assert_eq!(report.losses.len(), 3);
        let e = encode_text_style(&text, "some words here").unwrap();
        assert!((crate::nn::l2_norm(&e.v) - 1.0).abs() < 1e-5);
        assert!(matches!(encode_text_style(&text, "  "), Err(Error::Input(_))));
    }

    #[test]
    fn export_writes_matrix_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let items = vec![
            ("a".to_string(), StyleEmbedding { v: vec![1.0, 0.0], modality: Modality::Speech }),
            ("a".to_string(), StyleEmbedding { v: vec![0.0, 1.0], modality: Modality::Text }),
        ];
        let bin = dir.path().join("emb.bin");
        let side = dir.path().join("emb.jsonl");
        export_embeddings(&bin, &side, &items).unwrap();
        assert_eq!(featbin::read(&bin).unwrap().shape(), &[2, 2]);
        let text = fs::read_to_string(&side).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), r#"{"id":"a","modality":"text"}"#);
    }

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&[n, d], 1.0, &mut rng);
        Tensor::from_rows(&t.to_rows().iter().map(|r| crate::nn::normalized(r)).collect::<Vec<_>>())
    }

    proptest! {
        #[test]
        fn pair_labels_symmetric_with_pos_diagonal(n in 1usize..24, seed in any::<u64>()) {
            let e = unit_rows(n, 4, seed);
            let l = build_pairs(&similarity_matrix(&e, &e), &PairingConfig::default()).unwrap();
            prop_assert!(l.is_symmetric());
            for i in 0..n {
                prop_assert_eq!(l.get(i, i), PairLabel::Pos);
            }
        }

        #[test]
        fn contrastive_loss_nonnegative(n in 2usize..8, seed in any::<u64>(), tau in 0.01f64..1.0) {
            let t = unit_rows(n, 5, seed);
            let s = unit_rows(n, 5, seed ^ 9);
            let sim = similarity_matrix(&s, &s);
            let labels = build_pairs(&sim, &PairingConfig::default()).unwrap();
            prop_assert!(contrastive_loss(&t, &s, &labels, tau).unwrap() >= -1e-12);
        }
    }
}
