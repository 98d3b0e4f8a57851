//! Token-LM text-to-speech: a VQ tokenizer over speech frames, a causal
//! transformer that predicts those tokens from packed text and conditioning,
//! and a frame-synchronous toy decoder from tokens back to mel frames.
//!
//! Training runs in two stages. `Pretrain` uses the null conditioning (no
//! neighbours, zero style). `ContextFinetune` starts from a pretrained model
//! and feeds neighbouring sentences plus a style embedding drawn per example
//! from either the speech or the text style encoder.

use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{ConditioningBundle, ContextConfig, ContextEncoder, ContextInput, Segment};
use crate::corpus::{ContextWindow, Corpus};
use crate::error::{Error, Result};
use crate::featext::TextFeatureExtractor;
use crate::nn::{
    softmax_in_place, AdamW, Block, Embedding, Graph, LayerNorm, Linear, Mlp, Mode, NodeId,
    ParamStore, Schedule, Tensor,
};
use crate::styles::{SpeechStyleEncoder, TextStyleEncoder};
use crate::vq::{Codebook, VqConfig};

// ---------------------------------------------------------------------------
// Semantic tokenizer

/// Semantic tokens of one utterance, EOS not included.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticTokenSequence {
    pub tokens: Vec<usize>,
    /// Codebook size; also the EOS id.
    pub k_sem: usize,
}

impl SemanticTokenSequence {
    pub fn new(tokens: Vec<usize>, k_sem: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("semantic token sequence is empty".into()));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= k_sem) {
            return Err(Error::Input(format!("semantic token {t} outside [0, {k_sem})")));
        }
        Ok(Self { tokens, k_sem })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> usize {
        self.k_sem
    }

    pub fn with_eos(&self) -> Vec<usize> {
        let mut v = self.tokens.clone();
        v.push(self.k_sem);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticConfig {
    pub codebook_size: usize,
    /// PCA output width, also the code dimension.
    pub code_dim: usize,
    /// Full-batch codebook updates after k-means++ seeding.
    pub iterations: usize,
    /// EMA decay of those updates; `0` gives plain Lloyd steps.
    pub decay: f32,
    pub seed: u64,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            code_dim: 16,
            iterations: 40,
            decay: 0.0,
            seed: 0,
        }
    }
}

/// Centering, a PCA projection and a codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTokenizer {
    mean: Vec<f32>,
    /// `[feat_dim, code_dim]`, columns are principal directions.
    projection: Tensor,
    codebook: Codebook,
}

impl SemanticTokenizer {
    pub fn from_parts(mean: Vec<f32>, projection: Tensor, codebook: Codebook) -> Result<Self> {
        if projection.shape().len() != 2
            || projection.rows() != mean.len()
            || projection.cols() != codebook.d()
        {
            return Err(Error::Shape(format!(
                "tokenizer parts disagree: mean {}, projection {:?}, code dim {}",
                mean.len(),
                projection.shape(),
                codebook.d()
            )));
        }
        Ok(Self {
            mean,
            projection,
            codebook,
        })
    }

    /// Fits the projection and codebook on the frames of `corpus` rows
    /// `indices`.
    pub fn fit(corpus: &Corpus, indices: &[usize], cfg: &SemanticConfig) -> Result<Self> {
        let fd = corpus.feat_dim();
        if cfg.code_dim == 0 || cfg.code_dim > fd {
            return Err(Error::Config(format!(
                "semantic code_dim {} must be in 1..={fd} (speech feature dim)",
                cfg.code_dim
            )));
        }
        if cfg.codebook_size == 0 {
            return Err(Error::Config("semantic codebook_size must be positive".into()));
        }
        let mut rows: Vec<&[f32]> = Vec::new();
        for &i in indices {
            let f = &corpus.utterances()[i].speech_frames;
            rows.extend((0..f.rows()).map(|r| f.row(r)));
        }
        if rows.is_empty() {
            return Err(Error::Input("no speech frames to fit the semantic tokenizer".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; fd];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += *v as f64 / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(fd, fd);
        for r in &rows {
            for a in 0..fd {
                let da = r[a] as f64 - mean[a];
                for b in a..fd {
                    cov[(a, b)] += da * (r[b] as f64 - mean[b]) / n;
                }
            }
        }
        for a in 0..fd {
            for b in 0..a {
                cov[(a, b)] = cov[(b, a)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..fd).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut projection = Tensor::zeros(&[fd, cfg.code_dim]);
        for (c, &e) in order.iter().take(cfg.code_dim).enumerate() {
            let col = eig.eigenvectors.column(e);
            // Eigenvector signs are arbitrary; pin the largest entry positive.
            let big = (0..fd).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap_or(0);
            let sign = if col[big] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..fd {
                projection.data_mut()[r * cfg.code_dim + c] = (sign * col[r]) as f32;
            }
        }
        let mut tok = Self {
            mean: mean.iter().map(|m| *m as f32).collect(),
            projection,
            codebook: Codebook::new(cfg.codebook_size, cfg.code_dim, cfg.seed),
        };
        let mut data = Vec::with_capacity(rows.len() * cfg.code_dim);
        for r in &rows {
            data.extend(tok.project_row(r));
        }
        let data = Tensor::from_vec(&[rows.len(), cfg.code_dim], data);
        tok.codebook.init_kmeans_pp(&data, 1e-8)?;
        let settle = cfg.iterations / 2;
        for it in 0..cfg.iterations {
            let vq = VqConfig {
                decay: cfg.decay,
                reseed: it < settle,
                reseed_after: 2,
                reseed_min_dist: 1e-6,
                ..VqConfig::default()
            };
            tok.codebook.update(&data, &vq)?;
        }
        Ok(tok)
    }

    pub fn k(&self) -> usize {
        self.codebook.k()
    }

    pub fn feat_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    fn project_row(&self, x: &[f32]) -> Vec<f32> {
        let d = self.projection.cols();
        let mut out = vec![0.0; d];
        for (r, (v, m)) in x.iter().zip(&self.mean).enumerate() {
            let c = v - m;
            for (o, w) in out.iter_mut().zip(self.projection.row(r)) {
                *o += c * w;
            }
        }
        out
    }

    /// Centered and projected frames, `[n, code_dim]`.
    pub fn project(&self, frames: &Tensor) -> Result<Tensor> {
        if frames.shape().len() != 2 || frames.cols() != self.feat_dim() {
            return Err(Error::Shape(format!(
                "frames {:?} do not match tokenizer feature dim {}",
                frames.shape(),
                self.feat_dim()
            )));
        }
        let mut data = Vec::with_capacity(frames.rows() * self.projection.cols());
        for r in 0..frames.rows() {
            data.extend(self.project_row(frames.row(r)));
        }
        Ok(Tensor::from_vec(&[frames.rows(), self.projection.cols()], data))
    }

    pub fn tokenize(&self, frames: &Tensor) -> Result<SemanticTokenSequence> {
        if frames.numel() == 0 || frames.rows() == 0 {
            return Err(Error::Input("cannot tokenize an empty frame matrix".into()));
        }
        let q = self.codebook.lookup(&self.project(frames)?)?;
        SemanticTokenSequence::new(q.indices, self.k())
    }

    /// Tokens for every utterance, aligned with corpus order.
    pub fn tokenize_corpus(&self, corpus: &Corpus) -> Result<Vec<SemanticTokenSequence>> {
        corpus.utterances().iter().map(|u| self.tokenize(&u.speech_frames)).collect()
    }
}

pub fn semantic_tokenize(frames: &Tensor, tokenizer: &SemanticTokenizer) -> Result<SemanticTokenSequence> {
    tokenizer.tokenize(frames)
}

// ---------------------------------------------------------------------------
// Vocabulary and packing

/// Unified id space: semantic codes, then EOS, BOS_A, SEP, STYLE, then text
/// tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub k_sem: usize,
    pub text_vocab: usize,
}

impl Vocab {
    pub fn eos(&self) -> usize {
        self.k_sem
    }

    pub fn bos_a(&self) -> usize {
        self.k_sem + 1
    }

    pub fn sep(&self) -> usize {
        self.k_sem + 2
    }

    pub fn style(&self) -> usize {
        self.k_sem + 3
    }

    pub fn text(&self, id: usize) -> usize {
        self.k_sem + 4 + id
    }

    pub fn size(&self) -> usize {
        self.k_sem + 4 + self.text_vocab
    }

    /// Width of the output head: semantic codes plus EOS.
    pub fn n_outputs(&self) -> usize {
        self.k_sem + 1
    }
}

/// Where a packed position takes its conditioning vector from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Plain,
    Style,
    /// Row of the bundle's context sequence.
    Context(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedSequence {
    pub ids: Vec<usize>,
    /// True where the token is a prediction target.
    pub loss_mask: Vec<bool>,
    pub slots: Vec<Slot>,
    /// Number of context tokens dropped to fit `max_len`.
    pub dropped_context: usize,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn masked_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Next-token targets in head coordinates, one per position.
    pub fn targets(&self) -> Vec<Option<usize>> {
        (0..self.ids.len())
            .map(|t| (t + 1 < self.ids.len() && self.loss_mask[t + 1]).then(|| self.ids[t + 1]))
            .collect()
    }
}

struct Layout<'a> {
    tokens: &'a [usize],
    segments: &'a [Segment],
}

/// Packs `[STYLE][PREV][SEP][CURR][SEP][NEXT][BOS_A][semantic..][EOS]`.
/// `close` appends EOS. Context is trimmed from the far end of NEXT first,
/// then from the far end of PREV.
fn pack_layout(
    vocab: &Vocab,
    layout: Layout<'_>,
    text_tokens: &[usize],
    semantic: &[usize],
    close: bool,
    max_len: usize,
) -> Result<PackedSequence> {
    if text_tokens.is_empty() {
        return Err(Error::Input("text tokens are empty".into()));
    }
    if let Some(t) = semantic.iter().find(|&&t| t >= vocab.k_sem) {
        return Err(Error::Input(format!("semantic token {t} outside [0, {})", vocab.k_sem)));
    }
    if let Some(t) = text_tokens.iter().chain(layout.tokens).find(|&&t| t >= vocab.text_vocab) {
        return Err(Error::Input(format!("text token {t} outside [0, {})", vocab.text_vocab)));
    }
    let rows_of = |s: Segment| -> Vec<usize> {
        (0..layout.segments.len()).filter(|&i| layout.segments[i] == s).collect()
    };
    let curr = rows_of(Segment::Curr);
    let curr_ids: Vec<usize> = curr.iter().map(|&i| layout.tokens[i]).collect();
    if curr_ids != text_tokens {
        return Err(Error::Input(
            "text tokens do not match the current span of the bundle".into(),
        ));
    }
    let mut prev = rows_of(Segment::Prev);
    let mut next = rows_of(Segment::Next);

    let fixed = 4 + curr.len() + semantic.len() + usize::from(close);
    if fixed > max_len {
        return Err(Error::Input(format!(
            "current text and semantics need {fixed} positions, max_len is {max_len}"
        )));
    }
    let budget = max_len - fixed;
    let mut dropped = 0;
    while prev.len() + next.len() > budget {
        if next.pop().is_none() {
            prev.remove(0);
        }
        dropped += 1;
    }

    let n = fixed + prev.len() + next.len();
    let mut ids = Vec::with_capacity(n);
    let mut slots = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut push = |id: usize, slot: Slot, m: bool| {
        ids.push(id);
        slots.push(slot);
        mask.push(m);
    };
    push(vocab.style(), Slot::Style, false);
    for &r in &prev {
        push(vocab.text(layout.tokens[r]), Slot::Context(r), false);
    }
    push(vocab.sep(), Slot::Plain, false);
    for &r in &curr {
        push(vocab.text(layout.tokens[r]), Slot::Context(r), false);
    }
    push(vocab.sep(), Slot::Plain, false);
    for &r in &next {
        push(vocab.text(layout.tokens[r]), Slot::Context(r), false);
    }
    push(vocab.bos_a(), Slot::Plain, false);
    for &s in semantic {
        push(s, Slot::Plain, true);
    }
    if close {
        push(vocab.eos(), Slot::Plain, true);
    }
    Ok(PackedSequence {
        ids,
        loss_mask: mask,
        slots,
        dropped_context: dropped,
    })
}

/// Packs a bundle, its current text and optional target semantics into one
/// LM sequence. Without semantics the sequence ends at BOS_A and the loss
/// mask is empty.
pub fn lm_sequence_pack(
    vocab: &Vocab,
    bundle: &ConditioningBundle,
    text_tokens: &[usize],
    semantic: Option<&SemanticTokenSequence>,
    max_len: usize,
) -> Result<PackedSequence> {
    let layout = Layout {
        tokens: &bundle.tokens,
        segments: &bundle.segments,
    };
    match semantic {
        Some(s) => {
            if s.is_empty() {
                return Err(Error::Input("semantic token sequence is empty".into()));
            }
            pack_layout(vocab, layout, text_tokens, &s.tokens, true, max_len)
        }
        None => pack_layout(vocab, layout, text_tokens, &[], false, max_len),
    }
}

// ---------------------------------------------------------------------------
// Token LM

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainingStage {
    Pretrain,
    ContextFinetune,
}

impl fmt::Display for TrainingStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingStage::Pretrain => "PRETRAIN",
            TrainingStage::ContextFinetune => "CONTEXT_FINETUNE",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LmConfig {
    pub fn desk() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_model: 256,
            max_len: 512,
        }
    }

    pub fn paper() -> Self {
        Self {
            layers: 12,
            heads: 12,
            d_model: 768,
            max_len: 512,
        }
    }

    /// Small enough for repeated multi-seed runs in tests.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 64,
            max_len: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Schema {
                key: "lm.heads".into(),
                msg: format!("{} heads do not divide d_model {}", self.heads, self.d_model),
            });
        }
        if self.max_len < 8 {
            return Err(Error::Schema {
                key: "lm.max_len".into(),
                msg: format!("max_len {} is too small", self.max_len),
            });
        }
        Ok(())
    }
}

/// Decoder-only transformer over packed sequences. Conditioning enters as
/// projected bundle rows added to the token embeddings: the style token at
/// the STYLE slot and the context encoder output at every text position.
#[derive(Clone)]
pub struct TokenLM {
    cfg: LmConfig,
    vocab: Vocab,
    stage: Option<TrainingStage>,
    max_new_tokens: usize,
    store: ParamStore,
    tok: Embedding,
    pos: Embedding,
    style_proj: Linear,
    ctx_proj: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    context: ContextEncoder,
}

impl fmt::Debug for TokenLM {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenLM")
            .field("cfg", &self.cfg)
            .field("vocab", &self.vocab)
            .field("stage", &self.stage)
            .field("params", &self.store.num_scalars())
            .field("context", &self.context)
            .finish()
    }
}

struct LmForward {
    logits: NodeId,
    seq: usize,
    commit: NodeId,
    projected: Tensor,
    indices: Vec<usize>,
}

impl TokenLM {
    pub fn new(
        cfg: LmConfig,
        context_cfg: ContextConfig,
        k_sem: usize,
        d_style: usize,
        extractor: Arc<dyn TextFeatureExtractor>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if k_sem == 0 {
            return Err(Error::Config("semantic codebook is empty".into()));
        }
        let vocab = Vocab {
            k_sem,
            text_vocab: extractor.vocab_size(),
        };
        let context = ContextEncoder::new(context_cfg, d_style, extractor, seed ^ 0x00c7_0000)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let h = context.h_cond();
        let tok = Embedding::new(&mut store, "lm.tok", vocab.size(), d, 0.02, &mut rng);
        let pos = Embedding::new(&mut store, "lm.pos", cfg.max_len, d, 0.02, &mut rng);
        let style_proj = Linear::new(&mut store, "lm.style_proj", h, d, true, &mut rng);
        let ctx_proj = Linear::new(&mut store, "lm.ctx_proj", h, d, true, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut store, &format!("lm.block{i}"), d, cfg.heads, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "lm.ln_f", d);
        let head = Linear::new(&mut store, "lm.head", d, vocab.n_outputs(), true, &mut rng);
        Ok(Self {
            max_new_tokens: cfg.max_len / 2,
            cfg,
            vocab,
            stage: None,
            store,
            tok,
            pos,
            style_proj,
            ctx_proj,
            blocks,
            ln_f,
            head,
            context,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Last completed training stage, `None` for a fresh model.
    pub fn stage(&self) -> Option<TrainingStage> {
        self.stage
    }

    pub fn set_stage(&mut self, stage: Option<TrainingStage>) {
        self.stage = stage;
    }

    pub fn max_new_tokens(&self) -> usize {
        self.max_new_tokens
    }

    pub fn set_max_new_tokens(&mut self, n: usize) {
        self.max_new_tokens = n.max(1);
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn context(&self) -> &ContextEncoder {
        &self.context
    }

    pub fn context_mut(&mut self) -> &mut ContextEncoder {
        &mut self.context
    }

    /// Encoder input for utterance `i` of `corpus` under `stage`: no
    /// neighbours and the null style for `Pretrain`, the configured context
    /// width and `style` otherwise.
    pub fn prepare(&self, corpus: &Corpus, i: usize, stage: TrainingStage, style: &[f32]) -> Result<ContextInput> {
        match stage {
            TrainingStage::Pretrain => {
                let win = ContextWindow {
                    previous: Vec::new(),
                    current: &corpus.utterances()[i],
                    next: Vec::new(),
                };
                self.context.prepare(&win, &[])
            }
            TrainingStage::ContextFinetune => {
                let win = corpus.window_at(i, self.context.config().width);
                self.context.prepare(&win, style)
            }
        }
    }

    /// Conditioning bundle for utterance `i` (see [`TokenLM::prepare`]).
    pub fn bundle(&self, corpus: &Corpus, i: usize, stage: TrainingStage, style: &[f32]) -> Result<ConditioningBundle> {
        let input = self.prepare(corpus, i, stage, style)?;
        self.context.encode_input(&input)
    }

    /// Runs the transformer on packed sequences. `style` is `[B, h_cond]`
    /// and `ctx` is `[B * ctx_seq, h_cond]`.
    fn forward_packed(
        &self,
        g: &mut Graph,
        mode: Mode,
        packed: &[&PackedSequence],
        style: NodeId,
        ctx: NodeId,
        ctx_seq: usize,
    ) -> (NodeId, usize) {
        let b = packed.len();
        let seq = packed.iter().map(|p| p.len()).max().unwrap_or(0);
        let zero_row = b + b * ctx_seq;
        let mut ids = vec![self.vocab.sep(); b * seq];
        let mut pos = vec![0; b * seq];
        let mut cond = vec![zero_row; b * seq];
        for (k, p) in packed.iter().enumerate() {
            for t in 0..p.len() {
                ids[k * seq + t] = p.ids[t];
                pos[k * seq + t] = t;
                cond[k * seq + t] = match p.slots[t] {
                    Slot::Plain => zero_row,
                    Slot::Style => k,
                    Slot::Context(r) => b + k * ctx_seq + r,
                };
            }
        }
        let lens: Vec<usize> = packed.iter().map(|p| p.len()).collect();
        let te = self.tok.forward(g, &self.store, mode, &ids);
        let pe = self.pos.forward(g, &self.store, mode, &pos);
        let sp = self.style_proj.forward(g, &self.store, mode, style);
        let cp = self.ctx_proj.forward(g, &self.store, mode, ctx);
        let z = g.constant(Tensor::zeros(&[1, self.cfg.d_model]));
        let table = g.concat_rows(&[sp, cp, z]);
        let ce = g.gather(table, &cond);
        let mut x = g.add(te, pe);
        x = g.add(x, ce);
        for blk in &self.blocks {
            x = blk.forward(g, &self.store, mode, x, b, seq, &lens, true);
        }
        let x = self.ln_f.forward(g, &self.store, mode, x);
        (self.head.forward(g, &self.store, mode, x), seq)
    }

    /// Context encoder plus LM over a training batch.
    fn forward_train(
        &self,
        g: &mut Graph,
        mode: Mode,
        ctx_mode: Mode,
        inputs: &[ContextInput],
        packed: &[&PackedSequence],
    ) -> Result<LmForward> {
        let nodes = self.context.forward(g, ctx_mode, inputs)?;
        let (logits, seq) = self.forward_packed(g, mode, packed, nodes.style, nodes.context, nodes.seq);
        Ok(LmForward {
            logits,
            seq,
            commit: nodes.commit,
            projected: nodes.projected,
            indices: nodes.indices,
        })
    }

    /// Head logits `[len, k_sem + 1]` for one packed sequence under a fixed
    /// bundle.
    pub fn logits(&self, bundle: &ConditioningBundle, packed: &PackedSequence) -> Result<Tensor> {
        self.check_bundle(bundle, packed)?;
        let mut g = Graph::inference();
        let (logits, _) = self.bundle_forward(&mut g, bundle, packed);
        Ok(g.value(logits).clone())
    }

    fn bundle_forward(&self, g: &mut Graph, bundle: &ConditioningBundle, packed: &PackedSequence) -> (NodeId, usize) {
        let h = self.context.h_cond();
        let style = g.constant(Tensor::from_vec(&[1, h], bundle.style_token.clone()));
        let m = bundle.context_sequence.rows();
        let ctx = g.constant(bundle.context_sequence.clone());
        self.forward_packed(g, Mode::Frozen, &[packed], style, ctx, m)
    }

    fn check_bundle(&self, bundle: &ConditioningBundle, packed: &PackedSequence) -> Result<()> {
        let h = self.context.h_cond();
        if bundle.style_token.len() != h || bundle.context_sequence.cols() != h {
            return Err(Error::Shape(format!("bundle width does not match h_cond {h}")));
        }
        if packed.len() > self.cfg.max_len {
            return Err(Error::Shape(format!(
                "packed sequence of {} exceeds max_len {}",
                packed.len(),
                self.cfg.max_len
            )));
        }
        let rows = bundle.context_sequence.rows();
        if packed.slots.iter().any(|s| matches!(s, Slot::Context(r) if *r >= rows)) {
            return Err(Error::Shape("packed sequence refers past the bundle's context rows".into()));
        }
        Ok(())
    }

    /// Teacher-forced argmax predictions for every masked position, paired
    /// with the reference ids.
    pub fn teacher_forced(
        &self,
        bundle: &ConditioningBundle,
        semantic: &SemanticTokenSequence,
    ) -> Result<Vec<(usize, usize)>> {
        let packed = lm_sequence_pack(&self.vocab, bundle, bundle.current_tokens(), Some(semantic), self.cfg.max_len)?;
        let logits = self.logits(bundle, &packed)?;
        Ok(packed
            .targets()
            .iter()
            .enumerate()
            .filter_map(|(t, tgt)| tgt.map(|y| (argmax(logits.row(t)), y)))
            .collect())
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Training

/// Per-example style sourcing for context fine-tuning: speech with
/// probability `p_speech`, text otherwise. Counts every encoder query.
pub struct StyleSourcePolicy<'a> {
    p_speech: f64,
    speech: &'a SpeechStyleEncoder,
    text: &'a TextStyleEncoder,
    speech_calls: Cell<usize>,
    text_calls: Cell<usize>,
}

impl<'a> StyleSourcePolicy<'a> {
    pub fn new(p_speech: f64, speech: &'a SpeechStyleEncoder, text: &'a TextStyleEncoder) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_speech) {
            return Err(Error::Schema {
                key: "finetune.style_source_p".into(),
                msg: format!("{p_speech} is not a probability"),
            });
        }
        if speech.d_style() != text.d_style() {
            return Err(Error::Config(format!(
                "speech ({}) and text ({}) style dims differ",
                speech.d_style(),
                text.d_style()
            )));
        }
        Ok(Self {
            p_speech,
            speech,
            text,
            speech_calls: Cell::new(0),
            text_calls: Cell::new(0),
        })
    }

    pub fn p_speech(&self) -> f64 {
        self.p_speech
    }

    pub fn d_style(&self) -> usize {
        self.speech.d_style()
    }

    pub fn speech_calls(&self) -> usize {
        self.speech_calls.get()
    }

    pub fn text_calls(&self) -> usize {
        self.text_calls.get()
    }

    /// One Bernoulli draw, then the chosen encoder on utterance `i`.
    pub fn draw(&self, rng: &mut ChaCha8Rng, corpus: &Corpus, i: usize) -> Result<Vec<f32>> {
        let u = &corpus.utterances()[i];
        if rng.random_bool(self.p_speech) {
            self.speech_calls.set(self.speech_calls.get() + 1);
            Ok(self.speech.encode(u)?.v)
        } else {
            self.text_calls.set(self.text_calls.get() + 1);
            Ok(self.text.encode(&u.text)?.v)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub schedule: Schedule,
    /// Weight of the style VQ commitment term (fine-tuning only).
    pub commit_weight: f32,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule {
                steps: 400,
                batch_size: 16,
                lr: 2e-3,
                warmup: 20,
                ..Schedule::default()
            },
            commit_weight: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    /// Masked cross-entropy per micro-batch.
    pub losses: Vec<f32>,
    /// Teacher-forced accuracy per micro-batch.
    pub accuracy: Vec<f32>,
    pub speech_draws: usize,
    pub text_draws: usize,
    pub max_new_tokens: usize,
}

/// Nearest-rank percentile of `v`.
fn percentile(v: &[usize], q: f64) -> usize {
    let mut s = v.to_vec();
    s.sort_unstable();
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

/// Trains `init` for one stage on corpus rows `train`. `semantic` holds the
/// target tokens of every corpus utterance.
///
/// `Pretrain` uses null conditioning and ignores `policy`.
/// `ContextFinetune` needs a pretrained `init` and a policy; the style
/// encoders behind the policy are only read.
pub fn train_lm(
    corpus: &Corpus,
    semantic: &[SemanticTokenSequence],
    train: &[usize],
    stage: TrainingStage,
    policy: Option<&StyleSourcePolicy<'_>>,
    init: Option<TokenLM>,
    cfg: &LmTrainConfig,
) -> Result<(TokenLM, LmTrainReport)> {
    let mut lm = match (stage, init) {
        (_, None) => {
            return Err(Error::Config(format!("{stage} needs an initial TokenLM")));
        }
        (TrainingStage::ContextFinetune, Some(lm)) if lm.stage.is_none() => {
            return Err(Error::Config(
                "CONTEXT_FINETUNE needs a pretrained TokenLM as init".into(),
            ));
        }
        (_, Some(lm)) => lm,
    };
    if stage == TrainingStage::ContextFinetune {
        let Some(p) = policy else {
            return Err(Error::Config("CONTEXT_FINETUNE needs a style source policy".into()));
        };
        if p.d_style() != lm.context.d_style() {
            return Err(Error::Config(format!(
                "style encoders produce dim {}, context encoder expects {}",
                p.d_style(),
                lm.context.d_style()
            )));
        }
    }
    if semantic.len() != corpus.len() {
        return Err(Error::Shape(format!(
            "{} semantic sequences for {} utterances",
            semantic.len(),
            corpus.len()
        )));
    }
    if train.is_empty() {
        return Err(Error::Input("no training utterances".into()));
    }
    if let Some(s) = semantic.iter().find(|s| s.k_sem != lm.vocab.k_sem) {
        return Err(Error::Config(format!(
            "semantic tokens use {} codes, LM expects {}",
            s.k_sem, lm.vocab.k_sem
        )));
    }
    let finetune = stage == TrainingStage::ContextFinetune;
    let sched = &cfg.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a7e_57a6);
    let mut style_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5717_1e00);
    let mut opt_lm = AdamW::new(sched.adam());
    let mut opt_ctx = AdamW::new(sched.adam());
    let vq = lm.context.config().vq.clone();
    let mut report = LmTrainReport::default();
    let b = sched.batch_size.clamp(1, train.len());

    let lens: Vec<usize> = train.iter().map(|&i| semantic[i].len()).collect();
    lm.max_new_tokens = 2 * percentile(&lens, 0.95);
    report.max_new_tokens = lm.max_new_tokens;

    let draw = |rng: &mut ChaCha8Rng, i: usize| -> Result<Vec<f32>> {
        match (finetune, policy) {
            (true, Some(p)) => p.draw(rng, corpus, i),
            _ => Ok(Vec::new()),
        }
    };

    if finetune {
        // Seed the style codebook from projected training styles.
        let inputs: Vec<ContextInput> = train
            .iter()
            .map(|&i| lm.prepare(corpus, i, stage, &draw(&mut style_rng, i)?))
            .collect::<Result<_>>()?;
        let mut g = Graph::inference();
        let nodes = lm.context.forward(&mut g, Mode::Frozen, &inputs)?;
        lm.context.codebook_mut().init_kmeans_pp(&nodes.projected, 1e-8)?;
    }

    for step in 0..sched.steps {
        let lr = sched.lr_at(step);
        opt_lm.set_lr(lr);
        opt_ctx.set_lr(lr);
        let mut projected = Vec::new();
        for _ in 0..sched.grad_accum.max(1) {
            let idx: Vec<usize> = rand::seq::index::sample(&mut rng, train.len(), b)
                .into_iter()
                .map(|k| train[k])
                .collect();
            let inputs: Vec<ContextInput> = idx
                .iter()
                .map(|&i| lm.prepare(corpus, i, stage, &draw(&mut style_rng, i)?))
                .collect::<Result<_>>()?;
            let packed: Vec<PackedSequence> = inputs
                .iter()
                .zip(&idx)
                .map(|(inp, &i)| {
                    let (a, e) = inp.current_span();
                    pack_layout(
                        &lm.vocab,
                        Layout {
                            tokens: &inp.tokens,
                            segments: &inp.segments,
                        },
                        &inp.tokens[a..e],
                        &semantic[i].tokens,
                        true,
                        lm.cfg.max_len,
                    )
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&PackedSequence> = packed.iter().collect();

            let mut g = Graph::new();
            let out = lm.forward_train(&mut g, Mode::Train, Mode::Train, &inputs, &refs)?;
            let mut targets = Vec::with_capacity(b * out.seq);
            for p in &packed {
                let t = p.targets();
                targets.extend(t.iter().copied());
                targets.extend(std::iter::repeat_n(None, out.seq - p.len()));
            }
            let ce = g.cross_entropy(out.logits, &targets);
            let loss = if finetune {
                g.weighted_sum(&[(ce, 1.0), (out.commit, cfg.commit_weight)])
            } else {
                ce
            };
            let lv = g.value(out.logits);
            let (mut hit, mut total) = (0usize, 0usize);
            for (r, tgt) in targets.iter().enumerate() {
                if let Some(y) = tgt {
                    total += 1;
                    hit += usize::from(argmax(lv.row(r)) == *y);
                }
            }
            report.losses.push(g.value(ce).item());
            report.accuracy.push(hit as f32 / total.max(1) as f32);
            let mut grads = g.backward(loss);
            opt_lm.accumulate(grads.take_store(&lm.store));
            opt_ctx.accumulate(grads.take_store(lm.context.store()));
            if finetune {
                lm.context.codebook_mut().record_usage(&out.indices);
                projected.push(out.projected);
            }
        }
        opt_lm.step(&mut lm.store);
        opt_ctx.step(lm.context.store_mut());
        for p in &projected {
            lm.context.codebook_mut().update(p, &vq)?;
        }
    }
    if let Some(p) = policy.filter(|_| finetune) {
        report.speech_draws = p.speech_calls();
        report.text_draws = p.text_calls();
    }
    lm.stage = Some(stage);
    Ok((lm, report))
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// `0` means greedy decoding.
    pub temperature: f32,
    pub top_k: usize,
    pub seed: u64,
    /// Overrides the model's limit when set.
    pub max_new_tokens: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_k: 8,
            seed: 0,
            max_new_tokens: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: SemanticTokenSequence,
    /// Stopped by the length limit rather than EOS.
    pub truncated: bool,
}

fn sample(logits: &[f32], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> usize {
    if cfg.temperature <= 0.0 {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).filter(|&i| logits[i].is_finite()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k.max(1));
    let mut p: Vec<f32> = order.iter().map(|&i| logits[i] / cfg.temperature).collect();
    softmax_in_place(&mut p);
    let mut r = rng.random::<f32>();
    for (k, &i) in order.iter().enumerate() {
        r -= p[k];
        if r <= 0.0 {
            return i;
        }
    }
    order[order.len() - 1]
}

/// Autoregressive decoding from the packed prefix until EOS or the token
/// limit. EOS is not allowed as the first token.
pub fn generate(
    lm: &TokenLM,
    bundle: &ConditioningBundle,
    text_tokens: &[usize],
    sampling: &SamplingConfig,
) -> Result<Generation> {
    let limit = sampling.max_new_tokens.unwrap_or(lm.max_new_tokens).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let layout = || Layout {
        tokens: &bundle.tokens,
        segments: &bundle.segments,
    };
    let mut out: Vec<usize> = Vec::new();
    let eos = lm.vocab.eos();
    loop {
        if out.len() >= limit {
            break;
        }
        let packed = match pack_layout(&lm.vocab, layout(), text_tokens, &out, false, lm.cfg.max_len) {
            Ok(p) => p,
            Err(Error::Input(_)) if !out.is_empty() => break,
            Err(e) => return Err(e),
        };
        lm.check_bundle(bundle, &packed)?;
        let mut g = Graph::inference();
        let (logits, _) = lm.bundle_forward(&mut g, bundle, &packed);
        let mut row = g.value(logits).row(packed.len() - 1).to_vec();
        if out.is_empty() {
            row[eos] = f32::NEG_INFINITY;
        }
        let next = sample(&row, sampling, &mut rng);
        if next == eos {
            return Ok(Generation {
                tokens: SemanticTokenSequence::new(out, lm.vocab.k_sem)?,
                truncated: false,
            });
        }
        out.push(next);
    }
    Ok(Generation {
        tokens: SemanticTokenSequence::new(out, lm.vocab.k_sem)?,
        truncated: true,
    })
}

// ---------------------------------------------------------------------------
// Toy token-to-mel decoder

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelDecoderConfig {
    pub hidden: usize,
    /// `batch_size` counts frames.
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for MelDecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            schedule: Schedule {
                steps: 600,
                batch_size: 256,
                lr: 5e-3,
                warmup: 20,
                ..Schedule::default()
            },
            seed: 0,
        }
    }
}

/// Token embedding followed by a per-frame MLP; one mel frame per token.
#[derive(Clone, Debug)]
pub struct MelDecoder {
    k_sem: usize,
    n_mels: usize,
    store: ParamStore,
    emb: Embedding,
    mlp: Mlp,
}

impl MelDecoder {
    pub fn new(k_sem: usize, n_mels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "dec.emb", k_sem, hidden, 0.5, &mut rng);
        let mlp = Mlp::new(&mut store, "dec.mlp", hidden, hidden, n_mels, &mut rng);
        Self {
            k_sem,
            n_mels,
            store,
            emb,
            mlp,
        }
    }

    pub fn k_sem(&self) -> usize {
        self.k_sem
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn hidden(&self) -> usize {
        self.store.get(self.emb.table).cols()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph, mode: Mode, tokens: &[usize]) -> NodeId {
        let x = self.emb.forward(g, &self.store, mode, tokens);
        self.mlp.forward(g, &self.store, mode, x)
    }
}

/// L1-trains a decoder from ground-truth tokens to ground-truth mel frames.
/// Returns the decoder and the loss per step.
pub fn train_mel_decoder(
    corpus: &Corpus,
    semantic: &[SemanticTokenSequence],
    train: &[usize],
    k_sem: usize,
    cfg: &MelDecoderConfig,
) -> Result<(MelDecoder, Vec<f32>)> {
    let mut frames: Vec<(usize, usize)> = Vec::new();
    for &i in train {
        let u = &corpus.utterances()[i];
        let s = &semantic[i];
        if s.len() != u.mel.rows() {
            return Err(Error::Shape(format!(
                "utterance {} has {} tokens but {} mel frames",
                u.id,
                s.len(),
                u.mel.rows()
            )));
        }
        frames.extend((0..s.len()).map(|t| (i, t)));
    }
    if frames.is_empty() {
        return Err(Error::Input("no frames to train the decoder".into()));
    }
    let nm = corpus.n_mels();
    let mut dec = MelDecoder::new(k_sem, nm, cfg.hidden, cfg.seed);
    let sched = &cfg.schedule;
    let mut opt = AdamW::new(sched.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdec0);
    let b = sched.batch_size.clamp(1, frames.len());
    let mut losses = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        opt.set_lr(sched.lr_at(step));
        for _ in 0..sched.grad_accum.max(1) {
            let pick = rand::seq::index::sample(&mut rng, frames.len(), b);
            let mut toks = Vec::with_capacity(b);
            let mut target = Vec::with_capacity(b * nm);
            for k in pick {
                let (i, t) = frames[k];
                toks.push(semantic[i].tokens[t]);
                target.extend_from_slice(corpus.utterances()[i].mel.row(t));
            }
            let mut g = Graph::new();
            let pred = dec.forward(&mut g, Mode::Train, &toks);
            let loss = g.l1_to_const(pred, &Tensor::from_vec(&[b, nm], target));
            losses.push(g.value(loss).item());
            opt.accumulate(g.backward(loss).into_params());
        }
        opt.step(&mut dec.store);
    }
    Ok((dec, losses))
}

pub fn decode_tokens_to_mel(tokens: &SemanticTokenSequence, decoder: &MelDecoder) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot decode an empty token sequence".into()));
    }
    if let Some(t) = tokens.tokens.iter().find(|&&t| t >= decoder.k_sem) {
        return Err(Error::Input(format!("token {t} outside decoder range {}", decoder.k_sem)));
    }
    let mut g = Graph::inference();
    let out = decoder.forward(&mut g, Mode::Frozen, &tokens.tokens);
    Ok(g.value(out).clone())
}
