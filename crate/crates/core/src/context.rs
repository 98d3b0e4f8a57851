//! Context encoder: neighbouring-sentence text plus a vector-quantized style
//! embedding, fused into a [`ConditioningBundle`] that any backbone can
//! consume.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextWindow, Utterance};
use crate::error::{Error, Result};
use crate::featext::TextFeatureExtractor;
use crate::nn::{normalized, Block, Embedding, Graph, LayerNorm, Linear, Mode, NodeId, ParamStore, Tensor};
use crate::vq::{Codebook, VqConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Segment {
    Prev,
    Curr,
    Next,
}

impl Segment {
    fn id(self) -> usize {
        match self {
            Segment::Prev => 0,
            Segment::Curr => 1,
            Segment::Next => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextConfig {
    /// Neighbouring sentences on each side.
    pub width: usize,
    pub h_cond: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub style_codebook_size: usize,
    pub style_code_dim: usize,
    pub vq: VqConfig,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            width: 1,
            h_cond: 256,
            layers: 2,
            heads: 4,
            max_positions: 512,
            style_codebook_size: 64,
            style_code_dim: 32,
            vq: VqConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// Projected codebook row, `[h_cond]`.
    pub style_token: Vec<f32>,
    /// Codebook index the style was quantized to.
    pub style_index: usize,
    /// `[m x h_cond]`, one row per text token of the window.
    pub context_sequence: Tensor,
    /// Text token id behind each context row.
    pub tokens: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Half-open `[start, end)` rows of the current sentence.
    pub current_span: (usize, usize),
}

impl ConditioningBundle {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn current_tokens(&self) -> &[usize] {
        &self.tokens[self.current_span.0..self.current_span.1]
    }
}

/// One encoder input: tagged token sequences plus a raw style vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextInput {
    pub tokens: Vec<usize>,
    /// `[m x text_dim]` extractor features, aligned with `tokens`.
    pub features: Tensor,
    pub segments: Vec<Segment>,
    pub style: Vec<f32>,
}

impl ContextInput {
    pub fn current_span(&self) -> (usize, usize) {
        let s = self.segments.iter().position(|&t| t == Segment::Curr).unwrap_or(0);
        let e = self.segments.iter().rposition(|&t| t == Segment::Curr).map_or(s, |e| e + 1);
        (s, e)
    }
}

/// Output nodes of a batched forward pass.
pub struct BundleNodes {
    /// `[B x h_cond]`.
    pub style: NodeId,
    /// `[B*seq x h_cond]`, padded per item.
    pub context: NodeId,
    /// Scalar `mean ||p - sg(q)||^2` over the batch.
    pub commit: NodeId,
    pub seq: usize,
    pub lens: Vec<usize>,
    pub indices: Vec<usize>,
    /// Pre-quantization style projections, `[B x code_dim]`.
    pub projected: Tensor,
}

#[derive(Clone)]
pub struct ContextEncoder {
    cfg: ContextConfig,
    d_style: usize,
    extractor: Arc<dyn TextFeatureExtractor>,
    store: ParamStore,
    text_in: Linear,
    segment: Embedding,
    position: Embedding,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    style_in: Linear,
    style_out: Linear,
    codebook: Codebook,
}

impl fmt::Debug for ContextEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContextEncoder")
            .field("cfg", &self.cfg)
            .field("d_style", &self.d_style)
            .field("extractor", &self.extractor.name())
            .field("params", &self.store.num_scalars())
            .finish()
    }
}

impl ContextEncoder {
    pub fn new(cfg: ContextConfig, d_style: usize, extractor: Arc<dyn TextFeatureExtractor>, seed: u64) -> Result<Self> {
        if cfg.heads == 0 || !cfg.h_cond.is_multiple_of(cfg.heads) {
            return Err(Error::Schema {
                key: "context.heads".into(),
                msg: format!("{} heads do not divide h_cond {}", cfg.heads, cfg.h_cond),
            });
        }
        if cfg.style_codebook_size == 0 || cfg.style_code_dim == 0 {
            return Err(Error::Schema {
                key: "context.style_codebook_size".into(),
                msg: "style codebook must be non-empty".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = cfg.h_cond;
        let text_in = Linear::new(&mut store, "ctx.text_in", extractor.output_dim(), h, true, &mut rng);
        let segment = Embedding::new(&mut store, "ctx.segment", 3, h, 0.02, &mut rng);
        let position = Embedding::new(&mut store, "ctx.position", cfg.max_positions, h, 0.02, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut store, &format!("ctx.block{i}"), h, cfg.heads, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ctx.ln_f", h);
        let style_in = Linear::new(&mut store, "ctx.style_in", d_style, cfg.style_code_dim, true, &mut rng);
        let style_out = Linear::new(&mut store, "ctx.style_out", cfg.style_code_dim, h, true, &mut rng);
        let codebook = Codebook::new(cfg.style_codebook_size, cfg.style_code_dim, seed ^ 0xc0de);
        Ok(Self {
            cfg,
            d_style,
            extractor,
            store,
            text_in,
            segment,
            position,
            blocks,
            ln_f,
            style_in,
            style_out,
            codebook,
        })
    }

    pub fn config(&self) -> &ContextConfig {
        &self.cfg
    }

    pub fn d_style(&self) -> usize {
        self.d_style
    }

    pub fn h_cond(&self) -> usize {
        self.cfg.h_cond
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

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn codebook_mut(&mut self) -> &mut Codebook {
        &mut self.codebook
    }

    pub fn set_codebook(&mut self, cb: Codebook) -> Result<()> {
        if cb.k() != self.cfg.style_codebook_size || cb.d() != self.cfg.style_code_dim {
            return Err(Error::Shape(format!(
                "style codebook is {}x{}, encoder expects {}x{}",
                cb.k(),
                cb.d(),
                self.cfg.style_codebook_size,
                self.cfg.style_code_dim
            )));
        }
        self.codebook = cb;
        Ok(())
    }

    /// Builds the encoder input for `win` and a raw style vector. An empty
    /// style slice stands for the null style.
    pub fn prepare(&self, win: &ContextWindow<'_>, style: &[f32]) -> Result<ContextInput> {
        let mut parts: Vec<(Segment, &Utterance)> = Vec::new();
        parts.extend(win.previous.iter().map(|u| (Segment::Prev, *u)));
        parts.push((Segment::Curr, win.current));
        parts.extend(win.next.iter().map(|u| (Segment::Next, *u)));
        let mut tokens = Vec::new();
        let mut segments = Vec::new();
        let mut rows = Vec::new();
        for (seg, u) in parts {
            let ids = self.extractor.tokenize(&u.text);
            if ids.is_empty() {
                if seg == Segment::Curr {
                    return Err(Error::Input(format!("utterance {} has empty text", u.id)));
                }
                continue;
            }
            let f = self.extractor.extract(&u.text)?;
            rows.extend_from_slice(f.data());
            segments.extend(std::iter::repeat_n(seg, ids.len()));
            tokens.extend(ids);
        }
        let style = if style.is_empty() {
            vec![0.0; self.d_style]
        } else if style.len() != self.d_style {
            return Err(Error::Shape(format!(
                "style vector has dim {}, encoder expects {}",
                style.len(),
                self.d_style
            )));
        } else {
            style.to_vec()
        };
        Ok(ContextInput {
            features: Tensor::from_vec(&[tokens.len(), self.extractor.output_dim()], rows),
            tokens,
            segments,
            style,
        })
    }

    /// Batched graph forward.
    pub fn forward(&self, g: &mut Graph, mode: Mode, inputs: &[ContextInput]) -> Result<BundleNodes> {
        let b = inputs.len();
        let seq = inputs.iter().map(|i| i.tokens.len()).max().unwrap_or(0);
        if inputs.iter().any(|i| i.tokens.is_empty()) {
            return Err(Error::Input("context input without tokens".into()));
        }
        if seq > self.cfg.max_positions {
            return Err(Error::Shape(format!(
                "context of {seq} tokens exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let dim = self.extractor.output_dim();
        let mut feats = Tensor::zeros(&[b * seq, dim]);
        let mut seg_ids = vec![0; b * seq];
        let mut pos_ids = vec![0; b * seq];
        let mut styles = Tensor::zeros(&[b, self.d_style]);
        for (k, inp) in inputs.iter().enumerate() {
            let m = inp.tokens.len();
            feats.data_mut()[k * seq * dim..(k * seq + m) * dim].copy_from_slice(inp.features.data());
            for t in 0..m {
                seg_ids[k * seq + t] = inp.segments[t].id();
                pos_ids[k * seq + t] = t;
            }
            styles.row_mut(k).copy_from_slice(&normalized(&inp.style));
        }
        let lens: Vec<usize> = inputs.iter().map(|i| i.tokens.len()).collect();

        let x = g.constant(feats);
        let x = self.text_in.forward(g, &self.store, mode, x);
        let s = self.segment.forward(g, &self.store, mode, &seg_ids);
        let p = self.position.forward(g, &self.store, mode, &pos_ids);
        let mut h = g.add(x, s);
        h = g.add(h, p);
        for blk in &self.blocks {
            h = blk.forward(g, &self.store, mode, h, b, seq, &lens, false);
        }
        let context = self.ln_f.forward(g, &self.store, mode, h);

        let st = g.constant(styles);
        let proj = self.style_in.forward(g, &self.store, mode, st);
        let projected = g.value(proj).clone();
        let (q, commit, indices) = self.codebook.quantize_node(g, proj)?;
        let style = self.style_out.forward(g, &self.store, mode, q);
        Ok(BundleNodes {
            style,
            context,
            commit,
            seq,
            lens,
            indices,
            projected,
        })
    }

    /// Reads one bundle out of a batched forward pass.
    pub fn bundle_from(&self, g: &Graph, nodes: &BundleNodes, k: usize, input: &ContextInput) -> ConditioningBundle {
        let h = self.cfg.h_cond;
        let m = nodes.lens[k];
        let ctx = g.value(nodes.context);
        let rows = ctx.data()[k * nodes.seq * h..(k * nodes.seq + m) * h].to_vec();
        ConditioningBundle {
            style_token: g.value(nodes.style).row(k).to_vec(),
            style_index: nodes.indices[k],
            context_sequence: Tensor::from_vec(&[m, h], rows),
            tokens: input.tokens.clone(),
            segments: input.segments.clone(),
            current_span: input.current_span(),
        }
    }

    pub fn encode_input(&self, input: &ContextInput) -> Result<ConditioningBundle> {
        let mut g = Graph::inference();
        let nodes = self.forward(&mut g, Mode::Frozen, std::slice::from_ref(input))?;
        Ok(self.bundle_from(&g, &nodes, 0, input))
    }

    /// Unit-normalises each row of `styles` (`[n, d_style]`) and applies the
    /// pre-quantization projection, giving the vectors the style codebook
    /// sees.
    pub fn project_styles(&self, styles: &Tensor) -> Result<Tensor> {
        if styles.cols() != self.d_style {
            return Err(Error::Shape(format!(
                "styles have width {}, encoder expects {}",
                styles.cols(),
                self.d_style
            )));
        }
        let rows: Vec<Vec<f32>> = (0..styles.rows()).map(|i| normalized(styles.row(i))).collect();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_rows(&rows));
        let out = self.style_in.forward(&mut g, &self.store, Mode::Frozen, x);
        Ok(g.value(out).clone())
    }

    /// `style_out` applied to codebook row `k`.
    pub fn style_token_for(&self, k: usize) -> Vec<f32> {
        let mut g = Graph::inference();
        let row = g.constant(Tensor::from_vec(&[1, self.cfg.style_code_dim], self.codebook.entry(k).to_vec()));
        let out = self.style_out.forward(&mut g, &self.store, Mode::Frozen, row);
        g.value(out).data().to_vec()
    }
}

/// Encodes a window and a style embedding. Deterministic given parameters.
pub fn encode_context(enc: &ContextEncoder, win: &ContextWindow<'_>, style: &[f32]) -> Result<ConditioningBundle> {
    let input = enc.prepare(win, style)?;
    enc.encode_input(&input)
}

/// Window without neighbours and the all-zero style: the conditioning used
/// while pretraining.
pub fn null_conditioning(enc: &ContextEncoder, current: &Utterance) -> Result<ConditioningBundle> {
    let win = ContextWindow {
        previous: Vec::new(),
        current,
        next: Vec::new(),
    };
    encode_context(enc, &win, &vec![0.0; enc.d_style()])
}
