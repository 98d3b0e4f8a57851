//! Parameterised building blocks. Each layer only stores `ParamId`s; the
//! values live in the owning model's [`ParamStore`].

use rand::Rng;

use super::graph::{AttnShape, Graph, NodeId};
use super::params::{ParamId, ParamStore};

/// How a layer reads its parameters into a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
}

pub(crate) fn p(g: &mut Graph, store: &ParamStore, id: ParamId, mode: Mode) -> NodeId {
    match mode {
        Mode::Train => g.param(store, id),
        Mode::Frozen => g.frozen(store, id),
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / din as f32).sqrt();
        let w = store.randn(format!("{name}.weight"), &[din, dout], std, rng);
        let b = bias.then(|| store.zeros(format!("{name}.bias"), &[dout]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, x: NodeId) -> NodeId {
        let w = p(g, store, self.w, mode);
        let b = self.b.map(|b| p(g, store, b, mode));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), &[d]),
            beta: store.zeros(format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, x: NodeId) -> NodeId {
        let gamma = p(g, store, self.gamma, mode);
        let beta = p(g, store, self.beta, mode);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n: usize,
        d: usize,
        std: f32,
        rng: &mut R,
    ) -> Self {
        Self {
            table: store.randn(format!("{name}.table"), &[n, d], std, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mode: Mode,
        ids: &[usize],
    ) -> NodeId {
        let t = p(g, store, self.table, mode);
        g.gather(t, ids)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), din, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dout, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, x: NodeId) -> NodeId {
        let h = self.fc1.forward(g, store, mode, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, mode, h)
    }
}

/// Pre-norm transformer block (attention + MLP, both residual).
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), d, 3 * d, true, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, 4 * d, d, rng),
            heads,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mode: Mode,
        x: NodeId,
        batch: usize,
        seq: usize,
        lens: &[usize],
        causal: bool,
    ) -> NodeId {
        let h = self.ln1.forward(g, store, mode, x);
        let qkv = self.qkv.forward(g, store, mode, h);
        let a = g.attention(
            qkv,
            AttnShape {
                batch,
                seq,
                heads: self.heads,
                causal,
                lens: lens.to_vec(),
            },
        );
        let a = self.proj.forward(g, store, mode, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, store, mode, x);
        let h = self.mlp.forward(g, store, mode, h);
        g.add(x, h)
    }
}
