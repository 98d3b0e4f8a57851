//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes hold their
//! values (shared `Arc<Tensor>` for parameters) plus whatever the backward
//! rule needs. [`Graph::backward`] walks the tape in reverse once.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, gemm, gemm_strided, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f32),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    Attention {
        qkv: NodeId,
        shape: AttnShape,
        probs: Vec<f32>,
    },
    AttnPool {
        x: NodeId,
        query: NodeId,
        lens: Vec<usize>,
        seq: usize,
        weights: Vec<f32>,
    },
    L2Normalize {
        x: NodeId,
        norms: Vec<f32>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
        count: usize,
    },
    /// Scalar whose gradients with respect to `inputs` were computed in the
    /// forward pass by a closed-form rule.
    Precomputed {
        inputs: Vec<NodeId>,
        grads: Vec<Tensor>,
    },
    StraightThrough(NodeId),
    WeightedSum(Vec<(NodeId, f32)>),
}

#[derive(Clone, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
    /// Valid key count per batch row; keys at or beyond it are masked.
    pub lens: Vec<usize>,
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass.
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Grads {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }

    /// Removes and returns the parameter gradients belonging to `store`.
    pub fn take_store(&mut self, store: &ParamStore) -> BTreeMap<ParamId, Tensor> {
        let (mine, rest) = std::mem::take(&mut self.params)
            .into_iter()
            .partition(|(id, _)| store.owns(*id));
        self.params = rest;
        mine
    }
}

impl Graph {
    /// A graph that records parameter gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A graph in which parameters are constants; used for inference.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient but is not a stored parameter; used by
    /// gradient probes.
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            requires_grad: self.track,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            requires_grad: self.track,
            param: self.track.then_some(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Parameter read as a constant even in a tracking graph (frozen weights).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// `x [.., in] @ w [in, out] (+ b [out])`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.cols(), din, "linear: input width mismatch");
        let n = xv.rows();
        let mut out = vec![0.0; n * dout];
        gemm(n, din, dout, 1.0, xv.data(), false, wv.data(), false, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_mut(dout) {
                for (o, bb) in r.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.numel(), bv.numel(), "add: size mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(av.shape(), data);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let av = self.value(a);
        let t = Tensor::from_vec(av.shape(), av.data().iter().map(|x| x * c).collect());
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let t = Tensor::from_vec(av.shape(), av.data().iter().map(|&x| gelu(x)).collect());
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let d = xv.cols();
        let n = xv.rows();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; n * d];
        let mut mean = vec![0.0; n];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let r = xv.row(i);
            let m = r.iter().sum::<f32>() / d as f32;
            let var = r.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            mean[i] = m;
            rstd[i] = rs;
            for j in 0..d {
                out[i * d + j] = (r[j] - m) * rs * g[j] + b[j];
            }
        }
        let t = Tensor::from_vec(xv.shape(), out);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < tv.rows(), "gather index {i} out of range {}", tv.rows());
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::from_vec(&[ids.len(), d], out);
        self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let d = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), d, "concat_rows: width mismatch");
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let t = Tensor::from_vec(&[rows, d], out);
        self.push(t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Multi-head scaled dot-product attention over a fused `[B*T, 3D]`
    /// query/key/value projection. Returns `[B*T, D]`.
    pub fn attention(&mut self, qkv: NodeId, shape: AttnShape) -> NodeId {
        let qv = self.value(qkv);
        let (b, t, h) = (shape.batch, shape.seq, shape.heads);
        assert_eq!(qv.rows(), b * t, "attention: row count");
        assert_eq!(shape.lens.len(), b);
        let d = qv.cols() / 3;
        assert_eq!(d % h, 0, "attention: heads must divide width");
        let dh = d / h;
        let scale = 1.0 / (dh as f32).sqrt();
        let stride = 3 * d as isize;
        let mut probs = vec![0.0f32; b * h * t * t];
        let mut out = vec![0.0f32; b * t * d];
        let qd = qv.data();
        for bi in 0..b {
            let base = bi * t * 3 * d;
            let len = shape.lens[bi].clamp(1, t);
            for hi in 0..h {
                let p = &mut probs[(bi * h + hi) * t * t..(bi * h + hi + 1) * t * t];
                gemm_strided(
                    t,
                    dh,
                    t,
                    scale,
                    &qd[base + hi * dh..],
                    (stride, 1),
                    &qd[base + d + hi * dh..],
                    (1, stride),
                    0.0,
                    p,
                    (t as isize, 1),
                );
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let lim = if shape.causal { (i + 1).min(len) } else { len };
                    let m = row[..lim].iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut s = 0.0;
                    for v in row[..lim].iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    for v in row[..lim].iter_mut() {
                        *v /= s;
                    }
                    for v in row[lim..].iter_mut() {
                        *v = 0.0;
                    }
                }
                gemm_strided(
                    t,
                    t,
                    dh,
                    1.0,
                    p,
                    (t as isize, 1),
                    &qd[base + 2 * d + hi * dh..],
                    (stride, 1),
                    0.0,
                    &mut out[bi * t * d + hi * dh..],
                    (d as isize, 1),
                );
            }
        }
        let t_out = Tensor::from_vec(&[b * t, d], out);
        self.push(t_out, Op::Attention { qkv, shape, probs }, &[qkv])
    }

    /// Learned-query attention pooling over `[B*T, H]` rows with per-item
    /// valid lengths. Returns `[B, H]`.
    pub fn attn_pool(&mut self, x: NodeId, query: NodeId, lens: &[usize], seq: usize) -> NodeId {
        let xv = self.value(x);
        let qv = self.value(query).data();
        let hdim = xv.cols();
        let b = lens.len();
        assert_eq!(xv.rows(), b * seq, "attn_pool: row count");
        let scale = 1.0 / (hdim as f32).sqrt();
        let mut weights = vec![0.0; b * seq];
        let mut out = vec![0.0; b * hdim];
        for bi in 0..b {
            let len = lens[bi];
            assert!(len >= 1 && len <= seq, "attn_pool: empty sequence");
            let w = &mut weights[bi * seq..bi * seq + len];
            for (t, wt) in w.iter_mut().enumerate() {
                *wt = dot(xv.row(bi * seq + t), qv) * scale;
            }
            softmax_in_place(w);
            for t in 0..len {
                let r = xv.row(bi * seq + t);
                let wt = weights[bi * seq + t];
                for (o, v) in out[bi * hdim..(bi + 1) * hdim].iter_mut().zip(r) {
                    *o += wt * v;
                }
            }
        }
        let t = Tensor::from_vec(&[b, hdim], out);
        self.push(
            t,
            Op::AttnPool {
                x,
                query,
                lens: lens.to_vec(),
                seq,
                weights,
            },
            &[x, query],
        )
    }

    /// Attention weights computed by the most recent pooling node `id`.
    pub fn pool_weights(&self, id: NodeId) -> Option<&[f32]> {
        match &self.nodes[id.0].op {
            Op::AttnPool { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let d = xv.cols();
        let n = xv.rows();
        let mut out = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let r = xv.row(i);
            let nr = dot(r, r).sqrt();
            norms[i] = nr;
            if nr > 1e-12 {
                for j in 0..d {
                    out[i * d + j] = r[j] / nr;
                }
            }
        }
        let t = Tensor::from_vec(xv.shape(), out);
        self.push(t, Op::L2Normalize { x, norms }, &[x])
    }

    /// Mean cross-entropy over the rows of `logits` that carry a target.
    /// Rows with `None` contribute nothing. Returns a scalar (0 when no row
    /// has a target).
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> NodeId {
        let lv = self.value(logits);
        let v = lv.cols();
        assert_eq!(lv.rows(), targets.len(), "cross_entropy: target count");
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0f64;
        let mut count = 0;
        for (i, tgt) in targets.iter().enumerate() {
            let Some(tgt) = *tgt else { continue };
            let r = lv.row(i);
            let p = &mut probs[i * v..(i + 1) * v];
            p.copy_from_slice(r);
            softmax_in_place(p);
            let m = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f32>().ln();
            total += (lse - r[tgt]) as f64;
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Scalar node with externally computed gradients, one per input.
    pub fn precomputed(&mut self, value: f32, inputs: &[NodeId], grads: Vec<Tensor>) -> NodeId {
        assert_eq!(inputs.len(), grads.len());
        for (i, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*i).numel(), g.numel(), "precomputed: grad shape");
        }
        self.push(
            Tensor::scalar(value),
            Op::Precomputed {
                inputs: inputs.to_vec(),
                grads,
            },
            inputs,
        )
    }

    /// Forward value `q`; backward passes the incoming gradient to `x`
    /// unchanged.
    pub fn straight_through(&mut self, x: NodeId, q: Tensor) -> NodeId {
        assert_eq!(self.value(x).numel(), q.numel());
        let q = q.reshape(self.value(x).shape());
        self.push(q, Op::StraightThrough(x), &[x])
    }

    /// `(1/rows) * sum_i ||x_i - target_i||^2`, target held constant.
    pub fn sq_dist_to_const(&mut self, x: NodeId, target: &Tensor) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.numel(), target.numel());
        let n = xv.rows().max(1) as f32;
        let mut loss = 0.0;
        let mut g = vec![0.0; xv.numel()];
        for (i, (a, b)) in xv.data().iter().zip(target.data()).enumerate() {
            loss += (a - b) * (a - b);
            g[i] = 2.0 * (a - b) / n;
        }
        let shape = xv.shape().to_vec();
        self.precomputed(loss / n, &[x], vec![Tensor::from_vec(&shape, g)])
    }

    /// Mean absolute error against a constant target.
    pub fn l1_to_const(&mut self, x: NodeId, target: &Tensor) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.numel(), target.numel());
        let n = xv.numel().max(1) as f32;
        let mut loss = 0.0;
        let mut g = vec![0.0; xv.numel()];
        for (i, (a, b)) in xv.data().iter().zip(target.data()).enumerate() {
            loss += (a - b).abs();
            g[i] = if a > b {
                1.0 / n
            } else if a < b {
                -1.0 / n
            } else {
                0.0
            };
        }
        let shape = xv.shape().to_vec();
        self.precomputed(loss / n, &[x], vec![Tensor::from_vec(&shape, g)])
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f32)]) -> NodeId {
        let first = self.value(terms[0].0);
        let mut out = vec![0.0; first.numel()];
        let shape = first.shape().to_vec();
        for &(id, w) in terms {
            let v = self.value(id);
            assert_eq!(v.numel(), out.len(), "weighted_sum: size mismatch");
            for (o, x) in out.iter_mut().zip(v.data()) {
                *o += w * x;
            }
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::WeightedSum(terms.to_vec()),
            &ids,
        )
    }

    /// Reverse pass from scalar `root`.
    pub fn backward(&self, root: NodeId) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let mut params = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(pid), Some(g)) = (node.param, g) {
                match params.entry(pid) {
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(g.clone());
                    }
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        e.get_mut().add_assign(g);
                    }
                }
            }
        }
        Grads {
            nodes: grads,
            params,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.rows();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, 1.0, dy.data(), false, wv.data(), true, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, n, dout, 1.0, xv.data(), true, dy.data(), false, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; dout];
                        for r in dy.data().chunks(dout) {
                            for (d, v) in db.iter_mut().zip(r) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[dout], db));
                    }
                }
            }
            Op::Add(a, b) => {
                let ga = dy.clone().reshape(self.value(*a).shape());
                let gb = dy.clone().reshape(self.value(*b).shape());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let mut g = dy.clone();
                g.scale_assign(*c);
                self.accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let g = av
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, &d)| d * gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), g));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let g = self.value(*gamma).data();
                let d = xv.cols();
                let n = xv.rows();
                let mut dx = vec![0.0; n * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for i in 0..n {
                    let r = xv.row(i);
                    let dyr = &dy.data()[i * d..(i + 1) * d];
                    for j in 0..d {
                        xhat[j] = (r[j] - mean[i]) * rstd[i];
                        dxhat[j] = dyr[j] * g[j];
                        dg[j] += dyr[j] * xhat[j];
                        db[j] += dyr[j];
                    }
                    let m1 = dxhat.iter().sum::<f32>() / d as f32;
                    let m2 = dot(&dxhat, &xhat) / d as f32;
                    for j in 0..d {
                        dx[i * d + j] = rstd[i] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
                self.accumulate(grads, *gamma, Tensor::from_vec(&[d], dg));
                self.accumulate(grads, *beta, Tensor::from_vec(&[d], db));
            }
            Op::Gather { table, ids } => {
                if !self.requires_grad(*table) {
                    return;
                }
                let tv = self.value(*table);
                let d = tv.cols();
                let mut g = Tensor::zeros(tv.shape());
                for (k, &i) in ids.iter().enumerate() {
                    let src = &dy.data()[k * d..(k + 1) * d];
                    for (o, v) in g.row_mut(i).iter_mut().zip(src) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, g);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let v = self.value(p);
                    let n = v.numel();
                    if self.requires_grad(p) {
                        let g = Tensor::from_vec(v.shape(), dy.data()[off..off + n].to_vec());
                        self.accumulate(grads, p, g);
                    }
                    off += n;
                }
            }
            Op::Attention { qkv, shape, probs } => {
                let qv = self.value(*qkv);
                let (b, t, h) = (shape.batch, shape.seq, shape.heads);
                let d = qv.cols() / 3;
                let dh = d / h;
                let scale = 1.0 / (dh as f32).sqrt();
                let stride = 3 * d as isize;
                let qd = qv.data();
                let mut dqkv = vec![0.0f32; qv.numel()];
                let mut dp = vec![0.0f32; t * t];
                for bi in 0..b {
                    let base = bi * t * 3 * d;
                    for hi in 0..h {
                        let p = &probs[(bi * h + hi) * t * t..(bi * h + hi + 1) * t * t];
                        let dout = &dy.data()[bi * t * d + hi * dh..];
                        // dV = P^T dO
                        gemm_strided(
                            t,
                            t,
                            dh,
                            1.0,
                            p,
                            (1, t as isize),
                            dout,
                            (d as isize, 1),
                            0.0,
                            &mut dqkv[base + 2 * d + hi * dh..],
                            (stride, 1),
                        );
                        // dP = dO V^T
                        gemm_strided(
                            t,
                            dh,
                            t,
                            1.0,
                            dout,
                            (d as isize, 1),
                            &qd[base + 2 * d + hi * dh..],
                            (1, stride),
                            0.0,
                            &mut dp,
                            (t as isize, 1),
                        );
                        for i in 0..t {
                            let pr = &p[i * t..(i + 1) * t];
                            let dr = &mut dp[i * t..(i + 1) * t];
                            let s = dot(pr, dr);
                            for (dv, pv) in dr.iter_mut().zip(pr) {
                                *dv = pv * (*dv - s) * scale;
                            }
                        }
                        // dQ = dS K ; dK = dS^T Q
                        gemm_strided(
                            t,
                            t,
                            dh,
                            1.0,
                            &dp,
                            (t as isize, 1),
                            &qd[base + d + hi * dh..],
                            (stride, 1),
                            0.0,
                            &mut dqkv[base + hi * dh..],
                            (stride, 1),
                        );
                        gemm_strided(
                            t,
                            t,
                            dh,
                            1.0,
                            &dp,
                            (1, t as isize),
                            &qd[base + hi * dh..],
                            (stride, 1),
                            0.0,
                            &mut dqkv[base + d + hi * dh..],
                            (stride, 1),
                        );
                    }
                }
                self.accumulate(grads, *qkv, Tensor::from_vec(qv.shape(), dqkv));
            }
            Op::AttnPool {
                x,
                query,
                lens,
                seq,
                weights,
            } => {
                let xv = self.value(*x);
                let qv = self.value(*query).data();
                let hdim = xv.cols();
                let scale = 1.0 / (hdim as f32).sqrt();
                let out = &node.value;
                let mut dx = vec![0.0; xv.numel()];
                let mut dq = vec![0.0; hdim];
                for (bi, &len) in lens.iter().enumerate() {
                    let dyb = &dy.data()[bi * hdim..(bi + 1) * hdim];
                    let od = dot(out.row(bi), dyb);
                    for t in 0..len {
                        let row = bi * seq + t;
                        let r = xv.row(row);
                        let w = weights[row];
                        let gs = w * (dot(r, dyb) - od) * scale;
                        let dxr = &mut dx[row * hdim..(row + 1) * hdim];
                        for j in 0..hdim {
                            dxr[j] += w * dyb[j] + gs * qv[j];
                            dq[j] += gs * r[j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
                self.accumulate(grads, *query, Tensor::from_vec(&[hdim], dq));
            }
            Op::L2Normalize { x, norms } => {
                let xv = self.value(*x);
                let y = &node.value;
                let d = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (i, &n) in norms.iter().enumerate() {
                    if n <= 1e-12 {
                        continue;
                    }
                    let yr = y.row(i);
                    let dyr = &dy.data()[i * d..(i + 1) * d];
                    let s = dot(yr, dyr);
                    for j in 0..d {
                        dx[i * d + j] = (dyr[j] - yr[j] * s) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let v = lv.cols();
                let mut g = vec![0.0; lv.numel()];
                if *count > 0 {
                    let c = dy.item() / *count as f32;
                    for (i, tgt) in targets.iter().enumerate() {
                        let Some(tgt) = *tgt else { continue };
                        for j in 0..v {
                            g[i * v + j] = probs[i * v + j] * c;
                        }
                        g[i * v + tgt] -= c;
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(lv.shape(), g));
            }
            Op::Precomputed { inputs, grads: pg } => {
                let c = dy.item();
                for (i, g) in inputs.iter().zip(pg) {
                    let mut g = g.clone();
                    g.scale_assign(c);
                    self.accumulate(grads, *i, g);
                }
            }
            Op::StraightThrough(x) => {
                let g = dy.clone().reshape(self.value(*x).shape());
                self.accumulate(grads, *x, g);
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    let mut g = dy.clone().reshape(self.value(id).shape());
                    g.scale_assign(w);
                    self.accumulate(grads, id, g);
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let m = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
