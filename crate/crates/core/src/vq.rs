//! Nearest-neighbour vector quantization with EMA codebook learning.
//!
//! Shared by the style bottleneck of the context encoder and the semantic
//! tokenizer. Gradients never reach the codebook: entries move by
//! exponential moving average, and the encoder side gets a straight-through
//! gradient plus a commitment penalty (see [`Codebook::quantize_node`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub decay: f32,
    /// Weight of the commitment term in training losses.
    pub commitment: f32,
    pub reseed: bool,
    /// Update steps without any assignment before an entry is reseeded.
    pub reseed_after: usize,
    /// Only batch vectors at least this far (squared distance) from their
    /// nearest entry are used as reseeding targets.
    pub reseed_min_dist: f32,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            decay: 0.99,
            commitment: 0.25,
            reseed: true,
            reseed_after: 200,
            reseed_min_dist: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
    usage_counts: Vec<u64>,
    idle_steps: Vec<usize>,
    seed: u64,
    updates: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    /// Selected entries, same shape as the input.
    pub q: Tensor,
    pub indices: Vec<usize>,
    /// `mean_i ||x_i - q_i||^2` (unweighted).
    pub commit_loss: f32,
}

impl Codebook {
    pub fn new(k: usize, d: usize, seed: u64) -> Self {
        assert!(k >= 1 && d >= 1, "codebook needs K >= 1 and d >= 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_entries(Tensor::randn(&[k, d], 1.0 / (d as f32).sqrt(), &mut rng), seed)
    }

    pub fn from_entries(entries: Tensor, seed: u64) -> Self {
        let k = entries.rows();
        assert!(k >= 1 && entries.shape().len() == 2);
        assert!(entries.data().iter().all(|v| v.is_finite()), "non-finite codebook");
        Self {
            entries,
            usage_counts: vec![0; k],
            idle_steps: vec![0; k],
            seed,
            updates: 0,
        }
    }

    /// Restores a codebook with its bookkeeping.
    pub fn from_parts(entries: Tensor, usage_counts: Vec<u64>, idle_steps: Vec<usize>, seed: u64, updates: u64) -> Result<Self> {
        let k = entries.rows();
        if usage_counts.len() != k || idle_steps.len() != k {
            return Err(Error::Shape("codebook bookkeeping length mismatch".into()));
        }
        Ok(Self {
            entries,
            usage_counts,
            idle_steps,
            seed,
            updates,
        })
    }

    pub fn k(&self) -> usize {
        self.entries.rows()
    }

    pub fn d(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        self.entries.row(k)
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn idle_steps(&self) -> &[usize] {
        &self.idle_steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Index and squared distance of the closest entry; ties go to the
    /// lowest index.
    pub fn nearest(&self, x: &[f32]) -> (usize, f32) {
        let mut best = (0, f32::INFINITY);
        for k in 0..self.k() {
            let e = self.entries.row(k);
            let d: f32 = e.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    fn check_dim(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.d() {
            return Err(Error::Shape(format!(
                "quantize: input dim {} but codebook dim {}",
                x.cols(),
                self.d()
            )));
        }
        Ok(())
    }

    /// Quantizes every row of `x` without touching any statistics.
    pub fn lookup(&self, x: &Tensor) -> Result<Quantized> {
        self.check_dim(x)?;
        let n = x.rows();
        let mut q = Tensor::zeros(x.shape());
        let mut indices = Vec::with_capacity(n);
        let mut loss = 0.0;
        for i in 0..n {
            let (k, d) = self.nearest(x.row(i));
            q.row_mut(i).copy_from_slice(self.entries.row(k));
            indices.push(k);
            loss += d;
        }
        Ok(Quantized {
            q,
            indices,
            commit_loss: if n == 0 { 0.0 } else { loss / n as f32 },
        })
    }

    /// [`Self::lookup`] plus usage bookkeeping.
    pub fn quantize(&mut self, x: &Tensor) -> Result<Quantized> {
        let out = self.lookup(x)?;
        for &k in &out.indices {
            self.usage_counts[k] += 1;
        }
        Ok(out)
    }

    /// Adds assignments made elsewhere (e.g. by [`Self::quantize_node`]) to
    /// the usage counts.
    pub fn record_usage(&mut self, indices: &[usize]) {
        for &k in indices {
            self.usage_counts[k] += 1;
        }
    }

    /// Graph form: returns `(q_node, commit_node, indices)` where `q_node`
    /// carries the straight-through gradient to `x` and `commit_node` is
    /// `mean ||x - sg(q)||^2`.
    pub fn quantize_node(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, NodeId, Vec<usize>)> {
        let out = self.lookup(g.value(x))?;
        let commit = g.sq_dist_to_const(x, &out.q);
        let q = g.straight_through(x, out.q);
        Ok((q, commit, out.indices))
    }

    /// One EMA step: every entry assigned in `batch` moves to
    /// `decay * e + (1 - decay) * mean(assigned)`. Entries idle for
    /// `cfg.reseed_after` consecutive steps are replaced by batch vectors.
    /// Returns the number of reseeded entries. An empty batch is a no-op.
    pub fn update(&mut self, batch: &Tensor, cfg: &VqConfig) -> Result<usize> {
        if batch.numel() == 0 || batch.rows() == 0 {
            return Ok(0);
        }
        self.check_dim(batch)?;
        let (k, d) = (self.k(), self.d());
        let mut sums = vec![0.0f32; k * d];
        let mut counts = vec![0usize; k];
        let mut dists = Vec::with_capacity(batch.rows());
        for i in 0..batch.rows() {
            let x = batch.row(i);
            let (j, dist) = self.nearest(x);
            counts[j] += 1;
            for (s, v) in sums[j * d..(j + 1) * d].iter_mut().zip(x) {
                *s += v;
            }
            dists.push(dist);
        }
        for j in 0..k {
            if counts[j] == 0 {
                self.idle_steps[j] += 1;
                continue;
            }
            self.idle_steps[j] = 0;
            let inv = 1.0 / counts[j] as f32;
            let e = self.entries.row_mut(j);
            for (ev, s) in e.iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                *ev = cfg.decay * *ev + (1.0 - cfg.decay) * s * inv;
            }
        }
        self.updates += 1;
        if !cfg.reseed {
            return Ok(0);
        }
        let candidates: Vec<usize> = (0..batch.rows())
            .filter(|&i| dists[i] >= cfg.reseed_min_dist)
            .collect();
        if candidates.is_empty() {
            return Ok(0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.updates.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut reseeded = 0;
        for j in 0..k {
            if self.idle_steps[j] >= cfg.reseed_after.max(1) {
                let src = candidates[rng.random_range(0..candidates.len())];
                self.entries.row_mut(j).copy_from_slice(batch.row(src));
                self.idle_steps[j] = 0;
                reseeded += 1;
            }
        }
        Ok(reseeded)
    }

    /// k-means++ seeding from `data` rows. Stops early when every row is
    /// already within `min_dist` (squared) of a chosen entry; the remaining
    /// entries keep their current values.
    pub fn init_kmeans_pp(&mut self, data: &Tensor, min_dist: f32) -> Result<usize> {
        self.check_dim(data)?;
        let n = data.rows();
        if n == 0 {
            return Ok(0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(17));
        let first = rng.random_range(0..n);
        self.entries.row_mut(0).copy_from_slice(data.row(first));
        let mut d2: Vec<f32> = (0..n).map(|i| sq(data.row(i), self.entries.row(0))).collect();
        let mut placed = 1;
        while placed < self.k() {
            let total: f64 = d2.iter().map(|&v| v as f64).sum();
            let max = d2.iter().cloned().fold(0.0f32, f32::max);
            if total <= 0.0 || max <= min_dist {
                break;
            }
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                r -= v as f64;
                if r <= 0.0 && v > 0.0 {
                    pick = i;
                    break;
                }
            }
            self.entries.row_mut(placed).copy_from_slice(data.row(pick));
            for (i, d) in d2.iter_mut().enumerate() {
                *d = d.min(sq(data.row(i), self.entries.row(placed)));
            }
            placed += 1;
        }
        Ok(placed)
    }

    /// Fraction of entries that are nearest to at least one row of `data`.
    pub fn utilization(&self, data: &Tensor) -> f64 {
        let mut used = vec![false; self.k()];
        for i in 0..data.rows() {
            used[self.nearest(data.row(i)).0] = true;
        }
        used.iter().filter(|&&u| u).count() as f64 / self.k() as f64
    }
}

fn sq(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
