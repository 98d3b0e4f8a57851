//! Minimal differentiable tensor engine: dense `f32` tensors, a recording
//! graph with hand-written backward rules, layers and AdamW.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{AttnShape, Grads, Graph, NodeId};
pub use layers::{Block, Embedding, LayerNorm, Linear, Mlp, Mode};
pub use optim::{cosine_lr, AdamConfig, AdamW, Schedule};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{cosine, dot, gemm, l2_norm, normalized, Tensor};

pub(crate) use graph::softmax_in_place;
pub(crate) use layers::p as param_node;

#[cfg(test)]
mod gradcheck {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Compares analytic input gradients of `f` against central differences
    /// of the scalar `mean ||f(x) - target||^2`.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[NodeId]) -> NodeId, tol: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let loss_of = |vals: &[Tensor], target: Option<&Tensor>| -> (f32, Tensor) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vals.iter().map(|t| g.variable(t.clone())).collect();
            let out = f(&mut g, &ids);
            let outv = g.value(out).clone();
            let tgt = target.cloned().unwrap_or_else(|| Tensor::zeros(outv.shape()));
            let l = g.sq_dist_to_const(out, &tgt);
            (g.value(l).item(), outv)
        };
        let (_, out0) = loss_of(&inputs, None);
        let target = Tensor::randn(out0.shape(), 1.0, &mut rng);

        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &ids);
        let l = g.sq_dist_to_const(out, &target);
        let grads = g.backward(l);

        let eps = 1e-2f32;
        for (k, inp) in inputs.iter().enumerate() {
            let analytic = grads
                .node(ids[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inp.shape()));
            for i in 0..inp.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += eps;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= eps;
                let fd = (loss_of(&plus, Some(&target)).0 - loss_of(&minus, Some(&target)).0)
                    / (2.0 * eps);
                let an = analytic.data()[i];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1.0));
                assert!(err < tol, "input {k} elem {i}: fd {fd} analytic {an}");
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_grad() {
        check(
            vec![rnd(&[3, 4], 1), rnd(&[4, 5], 2), rnd(&[5], 3)],
            |g, x| g.linear(x[0], x[1], Some(x[2])),
            2e-2,
        );
    }

    #[test]
    fn layer_norm_and_gelu_grad() {
        check(
            vec![rnd(&[3, 6], 4), rnd(&[6], 5), rnd(&[6], 6)],
            |g, x| {
                let y = g.layer_norm(x[0], x[1], x[2]);
                g.gelu(y)
            },
            2e-2,
        );
    }

    #[test]
    fn gather_concat_scale_grad() {
        check(
            vec![rnd(&[5, 3], 7), rnd(&[2, 3], 8)],
            |g, x| {
                let a = g.gather(x[0], &[4, 1, 1, 0]);
                let c = g.concat_rows(&[a, x[1]]);
                let s = g.scale(c, 0.5);
                g.weighted_sum(&[(s, 2.0), (c, -0.3)])
            },
            2e-2,
        );
    }

    #[test]
    fn attention_grad_causal_and_padded() {
        for causal in [true, false] {
            check(
                vec![rnd(&[2 * 4, 3 * 4], 9)],
                move |g, x| {
                    g.attention(
                        x[0],
                        AttnShape {
                            batch: 2,
                            seq: 4,
                            heads: 2,
                            causal,
                            lens: vec![4, 3],
                        },
                    )
                },
                2e-2,
            );
        }
    }

    #[test]
    fn attn_pool_and_normalize_grad() {
        check(
            vec![rnd(&[2 * 3, 4], 10), rnd(&[4], 11)],
            |g, x| {
                let p = g.attn_pool(x[0], x[1], &[3, 2], 3);
                g.l2_normalize(p)
            },
            2e-2,
        );
    }

    #[test]
    fn cross_entropy_grad() {
        check(
            vec![rnd(&[4, 5], 12)],
            |g, x| g.cross_entropy(x[0], &[Some(1), None, Some(4), Some(0)]),
            2e-2,
        );
    }

    #[test]
    fn attn_pool_weights_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(rnd(&[2 * 5, 8], 13));
        let q = g.constant(rnd(&[8], 14));
        let p = g.attn_pool(x, q, &[5, 2], 5);
        let w = g.pool_weights(p).unwrap();
        assert!((w[..5].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((w[5..7].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(&w[7..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(&[1, 2], vec![0.9, 0.1]));
        let q = g.straight_through(x, Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        assert_eq!(g.value(q).data(), &[1.0, 0.0]);
        let l = g.sq_dist_to_const(q, &Tensor::from_vec(&[1, 2], vec![0.0, 0.0]));
        let grads = g.backward(l);
        assert_eq!(grads.node(x).unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let mut opt = AdamW::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..300 {
            let mut g = Graph::new();
            let x = g.param(&store, w);
            let l = g.sq_dist_to_const(x, &Tensor::zeros(&[3]));
            let grads = g.backward(l).into_params();
            opt.accumulate(grads);
            opt.step(&mut store);
        }
        assert!(store.get(w).data().iter().all(|v| v.abs() < 0.05));
    }
}
