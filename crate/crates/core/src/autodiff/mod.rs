//! Dense reverse-mode automatic differentiation.
//!
//! A [`Graph`] is assembled from builder calls, evaluated once with
//! [`Graph::forward`] and then differentiated from a scalar node with
//! [`Graph::backward`]. Learnable tensors live in a [`ParamStore`] outside
//! the graph so that a fresh graph can be built for every mini-batch while
//! the optimizer state persists.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::{lr_schedule, AdamState, LrSchedule};
pub use graph::{Gradients, Graph, NodeId, Wrt};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect())
    }

    /// Central-difference check of d(output)/d(input `x`) against backward.
    fn check_input_grad(
        build: impl Fn(&mut Graph, NodeId) -> NodeId,
        x: &Tensor,
        params: &ParamStore,
    ) -> f64 {
        let mut g = Graph::new();
        let xi = g.input("x", x.rows(), x.cols());
        let out = build(&mut g, xi);
        g.forward(params, &[("x", x)]).unwrap();
        let grads = g.backward(out, Wrt::Input("x")).unwrap();
        let analytic = grads
            .input("x")
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[k] += h;
            let mut minus = x.clone();
            minus.data_mut()[k] -= h;
            let fp = g.forward(params, &[("x", &plus)]).unwrap().item();
            let fm = g.forward(params, &[("x", &minus)]).unwrap().item();
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (fd - a).abs() / (1.0f64).max(fd.abs()).max(a.abs());
            worst = worst.max(err);
        }
        worst
    }

    fn check_param_grads(build: impl Fn(&mut Graph) -> NodeId, params: &ParamStore) -> f64 {
        let mut g = Graph::new();
        let out = build(&mut g);
        g.forward(params, &[]).unwrap();
        let grads = g.backward(out, Wrt::Params).unwrap().dense(params);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (pi, id) in params.ids().enumerate() {
            for k in 0..params.get(id).len() {
                let mut p = params.clone();
                p.get_mut(id).data_mut()[k] += h;
                let fp = g.forward(&p, &[]).unwrap().item();
                p.get_mut(id).data_mut()[k] -= 2.0 * h;
                let fm = g.forward(&p, &[]).unwrap().item();
                let fd = (fp - fm) / (2.0 * h);
                let a = grads[pi].data()[k];
                worst = worst.max((fd - a).abs() / (1.0f64).max(fd.abs()).max(a.abs()));
            }
        }
        worst
    }

    #[test]
    fn celu_of_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1);
        g.celu(x);
        let out = g.forward(&ParamStore::new(), &[("x", &Tensor::scalar(0.0))]).unwrap();
        assert_eq!(out.item(), 0.0);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let x = g.input("x", 2, 1);
        g.matmul(i, x);
        let x = Tensor::column(&[1.0, 2.0]);
        let out = g.forward(&ParamStore::new(), &[("x", &x)]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1);
        let y = g.mul(x, x);
        g.forward(&ParamStore::new(), &[("x", &Tensor::scalar(3.0))]).unwrap();
        let grads = g.backward(y, Wrt::Input("x")).unwrap();
        assert_eq!(grads.input("x").unwrap().item(), 6.0);
    }

    #[test]
    fn row_max_ties_go_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 3);
        let m = g.row_max(x);
        let s = g.sum(m);
        g.forward(&ParamStore::new(), &[("x", &Tensor::row(&[2.0, 2.0, 1.0]))])
            .unwrap();
        let grads = g.backward(s, Wrt::Input("x")).unwrap();
        assert_eq!(grads.input("x").unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1);
        let s = g.sum(x);
        assert!(matches!(g.backward(s, Wrt::All), Err(Error::NotEvaluated)));
    }

    #[test]
    fn non_scalar_output_fails() {
        let mut g = Graph::new();
        let x = g.input("x", 2, 1);
        let y = g.celu(x);
        g.forward(&ParamStore::new(), &[("x", &Tensor::column(&[1.0, 2.0]))])
            .unwrap();
        assert!(matches!(g.backward(y, Wrt::All), Err(Error::NonScalarOutput([2, 1]))));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input("a", 2, 3);
        let b = g.input("b", 2, 3);
        let m = g.matmul(a, b);
        let err = g
            .forward(
                &ParamStore::new(),
                &[("a", &Tensor::zeros(2, 3)), ("b", &Tensor::zeros(2, 3))],
            )
            .unwrap_err();
        match err {
            Error::Shape { node, op, .. } => {
                assert_eq!(node, m.index());
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_and_non_finite_inputs_rejected() {
        let mut g = Graph::new();
        g.input("x", 1, 1);
        let p = ParamStore::new();
        assert!(matches!(g.forward(&p, &[]), Err(Error::MissingInput(_))));
        assert!(matches!(
            g.forward(&p, &[("x", &Tensor::scalar(f64::INFINITY))]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            g.forward(&p, &[("x", &Tensor::zeros(2, 1))]),
            Err(Error::InputShape { .. })
        ));
    }

    #[test]
    fn nonneg_output_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 20, 7);
        let mut g = Graph::new();
        let xi = g.input("x", 20, 7);
        g.nonneg(xi);
        let out = g.forward(&ParamStore::new(), &[("x", &x)]).unwrap();
        assert!(out.data().iter().all(|&v| v >= 0.0));
    }

    /// Every primitive, 10 random configurations each (>= 100 cases total).
    #[test]
    fn primitives_match_finite_differences() {
        type Build = fn(&mut Graph, NodeId, &mut ChaCha8Rng) -> NodeId;
        let cases: Vec<(&str, [usize; 2], Build)> = vec![
            ("matmul", [3, 4], |g, x, r| {
                let w = g.constant(random(r, 4, 2));
                let y = g.matmul(x, w);
                g.sum(y)
            }),
            ("matmul_rhs", [4, 2], |g, x, r| {
                let w = g.constant(random(r, 3, 4));
                let y = g.matmul(w, x);
                let y = g.celu(y);
                g.sum(y)
            }),
            ("transpose", [3, 2], |g, x, r| {
                let t = g.transpose(x);
                let w = g.constant(random(r, 2, 3));
                let y = g.mul(t, w);
                g.sum(y)
            }),
            ("add_row", [3, 4], |g, x, r| {
                let b = g.constant(random(r, 1, 4));
                let c = g.col_mean(x);
                let y = g.add(x, c);
                let y = g.add(y, b);
                let y = g.mul(y, y);
                g.mean(y)
            }),
            ("sub_col", [3, 4], |g, x, _| {
                let m = g.row_max(x);
                let y = g.sub(x, m);
                let y = g.celu(y);
                g.sum(y)
            }),
            ("mul_scalar", [2, 3], |g, x, _| {
                let s = g.slice_cols(x, 0, 1);
                let s = g.slice_cols(s, 0, 1);
                let s = g.mean(s);
                let y = g.mul(x, s);
                let y = g.tanh(y);
                g.sum(y)
            }),
            ("scale_celu", [4, 3], |g, x, _| {
                let y = g.scale(x, 2.5);
                let y = g.celu(y);
                g.sum(y)
            }),
            ("sigmoid", [3, 3], |g, x, r| {
                let y = g.sigmoid(x);
                let w = g.constant(random(r, 3, 3));
                let y = g.mul(y, w);
                g.sum(y)
            }),
            ("row_max", [5, 4], |g, x, r| {
                let w = g.constant(random(r, 5, 4));
                let y = g.mul(x, w);
                let m = g.row_max(y);
                g.sum(m)
            }),
            ("group_sum", [6, 2], |g, x, r| {
                let y = g.group_sum(x, 3);
                let w = g.constant(random(r, 2, 2));
                let y = g.mul(y, w);
                let y = g.tanh(y);
                g.sum(y)
            }),
            ("concat_slice", [3, 2], |g, x, r| {
                let w = g.constant(random(r, 3, 3));
                let c = g.concat_cols(x, w);
                let c = g.mul(c, c);
                let s = g.slice_cols(c, 1, 4);
                let s = g.sigmoid(s);
                g.sum(s)
            }),
            ("nonneg", [4, 4], |g, x, r| {
                let w = g.constant(random(r, 4, 4));
                let y = g.mul(x, w);
                let y = g.nonneg(y);
                g.sum(y)
            }),
        ];

        let mut total = 0;
        for (name, [r, c], build) in cases {
            for seed in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + 7);
                let mut x = random(&mut rng, r, c);
                // Keep kinks of max/nonneg away from the finite-difference stencil.
                x.data_mut().iter_mut().for_each(|v| {
                    if v.abs() < 1e-3 {
                        *v += 0.01
                    }
                });
                let state = rng.clone();
                let err = check_input_grad(
                    |g, xi| {
                        let mut r = state.clone();
                        build(g, xi, &mut r)
                    },
                    &x,
                    &ParamStore::new(),
                );
                assert!(err < 1e-5, "{name} seed {seed}: relative error {err:e}");
                total += 1;
            }
        }
        assert!(total >= 100);
    }

    /// Straight-line loop implementation of a 3-layer CELU MLP.
    fn mlp_by_hand(ws: &[Tensor], bs: &[Tensor], x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        for (l, (w, b)) in ws.iter().zip(bs).enumerate() {
            let mut next = vec![0.0; w.cols()];
            for j in 0..w.cols() {
                let mut s = b.data()[j];
                for (i, hi) in h.iter().enumerate() {
                    s += hi * w.get(i, j);
                }
                next[j] = if l + 1 < ws.len() {
                    if s > 0.0 {
                        s
                    } else {
                        s.exp() - 1.0
                    }
                } else {
                    s
                };
            }
            h = next;
        }
        h[0]
    }

    fn mlp_store(seed: u64, dims: &[usize]) -> (ParamStore, Vec<(ParamId, ParamId)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let wi = store.add(format!("w{l}"), random(&mut rng, w[0], w[1]));
                let bi = store.add(format!("b{l}"), random(&mut rng, 1, w[1]));
                (wi, bi)
            })
            .collect();
        (store, layers)
    }

    fn mlp_graph(g: &mut Graph, x: NodeId, layers: &[(ParamId, ParamId)]) -> NodeId {
        let mut h = x;
        for (l, &(w, b)) in layers.iter().enumerate() {
            let w = g.param(w);
            let b = g.param(b);
            let z = g.matmul(h, w);
            h = g.add(z, b);
            if l + 1 < layers.len() {
                h = g.celu(h);
            }
        }
        h
    }

    #[test]
    fn mlp_forward_matches_hand_loops() {
        let dims = [3, 6, 5, 1];
        let (store, layers) = mlp_store(11, &dims);
        let ws: Vec<Tensor> = layers.iter().map(|l| store.get(l.0).clone()).collect();
        let bs: Vec<Tensor> = layers.iter().map(|l| store.get(l.1).clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, 1, 3);
        let mut g = Graph::new();
        let xi = g.input("x", 1, 3);
        mlp_graph(&mut g, xi, &layers);
        let out = g.forward(&store, &[("x", &x)]).unwrap().item();
        assert!((out - mlp_by_hand(&ws, &bs, x.data())).abs() < 1e-12);
        // Deterministic on re-evaluation.
        let again = g.forward(&store, &[("x", &x)]).unwrap().item();
        assert_eq!(out, again);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for seed in 0..10 {
            let (store, layers) = mlp_store(100 + seed, &[3, 5, 4, 1]);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = random(&mut rng, 4, 3);
            let err = check_param_grads(
                |g| {
                    let xi = g.constant(x.clone());
                    let h = mlp_graph(g, xi, &layers);
                    g.mean(h)
                },
                &store,
            );
            assert!(err < 1e-5, "seed {seed}: {err:e}");
            let err = check_input_grad(
                |g, xi| {
                    let h = mlp_graph(g, xi, &layers);
                    g.sum(h)
                },
                &x,
                &store,
            );
            assert!(err < 1e-5, "seed {seed}: {err:e}");
        }
    }
}
