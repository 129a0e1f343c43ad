//! Minimal reverse-mode differentiable engine.
//!
//! Exactly the layers the models here need (conv1d, tconv1d, batch norm,
//! LeakyReLU, dense, flatten) plus softmax cross-entropy, the cosine
//! memory-addressing chain, Adam, and built-in finite-difference
//! verification. Reference precision is `f64` throughout; determinism is
//! part of the contract (same seed, same bits).

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, grads_snapshot, GradCheckReport};
pub use graph::{cosine_similarity, Gradients, Graph, NodeId};
pub use layers::{LayerSpec, Mode, Stack};
pub use optim::Adam;
pub use params::{accumulate_grads, apply_grads, bind, kaiming_uniform, unit_sphere_rows, ParamNodes, ParameterSet};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
        let n: usize = shape.iter().product();
        // keep values away from the LeakyReLU kink so finite differences stay clean
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Finite-difference check for a scalar loss built from one parameter set.
    fn check(
        params: &mut ParameterSet,
        build: impl Fn(&mut Graph, &ParamNodes) -> Result<NodeId>,
    ) -> GradCheckReport {
        let mut g = Graph::new();
        let nodes = bind(&mut g, params);
        let loss = build(&mut g, &nodes).unwrap();
        let grads = g.backward(loss).unwrap();
        apply_grads(params, &nodes, &grads);
        let analytic = grads_snapshot(params);
        finite_diff_check(params, &analytic, usize::MAX, 7, |p| {
            let mut g = Graph::new();
            let nodes = bind(&mut g, p);
            let loss = build(&mut g, &nodes)?;
            Ok(g.value(loss).item())
        })
        .unwrap()
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = g.leaf(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv1d_sliding_window_matches_hand_result() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv1d_shape_law() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 320]));
        let w = g.leaf(Tensor::zeros(&[4, 1, 4]));
        let b = g.leaf(Tensor::zeros(&[4]));
        let y = g.conv1d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 4, 160]);
    }

    #[test]
    fn conv1d_rejects_empty_output() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 2]));
        let w = g.leaf(Tensor::zeros(&[1, 1, 5]));
        let b = g.leaf(Tensor::zeros(&[1]));
        assert!(g.conv1d(x, w, b, 1, 0).is_err());
    }

    #[test]
    fn tconv1d_shape_inverts_conv() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 4, 160]));
        let w = g.leaf(Tensor::zeros(&[4, 1, 4]));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.tconv1d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 320]);
    }

    #[test]
    fn tconv1d_unit_weight_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 3], vec![5.0, -1.0, 2.0]).unwrap());
        let w = g.leaf(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.tconv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, -1.0, 2.0]);
    }

    #[test]
    fn conv_tconv_adjoint_identity() {
        // ⟨conv(a; W), b⟩ = ⟨a, tconv(b; W)⟩ with a shared weight tensor.
        let mut r = rng(3);
        // shapes chosen so the conv covers its input exactly and the
        // transposed output length matches `l`
        for &(l, k, s, p) in &[(5usize, 3usize, 1usize, 0usize), (8, 4, 2, 1), (7, 3, 2, 0)] {
            let ci = 2;
            let co = 3;
            let lo = (l + 2 * p - k) / s + 1;
            let a = random_tensor(&[1, ci, l], &mut r);
            let bt = random_tensor(&[1, co, lo], &mut r);
            let w = random_tensor(&[co, ci, k], &mut r);

            let mut g = Graph::new();
            let an = g.leaf(a.clone());
            let wn = g.leaf(w.clone());
            let zb = g.leaf(Tensor::zeros(&[co]));
            let conv = g.conv1d(an, wn, zb, s, p).unwrap();
            let lhs: f64 = g.value(conv).data().iter().zip(bt.data()).map(|(x, y)| x * y).sum();

            let mut g2 = Graph::new();
            let bn = g2.leaf(bt.clone());
            let wn2 = g2.leaf(w.clone());
            let zb2 = g2.leaf(Tensor::zeros(&[ci]));
            let tconv = g2.tconv1d(bn, wn2, zb2, s, p).unwrap();
            assert_eq!(g2.value(tconv).shape(), &[1, ci, l]);
            let rhs: f64 = g2.value(tconv).data().iter().zip(a.data()).map(|(x, y)| x * y).sum();

            assert!(
                (lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()),
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn dense_hand_case() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let w = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::zeros(&[2]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![4.0, -2.0]).unwrap());
        let id = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero_w = g.leaf(Tensor::zeros(&[2, 2]));
        let b0 = g.leaf(Tensor::zeros(&[2]));
        let bias = g.leaf(Tensor::new(vec![2], vec![7.0, 8.0]).unwrap());
        let y1 = g.dense(x, id, b0).unwrap();
        assert_eq!(g.value(y1).data(), &[4.0, -2.0]);
        let y2 = g.dense(x, zero_w, bias).unwrap();
        assert_eq!(g.value(y2).data(), &[7.0, 8.0]);
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3], vec![2.0, -2.0, -1.0]).unwrap());
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, -0.4, -0.2]);
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        let gx = grads.try_get(x).unwrap();
        assert_eq!(gx.data(), &[1.0, 0.2, 0.2]);
    }

    #[test]
    fn batchnorm_train_normalizes_per_channel() {
        let mut r = rng(11);
        let x = random_tensor(&[4, 3, 5], &mut r);
        let mut g = Graph::new();
        let xn = g.leaf(x);
        let gamma = g.leaf(Tensor::full(&[3], 1.0));
        let beta = g.leaf(Tensor::zeros(&[3]));
        let y = g.batchnorm_train(xn, gamma, beta).unwrap();
        let t = g.value(y);
        for c in 0..3 {
            let mut vals = Vec::new();
            for b in 0..4 {
                for l in 0..5 {
                    vals.push(t.at3(b, c, l));
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_eval_applies_running_stats_exactly() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2], vec![3.0, 5.0]).unwrap());
        let gamma = g.leaf(Tensor::new(vec![1], vec![2.0]).unwrap());
        let beta = g.leaf(Tensor::new(vec![1], vec![1.0]).unwrap());
        let rm = Tensor::new(vec![1], vec![1.0]).unwrap();
        let rv = Tensor::new(vec![1], vec![4.0]).unwrap();
        let y = g.batchnorm_eval(x, gamma, beta, &rm, &rv).unwrap();
        let istd = 1.0 / (4.0_f64 + 1e-5).sqrt();
        let expect = [(3.0 - 1.0) * istd * 2.0 + 1.0, (5.0 - 1.0) * istd * 2.0 + 1.0];
        for (a, e) in g.value(y).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cross_entropy_uniform_and_confident() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[1, 5]));
        let (loss, probs) = g.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!((g.value(loss).item() - 5.0_f64.ln()).abs() < 1e-12);
        assert!((probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let mut g = Graph::new();
        let mut t = Tensor::zeros(&[1, 3]);
        t.data_mut()[1] = 1e4;
        let logits = g.leaf(t);
        let (loss, _) = g.softmax_cross_entropy(logits, &[1]).unwrap();
        assert!(g.value(loss).item() < 1e-9);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        let mut r = rng(5);
        let logits = random_tensor(&[2, 4], &mut r);
        let mut g = Graph::new();
        let ln = g.leaf(logits.clone());
        let (loss, probs) = g.softmax_cross_entropy(ln, &[1, 3]).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.try_get(ln).unwrap();
        for b in 0..2 {
            for c in 0..4 {
                let onehot = if (b == 0 && c == 1) || (b == 1 && c == 3) { 1.0 } else { 0.0 };
                let expect = (probs.at2(b, c) - onehot) / 2.0;
                assert!((gx.at2(b, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_similarity_hand_cases() {
        let v = [1.0, 2.0, -3.0];
        assert!((cosine_similarity(&v, &v) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &neg) + 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]) - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn backward_on_freed_graph_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        // d(x²)/dx at 3 → 6
        assert_eq!(grads.try_get(x).unwrap().item(), 6.0);
        assert!(matches!(g.backward(y), Err(crate::Error::GraphFreed)));
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let c = g.leaf(Tensor::scalar(10.0));
        let y = g.mul(c, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.try_get(x).is_none());
        assert_eq!(grads.get(x, &Tensor::scalar(0.0)).item(), 0.0);
    }

    #[test]
    fn finite_check_mode_catches_nan() {
        let mut g = Graph::with_finite_checks();
        let x = g.leaf(Tensor::scalar(-1.0));
        // ln of a clamped negative is fine, but 0/0 via mul of inf is not
        let inf = g.leaf(Tensor::scalar(f64::INFINITY));
        let zero = g.leaf(Tensor::scalar(0.0));
        assert!(g.ln_clamped(x).is_ok());
        assert!(g.mul(inf, zero).is_err());
    }

    // ---- finite-difference sweeps per op ----

    #[test]
    fn fd_conv1d() {
        let mut r = rng(21);
        let mut params = ParameterSet::new();
        params.add("x", random_tensor(&[2, 2, 7], &mut r));
        params.add("w", random_tensor(&[3, 2, 3], &mut r));
        params.add("b", random_tensor(&[3], &mut r));
        let report = check(&mut params, |g, n| {
            let y = g.conv1d(n.ids[0], n.ids[1], n.ids[2], 2, 1)?;
            let sq = g.mul(y, y)?;
            g.sum_all(sq)
        });
        assert!(report.passes(1e-5), "conv1d fd: {report:?}");
    }

    #[test]
    fn fd_tconv1d() {
        let mut r = rng(22);
        let mut params = ParameterSet::new();
        params.add("x", random_tensor(&[2, 3, 4], &mut r));
        params.add("w", random_tensor(&[3, 2, 4], &mut r));
        params.add("b", random_tensor(&[2], &mut r));
        let report = check(&mut params, |g, n| {
            let y = g.tconv1d(n.ids[0], n.ids[1], n.ids[2], 2, 1)?;
            let sq = g.mul(y, y)?;
            g.sum_all(sq)
        });
        assert!(report.passes(1e-5), "tconv1d fd: {report:?}");
    }

    #[test]
    fn fd_batchnorm_train() {
        let mut r = rng(23);
        let mut params = ParameterSet::new();
        params.add("x", random_tensor(&[3, 2, 4], &mut r));
        params.add("gamma", random_tensor(&[2], &mut r));
        params.add("beta", random_tensor(&[2], &mut r));
        let report = check(&mut params, |g, n| {
            let y = g.batchnorm_train(n.ids[0], n.ids[1], n.ids[2])?;
            let w = g.leaf(Tensor::new(vec![3, 2, 4], (0..24).map(|i| 0.1 * i as f64).collect()).unwrap());
            let p = g.mul(y, w)?;
            g.sum_all(p)
        });
        assert!(report.passes(1e-5), "batchnorm fd: {report:?}");
    }

    #[test]
    fn fd_dense_leaky_chain() {
        let mut r = rng(24);
        let mut params = ParameterSet::new();
        params.add("x", random_tensor(&[2, 5], &mut r));
        params.add("w", random_tensor(&[4, 5], &mut r));
        params.add("b", random_tensor(&[4], &mut r));
        let report = check(&mut params, |g, n| {
            let y = g.dense(n.ids[0], n.ids[1], n.ids[2])?;
            let a = g.leaky_relu(y, 0.2)?;
            let sq = g.mul(a, a)?;
            g.sum_all(sq)
        });
        assert!(report.passes(1e-5), "dense fd: {report:?}");
    }

    #[test]
    fn fd_softmax_cross_entropy() {
        let mut r = rng(25);
        let mut params = ParameterSet::new();
        params.add("logits", random_tensor(&[3, 4], &mut r));
        let report = check(&mut params, |g, n| {
            let (loss, _) = g.softmax_cross_entropy(n.ids[0], &[0, 3, 2])?;
            Ok(loss)
        });
        assert!(report.passes(1e-5), "softmax_ce fd: {report:?}");
    }

    #[test]
    fn fd_memory_addressing_chain() {
        let mut r = rng(26);
        let mut params = ParameterSet::new();
        params.add("z", random_tensor(&[2, 3], &mut r));
        params.add("m", random_tensor(&[4, 3], &mut r));
        let report = check(&mut params, |g, n| {
            let cos = g.cosine_rows(n.ids[0], n.ids[1])?;
            let w = g.softmax_rows(cos)?;
            let zhat = g.matmul(w, n.ids[1])?;
            let sq = g.mul(zhat, zhat)?;
            g.sum_all(sq)
        });
        assert!(report.passes(1e-5), "memory chain fd: {report:?}");
    }

    #[test]
    fn fd_sigmoid_log_losses() {
        let mut r = rng(27);
        let mut params = ParameterSet::new();
        params.add("x", random_tensor(&[4, 2], &mut r));
        let report = check(&mut params, |g, n| {
            let s = g.sigmoid(n.ids[0])?;
            let l = g.ln_clamped(s)?;
            let neg = g.scale(l, -1.0)?;
            g.mean_all(neg)
        });
        assert!(report.passes(1e-5), "sigmoid/log fd: {report:?}");
    }

    #[test]
    fn fd_negative_control_detects_corrupted_gradient() {
        let mut r = rng(28);
        let mut params = ParameterSet::new();
        params.add("x", random_tensor(&[2, 3], &mut r));
        let mut g = Graph::new();
        let nodes = bind(&mut g, &params);
        let sq = g.mul(nodes.ids[0], nodes.ids[0]).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        apply_grads(&mut params, &nodes, &grads);
        let mut analytic = grads_snapshot(&params);
        analytic[0][1] += 0.5; // corrupt one coordinate
        let report = finite_diff_check(&mut params, &analytic, usize::MAX, 7, |p| {
            let mut g = Graph::new();
            let nodes = bind(&mut g, p);
            let sq = g.mul(nodes.ids[0], nodes.ids[0])?;
            let loss = g.sum_all(sq)?;
            Ok(g.value(loss).item())
        })
        .unwrap();
        assert!(!report.passes(1e-5), "corrupted gradient must fail the check");
    }

    #[test]
    fn linear_network_fd_error_is_machine_precision() {
        let mut r = rng(29);
        let mut params = ParameterSet::new();
        params.add("w", random_tensor(&[3, 3], &mut r));
        params.add("b", random_tensor(&[3], &mut r));
        let x = random_tensor(&[2, 3], &mut r);
        let report = {
            let build = |g: &mut Graph, n: &ParamNodes| -> Result<NodeId> {
                let xn = g.leaf(x.clone());
                let y = g.dense(xn, n.ids[0], n.ids[1])?;
                g.sum_all(y)
            };
            let mut g = Graph::new();
            let nodes = bind(&mut g, &params);
            let loss = build(&mut g, &nodes).unwrap();
            let grads = g.backward(loss).unwrap();
            apply_grads(&mut params, &nodes, &grads);
            let analytic = grads_snapshot(&params);
            finite_diff_check(&mut params, &analytic, usize::MAX, 7, |p| {
                let mut g = Graph::new();
                let nodes = bind(&mut g, p);
                let loss = build(&mut g, &nodes)?;
                Ok(g.value(loss).item())
            })
            .unwrap()
        };
        assert!(report.max_rel_err < 1e-9, "linear case should be near-exact: {report:?}");
    }

    #[test]
    fn seeded_training_is_bit_deterministic() {
        let run = || {
            let mut r = rng(99);
            let mut params = ParameterSet::new();
            params.add("w", random_tensor(&[2, 2], &mut r));
            params.add("b", random_tensor(&[2], &mut r));
            let mut opt = Adam::new(1e-2);
            let x = random_tensor(&[3, 2], &mut r);
            for _ in 0..10 {
                let mut g = Graph::new();
                let nodes = bind(&mut g, &params);
                let xn = g.leaf(x.clone());
                let y = g.dense(xn, nodes.ids[0], nodes.ids[1]).unwrap();
                let sq = g.mul(y, y).unwrap();
                let loss = g.sum_all(sq).unwrap();
                let grads = g.backward(loss).unwrap();
                apply_grads(&mut params, &nodes, &grads);
                opt.step(&mut params);
            }
            params
        };
        let a = run();
        let b = run();
        for i in 0..a.len() {
            for (x, y) in a.value(i).data().iter().zip(b.value(i).data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
