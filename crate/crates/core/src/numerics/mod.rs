//! Dense `f64` tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
pub(crate) mod kernels;
mod ops;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use ops::{cross_entropy, cv_squared, gelu, layer_norm, masked_topk_softmax, matmul, softmax, top_k_indices};
pub use tape::{Fault, Tape, Var};
pub use tensor::Tensor;

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Central-difference check of every input of a scalar-valued graph.
    fn fd_check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let eval = |values: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
            let out = build(&mut tape, &vars);
            (tape, vars, out)
        };
        let (mut tape, vars, out) = eval(&inputs);
        tape.backward(out).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, v) in vars.iter().enumerate() {
            let analytic = tape.grad(*v).unwrap().to_vec();
            for j in 0..inputs[i].len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let (tp, _, op) = eval(&plus);
                let (tm, _, om) = eval(&minus);
                let numeric = (tp.value(op).item() - tm.value(om).item()) / (2.0 * h);
                worst = worst.max(relative_error(analytic[j], numeric));
            }
        }
        worst
    }

    /// Weighted sum so that every output coordinate contributes a distinct gradient.
    fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.shape(x).to_vec();
        let w = tape.constant(random(&shape, &mut rng));
        let p = tape.mul(x, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn matmul_values() {
        let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);

        let v = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(matmul(&m, &v).unwrap().data(), &[17.0, 39.0]);

        let z = matmul(&Tensor::zeros(&[2, 3]), &Tensor::full(&[3, 4], 7.0)).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        match err {
            Error::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn softmax_values() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![0.0, 3f64.ln()]));
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let shifted = Tensor::vector(x.data().iter().map(|v| v + 100.0).collect());
        for (a, b) in softmax(&x).data().iter().zip(softmax(&shifted).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_values() {
        let g = Tensor::ones(&[3]);
        let b = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::vector(vec![5.0; 3]), &g, &b, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let y = layer_norm(
            &Tensor::vector(vec![1.0, -1.0]),
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            1e-5,
        )
        .unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - expected).abs() < 1e-12);
        assert!((y.data()[0] - 0.99999).abs() < 1e-5);
        assert!((y.data()[1] + expected).abs() < 1e-12);

        let beta = Tensor::vector(vec![0.5, -0.25]);
        let y = layer_norm(&Tensor::vector(vec![3.0, 9.0]), &Tensor::zeros(&[2]), &beta, 1e-5).unwrap();
        assert_eq!(y.data(), beta.data());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(&Tensor::scalar(0.0)).item(), 0.0);
        // Φ(1) = 0.8413447460685429
        assert!((gelu(&Tensor::scalar(1.0)).item() - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(&Tensor::scalar(10.0)).item() - 10.0).abs() < 1e-6);
        assert!(gelu(&Tensor::scalar(-10.0)).item().abs() < 1e-6);
    }

    #[test]
    fn top_k_values() {
        assert_eq!(top_k_indices(&[3.0, 1.0, 2.0, 0.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(top_k_indices(&[0.4, -2.0, 9.0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert!(matches!(top_k_indices(&[1.0], 0), Err(Error::Argument(_))));
        assert!(matches!(top_k_indices(&[1.0], 2), Err(Error::Argument(_))));
    }

    #[test]
    fn masked_topk_softmax_values() {
        let (w, sel) = masked_topk_softmax(&[3.0, 1.0, 2.0, 0.0], 2).unwrap();
        assert_eq!(sel, vec![0, 2]);
        let e3 = 3f64.exp();
        let e2 = 2f64.exp();
        assert!((w[0] - e3 / (e3 + e2)).abs() < 1e-15);
        assert!((w[2] - e2 / (e3 + e2)).abs() < 1e-15);
        assert!((w[0] - 0.73106).abs() < 1e-5 && (w[2] - 0.26894).abs() < 1e-5);
        assert_eq!((w[1], w[3]), (0.0, 0.0));

        let x = [0.2, -0.7, 1.1, 0.0];
        let (w, _) = masked_topk_softmax(&x, 4).unwrap();
        let full = softmax(&Tensor::vector(x.to_vec()));
        assert_eq!(w.as_slice(), full.data());

        let (w, _) = masked_topk_softmax(&[1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(w, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!((cross_entropy(&uniform, &[0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let l = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let expected = (1.0 + (-2f64).exp()).ln();
        assert!((cross_entropy(&l, &[0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.126928).abs() < 1e-6);
        let confident = Tensor::from_rows(&[vec![60.0, 0.0]]).unwrap();
        assert!(cross_entropy(&confident, &[0]).unwrap() < 1e-20);
        assert!(matches!(cross_entropy(&uniform, &[2]), Err(Error::Argument(_))));
    }

    #[test]
    fn cv_squared_values() {
        assert_eq!(cv_squared(&[1.0, 1.0, 1.0], 1e-8), 0.0);
        assert!((cv_squared(&[2.0, 0.0], 0.0) - 1.0).abs() < 1e-15);
        assert!((cv_squared(&[2.0, 0.0], 1e-8) - 1.0).abs() < 1e-7);
        assert!((cv_squared(&[3.0, 1.0], 1e-8) - 0.25).abs() < 1e-8);
        assert_eq!(cv_squared(&[5.0], 1e-8), 0.0);
    }

    #[test]
    fn backward_basic_rules() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 3.0]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let data = vec![1.0, -2.0, 0.5];
        let x = tape.param(Tensor::vector(data.clone()));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap(), data.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.param(random(&[3, 4], &mut rng));
        let w = tape.param(random(&[4, 2], &mut rng));
        let y = tape.matmul(x, w).unwrap();
        let y = tape.gelu(y);
        let y = tape.softmax(y);
        let loss = weighted_sum(&mut tape, y, 9);
        tape.backward(loss).unwrap();
        let once: Vec<f64> = tape.grad(w).unwrap().to_vec();
        tape.backward(loss).unwrap();
        for (a, b) in once.iter().zip(tape.grad(w).unwrap()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn fd_matmul_batched_and_shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = fd_check(vec![random(&[2, 3, 4], &mut rng), random(&[4, 5], &mut rng)], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, c, 1)
        });
        assert!(err < 1e-4, "{err}");
        let err = fd_check(
            vec![random(&[2, 3, 4], &mut rng), random(&[2, 4, 3], &mut rng)],
            |t, v| {
                let c = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, c, 2)
            },
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fd_elementwise_and_structural() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = fd_check(
            vec![
                random(&[2, 3, 4], &mut rng),
                random(&[4], &mut rng),
                random(&[2, 4, 3], &mut rng),
            ],
            |t, v| {
                let x = t.add_bias(v[0], v[1]).unwrap();
                let x = t.gelu(x);
                let xt = t.transpose_last2(v[2]).unwrap();
                let x = t.add(x, xt).unwrap();
                let x = t.scale(x, 0.7);
                let x = t.reshape(x, &[2, 12]).unwrap();
                let x = t.softmax(x);
                weighted_sum(t, x, 3)
            },
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fd_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let err = fd_check(
            vec![
                random(&[3, 5], &mut rng),
                random(&[5], &mut rng),
                random(&[5], &mut rng),
            ],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                weighted_sum(t, y, 4)
            },
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fd_masked_topk_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = fd_check(vec![random(&[3, 6], &mut rng)], |t, v| {
            let y = t.masked_topk_softmax(v[0], 3).unwrap();
            weighted_sum(t, y, 5)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fd_concat_select_broadcast_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let err = fd_check(
            vec![
                random(&[2, 3, 2], &mut rng),
                random(&[2, 1, 2], &mut rng),
                random(&[1, 2], &mut rng),
            ],
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1).unwrap();
                let tok = t.broadcast_leading(v[2], 2);
                let c = t.concat(&[tok, c], 1).unwrap();
                let s = t.select(c, 1, 2).unwrap();
                let s = t.gelu(s);
                let lead = t.sum_leading(c).unwrap();
                let a = weighted_sum(t, s, 6);
                let b = weighted_sum(t, lead, 7);
                t.add(a, b).unwrap()
            },
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fd_cross_entropy_and_cv() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let err = fd_check(vec![random(&[4, 3], &mut rng)], |t, v| {
            let ce = t.cross_entropy(v[0], &[0, 2, 1, 1]).unwrap();
            let p = t.softmax(v[0]);
            let imp = t.sum_leading(p).unwrap();
            let cv = t.cv_squared(imp, 1e-8).unwrap();
            let cv = t.scale(cv, 0.23);
            t.add(ce, cv).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn masked_gradient_zero_off_support() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.5, 2.0, -1.0, 1.5, 0.0]));
        let y = tape.masked_topk_softmax(x, 2).unwrap();
        let loss = weighted_sum(&mut tape, y, 11);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(tape.selections(y).unwrap(), &[vec![1, 3]]);
        for i in [0, 2, 4] {
            assert_eq!(g[i], 0.0);
        }
        assert!(g[1] != 0.0 && g[3] != 0.0);
    }

    #[test]
    fn injected_fault_breaks_gradients() {
        let build = |fault| {
            let mut tape = Tape::new();
            tape.set_fault(fault);
            let x = tape.param(Tensor::vector(vec![0.3]));
            let y = tape.gelu(x);
            tape.backward(y).unwrap();
            tape.grad(x).unwrap()[0]
        };
        assert_ne!(build(None), build(Some(Fault::GeluBackward)));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let s = softmax(&Tensor::vector(v));
            prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| p > 0.0 && p <= 1.0));
        }

        #[test]
        fn masked_softmax_sums_to_one(
            v in prop::collection::vec(-50.0f64..50.0, 1..12),
            k in 1usize..12,
        ) {
            let k = k.min(v.len());
            let (w, sel) = masked_topk_softmax(&v, k).unwrap();
            prop_assert_eq!(sel.len(), k);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().enumerate().all(|(i, &x)| sel.contains(&i) || x == 0.0));
        }

        #[test]
        fn top_k_matches_stable_sort(
            v in prop::collection::vec(prop_oneof![(-3i32..3).prop_map(f64::from), -5.0f64..5.0], 1..15),
            k in 1usize..15,
        ) {
            let k = k.min(v.len());
            // brute force: stable descending sort by value
            let mut pairs: Vec<(usize, f64)> = v.iter().copied().enumerate().collect();
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let mut expected: Vec<usize> = pairs[..k].iter().map(|p| p.0).collect();
            expected.sort();
            prop_assert_eq!(top_k_indices(&v, k).unwrap(), expected);
        }

        #[test]
        fn layer_norm_standardizes(v in prop::collection::vec(-10.0f64..10.0, 4..16)) {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            prop_assume!(var > 10.0);
            let d = v.len();
            let y = layer_norm(&Tensor::vector(v), &Tensor::ones(&[d]), &Tensor::zeros(&[d]), 1e-5).unwrap();
            let m = y.data().iter().sum::<f64>() / d as f64;
            let s = y.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
