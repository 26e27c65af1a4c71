use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_params, random_connectomes, GradcheckOptions};
use crate::numerics::{Tape, Tensor};

fn toy() -> ModelConfig {
    GradcheckOptions::toy().model
}

fn permute_tokens(x: &Tensor, perm: &[usize]) -> Tensor {
    // x[B, N, N]: permute rows and columns consistently
    let s = x.shape();
    let (b, n) = (s[0], s[1]);
    let mut data = vec![0.0; x.len()];
    for bi in 0..b {
        for i in 0..n {
            for j in 0..n {
                data[(bi * n + i) * n + j] = x.at(&[bi, perm[i], perm[j]]);
            }
        }
    }
    Tensor::new(s.to_vec(), data).unwrap()
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    // x[B, N, D]: permute token axis only
    let s = x.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(x.len());
    for bi in 0..b {
        for &p in perm {
            let start = (bi * n + p) * d;
            data.extend_from_slice(&x.data()[start..start + d]);
        }
    }
    Tensor::new(s.to_vec(), data).unwrap()
}

fn random_perm(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < tol, "{x} vs {y}");
    }
}

fn embed_only(params: &ModelParams, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, params);
    let xv = tape.constant(x.clone());
    let z = layers::embed(&mut tape, xv, &p.embed, &p.embed_norm, 1e-5).unwrap();
    tape.value(z).clone()
}

#[test]
fn embed_shape_and_equivariance() {
    let cfg = toy();
    let params = init_params(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_connectomes(2, 6, &mut rng);
    let z = embed_only(&params, &x);
    assert_eq!(z.shape(), &[2, 6, 8]);

    // permuting token rows (only) of X permutes Z rows
    let perm = random_perm(6, &mut rng);
    let zx = embed_only(&params, &permute_rows(&x, &perm));
    assert_close(&zx, &permute_rows(&z, &perm), 1e-12);

    let mut dup = x.clone();
    let row0: Vec<f64> = dup.data()[..6].to_vec();
    dup.data_mut()[6..12].copy_from_slice(&row0);
    let zd = embed_only(&params, &dup);
    assert_eq!(zd.row(0), zd.row(1));
}

#[test]
fn embed_rejects_wrong_width() {
    let params = init_params(&toy(), 1).unwrap();
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, &params);
    let x = tape.constant(Tensor::zeros(&[1, 6, 5]));
    assert!(layers::embed(&mut tape, x, &p.embed, &p.embed_norm, 1e-5).is_err());
}

#[test]
fn attention_rows_are_stochastic_and_single_token_is_trivial() {
    let cfg = toy();
    let params = init_params(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, &params);
    let x = tape.constant(random_connectomes(2, 8, &mut rng).reshaped(&[2, 8, 8]).unwrap());
    let (out, attn) = layers::multi_head_attention(&mut tape, x, &p.layers[0]).unwrap();
    assert_eq!(tape.shape(out), &[2, 8, 8]);
    for a in attn {
        for row in tape.value(a).rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    // one token: attention [1], output = V·W_O
    let token = Tensor::new(vec![1, 1, 8], (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, &params);
    let x = tape.constant(token.clone());
    let (out, attn) = layers::multi_head_attention(&mut tape, x, &p.layers[0]).unwrap();
    for a in &attn {
        assert_eq!(tape.value(*a).data(), &[1.0]);
    }
    let layer = &params.layers[0];
    let t2 = token.reshaped(&[1, 8]).unwrap();
    let vs: Vec<f64> = layer
        .heads
        .iter()
        .flat_map(|h| crate::numerics::matmul(&t2, &h.w_v).unwrap().into_data())
        .collect();
    let expected = crate::numerics::matmul(&Tensor::new(vec![1, 8], vs).unwrap(), &layer.w_o).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn encode(params: &ModelParams, x: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, params);
    let xv = tape.constant(x.clone());
    let (h, attn) = layers::encoder_layer(&mut tape, xv, &p.layers[0], 1e-5).unwrap();
    (tape.value(h).clone(), tape.value(attn[0]).clone())
}

#[test]
fn encoder_layer_is_permutation_equivariant() {
    let cfg = toy();
    let params = init_params(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_connectomes(2, 8, &mut rng);
    let (h, attn) = encode(&params, &x);
    assert_eq!(h.shape(), x.shape());
    for _ in 0..5 {
        let perm = random_perm(8, &mut rng);
        let (hp, attn_p) = encode(&params, &permute_rows(&x, &perm));
        assert_close(&hp, &permute_rows(&h, &perm), 1e-10);
        // attention conjugated by P
        assert_close(&attn_p, &permute_tokens(&attn, &perm), 1e-12);
    }
}

#[test]
fn encoder_layer_gradients_match_finite_differences() {
    // N=4, d=8: check d(sum of weighted output)/d(params) and d/dX
    let cfg = ModelConfig { n_rois: 4, ..toy() };
    let params = init_params(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::new(vec![2, 4, 8], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let weights = Tensor::new(vec![2, 4, 8], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let layer_of = |p: &ModelParams| p.layers[0].clone();

    let eval = |layer: &EncoderLayer<Tensor>, x: &Tensor, grads: bool| {
        let mut tape = Tape::new();
        let bound = EncoderLayer {
            heads: layer
                .heads
                .iter()
                .map(|h| Head {
                    w_q: tape.leaf(h.w_q.clone().with_requires_grad(grads)),
                    w_k: tape.leaf(h.w_k.clone().with_requires_grad(grads)),
                    w_v: tape.leaf(h.w_v.clone().with_requires_grad(grads)),
                })
                .collect(),
            w_o: tape.leaf(layer.w_o.clone().with_requires_grad(grads)),
            attn_norm: Norm {
                gamma: tape.leaf(layer.attn_norm.gamma.clone().with_requires_grad(grads)),
                beta: tape.leaf(layer.attn_norm.beta.clone().with_requires_grad(grads)),
            },
            ffn: Mlp {
                hidden: Linear {
                    weight: tape.leaf(layer.ffn.hidden.weight.clone().with_requires_grad(grads)),
                    bias: tape.leaf(layer.ffn.hidden.bias.clone().with_requires_grad(grads)),
                },
                output: Linear {
                    weight: tape.leaf(layer.ffn.output.weight.clone().with_requires_grad(grads)),
                    bias: tape.leaf(layer.ffn.output.bias.clone().with_requires_grad(grads)),
                },
            },
            ffn_norm: Norm {
                gamma: tape.leaf(layer.ffn_norm.gamma.clone().with_requires_grad(grads)),
                beta: tape.leaf(layer.ffn_norm.beta.clone().with_requires_grad(grads)),
            },
        };
        let xv = tape.leaf(x.clone().with_requires_grad(grads));
        let (h, _) = layers::encoder_layer(&mut tape, xv, &bound, 1e-5).unwrap();
        let w = tape.constant(weights.clone());
        let p = tape.mul(h, w).unwrap();
        let s = tape.sum(p);
        if grads {
            tape.backward(s).unwrap();
        }
        let value = tape.value(s).item();
        let gx = tape.grad(xv).map(<[f64]>::to_vec);
        let gw = tape.grad(bound.heads[0].w_q).map(<[f64]>::to_vec);
        let go = tape.grad(bound.ffn.hidden.weight).map(<[f64]>::to_vec);
        (value, gx, gw, go)
    };

    let layer = layer_of(&params);
    let (_, gx, gq, gffn) = eval(&layer, &x, true);
    let (gx, gq, gffn) = (gx.unwrap(), gq.unwrap(), gffn.unwrap());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[j] += h;
        let mut xm = x.clone();
        xm.data_mut()[j] -= h;
        let num = (eval(&layer, &xp, false).0 - eval(&layer, &xm, false).0) / (2.0 * h);
        worst = worst.max(crate::numerics::relative_error(gx[j], num));
    }
    for j in 0..layer.heads[0].w_q.len() {
        let mut lp = layer.clone();
        lp.heads[0].w_q.data_mut()[j] += h;
        let mut lm = layer.clone();
        lm.heads[0].w_q.data_mut()[j] -= h;
        let num = (eval(&lp, &x, false).0 - eval(&lm, &x, false).0) / (2.0 * h);
        worst = worst.max(crate::numerics::relative_error(gq[j], num));
    }
    for j in 0..layer.ffn.hidden.weight.len() {
        let mut lp = layer.clone();
        lp.ffn.hidden.weight.data_mut()[j] += h;
        let mut lm = layer.clone();
        lm.ffn.hidden.weight.data_mut()[j] -= h;
        let num = (eval(&lp, &x, false).0 - eval(&lm, &x, false).0) / (2.0 * h);
        worst = worst.max(crate::numerics::relative_error(gffn[j], num));
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn reduce_is_shared_per_token() {
    let cfg = toy();
    let params = init_params(&cfg, 5).unwrap();
    let DecoderParams::Moe { reduce, .. } = &params.decoder else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut h = Tensor::new(vec![1, 6, 8], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let row: Vec<f64> = h.row(0).to_vec();
    h.data_mut()[8..16].copy_from_slice(&row);
    let run = |h: &Tensor| {
        let mut tape = Tape::new();
        let mut c = |t: &Tensor| tape.constant(t.clone());
        let r = Mlp {
            hidden: Linear {
                weight: c(&reduce.hidden.weight),
                bias: c(&reduce.hidden.bias),
            },
            output: Linear {
                weight: c(&reduce.output.weight),
                bias: c(&reduce.output.bias),
            },
        };
        let hv = tape.constant(h.clone());
        let out = layers::mlp(&mut tape, hv, &r).unwrap();
        tape.value(out).clone()
    };
    let out = run(&h);
    assert_eq!(out.shape(), &[1, 6, 4]);
    assert_eq!(out.row(0), out.row(1));
    let perm = random_perm(6, &mut rng);
    assert_close(&run(&permute_rows(&h, &perm)), &permute_rows(&out, &perm), 1e-14);
}

#[test]
fn pool_top_k_hand_example() {
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::new(vec![1, 4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 2.0, 5.0, 5.0]).unwrap());
    let logits = tape.constant(Tensor::new(vec![1, 4], vec![3.0, 1.0, 2.0, 0.0]).unwrap());
    let (z, w) = layers::pool_top_k(&mut tape, h, logits, 2).unwrap();
    let e3 = 3f64.exp();
    let e2 = 2f64.exp();
    let (w0, w2) = (e3 / (e3 + e2), e2 / (e3 + e2));
    let z = tape.value(z).data();
    assert!((z[0] - w0).abs() < 1e-15 && (z[1] - 2.0 * w2).abs() < 1e-15);
    assert!((z[0] - 0.73106).abs() < 1e-5 && (z[1] - 0.53788).abs() < 1e-5);
    assert_eq!(tape.selections(w).unwrap(), &[vec![0, 2]]);
}

#[test]
fn pool_top_k_degenerate_cases() {
    let tokens = Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5]).unwrap();
    // all-equal logits, k = N: mean
    let mut tape = Tape::new();
    let h = tape.constant(tokens.clone());
    let l = tape.constant(Tensor::new(vec![1, 3], vec![0.7; 3]).unwrap());
    let (z, _) = layers::pool_top_k(&mut tape, h, l, 3).unwrap();
    let z = tape.value(z).data();
    assert!((z[0] - 1.0).abs() < 1e-15 && (z[1] - 6.5 / 3.0).abs() < 1e-15);
    // k = 1: exactly the arg-max token
    let mut tape = Tape::new();
    let h = tape.constant(tokens);
    let l = tape.constant(Tensor::new(vec![1, 3], vec![0.1, 2.0, -1.0]).unwrap());
    let (z, _) = layers::pool_top_k(&mut tape, h, l, 1).unwrap();
    assert_eq!(tape.value(z).data(), &[3.0, 4.0]);
}

#[test]
fn expert_classify_zero_weights_gives_bias() {
    let mut tape = Tape::new();
    let classifier = Mlp {
        hidden: Linear {
            weight: tape.constant(Tensor::zeros(&[3, 5])),
            bias: tape.constant(Tensor::vector(vec![0.3; 5])),
        },
        output: Linear {
            weight: tape.constant(Tensor::zeros(&[5, 2])),
            bias: tape.constant(Tensor::vector(vec![0.25, -1.5])),
        },
    };
    let z = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap());
    let y = layers::expert_classify(&mut tape, z, &classifier).unwrap();
    assert_eq!(tape.shape(y), &[2, 2]);
    assert_eq!(tape.value(y).data(), &[0.25, -1.5, 0.25, -1.5]);
}

#[test]
fn gate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = Tensor::new(vec![3, 6, 4], (0..72).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let build = |tape: &mut Tape, experts: usize, zero: bool, rng: &mut ChaCha8Rng| {
        let mut t = |s: &[usize]| {
            let n: usize = s.iter().product();
            let data = (0..n)
                .map(|_| if zero { 0.0 } else { rng.random_range(-0.5..0.5) })
                .collect();
            tape.constant(Tensor::new(s.to_vec(), data).unwrap())
        };
        Mlp {
            hidden: Linear {
                weight: t(&[24, 5]),
                bias: t(&[5]),
            },
            output: Linear {
                weight: t(&[5, experts]),
                bias: t(&[experts]),
            },
        }
    };
    // E = 1
    let mut tape = Tape::new();
    let g = build(&mut tape, 1, false, &mut rng);
    let hv = tape.constant(h.clone());
    let (v, _, pi) = layers::gate(&mut tape, hv, &g).unwrap();
    assert_eq!(tape.value(pi).data(), &[1.0, 1.0, 1.0]);
    // ROI-major flatten
    assert_eq!(tape.value(v).data(), h.data());
    // zero weights: uniform
    let mut tape = Tape::new();
    let g = build(&mut tape, 4, true, &mut rng);
    let hv = tape.constant(h.clone());
    let (_, _, pi) = layers::gate(&mut tape, hv, &g).unwrap();
    assert!(tape.value(pi).data().iter().all(|&p| p == 0.25));
    // random: simplex
    let mut tape = Tape::new();
    let g = build(&mut tape, 3, false, &mut rng);
    let hv = tape.constant(h);
    let (_, _, pi) = layers::gate(&mut tape, hv, &g).unwrap();
    for row in tape.value(pi).rows() {
        assert!(row.iter().all(|&p| p > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn combine_cases() {
    let run = |pi: Vec<f64>, ys: Vec<Vec<f64>>| {
        let mut tape = Tape::new();
        let e = ys.len();
        let p = tape.constant(Tensor::new(vec![1, e], pi).unwrap());
        let outs: Vec<_> = ys
            .into_iter()
            .map(|y| tape.constant(Tensor::new(vec![1, y.len()], y).unwrap()))
            .collect();
        let y = layers::combine(&mut tape, p, &outs).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(
        run(vec![0.25, 0.75], vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        vec![0.25, 0.75]
    );
    assert_eq!(
        run(
            vec![0.0, 1.0, 0.0],
            vec![vec![1.0, 2.0], vec![-3.0, 4.0], vec![9.0, 9.0]]
        ),
        vec![-3.0, 4.0]
    );
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
    let y = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(layers::combine(&mut tape, p, &[y]).is_err());
}

fn check_trace_invariants(trace: &ForwardTrace, cfg: &ModelConfig) {
    for a in &trace.attention {
        for row in a.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let moe = trace.moe.as_ref().unwrap();
    for row in moe.gate_probs.rows() {
        assert!(row.iter().all(|&p| p > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for (e, ex) in moe.experts.iter().enumerate() {
        for (b, row) in ex.weights.rows().enumerate() {
            assert_eq!(row.iter().filter(|&&w| w != 0.0).count(), cfg.k_per_expert[e]);
            assert_eq!(ex.selected[b].len(), cfg.k_per_expert[e]);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let c = cfg.num_classes;
    for b in 0..trace.batch_size() {
        for class in 0..c {
            let vals: Vec<f64> = moe.experts.iter().map(|e| e.output.at(&[b, class])).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let y = trace.logits.at(&[b, class]);
            assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }
    }
}

#[test]
fn forward_shapes_and_invariants() {
    let cfg = toy();
    let model = Model::init(ModelConfig { seed: 8, ..cfg.clone() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_connectomes(3, 6, &mut rng);
    let (y, trace) = model.forward(&x).unwrap();
    assert_eq!(y.shape(), &[3, 2]);
    assert_eq!(trace.attention[0].shape(), &[3, 2, 6, 6]);
    let moe = trace.moe.as_ref().unwrap();
    assert_eq!(moe.reduced.shape(), &[3, 6, 4]);
    assert_eq!(moe.gate_input.as_ref().unwrap().shape(), &[3, 24]);
    assert_eq!(moe.gate_logits.as_ref().unwrap().shape(), &[3, 2]);
    assert_eq!(moe.experts[1].pooled.shape(), &[3, 4]);
    check_trace_invariants(&trace, &cfg);
    assert_eq!(model.logits(&x).unwrap(), y);
}

#[test]
fn duplicated_subject_gets_identical_outputs() {
    let model = Model::init(toy()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_connectomes(2, 6, &mut rng);
    let mut data = x.data().to_vec();
    data.extend_from_slice(&x.data()[..36]);
    let x3 = Tensor::new(vec![3, 6, 6], data).unwrap();
    let y = model.logits(&x3).unwrap();
    assert_eq!(y.row(0), y.row(2));
    let y2 = model.logits(&x).unwrap();
    assert_eq!(y2.row(0), y.row(0));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let report = crate::gradcheck::run(&GradcheckOptions::toy()).unwrap();
    assert!(report.passed(), "{report:?}");
    let groups: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
    for g in [
        "embed",
        "embed_norm",
        "encoder0",
        "reduce",
        "expert0",
        "expert1",
        "gate",
    ] {
        assert!(groups.contains(&g), "missing {g}");
    }
}

#[test]
fn gradients_agree_across_seeds() {
    // floor above the quotient's roundoff so near-zero entries do not dominate
    for seed in 0..6 {
        let options = GradcheckOptions {
            seed,
            floor: 1e-6,
            ..GradcheckOptions::toy()
        };
        let report = crate::gradcheck::run(&options).unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn injected_fault_is_detected() {
    let options = GradcheckOptions {
        fault: Some(crate::numerics::Fault::GeluBackward),
        ..GradcheckOptions::toy()
    };
    let report = crate::gradcheck::run(&options).unwrap();
    assert!(!report.passed());
    assert!(report.max_relative_error() > 1e-3);
}

#[test]
fn cv_squared_values() {
    assert_eq!(cv_squared(&[1.0, 1.0, 1.0], 1e-8), 0.0);
    assert!((cv_squared(&[2.0, 0.0], 1e-8) - 1.0).abs() < 1e-7);
    assert!((cv_squared(&[3.0, 1.0], 1e-8) - 0.25).abs() < 1e-8);
}

#[test]
fn total_loss_cases() {
    let logits = Tensor::new(vec![2, 2], vec![0.3, -0.2, 1.0, 0.5]).unwrap();
    let labels = [0, 1];
    let ce = crate::numerics::cross_entropy(&logits, &labels).unwrap();
    let run = |pi: Vec<f64>, lambda: f64| {
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let p = tape.constant(Tensor::new(vec![2, 2], pi).unwrap());
        let loss = total_loss(&mut tape, l, &labels, Some(p), lambda, 1e-8).unwrap();
        tape.value(loss.total).item()
    };
    assert_eq!(run(vec![0.9, 0.1, 0.2, 0.8], 0.0), ce);
    assert_eq!(run(vec![0.5, 0.5, 0.5, 0.5], 0.23), ce);
    let collapsed = run(vec![1.0, 0.0, 1.0, 0.0], 0.23);
    let expected = ce + 0.23 * cv_squared(&[2.0, 0.0], 1e-8);
    assert!((collapsed - expected).abs() < 1e-15);
    assert!((collapsed - ce - 0.23).abs() < 1e-8);
}

fn cls_config() -> ModelConfig {
    ModelConfig {
        decoder: Decoder::Cls,
        ..toy()
    }
}

#[test]
fn cls_decoder_sees_extra_token() {
    let cfg = cls_config();
    let params = init_params(&cfg, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_connectomes(2, 6, &mut rng);
    let (y, trace) = cls_decoder_forward(&x, &params, &cfg).unwrap();
    assert_eq!(y.shape(), &[2, 2]);
    assert_eq!(trace.attention[0].shape(), &[2, 2, 7, 7]);
    assert!(trace.moe.is_none());
    for b in 0..2 {
        for h in 0..2 {
            let row: f64 = (0..7).map(|j| trace.attention[0].at(&[b, h, 0, j])).sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }
    assert!(forward(&x, &init_params(&toy(), 0).unwrap(), &toy()).is_ok());
    assert!(cls_decoder_forward(&x, &init_params(&toy(), 0).unwrap(), &toy()).is_err());
}

#[test]
fn cls_decoder_gradients() {
    let cfg = cls_config();
    let params = init_params(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_connectomes(3, 6, &mut rng);
    let report = check_params(&cfg, &params, &x, &[0, 1, 1], 1e-5, 1e-4, 1e-8, None).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.groups.iter().any(|g| g.group == "cls_token"));
}

fn single_config() -> ModelConfig {
    ModelConfig {
        num_experts: 1,
        k_per_expert: vec![2],
        ..toy()
    }
}

#[test]
fn single_expert_matches_forward() {
    let cfg = single_config();
    let params = init_params(&cfg, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_connectomes(3, 6, &mut rng);
    let (a, trace) = single_expert_forward(&x, &params, &cfg).unwrap();
    let (b, _) = forward(&x, &params, &cfg).unwrap();
    assert_eq!(a, b);
    let moe = trace.moe.unwrap();
    assert!(moe.gate_probs.data().iter().all(|&p| p == 1.0));
    assert_eq!(moe.experts[0].output, a);
    for row in moe.experts[0].weights.rows() {
        assert_eq!(row.iter().filter(|&&w| w != 0.0).count(), 2);
    }
    assert!(single_expert_forward(&x, &init_params(&toy(), 0).unwrap(), &toy()).is_err());
}

#[test]
fn single_expert_gradients() {
    let cfg = single_config();
    let params = init_params(&cfg, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_connectomes(3, 6, &mut rng);
    let report = check_params(&cfg, &params, &x, &[1, 0, 1], 1e-5, 1e-4, 1e-8, None).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = Model::init(ModelConfig { seed: 14, ..toy() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_model(&model, RngState::default(), &path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded, model);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_connectomes(2, 6, &mut rng);
    let a = model.logits(&x).unwrap();
    let b = loaded.logits(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn checkpoint_rejects_mismatched_shapes() {
    let model = Model::init(toy()).unwrap();
    let mut ckpt = Checkpoint::from_model(&model, RngState::default());
    ckpt.config.reduced_dim = 3;
    assert!(ckpt.clone().into_model().is_err());
    let mut ckpt = Checkpoint::from_model(&model, RngState::default());
    ckpt.params.remove("gate.output.bias");
    assert!(ckpt.into_model().is_err());
}
