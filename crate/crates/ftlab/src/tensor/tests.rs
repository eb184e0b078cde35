use super::*;
use crate::rng::{rng_for, Stream};
use proptest::prelude::*;

const LN2: f64 = std::f64::consts::LN_2;

fn t2(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let i2 = t2(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let a = t2(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let out = i2.matmul(&a).unwrap();
    assert_eq!(out.data_clone(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_zero() {
    let i2 = t2(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let z = Tensor::zeros(&[2, 2]);
    assert_eq!(i2.matmul(&z).unwrap().data_clone(), vec![0.0; 4]);
}

#[test]
fn matmul_hand_case() {
    // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
    let a = t2(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t2(&[2, 1], &[5.0, 6.0]);
    assert_eq!(a.matmul(&b).unwrap().data_clone(), vec![17.0, 39.0]);
}

#[test]
fn matmul_dimension_mismatch_is_shape_error() {
    let a = t2(&[2, 3], &[0.0; 6]);
    let b = t2(&[2, 2], &[0.0; 4]);
    assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
}

#[test]
fn log_softmax_uniform_rows() {
    let x = t2(&[1, 2], &[0.0, 0.0]);
    let out = x.log_softmax().unwrap();
    for v in out.data_clone() {
        assert!((v + LN2).abs() < 1e-12);
    }
}

#[test]
fn log_softmax_stable_under_large_equal_logits() {
    let x = t2(&[1, 2], &[1000.0, 1000.0]);
    let out = x.log_softmax().unwrap();
    for v in out.data_clone() {
        assert!((v + LN2).abs() < 1e-12);
    }
}

#[test]
fn log_softmax_hand_case() {
    // (1, 0) -> (ln(e/(e+1)), ln(1/(e+1)))
    let x = t2(&[1, 2], &[1.0, 0.0]);
    let out = x.log_softmax().unwrap().data_clone();
    assert!((out[0] - (-0.313_261_687_518_222_8)).abs() < 1e-12);
    assert!((out[1] - (-1.313_261_687_518_222_8)).abs() < 1e-12);
}

#[test]
fn cross_entropy_uniform_logits() {
    let logits = t2(&[1, 2], &[0.0, 0.0]);
    let loss = logits.cross_entropy(&[0]).unwrap().item().unwrap();
    assert!((loss - LN2).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_correct() {
    let logits = t2(&[1, 2], &[30.0, -30.0]);
    let loss = logits.cross_entropy(&[0]).unwrap().item().unwrap();
    assert!(loss < 1e-12);
}

#[test]
fn cross_entropy_batch_mean() {
    // rows (0,0) and (1,0), labels (0,1): mean(ln 2, 1.3132616875...)
    let logits = t2(&[2, 2], &[0.0, 0.0, 1.0, 0.0]);
    let loss = logits.cross_entropy(&[0, 1]).unwrap().item().unwrap();
    let expected = (LN2 + 1.313_261_687_518_222_8) / 2.0;
    assert!((loss - expected).abs() < 1e-12, "loss {loss} vs {expected}");
}

#[test]
fn cross_entropy_label_out_of_range() {
    let logits = t2(&[1, 2], &[0.0, 0.0]);
    assert!(matches!(logits.cross_entropy(&[2]), Err(Error::Index(_))));
}

#[test]
fn backward_polynomial() {
    // loss = sum(x * x) at x = 3 -> grad 2x = 6
    let x = Tensor::param(&[1], vec![3.0]).unwrap();
    let loss = x.mul(&x).unwrap().sum().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0]);
}

#[test]
fn backward_bilinear() {
    let x = Tensor::param(&[1], vec![2.0]).unwrap();
    let y = Tensor::param(&[1], vec![5.0]).unwrap();
    let loss = x.mul(&y).unwrap().sum().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![5.0]);
    assert_eq!(y.grad().unwrap(), vec![2.0]);
}

#[test]
fn backward_requires_scalar() {
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let y = x.scale(2.0).unwrap();
    assert!(matches!(y.backward(), Err(Error::Contract(_))));
}

#[test]
fn backward_twice_doubles_grads_exactly() {
    let mut rng = rng_for(0, Stream::Init, 0);
    let x = Tensor::randn(&[3, 3], 1.0, &mut rng);
    x.set_requires_grad(true);
    let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
    w.set_requires_grad(true);
    let loss = x.matmul(&w).unwrap().gelu().unwrap().sum().unwrap();
    loss.backward().unwrap();
    let g1 = x.grad().unwrap();
    loss.backward().unwrap();
    let g2 = x.grad().unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(*b, 2.0 * *a);
    }
}

#[test]
fn zero_grad_resets_accumulation() {
    let x = Tensor::param(&[1], vec![3.0]).unwrap();
    let loss = x.mul(&x).unwrap().sum().unwrap();
    loss.backward().unwrap();
    x.zero_grad();
    assert!(x.grad().is_none());
    let loss2 = x.mul(&x).unwrap().sum().unwrap();
    loss2.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0]);
}

#[test]
fn grads_accumulate_across_shared_use() {
    // z = sum(x) + sum(x) -> dz/dx = 2
    let x = Tensor::param(&[2], vec![1.0, 1.0]).unwrap();
    let loss = x.sum().unwrap().add(&x.sum().unwrap()).unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn overflow_is_reported_as_non_finite() {
    let x = t2(&[1], &[1e308]);
    assert!(matches!(
        x.scale(10.0),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn finite_diff_identity_function() {
    let x = t2(&[2, 2], &[0.3, -0.7, 1.1, 0.4]);
    let err = finite_diff_check(|t| t.sum(), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "rel error {err}");
}

#[test]
fn finite_diff_matmul_chain_depth_three() {
    for seed in 0..10u64 {
        let mut rng = rng_for(seed, Stream::Init, 0);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w1 = Tensor::randn(&[4, 5], 0.5, &mut rng);
        let w2 = Tensor::randn(&[5, 4], 0.5, &mut rng);
        let w3 = Tensor::randn(&[4, 2], 0.5, &mut rng);
        let err = finite_diff_check(
            |t| t.matmul(&w1)?.matmul(&w2)?.matmul(&w3)?.sum(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: rel error {err}");
    }
}

/// Every primitive op's analytic gradient vs central differences, 10 seeds.
#[test]
fn finite_diff_all_primitives() {
    type Builder = (
        &'static str,
        fn(&Tensor, &mut crate::rng::Rng) -> crate::Result<Tensor>,
    );
    let cases: Vec<Builder> = vec![
        ("add", |x, rng| {
            let other = Tensor::randn(&x.shape(), 1.0, rng);
            x.add(&other)?.sum()
        }),
        ("add_bias", |x, rng| {
            let bias = Tensor::randn(&[4], 1.0, rng);
            x.add_bias(&bias)?.gelu()?.sum()
        }),
        ("mul", |x, rng| {
            let other = Tensor::randn(&x.shape(), 1.0, rng);
            x.mul(&other)?.sum()
        }),
        ("scale", |x, _| x.scale(-1.7)?.gelu()?.sum()),
        ("gelu", |x, _| x.gelu()?.sum()),
        ("transpose", |x, _| x.transpose()?.gelu()?.sum()),
        ("log_softmax", |x, rng| {
            let w = Tensor::randn(&[4], 1.0, rng);
            x.log_softmax()?.add_bias(&w)?.gelu()?.sum()
        }),
        ("layer_norm_x", |x, rng| {
            let gain = Tensor::randn(&[4], 0.3, rng);
            let bias = Tensor::randn(&[4], 0.3, rng);
            x.layer_norm(&gain, &bias, 1e-5)?.gelu()?.sum()
        }),
        ("cross_entropy", |x, _| x.cross_entropy(&[0, 2, 1])),
        ("sum", |x, _| x.sum()),
    ];
    for (name, f) in cases {
        for seed in 0..10u64 {
            let mut rng = rng_for(seed, Stream::Init, 1);
            let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let err = finite_diff_check(
                |t| {
                    let mut inner_rng = rng_for(seed, Stream::Dropout, 2);
                    f(t, &mut inner_rng)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{name} seed {seed}: rel error {err}");
        }
    }
}

#[test]
fn finite_diff_layer_norm_params() {
    for seed in 0..10u64 {
        let mut rng = rng_for(seed, Stream::Init, 3);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let gain = Tensor::randn(&[4], 0.5, &mut rng);
        let err = finite_diff_check(
            |g| {
                let bias = Tensor::zeros(&[4]);
                x.layer_norm(g, &bias, 1e-5)?.gelu()?.sum()
            },
            &gain,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: rel error {err}");
    }
}

#[test]
fn finite_diff_embedding_and_gather() {
    for seed in 0..10u64 {
        let mut rng = rng_for(seed, Stream::Init, 4);
        let table = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let err = finite_diff_check(
            |t| t.embedding(&[1, 4, 1, 0])?.gelu()?.sum(),
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "embedding seed {seed}: rel error {err}");

        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let err = finite_diff_check(|t| t.gather_rows(&[4, 0, 4])?.gelu()?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-5, "gather seed {seed}: rel error {err}");
    }
}

#[test]
fn finite_diff_dropout_with_fixed_stream() {
    for seed in 0..10u64 {
        let mut rng = rng_for(seed, Stream::Init, 5);
        let x = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let err = finite_diff_check(
            |t| {
                // refreshing the stream per call keeps the mask identical
                let mut mask_rng = rng_for(seed, Stream::Dropout, 5);
                t.dropout(0.4, &mut mask_rng)?.gelu()?.sum()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: rel error {err}");
    }
}

#[test]
fn finite_diff_attention_q_k_v() {
    let heads = 2;
    let t = 3;
    let batch = 2;
    let d = 4;
    let mask = vec![true, true, false, true, true, true];
    for seed in 0..10u64 {
        let mut rng = rng_for(seed, Stream::Init, 6);
        let q = Tensor::randn(&[batch * t, d], 1.0, &mut rng);
        let k = Tensor::randn(&[batch * t, d], 1.0, &mut rng);
        let v = Tensor::randn(&[batch * t, d], 1.0, &mut rng);
        for (name, which) in [("q", 0), ("k", 1), ("v", 2)] {
            let target = [&q, &k, &v][which].clone();
            let err = finite_diff_check(
                |x| {
                    let (qq, kk, vv) = match which {
                        0 => (x.clone(), k.detach(), v.detach()),
                        1 => (q.detach(), x.clone(), v.detach()),
                        _ => (q.detach(), k.detach(), x.clone()),
                    };
                    Tensor::causal_attention(&qq, &kk, &vv, heads, t, &mask)?
                        .gelu()?
                        .sum()
                },
                &target,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "attention {name} seed {seed}: rel error {err}");
        }
    }
}

#[test]
fn attention_matches_naive_reference() {
    // Independent oracle: direct per-query softmax loop, no shared kernels.
    let heads = 2;
    let t = 4;
    let d = 6;
    let mask = vec![true, true, true, false];
    let mut rng = rng_for(99, Stream::Init, 7);
    let q = Tensor::randn(&[t, d], 1.0, &mut rng);
    let k = Tensor::randn(&[t, d], 1.0, &mut rng);
    let v = Tensor::randn(&[t, d], 1.0, &mut rng);
    let out = Tensor::causal_attention(&q, &k, &v, heads, t, &mask).unwrap();

    let (qd, kd, vd) = (q.data_clone(), k.data_clone(), v.data_clone());
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut expect = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            let valid: Vec<usize> = (0..=i).filter(|&j| mask[j]).collect();
            if valid.is_empty() {
                continue;
            }
            let scores: Vec<f64> = valid
                .iter()
                .map(|&j| {
                    (0..hd)
                        .map(|c| qd[i * d + h * hd + c] * kd[j * d + h * hd + c])
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (vi, &j) in valid.iter().enumerate() {
                for c in 0..hd {
                    expect[i * d + h * hd + c] += exps[vi] / z * vd[j * d + h * hd + c];
                }
            }
        }
    }
    for (a, b) in out.data_clone().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn kl_div_oracle_cases() {
    // identical distributions -> 0
    let s = t2(&[1, 2], &[0.5f64.ln(), 0.5f64.ln()]);
    let t_ = t2(&[1, 2], &[0.5, 0.5]);
    let kl = s.kl_div_mean(&t_).unwrap().item().unwrap();
    assert!(kl.abs() < 1e-12);

    // teacher (1,0), student log(0.5,0.5) -> ln 2
    let s = t2(&[1, 2], &[0.5f64.ln(), 0.5f64.ln()]);
    let t_ = t2(&[1, 2], &[1.0, 0.0]);
    let kl = s.kl_div_mean(&t_).unwrap().item().unwrap();
    assert!((kl - LN2).abs() < 1e-12);

    // teacher (0.75,0.25), student log(0.5,0.5) -> 0.75 ln 1.5 + 0.25 ln 0.5
    let s = t2(&[1, 2], &[0.5f64.ln(), 0.5f64.ln()]);
    let t_ = t2(&[1, 2], &[0.75, 0.25]);
    let kl = s.kl_div_mean(&t_).unwrap().item().unwrap();
    let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
    assert!((kl - expected).abs() < 1e-12);
    assert!((expected - 0.130_812_035_941_137).abs() < 1e-9);
}

#[test]
fn kl_div_rejects_invalid_rows() {
    let s = t2(&[1, 2], &[0.5f64.ln(), 0.5f64.ln()]);
    let bad = t2(&[1, 2], &[0.9, 0.3]);
    assert!(matches!(s.kl_div_mean(&bad), Err(Error::Contract(_))));
    let not_logp = t2(&[1, 2], &[0.5, 0.5]);
    let t_ = t2(&[1, 2], &[0.5, 0.5]);
    assert!(matches!(not_logp.kl_div_mean(&t_), Err(Error::Contract(_))));
}

#[test]
fn finite_diff_kl_div() {
    for seed in 0..10u64 {
        let mut rng = rng_for(seed, Stream::Init, 8);
        let logits = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let teacher_logits = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let teacher = Tensor::from_vec(
            &[3, 2],
            softmax_rows(&teacher_logits.data_clone(), 3, 2),
        )
        .unwrap();
        let err = finite_diff_check(
            |x| x.log_softmax()?.kl_div_mean(&teacher),
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: rel error {err}");
    }
}

#[test]
fn dropout_eval_identity_and_train_scaling() {
    let x = t2(&[1, 8], &[1.0; 8]);
    let mut rng = rng_for(5, Stream::Dropout, 0);
    let y = x.dropout(0.5, &mut rng).unwrap();
    for v in y.data_clone() {
        assert!(v == 0.0 || v == 2.0);
    }
    let mut rng = rng_for(5, Stream::Dropout, 0);
    let z = x.dropout(0.0, &mut rng).unwrap();
    assert_eq!(z.data_clone(), x.data_clone());
}

proptest! {
    #[test]
    fn log_softmax_rows_exponentiate_to_one(
        vals in proptest::collection::vec(-1e3..1e3f64, 6)
    ) {
        let x = t2(&[2, 3], &vals);
        let out = x.log_softmax().unwrap().data_clone();
        for r in 0..2 {
            let sum: f64 = out[r * 3..(r + 1) * 3].iter().map(|v| v.exp()).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_shift_invariance(
        vals in proptest::collection::vec(-100.0..100.0f64, 4),
        shift in -50.0..50.0f64
    ) {
        let x = t2(&[1, 4], &vals);
        let shifted_vals: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let y = t2(&[1, 4], &shifted_vals);
        let a = x.log_softmax().unwrap().data_clone();
        let b = y.log_softmax().unwrap().data_clone();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn ops_stay_finite_on_bounded_inputs(
        vals in proptest::collection::vec(-1e3..1e3f64, 4)
    ) {
        let x = t2(&[2, 2], &vals);
        let y = x.matmul(&x).unwrap().gelu().unwrap().log_softmax().unwrap();
        prop_assert!(y.data_clone().iter().all(|v| v.is_finite()));
    }
}
