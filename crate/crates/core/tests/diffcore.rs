use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewcon::diffcore::{grad_check, relative_error, GradCheckReport, BnStats, Tape, Tensor, Var};
use viewcon::Error;

/// Relative agreement, or absolute agreement at the finite-difference noise
/// floor for near-zero gradients.
fn fd_agrees(report: &GradCheckReport, tol: f64) -> bool {
    report
        .coords
        .iter()
        .all(|c| c.rel_error <= tol || (c.analytic - c.numeric).abs() <= 1e-9)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matmul_trivial_cases() {
    let mut t = Tape::new();
    let eye = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let y = t.matmul(eye, m).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
    let q = t.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
    let y = t.matmul(p, q).unwrap();
    assert_eq!(t.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    let mut expected = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                expected[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
        }
    }
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a), t.constant(b));
    let y = t.matmul(va, vb).unwrap();
    assert_eq!(t.shape(y), &[3, 2]);
    assert!(max_abs_diff(t.value(y).data(), &expected) <= 1e-12);
}

#[test]
fn matmul_dimension_mismatch_is_shape_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
}

#[test]
fn conv_scaling_kernel() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 3, 3], 1.0));
    let w = t.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 3]);
    assert!(t.value(y).data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_full_size_shape() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 65, 501]));
    let w = t.constant(Tensor::zeros(&[32, 1, 3, 3]));
    let b = t.constant(Tensor::zeros(&[32]));
    let y = t.conv2d(x, w, b, 1, 1).unwrap();
    assert_eq!(t.shape(y), &[32, 65, 501]);
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c_in, h, w_, c_out, k) = (2, 5, 5, 3, 3);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = random_tensor(&[c_in, h, w_], &mut rng);
        let w = random_tensor(&[c_out, c_in, k, k], &mut rng);
        let b = random_tensor(&[c_out], &mut rng);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w_ + 2 * pad - k) / stride + 1;
        let mut expected = vec![0.0; c_out * ho * wo];
        for o in 0..c_out {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..c_in {
                        for di in 0..k {
                            for dj in 0..k {
                                let r = (i * stride + di) as isize - pad as isize;
                                let s = (j * stride + dj) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= w_ as isize {
                                    continue;
                                }
                                let xv = x.data()[c * h * w_ + r as usize * w_ + s as usize];
                                let wv = w.data()[((o * c_in + c) * k + di) * k + dj];
                                acc += xv * wv;
                            }
                        }
                    }
                    expected[(o * ho + i) * wo + j] = acc;
                }
            }
        }
        let mut t = Tape::new();
        let (vx, vw, vb) = (t.constant(x), t.constant(w), t.constant(b));
        let y = t.conv2d(vx, vw, vb, stride, pad).unwrap();
        assert_eq!(t.shape(y), &[c_out, ho, wo]);
        assert!(max_abs_diff(t.value(y).data(), &expected) <= 1e-10, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv_kernel_larger_than_input_is_shape_error() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 2]));
    let w = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let b = t.constant(Tensor::zeros(&[1]));
    assert!(matches!(t.conv2d(x, w, b, 1, 0), Err(Error::Shape(_))));
}

#[test]
fn maxpool_trivial_and_constant() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(t.value(y).data(), &[4.0]);
    let c = t.constant(Tensor::full(&[2, 4, 4], 0.25));
    let y = t.maxpool2d(c, 2, 2).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.25));
}

#[test]
fn maxpool_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&[1, 6, 6], &mut rng);
    let mut expected = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            let mut m = f64::NEG_INFINITY;
            for di in 0..2 {
                for dj in 0..2 {
                    m = m.max(x.data()[(2 * i + di) * 6 + 2 * j + dj]);
                }
            }
            expected.push(m);
        }
    }
    let mut t = Tape::new();
    let vx = t.constant(x);
    let y = t.maxpool2d(vx, 2, 2).unwrap();
    assert_eq!(t.value(y).data(), expected.as_slice());
}

#[test]
fn maxpool_ties_route_gradient_to_first_index() {
    let mut t = Tape::new();
    let x = t.param(Tensor::full(&[1, 2, 2], 1.0));
    let y = t.maxpool2d(x, 2, 2).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_window_too_large() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(matches!(t.maxpool2d(x, 3, 1), Err(Error::Shape(_))));
}

#[test]
fn batchnorm_train_mode_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&[4, 3, 5, 5], &mut rng);
    let mut t = Tape::new();
    let vx = t.constant(x);
    let g = t.constant(Tensor::full(&[3], 1.0));
    let b = t.constant(Tensor::zeros(&[3]));
    let (y, stats) = t.batchnorm2d(vx, g, b, &BnStats::Batch, 1e-5).unwrap();
    assert!(stats.is_some());
    let v = t.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..25).map(move |k| (n, k)))
            .map(|(n, k)| v[(n * 3 + c) * 25 + k])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batchnorm_zero_gamma_and_identity_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&[2, 2, 3, 3], &mut rng);
    let mut t = Tape::new();
    let vx = t.constant(x.clone());
    let g0 = t.constant(Tensor::zeros(&[2]));
    let beta = t.constant(Tensor::new(&[2], vec![0.3, -0.7]).unwrap());
    let (y, _) = t.batchnorm2d(vx, g0, beta, &BnStats::Batch, 1e-5).unwrap();
    for (i, &v) in t.value(y).data().iter().enumerate() {
        let c = (i / 9) % 2;
        assert_eq!(v, [0.3, -0.7][c]);
    }
    let g1 = t.constant(Tensor::full(&[2], 1.0));
    let b0 = t.constant(Tensor::zeros(&[2]));
    let fixed = BnStats::Fixed {
        mean: vec![0.0; 2],
        var: vec![1.0; 2],
    };
    let (y, stats) = t.batchnorm2d(vx, g1, b0, &fixed, 0.0).unwrap();
    assert!(stats.is_none());
    assert_eq!(t.value(y).data(), x.data());
}

#[test]
fn activations() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    let l = t.sum(r).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    let z = t.constant(Tensor::scalar(0.0));
    let th = t.tanh(z).unwrap();
    assert_eq!(t.value(th).item().unwrap(), 0.0);
}

#[test]
fn tanh_gradient_at_one_matches_central_difference() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(1.0));
    let y = t.tanh(x).unwrap();
    let g = t.backward(y).unwrap();
    let analytic = g.get(x).unwrap().item().unwrap();
    let h = 1e-6;
    let numeric = ((1.0f64 + h).tanh() - (1.0f64 - h).tanh()) / (2.0 * h);
    assert!(relative_error(analytic, numeric) <= 1e-6);
}

#[test]
fn upsample_cases() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.upsample_nearest(x, 2).unwrap();
    let expected = [
        1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(t.value(y).data(), &expected);
    let id = t.upsample_nearest(x, 1).unwrap();
    assert_eq!(t.value(id).data(), t.value(x).data());
    let big = t.constant(Tensor::zeros(&[1, 65, 501]));
    let y = t.upsample_nearest(big, 2).unwrap();
    assert_eq!(t.shape(y), &[1, 130, 1002]);
    assert!(matches!(t.upsample_nearest(x, 0), Err(Error::Argument(_))));
}

#[test]
fn upsample_gradient_sums_over_block() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap());
    let y = t.upsample_nearest(x, 3).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[9.0, 9.0]);
}

#[test]
fn backward_trivial_cases() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[1], vec![3.0]).unwrap());
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let c = t.constant(Tensor::scalar(4.0));
    let g = t.backward(c).unwrap();
    assert!(g.get(x).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_rejects_non_scalar_and_non_finite() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(Error::Argument(_))));
    let z = t.param(Tensor::scalar(0.0));
    let r = t.ln(z);
    match r {
        Err(Error::Numeric(_)) => {}
        Ok(v) => assert!(matches!(t.backward(v), Err(Error::Numeric(_)))),
        Err(e) => panic!("unexpected error {e}"),
    }
}

fn two_layer_loss(t: &mut Tape, p: &[Var], x: &Tensor, labels: &[usize]) -> viewcon::Result<Var> {
    let xv = t.constant(x.clone());
    let h = t.matmul(xv, p[0])?;
    let h = t.add_row_bias(h, p[1])?;
    let h = t.tanh(h)?;
    let o = t.matmul(h, p[2])?;
    let o = t.add_row_bias(o, p[3])?;
    let lp = t.log_softmax_rows(o, false)?;
    let picked = t.pick_per_row(lp, labels)?;
    let m = t.mean(picked)?;
    t.scale(m, -1.0)
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random_tensor(&[5, 4], &mut rng);
    let labels = [0, 2, 1, 2, 0];
    let params = vec![
        random_tensor(&[4, 6], &mut rng),
        random_tensor(&[6], &mut rng),
        random_tensor(&[6, 3], &mut rng),
        random_tensor(&[3], &mut rng),
    ];
    let report = grad_check(|t, p| two_layer_loss(t, p, &x, &labels), &params, 1e-5, 1e-5).unwrap();
    assert_eq!(report.coords.len(), 24 + 6 + 18 + 3);
    assert!(report.passed, "worst {:?}", report.worst());
}

#[test]
fn gradients_add_across_uses() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random_tensor(&[5, 4], &mut rng);
    let labels = [1, 1, 0, 2, 2];
    let params = vec![
        random_tensor(&[4, 6], &mut rng),
        random_tensor(&[6], &mut rng),
        random_tensor(&[6, 3], &mut rng),
        random_tensor(&[3], &mut rng),
    ];
    let grads = |twice: bool| {
        let mut t = Tape::new();
        let p: Vec<Var> = params.iter().map(|q| t.param(q.clone())).collect();
        let mut l = two_layer_loss(&mut t, &p, &x, &labels).unwrap();
        if twice {
            let l2 = two_layer_loss(&mut t, &p, &x, &labels).unwrap();
            l = t.add(l, l2).unwrap();
        }
        let g = t.backward(l).unwrap();
        p.iter().map(|v| g.get(*v).unwrap().clone()).collect::<Vec<_>>()
    };
    let (one, two) = (grads(false), grads(true));
    for (a, b) in one.iter().zip(&two) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(2.0 * u, *v);
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&[2, 1, 6, 6], &mut rng);
    let w = random_tensor(&[3, 1, 3, 3], &mut rng);
    let run = || {
        let mut t = Tape::new();
        let (vx, vw) = (t.constant(x.clone()), t.constant(w.clone()));
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.conv2d(vx, vw, b, 1, 1).unwrap();
        let y = t.maxpool2d(y, 2, 2).unwrap();
        t.value(y).data().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops_match_finite_differences(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![random_tensor(&[n], &mut rng), random_tensor(&[n], &mut rng)];
        let f = |t: &mut Tape, p: &[Var]| {
            let a = t.tanh(p[0])?;
            let b = t.mul(a, p[1])?;
            let e = t.exp(b)?;
            let s = t.add(e, p[0])?;
            let r = t.relu(s)?;
            t.sum(r)
        };
        let report = grad_check(f, &params, 1e-6, 1e-5).unwrap();
        prop_assert!(fd_agrees(&report, report.tolerance), "worst {:?}", report.worst());
    }

    #[test]
    fn conv_pool_chain_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            random_tensor(&[2, 1, 4, 4], &mut rng),
            random_tensor(&[2, 1, 3, 3], &mut rng),
            random_tensor(&[2], &mut rng),
        ];
        // max pooling has a kink where two window entries tie; skip inputs
        // closer to one than the finite-difference step can resolve
        let mut t = Tape::new();
        let v: Vec<Var> = params.iter().map(|p| t.constant(p.clone())).collect();
        let y = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
        let y = t.tanh(y).unwrap();
        let a = t.value(y);
        for w in 0..a.numel() / 4 {
            let (plane, r, c) = (w / 4, (w % 4) / 2 * 2, w % 2 * 2);
            let mut win: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(dr, dc)| a.data()[plane * 16 + (r + dr) * 4 + c + dc])
                .collect();
            win.sort_by(|x, y| y.total_cmp(x));
            prop_assume!(win[0] - win[1] > 1e-4);
        }
        let f = |t: &mut Tape, p: &[Var]| {
            let y = t.conv2d(p[0], p[1], p[2], 1, 1)?;
            let y = t.tanh(y)?;
            let y = t.maxpool2d(y, 2, 2)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        };
        let report = grad_check(f, &params, 1e-6, 1e-5).unwrap();
        prop_assert!(fd_agrees(&report, report.tolerance), "worst {:?}", report.worst());
    }

    #[test]
    fn matmul_shape_algebra_is_total(m in 1usize..5, k in 1usize..5, k2 in 1usize..5, n in 1usize..5) {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[m, k]));
        let b = t.constant(Tensor::zeros(&[k2, n]));
        match t.matmul(a, b) {
            Ok(y) => {
                prop_assert_eq!(k, k2);
                prop_assert_eq!(t.shape(y), &[m, n][..]);
            }
            Err(e) => {
                prop_assert_ne!(k, k2);
                prop_assert!(matches!(e, Error::Shape(_)));
            }
        }
    }
}
