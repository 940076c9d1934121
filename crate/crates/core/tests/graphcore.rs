use mcevae::graphcore::nn::{BatchNorm2d, Bindings, NormMode, BN_EPS};
use mcevae::graphcore::{grad_check, AdamConfig, AdamState, Conv2dConfig, GradCheckConfig, Graph, ParameterStore, Tensor, Var};
use mcevae::lie::GroupKind;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 20;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], keep: impl Fn(f64) -> bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(-2.0..2.0);
            if keep(v) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn any(_: f64) -> bool {
    true
}

/// Reduces a tensor output to a scalar through fixed random weights so every
/// output entry contributes a distinct sensitivity.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(uniform(&mut rng, &shape, any));
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

/// Runs `TRIALS` finite-difference checks of `f` at fresh random points.
fn check_op<F>(name: &str, seed: u64, point: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..TRIALS {
        let inputs = point(&mut rng);
        let report = grad_check(
            &inputs,
            |g, v| {
                let y = f(g, v);
                Ok(weighted(g, y, trial as u64))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{name} trial {trial}: {report:?}");
    }
}

#[test]
fn matmul_gradients() {
    check_op(
        "matmul",
        1,
        |r| vec![uniform(r, &[3, 4], any), uniform(r, &[4, 2], any)],
        |g, v| g.matmul(v[0], v[1]).unwrap(),
    );
}

#[test]
fn elementwise_binary_gradients_with_broadcasting() {
    type Bin = fn(&mut Graph<f64>, Var, Var) -> Var;
    let ops: [(&str, Bin); 3] = [
        ("add", |g, a, b| g.add(a, b).unwrap()),
        ("sub", |g, a, b| g.sub(a, b).unwrap()),
        ("mul", |g, a, b| g.mul(a, b).unwrap()),
    ];
    for (i, (name, op)) in ops.into_iter().enumerate() {
        for rhs in [vec![3, 4], vec![4], vec![]] {
            check_op(
                name,
                10 + i as u64,
                |r| vec![uniform(r, &[3, 4], any), uniform(r, &rhs, any)],
                |g, v| op(g, v[0], v[1]),
            );
            // Broadcast the other way round as well.
            check_op(
                name,
                20 + i as u64,
                |r| vec![uniform(r, &rhs, any), uniform(r, &[3, 4], any)],
                |g, v| op(g, v[0], v[1]),
            );
        }
    }
}

#[test]
fn unary_gradients() {
    let away_from_kink = |v: f64| v.abs() > 1e-3;
    check_op("relu", 30, |r| vec![uniform(r, &[2, 5], away_from_kink)], |g, v| g.relu(v[0]).unwrap());
    check_op("sigmoid", 31, |r| vec![uniform(r, &[2, 5], any)], |g, v| g.sigmoid(v[0]).unwrap());
    check_op("exp", 32, |r| vec![uniform(r, &[2, 5], any)], |g, v| g.exp(v[0]).unwrap());
    check_op(
        "log",
        33,
        |r| vec![uniform(r, &[2, 5], any).map(|v| v.abs() + 0.1)],
        |g, v| g.log(v[0]).unwrap(),
    );
    check_op("square", 34, |r| vec![uniform(r, &[2, 5], any)], |g, v| g.square(v[0]).unwrap());
    check_op(
        "affine",
        35,
        |r| vec![uniform(r, &[2, 5], any)],
        |g, v| g.affine(v[0], -1.7, 0.3).unwrap(),
    );
    check_op(
        "clamp",
        36,
        |r| vec![uniform(r, &[2, 5], |v| (v.abs() - 1.0).abs() > 1e-3)],
        |g, v| g.clamp(v[0], -1.0, 1.0).unwrap(),
    );
}

#[test]
fn reduction_and_layout_gradients() {
    check_op("sum", 40, |r| vec![uniform(r, &[3, 4], any)], |g, v| g.sum(v[0]).unwrap());
    check_op("mean", 41, |r| vec![uniform(r, &[3, 4], any)], |g, v| g.mean(v[0]).unwrap());
    check_op(
        "reshape",
        42,
        |r| vec![uniform(r, &[3, 4], any)],
        |g, v| g.reshape(v[0], &[2, 6]).unwrap(),
    );
    for axis in 0..2 {
        check_op(
            "concat",
            43,
            |r| vec![uniform(r, &[2, 3], any), uniform(r, &[2, 3], any)],
            |g, v| g.concat(&[v[0], v[1], v[0]], axis).unwrap(),
        );
        check_op(
            "slice",
            44,
            |r| vec![uniform(r, &[3, 4], any)],
            |g, v| g.slice(v[0], axis, 1, 3).unwrap(),
        );
    }
}

#[test]
fn conv2d_gradients() {
    for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let cfg = Conv2dConfig { stride, padding };
        check_op(
            "conv2d",
            50 + stride as u64 * 3 + padding as u64,
            |r| {
                vec![
                    uniform(r, &[2, 2, 5, 5], any),
                    uniform(r, &[3, 2, 3, 3], any),
                    uniform(r, &[3], any),
                ]
            },
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), cfg).unwrap(),
        );
    }
}

#[test]
fn batchnorm_gradients() {
    check_op(
        "batchnorm2d (batch statistics)",
        60,
        |r| vec![uniform(r, &[3, 2, 2, 2], any), uniform(r, &[2], any), uniform(r, &[2], any)],
        |g, v| g.batchnorm2d_train(v[0], v[1], v[2], BN_EPS).unwrap().0,
    );
    let mean = Tensor::from_f64(&[2], &[0.3, -0.5]).unwrap();
    let var = Tensor::from_f64(&[2], &[1.5, 0.4]).unwrap();
    check_op(
        "batchnorm2d (running statistics)",
        61,
        |r| vec![uniform(r, &[3, 2, 2, 2], any), uniform(r, &[2], any), uniform(r, &[2], any)],
        |g, v| g.batchnorm2d_eval(v[0], v[1], v[2], &mean, &var, BN_EPS).unwrap(),
    );
}

#[test]
fn sampler_gradients_off_lattice() {
    // Grid coordinates are kept away from pixel centres so that no sample sits on a kernel kink.
    let off_lattice = |v: f64| {
        let px = (v + 1.0) * 2.5 - 0.5;
        (px - px.round()).abs() > 1e-2 && v.abs() < 1.3
    };
    check_op(
        "grid_sample",
        70,
        |r| vec![uniform(r, &[2, 1, 5, 5], any), uniform(r, &[2, 3, 3, 2], off_lattice)],
        |g, v| g.grid_sample(v[0], v[1]).unwrap(),
    );
    check_op(
        "affine_grid",
        71,
        |r| vec![uniform(r, &[2, 6], any)],
        |g, v| g.affine_grid(v[0], 3, 4).unwrap(),
    );
    for kind in [GroupKind::So2, GroupKind::Se2] {
        check_op(
            "inverse_theta",
            72,
            |r| vec![uniform(r, &[3, kind.dim()], any)],
            |g, v| g.inverse_theta(v[0], kind).unwrap(),
        );
    }
}

fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((bi * cin + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_summation(
        seed in 0u64..1000,
        batch in 1usize..3,
        cin in 1usize..4,
        cout in 1usize..4,
        size in 3usize..8,
        k in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..2,
    ) {
        prop_assume!(size + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[batch, cin, size, size], any);
        let w = uniform(&mut rng, &[cout, cin, k, k], any);
        let b = uniform(&mut rng, &[cout], any);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), Conv2dConfig { stride, padding: pad }).unwrap();
        let expected = direct_conv(&x, &w, b.data(), stride, pad);
        prop_assert_eq!(g.value(y).numel(), expected.len());
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            prop_assert!((a - e).abs() < 1e-12, "{} vs {}", a, e);
        }
    }

    #[test]
    fn gradient_through_stop_grad_only_is_zero(values in prop::collection::vec(-2.0f64..2.0, 1..8)) {
        let n = values.len();
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64(&[n], &values).unwrap());
        let frozen = g.stop_grad(w);
        let e = g.exp(frozen).unwrap();
        let sq = g.square(e).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.wrt(&g, w).data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn half_frozen_product_has_exact_gradient(values in prop::collection::vec(-2.0f64..2.0, 1..8)) {
        let n = values.len();
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64(&[n], &values).unwrap());
        let frozen = g.stop_grad(w);
        let p = g.mul(frozen, w).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        let grad = grads.wrt(&g, w);
        prop_assert_eq!(grad.data(), &values[..]);
    }

    #[test]
    fn tensor_length_must_equal_shape_product(dims in prop::collection::vec(0usize..4, 0..4), extra in 1usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::<f64>::new(dims.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::<f64>::new(dims, vec![0.0; n + extra]).is_err());
    }
}

fn small_network(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[3, 2, 4, 4], any);
    let w = uniform(&mut rng, &[2, 2, 3, 3], any);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let wv = g.leaf(w);
    let c = g.conv2d(xv, wv, None, Conv2dConfig::default()).unwrap();
    let (gamma, beta) = (g.constant(Tensor::full(&[2], 1.0)), g.constant(Tensor::zeros(&[2])));
    let (bn, _) = g.batchnorm2d_train(c, gamma, beta, BN_EPS).unwrap();
    let s = g.sigmoid(bn).unwrap();
    let loss = g.mean(s).unwrap();
    let value = g.value(s).data().to_vec();
    let grads = g.backward(loss).unwrap();
    (value, grads.wrt(&g, wv).data().to_vec())
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let (v1, g1) = small_network(9);
    let (v2, g2) = small_network(9);
    assert_eq!(v1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), v2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn adam_follows_bias_corrected_recurrences() {
    let cfg = AdamConfig::default();
    let mut store = ParameterStore::<f64>::new();
    let id = store.add("p".to_string(), Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap(), true).unwrap();
    let mut adam = AdamState::new(&store, cfg);
    let grads = [[0.3, -2.0], [-0.1, 0.0], [1.2, 4.0], [0.0, -0.5]];
    let (mut p, mut m, mut v) = ([0.5f64, -1.0], [0.0f64; 2], [0.0f64; 2]);
    for (t, grad) in grads.iter().enumerate() {
        store.accumulate_grad(id, &Tensor::from_f64(&[2], grad).unwrap());
        adam.step(&mut store).unwrap();
        let t = (t + 1) as i32;
        for i in 0..2 {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / (1.0 - cfg.beta1.powi(t));
            let v_hat = v[i] / (1.0 - cfg.beta2.powi(t));
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        for (a, e) in store.value(id).data().iter().zip(&p) {
            assert!((a - e).abs() < 1e-14, "step {t}: {a} vs {e}");
        }
        assert!(store.grad(id).data().iter().all(|&g| g == 0.0));
        assert_eq!(adam.steps_taken(), t as u64);
    }
}

#[test]
fn eval_batchnorm_layer_is_affine_in_its_input() {
    let mut store = ParameterStore::<f64>::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    store.set_value(bn.running_mean, uniform(&mut rng, &[3], any)).unwrap();
    store.set_value(bn.running_var, uniform(&mut rng, &[3], any).map(|v| v.abs() + 0.2)).unwrap();
    store.set_value(bn.gamma, uniform(&mut rng, &[3], any)).unwrap();
    store.set_value(bn.beta, uniform(&mut rng, &[3], any)).unwrap();
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let mut p = Bindings::new(&store);
        let xv = g.constant(x.clone());
        let (y, _) = bn.forward(&mut g, &mut p, xv, NormMode::Eval).unwrap();
        g.value(y).data().to_vec()
    };
    let a = uniform(&mut rng, &[2, 3, 2, 2], any);
    let b = uniform(&mut rng, &[2, 3, 2, 2], any);
    let zero = run(&Tensor::zeros(&[2, 3, 2, 2]));
    let (fa, fb) = (run(&a), run(&b));
    let (alpha, beta) = (0.7, -1.3);
    let mix: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + beta * y).collect();
    let fmix = run(&Tensor::new(vec![2, 3, 2, 2], mix).unwrap());
    for i in 0..fmix.len() {
        let expected = zero[i] + alpha * (fa[i] - zero[i]) + beta * (fb[i] - zero[i]);
        assert!((fmix[i] - expected).abs() < 1e-12);
    }
}
