use quadmask_core::numeric::ops::{self, View, ViewMut};
use quadmask_core::numeric::{
    grad_check, Conv2d, GradCheckOptions, LayerNorm, Linear, ParamId, ParamStore, Sgd, SgdConfig, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    // Keep away from zero so relu kinks are not straddled by the probe step.
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// `Σ r ⊙ y` and its gradient `r`.
fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn strict() -> GradCheckOptions {
    GradCheckOptions::default()
}

fn check(name: &str, store: &mut ParamStore<f64>, f: impl FnMut(&mut ParamStore<f64>, bool) -> f64) {
    let report = grad_check(store, f, strict());
    assert!(report.passed(), "{name}: {report:?}");
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&[3, 5], &mut rng));
    let b = s.add("b", random(&[5, 4], &mut rng));
    let r = random(&[3, 4], &mut rng);
    check("matmul", &mut s, |s, bw| {
        let y = ops::matmul(s.value(a), s.value(b)).unwrap();
        if bw {
            let (da, db) = ops::matmul_backward(s.value(a), s.value(b), &r);
            s.accumulate(a, da.data());
            s.accumulate(b, db.data());
        }
        weighted_sum(&y, &r)
    });
}

#[test]
fn strided_gemm_gradients() {
    // C = A[:, 2..4] · A[:, 2..4]ᵀ, the pattern used for per-head attention scores.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&[3, 6], &mut rng));
    let r = random(&[3, 3], &mut rng);
    check("strided", &mut s, |s, bw| {
        let av = View::of(s.value(a)).cols_range(2, 4);
        let mut c = Tensor::zeros(&[3, 3]);
        ops::gemm(1.0, av, av.t(), 0.0, ViewMut::of(&mut c));
        if bw {
            let mut g = Tensor::zeros(&[3, 6]);
            let rt = View::of(&r);
            ops::gemm(1.0, rt, av, 0.0, ViewMut::of(&mut g).cols_range(2, 4));
            ops::gemm(1.0, rt.t(), av, 1.0, ViewMut::of(&mut g).cols_range(2, 4));
            s.accumulate(a, g.data());
        }
        weighted_sum(&c, &r)
    });
}

#[test]
fn conv_gradients() {
    for k in [1, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(3 + k as u64);
        let mut s = ParamStore::new();
        let conv = Conv2d::new(&mut s, "conv", 2, 3, k, &mut rng);
        let b = s.value(conv.b).clone();
        *s.value_mut(conv.b) = random(b.shape(), &mut rng);
        let x = s.add("x", random(&[2, 5, 4], &mut rng));
        let r = random(&[3, 5, 4], &mut rng);
        check(&format!("conv{k}"), &mut s, |s, bw| {
            let xv = s.value(x).clone();
            let (y, cache) = conv.forward(s, &xv).unwrap();
            if bw {
                let dx = conv.backward(s, &cache, &r);
                s.accumulate(x, dx.data());
            }
            weighted_sum(&y, &r)
        });
    }
}

#[test]
fn activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = ParamStore::new();
    let x = s.add("x", random(&[4, 6], &mut rng));
    let r = random(&[4, 6], &mut rng);
    check("softmax", &mut s, |s, bw| {
        let y = ops::softmax_rows(s.value(x));
        if bw {
            let dx = ops::softmax_rows_backward(&y, &r);
            s.accumulate(x, dx.data());
        }
        weighted_sum(&y, &r)
    });
    check("relu", &mut s, |s, bw| {
        let y = ops::relu(s.value(x));
        if bw {
            let dx = ops::relu_backward(s.value(x), &r);
            s.accumulate(x, dx.data());
        }
        weighted_sum(&y, &r)
    });
    check("sigmoid", &mut s, |s, bw| {
        let y = ops::sigmoid(s.value(x));
        if bw {
            let dx = ops::sigmoid_backward(&y, &r);
            s.accumulate(x, dx.data());
        }
        weighted_sum(&y, &r)
    });
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 8);
    *s.value_mut(ln.gain) = random(&[8], &mut rng);
    *s.value_mut(ln.bias) = random(&[8], &mut rng);
    let x = s.add("x", random(&[5, 8], &mut rng));
    let r = random(&[5, 8], &mut rng);
    check("layer_norm", &mut s, |s, bw| {
        let xv = s.value(x).clone();
        let (y, cache) = ln.forward(s, &xv);
        if bw {
            let dx = ln.backward(s, &cache, &r);
            s.accumulate(x, dx.data());
        }
        weighted_sum(&y, &r)
    });
}

fn linear_setup(seed: u64) -> (ParamStore<f64>, Linear, ParamId, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let l = Linear::new(&mut s, "lin", 6, 4, &mut rng);
    *s.value_mut(l.b) = random(&[4], &mut rng);
    let x = s.add("x", random(&[7, 6], &mut rng));
    let r = random(&[7, 4], &mut rng);
    (s, l, x, r)
}

#[test]
fn linear_layer_is_exact_to_1e8() {
    let (mut s, l, x, r) = linear_setup(6);
    // Bilinear in (w, x): no truncation error, so a large step only cuts roundoff.
    let opts = GradCheckOptions {
        step: 1e-2,
        tolerance: 1e-8,
        ..GradCheckOptions::default()
    };
    let report = grad_check(
        &mut s,
        |s, bw| {
            let xv = s.value(x).clone();
            let y = l.forward(s, &xv).unwrap();
            if bw {
                let dx = l.backward(s, &xv, &r);
                s.accumulate(x, dx.data());
            }
            weighted_sum(&y, &r)
        },
        opts,
    );
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.per_param.len(), 3);
}

#[test]
fn corrupted_backward_is_caught() {
    let (mut s, l, x, r) = linear_setup(7);
    let report = grad_check(
        &mut s,
        |s, bw| {
            let xv = s.value(x).clone();
            let y = l.forward(s, &xv).unwrap();
            if bw {
                let mut dx = l.backward(s, &xv, &r);
                dx.data_mut()[3] *= 1.01;
                s.accumulate(x, dx.data());
            }
            weighted_sum(&y, &r)
        },
        strict(),
    );
    assert!(!report.passed());
    let worst = report.per_param.iter().find(|(n, _)| n == "x").unwrap().1;
    assert!(worst > 1e-3, "{worst}");
}

#[test]
fn non_finite_loss_is_flagged() {
    let mut s = ParamStore::new();
    s.add("p", Tensor::from_vec(&[1], vec![1.0]).unwrap());
    let report = grad_check(&mut s, |_, _| f64::NAN, strict());
    assert!(report.non_finite);
    assert!(!report.passed());
}

#[test]
fn sgd_zero_grad_zero_decay_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = ParamStore::<f64>::new();
    let id = s.add("w", random(&[10], &mut rng));
    let before = s.value(id).clone();
    let mut opt = Sgd::new(SgdConfig {
        lr: 0.5,
        momentum: 0.9,
        weight_decay: 0.0,
    });
    for _ in 0..3 {
        opt.step(&mut s);
    }
    assert_eq!(s.value(id), &before);
}

#[test]
fn sgd_weight_decay_shrinks_geometrically_without_momentum() {
    let mut s = ParamStore::<f64>::new();
    let id = s.add("w", Tensor::from_vec(&[1], vec![2.0]).unwrap());
    let (lr, wd) = (0.1, 0.05);
    let mut opt = Sgd::new(SgdConfig {
        lr,
        momentum: 0.0,
        weight_decay: wd,
    });
    for step in 1..=4 {
        opt.step(&mut s);
        let expect = 2.0 * (1.0 - lr * wd).powi(step);
        assert!((s.value(id).data()[0] - expect).abs() < 1e-15);
    }
}

#[test]
fn kink_inside_probe_interval_is_reprobed() {
    // relu(x - 1e-5) at x = 0: the kink lies between the two probe points.
    let mut s = ParamStore::new();
    let x = s.add("x", Tensor::from_vec(&[1], vec![0.0]).unwrap());
    let f = |slope: f64| {
        move |s: &mut ParamStore<f64>, bw: bool| {
            let v = s.value(x).data()[0];
            let y = (v + 1e-5).max(0.0);
            if bw {
                s.accumulate(x, &[slope]);
            }
            y
        }
    };
    let report = grad_check(&mut s, f(1.0), strict());
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.reprobed, 1);

    let no_retry = GradCheckOptions {
        shrink_retries: 0,
        ..strict()
    };
    assert!(!grad_check(&mut s, f(1.0), no_retry).passed());
    assert!(!grad_check(&mut s, f(0.9), strict()).passed());

    // A kink exactly at the point never resolves.
    let at_kink = |s: &mut ParamStore<f64>, bw: bool| {
        let v = s.value(x).data()[0];
        if bw {
            s.accumulate(x, &[1.0]);
        }
        v.max(0.0)
    };
    assert!(!grad_check(&mut s, at_kink, strict()).passed());
}
