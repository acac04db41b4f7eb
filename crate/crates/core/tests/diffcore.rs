use advcomm::diffcore::{
    grad_check, optimizer_step, GradCheckConfig, Graph, Optimizer, OptimizerConfig, ParamTree, Tensor, Var,
};
use advcomm::diffcore::DiffError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    // keep values away from the kinks of relu / leaky_relu so central differences are exact enough
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
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn tree(entries: &[(&str, &[usize])], seed: u64) -> ParamTree<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = ParamTree::new();
    for (p, s) in entries {
        t.insert(*p, rand_tensor(s, &mut rng));
    }
    t
}

fn check<F>(params: &ParamTree<f64>, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &ParamTree<f64>) -> Result<Var, DiffError>,
{
    let cfg = GradCheckConfig {
        h: 1e-5,
        tol: TOL,
        sample: Some(200),
        ..GradCheckConfig::default()
    };
    let r = grad_check(params, f, &cfg).unwrap();
    assert!(r.passed, "max rel err {} >= {}: {:?}", r.max_rel_err, TOL, r.per_param);
    r.max_rel_err
}

// a fixed random projection turns any tensor into a scalar with a generic gradient
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var, DiffError> {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let w = g.input(rand_tensor(&shape, &mut rng));
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

#[test]
fn dense_gradients() {
    let p = tree(&[("x", &[4, 6]), ("w", &[6, 5]), ("b", &[5])], 1);
    check(&p, |g, t| {
        let x = g.param_from(t, "x")?;
        let w = g.param_from(t, "w")?;
        let b = g.param_from(t, "b")?;
        let y = g.dense(x, w, b)?;
        project(g, y, 1)
    });
}

#[test]
fn conv2d_gradients() {
    for pad in [0, 1] {
        let p = tree(&[("x", &[2, 3, 8, 8]), ("w", &[4, 3, 3, 3]), ("b", &[4])], 2 + pad as u64);
        check(&p, |g, t| {
            let x = g.param_from(t, "x")?;
            let w = g.param_from(t, "w")?;
            let b = g.param_from(t, "b")?;
            let y = g.conv2d(x, w, b, pad)?;
            project(g, y, 2)
        });
    }
}

#[test]
fn elementwise_activation_gradients() {
    let p = tree(&[("x", &[4, 8, 8, 8])], 3);
    type Act = fn(&mut Graph<f64>, Var) -> Result<Var, DiffError>;
    let acts: [Act; 4] = [
        |g, x| Ok(g.leaky_relu(x, 0.01)),
        |g, x| Ok(g.relu(x)),
        |g, x| Ok(g.sigmoid(x)),
        |g, x| g.softmax(x),
    ];
    for act in acts {
        check(&p, |g, t| {
            let x = g.param_from(t, "x")?;
            let y = act(g, x)?;
            project(g, y, 3)
        });
    }
}

#[test]
fn add_mul_matmul_gradients() {
    let p = tree(&[("a", &[3, 4]), ("b", &[3, 4]), ("c", &[4, 2])], 4);
    check(&p, |g, t| {
        let a = g.param_from(t, "a")?;
        let b = g.param_from(t, "b")?;
        let c = g.param_from(t, "c")?;
        let s = g.add(a, b)?;
        let m = g.mul(s, a)?;
        let y = g.matmul(m, c)?;
        project(g, y, 4)
    });
}

#[test]
fn concat_mean_sum_upsample_gradients() {
    let p = tree(&[("a", &[2, 3, 4, 4]), ("b", &[2, 1, 4, 4])], 5);
    check(&p, |g, t| {
        let a = g.param_from(t, "a")?;
        let b = g.param_from(t, "b")?;
        let c = g.concat(&[a, b], 1)?;
        let u = g.upsample2(c)?;
        let s = project(g, u, 5)?;
        let sq = g.mul(b, b)?;
        let m = g.mean(sq);
        let tot = g.add(s, m)?;
        let all = g.sum(tot);
        Ok(all)
    });
}

#[test]
fn loss_gradients() {
    let p = tree(&[("l", &[3, 16]), ("a", &[2, 5]), ("b", &[2, 5])], 6);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let target = Tensor::new(vec![3, 16], (0..48).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap();
    let mask = Tensor::new(vec![3, 16], (0..48).map(|i| (i % 3 != 0) as u8 as f64).collect()).unwrap();
    check(&p, |g, t| {
        let l = g.param_from(t, "l")?;
        let a = g.param_from(t, "a")?;
        let b = g.param_from(t, "b")?;
        let bce = g.bce_with_mask(l, target.clone(), mask.clone())?;
        let mse = g.mse(a, b)?;
        g.add(bce, mse)
    });
}

#[test]
fn two_layer_mlp_gradients() {
    let p = tree(&[("w1", &[5, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("b2", &[3])], 7);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let x = rand_tensor(&[4, 5], &mut rng);
    let h_check = GradCheckConfig {
        h: 1e-3,
        tol: TOL,
        sample: None,
        ..GradCheckConfig::default()
    };
    let r = grad_check(
        &p,
        |g, t| {
            let xi = g.input(x.clone());
            let w1 = g.param_from(t, "w1")?;
            let b1 = g.param_from(t, "b1")?;
            let w2 = g.param_from(t, "w2")?;
            let b2 = g.param_from(t, "b2")?;
            let h = g.dense(xi, w1, b1)?;
            let h = g.sigmoid(h);
            let y = g.dense(h, w2, b2)?;
            let z = g.input(Tensor::zeros(&[4, 3]));
            g.mse(y, z)
        },
        &h_check,
    )
    .unwrap();
    assert!(r.passed, "{:?}", r.per_param);
}

#[test]
fn linear_model_is_exact() {
    let p = tree(&[("w", &[3, 1])], 8);
    let r = grad_check(
        &p,
        |g, t| {
            let x = g.input(Tensor::from_f64(&[1, 3], &[1.0, 2.0, -1.0]).unwrap());
            let w = g.param_from(t, "w")?;
            let y = g.matmul(x, w)?;
            Ok(g.sum(y))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-9);
}

#[test]
fn unused_parameter_has_zero_gradient() {
    let p = tree(&[("used", &[2]), ("unused", &[3])], 9);
    let mut g = Graph::new();
    let u = g.param_from(&p, "used").unwrap();
    let s = g.sum(u);
    let grads = g.param_grads(s, &p).unwrap();
    assert!(grads.get("unused").unwrap().data().iter().all(|&v| v == 0.0));
    let r = grad_check(
        &p,
        |g, t| {
            let u = g.param_from(t, "used")?;
            Ok(g.sum(u))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    let unused = r.per_param.iter().find(|c| c.path == "unused").unwrap();
    assert_eq!(unused.max_abs_err, 0.0);
}

#[test]
fn probes_straddling_a_kink_are_skipped() {
    let mut p = ParamTree::new();
    p.insert("w", Tensor::from_f64(&[2], &[5e-4, 0.5]).unwrap());
    let f = |g: &mut Graph<f64>, t: &ParamTree<f64>| {
        let w = g.param_from(t, "w")?;
        let r = g.relu(w);
        Ok(g.sum(r))
    };
    // w₀ sits 5e-4 above the kink: the central difference sees slope 0.75
    let plain = grad_check(&p, f, &GradCheckConfig::default()).unwrap();
    assert!((plain.max_rel_err - 0.25).abs() < 1e-9);
    let r = grad_check(
        &p,
        f,
        &GradCheckConfig {
            skip_kinks: true,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(r.passed);
    assert_eq!((r.per_param[0].checked, r.per_param[0].skipped), (1, 1));
}

#[test]
fn trivial_values() {
    let mut g: Graph<f64> = Graph::new();
    let z = g.input(Tensor::from_f64(&[1], &[0.0]).unwrap());
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).data(), &[0.5]);

    let a = g.input(Tensor::from_f64(&[3], &[2.5, 2.5, 2.5]).unwrap());
    let sm = g.softmax(a).unwrap();
    for v in g.value(sm).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&[2, 3, 5, 5], &mut rng);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let xi = g.input(x.clone());
    let wi = g.input(w);
    let bi = g.input(Tensor::zeros(&[3]));
    let y = g.conv2d(xi, wi, bi, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn trivial_backward_examples() {
    let mut p = ParamTree::<f64>::new();
    p.insert("x", Tensor::from_f64(&[1], &[3.0]).unwrap());
    let mut g = Graph::new();
    let x = g.param_from(&p, "x").unwrap();
    let xx = g.mul(x, x).unwrap();
    let l = g.sum(xx);
    assert_eq!(g.param_grads(l, &p).unwrap().get("x").unwrap().data(), &[6.0]);

    let mut p = ParamTree::<f64>::new();
    p.insert("w", Tensor::from_f64(&[1], &[2.0]).unwrap());
    let mut g = Graph::new();
    let w = g.param_from(&p, "w").unwrap();
    let zero = g.input(Tensor::from_f64(&[1], &[0.0]).unwrap());
    let l = g.mse(w, zero).unwrap();
    assert_eq!(g.param_grads(l, &p).unwrap().get("w").unwrap().data(), &[4.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let p = tree(&[("x", &[3])], 11);
    let mut g = Graph::new();
    let x = g.param_from(&p, "x").unwrap();
    assert!(matches!(g.backward(x), Err(DiffError::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_names_op() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 4]));
    let e = g.matmul(a, b).unwrap_err().to_string();
    assert!(e.contains("matmul") && e.contains("[2, 3]"), "{}", e);
    let e = g.add(a, b).unwrap_err().to_string();
    assert!(e.contains("add"), "{}", e);
}

#[test]
fn adam_three_step_trace() {
    // m_t = (1 - 0.9^t) g, v_t = (1 - 0.999^t) g², so every bias-corrected step is lr·g/(|g| + eps)
    let mut p = ParamTree::<f64>::new();
    p.insert("w", Tensor::from_f64(&[1], &[0.0]).unwrap());
    let mut g = ParamTree::<f64>::new();
    g.insert("w", Tensor::from_f64(&[1], &[0.3]).unwrap());
    let cfg = OptimizerConfig {
        clip_norm: None,
        lr: 0.01,
        ..OptimizerConfig::default()
    };
    let mut opt = Optimizer::new(cfg);
    let mut prev = 0.0;
    for _ in 0..3 {
        opt.ascend(&mut p, &g, |_| true).unwrap();
        let now = p.get("w").unwrap().item();
        let expect = 0.01 * 0.3 / (0.3 + 1e-8);
        assert!(((now - prev) - expect).abs() < 1e-12);
        prev = now;
    }
    let out = optimizer_step(&p, &g.zeros_like(), &OptimizerConfig::sgd(0.1)).unwrap();
    assert_eq!(out, p);
}

fn two_losses(g: &mut Graph<f64>, t: &ParamTree<f64>) -> Result<(Var, Var), DiffError> {
    let x = g.param_from(t, "x")?;
    let w = g.param_from(t, "w")?;
    let y = g.matmul(x, w)?;
    let s = g.sigmoid(y);
    let l1 = g.mean(s);
    let sq = g.mul(x, x)?;
    let l2 = g.sum(sq);
    Ok((l1, l2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let p = tree(&[("x", &[3, 4]), ("w", &[4, 2])], seed);
        let grads = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let (l1, l2) = two_losses(&mut g, &p).unwrap();
            let s1 = g.scale(l1, ca);
            let s2 = g.scale(l2, cb);
            let l = g.add(s1, s2).unwrap();
            g.param_grads(l, &p).unwrap()
        };
        let combined = grads(a, b);
        let g1 = grads(1.0, 0.0);
        let g2 = grads(0.0, 1.0);
        for (path, t) in combined.iter() {
            let (x, y) = (g1.get(path).unwrap(), g2.get(path).unwrap());
            for i in 0..t.len() {
                let expect = a * x.data()[i] + b * y.data()[i];
                prop_assert!((t.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let p = tree(&[("x", &[1, 2, 6, 6]), ("w", &[3, 2, 3, 3]), ("b", &[3])], seed).cast::<f32>();
        let run = || {
            let mut g: Graph<f32> = Graph::new();
            let x = g.param_from(&p, "x").unwrap();
            let w = g.param_from(&p, "w").unwrap();
            let b = g.param_from(&p, "b").unwrap();
            let y = g.conv2d(x, w, b, 1).unwrap();
            let y = g.leaky_relu(y, 0.01);
            let y = g.upsample2(y).unwrap();
            let l = g.mean(y);
            let gr = g.param_grads(l, &p).unwrap();
            (g.value(y).clone(), gr)
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(ga, gb);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-20.0..20.0)).collect()).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let xi = g.input(x);
        let s = g.softmax(xi).unwrap();
        for r in g.value(s).data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
