use super::*;
use crate::linalg;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sp(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn mv(a: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..a.rows()).map(|i| a.row(i).iter().zip(v).map(|(p, q)| p * q).sum()).collect()
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| p + q).collect()
}

/// Straight-line evaluation of the PICNN recursion for one sample.
fn oracle_picnn(p: &StrictPotentialParams, x: &[f64], y: &[f64]) -> f64 {
    let s = &p.store;
    let mut v = y.to_vec();
    let mut w = x.to_vec();
    for layer in &p.picnn.layers {
        let gate: Vec<f64> = plus(&mv(s.get(layer.lwv), &v), s.get(layer.bwv).data()).into_iter().map(|t| t.max(0.0)).collect();
        let gated: Vec<f64> = w.iter().zip(&gate).map(|(a, b)| a * b).collect();
        let lw = s.get(layer.lw).map(|t| t.max(0.0));
        let mut z = plus(&mv(&lw, &gated), &mv(s.get(layer.lvw), &v));
        z = plus(&z, s.get(layer.bw).data());
        if let (Some(a), Some(b), Some(c)) = (layer.lxv, layer.bxv, layer.lx) {
            let sv = plus(&mv(s.get(a), &v), s.get(b).data());
            let xs: Vec<f64> = x.iter().zip(&sv).map(|(p, q)| p * q).collect();
            z = plus(&z, &mv(s.get(c), &xs));
        }
        let next: Vec<f64> = z.into_iter().map(sp).collect();
        if let (Some(a), Some(b)) = (layer.lv, layer.bv) {
            v = plus(&mv(s.get(a), &v), s.get(b).data()).into_iter().map(|t| if t > 0.0 { t } else { t.exp() - 1.0 }).collect();
        }
        w = next;
    }
    w[0]
}

fn oracle_strict(p: &StrictPotentialParams, x: &[f64], y: &[f64]) -> f64 {
    let g = p.gammas();
    sp(g[0]) * oracle_picnn(p, x, y) + (g[1].max(0.0) + sp(g[2])) * 0.5 * x.iter().map(|t| t * t).sum::<f64>()
}

fn randomize(p: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for e in p.entries_mut() {
        e.value.map_inplace(|_| scale * (2.0 * rng.random::<f64>() - 1.0));
    }
}

fn rand_row(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()
}

#[test]
fn table_dims_small_example() {
    let dims = PicnnDims { n: 1, m: 8, depth: 2, width: 32, context: 16 };
    let p = StrictPotentialParams::init(dims, 0).unwrap();
    let l0 = &p.picnn.layers[0];
    let shape = |i: usize| p.store.get(i).shape();
    assert_eq!(shape(l0.lv.unwrap()), (16, 8));
    assert_eq!(shape(l0.lvw), (32, 8));
    assert_eq!(shape(l0.lw), (32, 1));
    assert_eq!(shape(l0.lwv), (1, 8));
    assert!(l0.lxv.is_none() && l0.lx.is_none() && l0.bxv.is_none());
    let l1 = &p.picnn.layers[1];
    assert!(l1.lv.is_none() && l1.bv.is_none());
    assert_eq!(shape(l1.lvw), (1, 16));
    assert_eq!(shape(l1.lw), (1, 32));
    assert_eq!(shape(l1.lwv), (32, 16));
    assert_eq!(shape(l1.lxv.unwrap()), (1, 16));
    // The output layer maps to a scalar, so its L(x) has one row.
    assert_eq!(shape(l1.lx.unwrap()), (1, 1));
    // Biases match the rows of their weights.
    assert_eq!(shape(l0.bw), (1, 32));
    assert_eq!(shape(l0.bwv), (1, 1));
    assert_eq!(shape(l1.bxv.unwrap()), (1, 1));
    p.validate().unwrap();
}

#[test]
fn middle_layer_dims() {
    let dims = PicnnDims { n: 3, m: 2, depth: 4, width: 8, context: 4 };
    for k in 1..3 {
        let s = dims.layer_shapes(k);
        assert_eq!(s.lv, Some((4, 4)));
        assert_eq!(s.lvw, (8, 4));
        assert_eq!(s.lw, (8, 8));
        assert_eq!(s.lwv, (8, 4));
        assert_eq!(s.lxv, Some((3, 4)));
        assert_eq!(s.lx, Some((8, 3)));
    }
}

#[test]
fn context_width_default() {
    assert_eq!(default_context_width(32, 8), 8);
    assert_eq!(default_context_width(32, 9), 16);
    assert_eq!(default_context_width(4, 9), 4);
    assert_eq!(default_context_width(64, 1), 1);
}

#[test]
fn invalid_dims_rejected() {
    assert!(StrictPotentialParams::init(PicnnDims::new(1, 1, 1, 4), 0).is_err());
    assert!(StrictPotentialParams::init(PicnnDims::new(0, 1, 2, 4), 0).is_err());
    assert!(FicnnParams::init(FicnnDims { m: 2, depth: 0, width: 3 }, 0).is_err());
}

#[test]
fn zero_weights_give_softplus_chain() {
    let mut p = StrictPotentialParams::init(PicnnDims::new(2, 3, 3, 5), 1).unwrap();
    p.zero_picnn();
    let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]);
    let y = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.0]]);
    let pic = PicnnParams { layout: p.picnn.clone(), store: p.store.clone() };
    let w = picnn_forward(&pic, &x, &y).unwrap();
    // Each layer sees a zero pre-activation, so every unit is softplus(0).
    let ln2 = core::f64::consts::LN_2;
    for r in 0..2 {
        assert!((w[(r, 0)] - ln2).abs() < 1e-15);
    }
    // With the quadratic coefficient set to one.
    p.set_gammas([0.7, 1.0 - sp(-3.0), -3.0]);
    let g = strict_potential(&p, &x, &y).unwrap();
    for r in 0..2 {
        let sq: f64 = x.row(r).iter().map(|t| t * t).sum();
        assert!((g[(r, 0)] - (sp(0.7) * ln2 + 0.5 * sq)).abs() < 1e-14);
    }
}

#[test]
fn hand_evaluated_two_layer_scalar_net() {
    // n = m = w = u = 1, K = 2, every weight 1, biases 0.
    let mut p = StrictPotentialParams::init(PicnnDims { n: 1, m: 1, depth: 2, width: 1, context: 1 }, 0).unwrap();
    for e in p.store.entries_mut() {
        let v = if e.name.contains(".b") { 0.0 } else { 1.0 };
        e.value.map_inplace(|_| v);
    }
    let (x, y) = (0.5_f64, 2.0_f64);
    // layer 0: w1 = sp(1·(x·relu(y)) + y); v1 = elu(y)
    let w1 = sp(x * y + y);
    let v1 = y;
    // layer 1: w2 = sp(w1·relu(v1) + x·v1 + v1)
    let w2 = sp(w1 * v1 + x * v1 + v1);
    let pic = PicnnParams { layout: p.picnn.clone(), store: p.store.clone() };
    let got = picnn_forward(&pic, &Tensor::scalar(x), &Tensor::scalar(y)).unwrap().item();
    assert!((got - w2).abs() < 1e-14, "{got} vs {w2}");
}

#[test]
fn graph_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let dims = PicnnDims { n: 1 + trial % 3, m: 1 + trial % 2, depth: 2 + trial % 3, width: 3 + trial % 4, context: 2 };
        let mut p = StrictPotentialParams::init(dims, trial as u64).unwrap();
        randomize(&mut p.store, &mut rng, 1.0);
        let b = 3;
        let xs: Vec<Vec<f64>> = (0..b).map(|_| rand_row(&mut rng, dims.n, 2.0)).collect();
        let ys: Vec<Vec<f64>> = (0..b).map(|_| rand_row(&mut rng, dims.m, 2.0)).collect();
        let got = strict_potential(&p, &Tensor::from_rows(&xs), &Tensor::from_rows(&ys)).unwrap();
        for r in 0..b {
            let want = oracle_strict(&p, &xs[r], &ys[r]);
            assert!((got[(r, 0)] - want).abs() <= 1e-12 * (1.0 + want.abs()), "trial {trial}");
        }
    }
}

#[test]
fn midpoint_convexity_in_x() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000u64 {
        let dims = PicnnDims { n: 1 + (trial % 3) as usize, m: 1 + (trial % 2) as usize, depth: 2 + (trial % 2) as usize, width: 4, context: 2 };
        let mut p = StrictPotentialParams::init(dims, trial).unwrap();
        // Unprojected parameters: the forward ReLU alone must keep convexity.
        randomize(&mut p.store, &mut rng, 1.5);
        let pic = PicnnParams { layout: p.picnn.clone(), store: p.store.clone() };
        let x1 = rand_row(&mut rng, dims.n, 3.0);
        let x2 = rand_row(&mut rng, dims.n, 3.0);
        let y = rand_row(&mut rng, dims.m, 3.0);
        let mid: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| 0.5 * (a + b)).collect();
        let xt = Tensor::from_rows(&[x1, x2, mid]);
        let yt = Tensor::from_rows(&[y.clone(), y.clone(), y]);
        let w = picnn_forward(&pic, &xt, &yt).unwrap();
        assert!(w[(2, 0)] <= 0.5 * (w[(0, 0)] + w[(1, 0)]) + 1e-10, "trial {trial}");
    }
}

fn fd_grad(p: &StrictPotentialParams, x: &[f64], y: &[f64]) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (oracle_strict(p, &a, y) - oracle_strict(p, &b, y)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..10u64 {
        let dims = PicnnDims { n: 3, m: 2, depth: 3, width: 6, context: 2 };
        let mut p = StrictPotentialParams::init(dims, trial).unwrap();
        randomize(&mut p.store, &mut rng, 0.8);
        let x = rand_row(&mut rng, 3, 1.5);
        let y = rand_row(&mut rng, 2, 1.5);
        let got = potential_grad_x(&p, &Tensor::row_vector(&x), &Tensor::row_vector(&y)).unwrap();
        let want = fd_grad(&p, &x, &y);
        for i in 0..3 {
            let rel = (got[(0, i)] - want[i]).abs() / want[i].abs().max(1e-3);
            assert!(rel < 1e-6, "trial {trial} comp {i}: {} vs {}", got[(0, i)], want[i]);
        }
    }
}

#[test]
fn pure_quadratic_limits() {
    let mut p = StrictPotentialParams::init(PicnnDims::new(3, 2, 2, 4), 3).unwrap();
    p.set_gammas([-60.0, 0.4, 0.2]);
    let c = 0.4 + sp(0.2);
    let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, -1.0]]);
    let y = Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.9]]);
    let g = potential_grad_x(&p, &x, &y).unwrap();
    for r in 0..2 {
        for i in 0..3 {
            assert!((g[(r, i)] - c * x[(r, i)]).abs() < 1e-12);
        }
    }
    let hs = potential_hessian_x(&p, &x, &y).unwrap();
    for h in hs {
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { c } else { 0.0 };
                assert!((h[(i, j)] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn hessian_dominates_quadratic_and_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..30u64 {
        let dims = PicnnDims { n: 1 + (trial % 4) as usize, m: 2, depth: 3, width: 8, context: 2 };
        let mut p = StrictPotentialParams::init(dims, trial).unwrap();
        randomize(&mut p.store, &mut rng, 1.0);
        project_nonneg(&mut p);
        let c = p.quadratic_coefficient();
        let x = Tensor::from_fn(4, dims.n, |_, _| 2.0 * rng.random::<f64>() - 1.0);
        let y = Tensor::from_fn(4, 2, |_, _| 2.0 * rng.random::<f64>() - 1.0);
        for h in potential_hessian_x(&p, &x, &y).unwrap() {
            let n = h.rows();
            for i in 0..n {
                for j in 0..n {
                    assert!((h[(i, j)] - h[(j, i)]).abs() < 1e-8);
                }
            }
            let shifted = Tensor::from_fn(n, n, |i, j| h[(i, j)] - if i == j { c } else { 0.0 });
            let eig = linalg::sym_eigen(&shifted).unwrap();
            assert!(eig.values[0] >= -1e-10, "trial {trial}: {}", eig.values[0]);
        }
    }
}

#[test]
fn hessian_matches_second_difference_in_one_dim() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..10u64 {
        let mut p = StrictPotentialParams::init(PicnnDims { n: 1, m: 2, depth: 3, width: 5, context: 2 }, trial).unwrap();
        randomize(&mut p.store, &mut rng, 1.0);
        let x = rand_row(&mut rng, 1, 1.0);
        let y = rand_row(&mut rng, 2, 1.0);
        let h = potential_hessian_x(&p, &Tensor::row_vector(&x), &Tensor::row_vector(&y)).unwrap()[0].item();
        let e = 1e-4;
        let f = |d: f64| oracle_strict(&p, &[x[0] + d], &y);
        let fd = (f(e) - 2.0 * f(0.0) + f(-e)) / (e * e);
        assert!((h - fd).abs() / h.abs().max(1e-3) < 1e-5, "trial {trial}: {h} vs {fd}");
    }
}

#[test]
fn gradient_directional_derivative_matches_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = StrictPotentialParams::init(PicnnDims { n: 3, m: 1, depth: 3, width: 6, context: 1 }, 9).unwrap();
    randomize(&mut p.store, &mut rng, 1.0);
    let x = rand_row(&mut rng, 3, 1.0);
    let y = vec![0.4];
    let v = rand_row(&mut rng, 3, 1.0);
    let h = &potential_hessian_x(&p, &Tensor::row_vector(&x), &Tensor::row_vector(&y)).unwrap()[0];
    let hv = mv(h, &v);
    let e = 1e-6;
    let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + e * b).collect();
    let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - e * b).collect();
    let gp = potential_grad_x(&p, &Tensor::row_vector(&xp), &Tensor::row_vector(&y)).unwrap();
    let gm = potential_grad_x(&p, &Tensor::row_vector(&xm), &Tensor::row_vector(&y)).unwrap();
    for i in 0..3 {
        let dd = (gp[(0, i)] - gm[(0, i)]) / (2.0 * e);
        assert!((dd - hv[i]).abs() < 1e-8, "{dd} vs {}", hv[i]);
    }
}

#[test]
fn gradient_is_strictly_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..50u64 {
        let mut p = StrictPotentialParams::init(PicnnDims { n: 2, m: 2, depth: 2, width: 6, context: 2 }, trial).unwrap();
        randomize(&mut p.store, &mut rng, 1.0);
        let x1 = rand_row(&mut rng, 2, 2.0);
        let x2 = rand_row(&mut rng, 2, 2.0);
        let y = rand_row(&mut rng, 2, 2.0);
        let g = potential_grad_x(&p, &Tensor::from_rows(&[x1.clone(), x2.clone()]), &Tensor::from_rows(&[y.clone(), y])).unwrap();
        let ip: f64 = (0..2).map(|i| (g[(0, i)] - g[(1, i)]) * (x1[i] - x2[i])).sum();
        assert!(ip > 0.0);
    }
}

#[test]
fn init_is_deterministic_and_feasible() {
    let dims = PicnnDims::new(2, 3, 3, 16);
    let a = StrictPotentialParams::init(dims, 42).unwrap();
    let b = StrictPotentialParams::init(dims, 42).unwrap();
    let c = StrictPotentialParams::init(dims, 43).unwrap();
    assert_eq!(a.store.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.store.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_ne!(a.store.to_flat(), c.store.to_flat());
    assert!(a.store.is_feasible());
    assert_eq!(a.gammas(), GAMMA_INIT);
    assert!((a.quadratic_coefficient() - 1.0).abs() < 1e-4);
    // Glorot bound on the first L(vw): a = sqrt(6 / (16 + 3)).
    let bound = (6.0f64 / 19.0).sqrt();
    assert!(a.store.get(a.picnn.layers[0].lvw).max_abs() <= bound);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(5, 2, |_, _| rng.random::<f64>() * 4.0 - 2.0);
    let y = Tensor::from_fn(5, 3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
    for h in potential_hessian_x(&a, &x, &y).unwrap() {
        assert!(linalg::cholesky(&h).is_ok());
    }
}

#[test]
fn projection_touches_only_constrained_blocks() {
    let mut p = StrictPotentialParams::init(PicnnDims::new(2, 2, 3, 4), 0).unwrap();
    for e in p.store.entries_mut() {
        e.value.map_inplace(|_| -1.0);
    }
    project_nonneg(&mut p);
    for e in p.store.entries() {
        let want = if e.constraint == Constraint::NonNegative { 0.0 } else { -1.0 };
        assert!(e.value.data().iter().all(|&v| v == want), "{}", e.name);
    }
    let once = p.clone();
    project_nonneg(&mut p);
    assert_eq!(p, once);
    let lw = p.picnn.layers[1].lw;
    *p.store.get_mut(lw) = Tensor::from_rows(&vec![vec![-1.0, 2.0, 3.0, -4.0]; 4]);
    project_nonneg(&mut p);
    assert_eq!(p.store.get(lw).row(0), &[0.0, 2.0, 3.0, 0.0]);
}

fn oracle_ficnn(p: &FicnnParams, y: &[f64]) -> f64 {
    let s = &p.store;
    let mut st = y.to_vec();
    for l in &p.ficnn.layers {
        let mut z = plus(&mv(s.get(l.ly), y), s.get(l.b).data());
        if let Some(lw) = l.lw {
            z = plus(&z, &mv(s.get(lw), &st));
        }
        st = z.into_iter().map(sp).collect();
    }
    st[0]
}

#[test]
fn ficnn_zero_and_hand_cases() {
    let dims = FicnnDims { m: 2, depth: 3, width: 4 };
    let mut p = FicnnParams::init(dims, 0).unwrap();
    p.zero_ficnn();
    let y = Tensor::from_rows(&[vec![1.0, -2.0]]);
    assert!((ficnn_forward(&p, &y).unwrap().item() - core::f64::consts::LN_2).abs() < 1e-15);
    // L(w) = 1 everywhere, L(y) = 0, b = 0: s1 = ln 2, s2 = sp(4 ln 2), s3 = sp(4 s2).
    for e in p.store.entries_mut() {
        if e.name.ends_with(".lw") {
            e.value.map_inplace(|_| 1.0);
        }
    }
    let s2 = sp(4.0 * core::f64::consts::LN_2);
    let want = sp(4.0 * s2);
    assert!((ficnn_forward(&p, &y).unwrap().item() - want).abs() < 1e-12);
}

#[test]
fn ficnn_matches_oracle_and_is_convex() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..1000u64 {
        let dims = FicnnDims { m: 1 + (trial % 3) as usize, depth: 2 + (trial % 2) as usize, width: 4 };
        let mut p = FicnnParams::init(dims, trial).unwrap();
        randomize(&mut p.store, &mut rng, 1.5);
        project_nonneg(&mut p);
        let y1 = rand_row(&mut rng, dims.m, 3.0);
        let y2 = rand_row(&mut rng, dims.m, 3.0);
        let mid: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| 0.5 * (a + b)).collect();
        let s = ficnn_forward(&p, &Tensor::from_rows(&[y1.clone(), y2, mid])).unwrap();
        assert!(s[(2, 0)] <= 0.5 * (s[(0, 0)] + s[(1, 0)]) + 1e-10, "trial {trial}");
        let o = oracle_ficnn(&p, &y1);
        assert!((s[(0, 0)] - o).abs() <= 1e-12 * (1.0 + o.abs()));
    }
}

#[test]
fn ficnn_potential_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = FicnnDims { m: 3, depth: 3, width: 5 };
    let mut p = FicnnParams::init(dims, 1).unwrap();
    randomize(&mut p.store, &mut rng, 1.0);
    project_nonneg(&mut p);
    let y = rand_row(&mut rng, 3, 1.0);
    let (g, h) = grad_and_hessian(&p, &Tensor::row_vector(&y), None).unwrap();
    let gam: Vec<f64> = p.gamma.iter().map(|&i| p.store.get(i).item()).collect();
    let f = |v: &[f64]| sp(gam[0]) * oracle_ficnn(&p, v) + (gam[1].max(0.0) + sp(gam[2])) * 0.5 * v.iter().map(|t| t * t).sum::<f64>();
    let e = 1e-5;
    for i in 0..3 {
        let mut a = y.clone();
        let mut b = y.clone();
        a[i] += e;
        b[i] -= e;
        let fd = (f(&a) - f(&b)) / (2.0 * e);
        assert!((g[(0, i)] - fd).abs() / fd.abs().max(1e-3) < 1e-6);
    }
    assert!(linalg::cholesky(&Tensor::from_vec(3, 3, h.row(0).to_vec())).is_ok());
}
