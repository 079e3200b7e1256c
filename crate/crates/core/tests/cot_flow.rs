use cotlab_core::cot::{self, EmbedDims, FlowConfig, InverseGraph, PhiDims, PhiParams};
use cotlab_core::linalg;
use cotlab_core::math::LN_2PI;
use cotlab_core::pcp::standard_normal;
use cotlab_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_row(d: usize, i: usize) -> Tensor {
    Tensor::from_fn(1, d, |_, c| if c == i { 1.0 } else { 0.0 })
}

/// `Φ = ½a‖x‖²` through the quadratic block.
fn radial(n: usize, m: usize, a: f64, alpha1: f64) -> PhiParams {
    let dims = PhiDims::new(n, m, 4, None);
    let mut p = PhiParams::zeros(dims, alpha1, 0.0).unwrap();
    let d = dims.q_dim();
    let qa = Tensor::from_fn(d, n, |r, c| if r == c + 1 { a.sqrt() } else { 0.0 });
    p.set_quadratic(qa, Tensor::zeros(1, d), 0.0).unwrap();
    p
}

fn perturbed(dims: PhiDims, seed: u64) -> PhiParams {
    let mut p = PhiParams::init(dims, 2.0, 0.5, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for e in p.store.entries_mut() {
        e.value.map_inplace(|v| v + 0.2 * (rng.random::<f64>() - 0.5));
    }
    p.store.project();
    p
}

#[test]
fn linear_phi_has_unit_gradient_and_no_curvature() {
    let dims = PhiDims::new(3, 2, 5, None);
    let mut p = PhiParams::zeros(dims, 1.0, 0.0).unwrap();
    p.set_quadratic(Tensor::zeros(dims.q_dim(), dims.rank), unit_row(dims.q_dim(), 2), 0.0).unwrap();
    let x = standard_normal(4, 3, 1);
    let y = standard_normal(4, 2, 2);
    let e = cot::phi_eval(&p, 0.3, &x, Some(&y)).unwrap();
    for r in 0..4 {
        assert_eq!(e.value[(r, 0)], x[(r, 1)]);
        assert_eq!(e.grad_x.row(r), &[0.0, 1.0, 0.0]);
        assert_eq!(e.laplacian[(r, 0)], 0.0);
        assert_eq!(e.dt[(r, 0)], 0.0);
    }
}

#[test]
fn identity_quadratic_block_has_laplacian_n() {
    let p = radial(3, 1, 1.0, 1.0);
    let x = standard_normal(5, 3, 3);
    let y = standard_normal(5, 1, 4);
    let e = cot::phi_eval(&p, 0.7, &x, Some(&y)).unwrap();
    for r in 0..5 {
        assert!((e.laplacian[(r, 0)] - 3.0).abs() < 1e-14);
        for i in 0..3 {
            assert!((e.grad_x[(r, i)] - x[(r, i)]).abs() < 1e-14);
        }
    }
}

fn phi_at(p: &PhiParams, t: f64, x: &[f64], y: &[f64]) -> f64 {
    let xt = Tensor::row_vector(x);
    let yt = Tensor::row_vector(y);
    cot::phi_eval(p, t, &xt, Some(&yt)).unwrap().value[(0, 0)]
}

#[test]
fn phi_derivatives_match_finite_differences() {
    let p = perturbed(PhiDims::new(3, 2, 6, None), 5);
    let x = [0.3, -0.8, 0.5];
    let y = [0.1, -0.4];
    let t = 0.4;
    let e = cot::phi_eval(&p, t, &Tensor::row_vector(&x), Some(&Tensor::row_vector(&y))).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
    let h = 1e-5;
    let f0 = phi_at(&p, t, &x, &y);
    let mut lap = 0.0;
    for i in 0..3 {
        let mut xp = x;
        xp[i] += h;
        let mut xm = x;
        xm[i] -= h;
        let (fp, fm) = (phi_at(&p, t, &xp, &y), phi_at(&p, t, &xm, &y));
        assert!(rel(e.grad_x[(0, i)], (fp - fm) / (2.0 * h)) < 1e-5);
        let h2 = 1e-4;
        let mut xp = x;
        xp[i] += h2;
        let mut xm = x;
        xm[i] -= h2;
        lap += (phi_at(&p, t, &xp, &y) - 2.0 * f0 + phi_at(&p, t, &xm, &y)) / (h2 * h2);
    }
    assert!(rel(e.laplacian[(0, 0)], lap) < 1e-5, "{} vs {lap}", e.laplacian[(0, 0)]);
    let dt = (phi_at(&p, t + h, &x, &y) - phi_at(&p, t - h, &x, &y)) / (2.0 * h);
    assert!(rel(e.dt[(0, 0)], dt) < 1e-5);
}

#[test]
fn linear_flow_is_exact() {
    let alpha1 = 4.0;
    let dims = PhiDims::new(2, 1, 3, None);
    let mut p = PhiParams::zeros(dims, alpha1, 1.0).unwrap();
    let b = Tensor::row_vector(&[0.5, 1.5, -2.0, 0.25]);
    p.set_quadratic(Tensor::zeros(4, dims.rank), b, 0.0).unwrap();
    let x = standard_normal(6, 2, 7);
    let y = standard_normal(6, 1, 8);
    for nt in [1, 3] {
        let s = cot::integrate_inverse(&p, &x, Some(&y), nt).unwrap();
        for r in 0..6 {
            assert!((s.p[(r, 0)] - (x[(r, 0)] + 1.5 / alpha1)).abs() < 1e-14);
            assert!((s.p[(r, 1)] - (x[(r, 1)] - 2.0 / alpha1)).abs() < 1e-14);
            assert_eq!(s.ell[(r, 0)], 0.0);
        }
        let back = cot::sample_flow(&p, Some(&y), &s.p, nt).unwrap();
        assert!(back.sub(&x).max_abs() < 1e-14);
        let errs = cot::nt_consistency(&p, Some(&y), &x, &[1, 2, 4], 8).unwrap();
        assert!(errs.iter().all(|&e| e < 1e-14));
    }
}

fn radial_error(nt: usize) -> f64 {
    let (a, alpha1) = (1.2, 1.0);
    let p = radial(2, 1, a, alpha1);
    let x = Tensor::from_rows(&[vec![0.7, -1.1], vec![0.2, 0.4]]);
    let y = Tensor::from_rows(&[vec![0.3], vec![-0.5]]);
    let s = cot::integrate_inverse(&p, &x, Some(&y), nt).unwrap();
    let want = x.scale((a / alpha1).exp());
    for r in 0..2 {
        assert!((s.ell[(r, 0)] - 2.0 * a / alpha1).abs() < 1e-12);
    }
    s.p.sub(&want).max_abs()
}

#[test]
fn radial_flow_matches_closed_form_at_fourth_order() {
    let errs: Vec<f64> = [4, 8, 16, 32].iter().map(|&nt| radial_error(nt)).collect();
    assert!(errs[3] < 1e-6);
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio} from {errs:?}");
    }
}

fn p0_of(p: &PhiParams, x: &[f64], y: &[f64], nt: usize) -> Vec<f64> {
    cot::integrate_inverse(p, &Tensor::row_vector(x), Some(&Tensor::row_vector(y)), nt).unwrap().p.row(0).to_vec()
}

#[test]
fn log_determinant_matches_jacobian_of_the_discrete_map() {
    for n in [2, 3] {
        let p = perturbed(PhiDims::new(n, 1, 6, None), 11 + n as u64);
        let x: Vec<f64> = (0..n).map(|i| 0.4 - 0.3 * i as f64).collect();
        let y = [0.25];
        let nt = 16;
        let s = cot::integrate_inverse(&p, &Tensor::row_vector(&x), Some(&Tensor::row_vector(&y)), nt).unwrap();
        let h = 1e-5;
        let mut jac = Tensor::zeros(n, n);
        for j in 0..n {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let (fp, fm) = (p0_of(&p, &xp, &y, nt), p0_of(&p, &xm, &y, nt));
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let lu = linalg::inverse(&jac).unwrap();
        let det_inv = linalg::logdet_via_eigen(&lu.matmul(&lu.transpose())).unwrap();
        let logdet = -0.5 * det_inv;
        assert!((s.ell[(0, 0)] - logdet).abs() < 1e-3, "n={n}: {} vs {logdet}", s.ell[(0, 0)]);
    }
}

#[test]
fn transport_cost_bounds_straight_line_energy() {
    let p = perturbed(PhiDims::new(2, 2, 8, None), 3);
    let x = standard_normal(64, 2, 1);
    let y = standard_normal(64, 2, 2);
    let s = cot::integrate_inverse(&p, &x, Some(&y), 8).unwrap();
    for r in 0..64 {
        let d: f64 = (0..2).map(|i| (s.p[(r, i)] - x[(r, i)]).powi(2)).sum();
        assert!(s.cost[(r, 0)] >= 0.5 * d - 1e-8);
        assert!(s.hjb[(r, 0)] >= 0.0);
    }
}

#[test]
fn zero_value_function_gives_identity_loss() {
    let p = PhiParams::zeros(PhiDims::new(2, 1, 4, None), 3.0, 7.0).unwrap();
    let x = standard_normal(20, 2, 4);
    let y = standard_normal(20, 1, 5);
    let want: f64 = (0..20).map(|r| 0.5 * (x[(r, 0)].powi(2) + x[(r, 1)].powi(2))).sum::<f64>() / 20.0;
    assert!((cot::cot_loss(&p, &x, Some(&y), 4).unwrap() - want).abs() < 1e-14);
    let per = cot::nll_per_sample(&p, &x, Some(&y), 4).unwrap();
    let mean = per.iter().sum::<f64>() / 20.0;
    assert!((mean - want - LN_2PI).abs() < 1e-12);
}

#[test]
fn hjb_weight_enters_linearly() {
    let mut p = perturbed(PhiDims::new(2, 1, 8, None), 6);
    let x = standard_normal(10, 2, 6);
    let y = standard_normal(10, 1, 7);
    p.alpha2 = 0.0;
    let l0 = cot::cot_loss(&p, &x, Some(&y), 3).unwrap();
    p.alpha2 = 1.0;
    let l1 = cot::cot_loss(&p, &x, Some(&y), 3).unwrap();
    let t = cot::cot_terms(&p, &x, Some(&y), 3).unwrap();
    assert!((l1 - l0 - t.hjb).abs() < 1e-12);
    assert!(t.hjb > 0.0);
}

fn gradient_check(p: &PhiParams, x: &Tensor, y: &Tensor, nt: usize) -> f64 {
    let mut graph = InverseGraph::new(p, x.rows(), nt, true).unwrap();
    let (loss, _, grads) = graph.loss_and_grad(p, x, Some(y)).unwrap();
    assert!((loss - cot::cot_loss(p, x, Some(y), nt).unwrap()).abs() < 1e-12);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut q = p.clone();
            q.store.get_mut(k).data_mut()[j] += h;
            let fp = cot::cot_loss(&q, x, Some(y), nt).unwrap();
            q.store.get_mut(k).data_mut()[j] -= 2.0 * h;
            let fm = cot::cot_loss(&q, x, Some(y), nt).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let a = g.data()[j];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
        }
    }
    worst
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let p = perturbed(PhiDims::new(2, 1, 8, None), 9);
    let x = standard_normal(4, 2, 10);
    let y = standard_normal(4, 1, 11);
    let worst = gradient_check(&p, &x, &y, 2);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn gradient_flows_through_the_embedding() {
    let dims = PhiDims::new(2, 3, 6, Some(EmbedDims { hidden: 4, output: 2 }));
    let p = perturbed(dims, 12);
    assert_eq!(p.dims.q_dim(), 5);
    let x = standard_normal(3, 2, 13);
    let y = standard_normal(3, 3, 14);
    let worst = gradient_check(&p, &x, &y, 2);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn degenerate_embedding_returns_its_bias() {
    let dims = PhiDims::new(1, 2, 3, Some(EmbedDims { hidden: 5, output: 2 }));
    let mut p = PhiParams::init(dims, 1.0, 1.0, 0).unwrap();
    let names: Vec<String> = p.store.entries().iter().map(|e| e.name.clone()).collect();
    for (e, name) in p.store.entries_mut().iter_mut().zip(&names) {
        if name == "embed.W2" || name == "embed.W3" {
            e.value.map_inplace(|_| 0.0);
        }
        if name == "embed.b3" {
            e.value = Tensor::row_vector(&[0.5, -1.0]);
        }
    }
    let y = standard_normal(4, 2, 1);
    let out = cot::embed_context(&p, &y).unwrap();
    for r in 0..4 {
        assert_eq!(out.row(r), &[0.5, -1.0]);
    }
    let plain = PhiParams::init(PhiDims::new(1, 2, 3, None), 1.0, 1.0, 0).unwrap();
    assert_eq!(cot::embed_context(&plain, &y).unwrap(), y);
}

#[test]
fn zero_epochs_returns_initialization() {
    let x = standard_normal(30, 2, 1);
    let y = standard_normal(30, 1, 2);
    let cfg = FlowConfig { epochs: 0, width: 6, seed: 4, ..Default::default() };
    let (p, report) = cot::train_flow(&cfg, (&x, Some(&y)), (&x, Some(&y))).unwrap();
    let init = PhiParams::init(cfg.dims(2, 1), cfg.alpha1, cfg.alpha2, 4).unwrap();
    assert_eq!(p, init);
    assert_eq!(report.steps, 0);
}

#[test]
fn training_keeps_network_weights_in_the_box() {
    let x = standard_normal(64, 2, 1).scale(3.0);
    let y = standard_normal(64, 1, 2);
    let cfg = FlowConfig { epochs: 3, width: 6, nt: 2, batch_size: 16, learning_rate: 0.5, ..Default::default() };
    let (p, _) = cot::train_flow(&cfg, (&x, Some(&y)), (&x, Some(&y))).unwrap();
    assert!(p.nn_max_abs() <= 1.5);
    assert!(p.store.is_feasible());
}

#[test]
fn training_on_shifted_gaussian_approaches_entropy() {
    let n_train = 4000;
    let y = standard_normal(n_train, 1, 20);
    let noise = standard_normal(n_train, 1, 21);
    let x = Tensor::from_fn(n_train, 1, |r, _| 0.8 * y[(r, 0)] + 0.6 * noise[(r, 0)]);
    let yv = standard_normal(1000, 1, 22);
    let nv = standard_normal(1000, 1, 23);
    let xv = Tensor::from_fn(1000, 1, |r, _| 0.8 * yv[(r, 0)] + 0.6 * nv[(r, 0)]);
    // A small α₁ keeps the transport penalty from biasing the likelihood.
    let cfg = FlowConfig { nt: 4, alpha1: 0.1, alpha2: 0.1, width: 8, batch_size: 128, learning_rate: 1e-2, epochs: 10, seed: 1, ..Default::default() };
    let (p, report) = cot::train_flow(&cfg, (&x, Some(&y)), (&xv, Some(&yv))).unwrap();
    assert!(!report.diverged());
    let nll: f64 = cot::nll_per_sample(&p, &xv, Some(&yv), 8).unwrap().iter().sum::<f64>() / 1000.0;
    let entropy = 0.5 * (1.0 + LN_2PI) + 0.6f64.ln();
    assert!((nll - entropy).abs() < 0.1, "nll {nll} vs entropy {entropy}");
    let z = standard_normal(200, 1, 30);
    let yc = Tensor::row_vector(&[0.5]);
    let a = cot::sample_flow(&p, Some(&yc), &z, 8).unwrap();
    assert_eq!(a, cot::sample_flow(&p, Some(&yc), &z, 8).unwrap());
    let yr = Tensor::from_fn(200, 1, |_, _| 0.5);
    let back = cot::integrate_inverse(&p, &a, Some(&yr), 32).unwrap();
    let fwd = cot::sample_flow(&p, Some(&yc), &back.p, 32).unwrap();
    assert!(fwd.sub(&a).max_abs() < 1e-3);
}

#[test]
fn invalid_configurations_are_rejected() {
    let dims = PhiDims::new(2, 1, 4, None);
    assert!(PhiParams::init(dims, 0.0, 1.0, 0).is_err());
    assert!(PhiParams::init(dims, 1.0, -1.0, 0).is_err());
    let p = PhiParams::init(dims, 1.0, 1.0, 0).unwrap();
    let x = standard_normal(2, 2, 0);
    assert!(cot::integrate_inverse(&p, &x, None, 2).is_err());
    let y = standard_normal(2, 1, 0);
    assert!(cot::integrate_inverse(&p, &x, Some(&y), 0).is_err());
    assert_eq!(PhiDims::new(30, 5, 4, None).rank, 10);
    assert_eq!(PhiDims::new(2, 1, 4, None).rank, 4);
}
