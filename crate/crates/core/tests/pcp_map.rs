use cotlab_core::math::LN_2PI;
use cotlab_core::params::Constraint;
use cotlab_core::pcp::{self, NllGraph, PcpTrainConfig, SampleConfig};
use cotlab_core::potentials::{potential_grad_x, ConvexPotential, FicnnDims, FicnnParams, PicnnDims, StrictPotentialParams};
use cotlab_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softplus_inv(c: f64) -> f64 {
    (c.exp() - 1.0).ln()
}

/// A potential equal to `½c‖x‖²` up to a negligible PICNN term.
fn quadratic(n: usize, m: usize, c: f64) -> StrictPotentialParams {
    let mut p = StrictPotentialParams::init(PicnnDims::new(n, m, 2, 4), 0).unwrap();
    p.set_gammas([-80.0, 0.0, softplus_inv(c)]);
    p
}

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    pcp::standard_normal(rows, cols, seed)
}

#[test]
fn nll_of_identity_potential_is_half_square_norm() {
    let p = quadratic(2, 1, 1.0);
    let x = randn(16, 2, 1);
    let y = randn(16, 1, 2);
    let want: f64 = (0..16).map(|r| 0.5 * x.row(r).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / 16.0;
    assert!((pcp::nll_loss(&p, &x, &y).unwrap() - want).abs() < 1e-12);
}

#[test]
fn nll_of_scaled_quadratic_has_closed_form() {
    let c = 1.7;
    let p = quadratic(3, 2, c);
    let x = randn(10, 3, 3);
    let y = randn(10, 2, 4);
    let msq: f64 = (0..10).map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / 10.0;
    let want = 0.5 * c * c * msq - 3.0 * c.ln();
    assert!((pcp::nll_loss(&p, &x, &y).unwrap() - want).abs() < 1e-10);
    let per = pcp::nll_per_sample(&p, &x, &y).unwrap();
    let mean: f64 = per.iter().sum::<f64>() / 10.0;
    assert!((mean - want - 1.5 * LN_2PI).abs() < 1e-10);
}

fn away_from_kinks(p: &mut StrictPotentialParams) {
    for e in p.store.entries_mut() {
        if e.constraint == Constraint::NonNegative {
            e.value.map_inplace(|v| v + 0.05);
        }
    }
    let g = p.gammas();
    p.set_gammas([g[0], 0.3, g[2]]);
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let mut p = StrictPotentialParams::init(PicnnDims { n: 2, m: 1, depth: 3, width: 6, context: 2 }, 7).unwrap();
    away_from_kinks(&mut p);
    let x = randn(4, 2, 5);
    let y = randn(4, 1, 6);
    let mut graph = NllGraph::new(&p, 4).unwrap();
    let (loss, grads) = graph.loss_and_grad(&p, &x, Some(&y)).unwrap();
    assert!((loss - pcp::nll_loss(&p, &x, &y).unwrap()).abs() < 1e-13);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut q = p.clone();
            q.store.get_mut(k).data_mut()[j] += h;
            let fp = pcp::nll_loss(&q, &x, &y).unwrap();
            q.store.get_mut(k).data_mut()[j] -= 2.0 * h;
            let fm = pcp::nll_loss(&q, &x, &y).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let a = g.data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn zero_epochs_returns_initialization() {
    let x = randn(50, 2, 1);
    let y = randn(50, 1, 2);
    let cfg = PcpTrainConfig { epochs: 0, seed: 9, width: 8, ..Default::default() };
    let (p, report) = pcp::train(&cfg, (&x, &y), (&x, &y)).unwrap();
    let init = StrictPotentialParams::init(cfg.dims(2, 1), 9).unwrap();
    assert_eq!(p, init);
    assert_eq!(report.steps, 0);
}

#[test]
fn training_on_standard_normal_reaches_entropy() {
    let n_train = 5000;
    let x = randn(n_train, 1, 10);
    let y = randn(n_train, 1, 11);
    let xv = randn(1000, 1, 12);
    let yv = randn(1000, 1, 13);
    let cfg = PcpTrainConfig { batch_size: 128, learning_rate: 1e-2, epochs: 6, depth: 2, width: 16, seed: 3, ..Default::default() };
    let (p, report) = pcp::train(&cfg, (&x, &y), (&xv, &yv)).unwrap();
    assert!(!report.diverged());
    assert!(p.store.is_feasible());
    let xt = randn(20000, 1, 14);
    let yt = randn(20000, 1, 15);
    let nll: f64 = pcp::nll_per_sample(&p, &xt, &yt).unwrap().iter().sum::<f64>() / 20000.0;
    let entropy = 0.5 * (1.0 + LN_2PI);
    assert!((nll - entropy).abs() < 0.05, "nll {nll} vs entropy {entropy}");
}

#[test]
fn inversion_of_quadratic() {
    let c = 2.5;
    let p = quadratic(3, 1, c);
    let z = [1.0, -2.0, 0.25];
    let cfg = SampleConfig { tolerance: 1e-10, ..Default::default() };
    let inv = pcp::invert(&p, &z, &[0.3], &cfg).unwrap();
    assert!(inv.converged);
    for i in 0..3 {
        assert!((inv.x[i] - z[i] / c).abs() < 1e-10);
    }
}

fn perturbed(seed: u64) -> StrictPotentialParams {
    let mut p = StrictPotentialParams::init(PicnnDims { n: 2, m: 2, depth: 3, width: 8, context: 2 }, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in p.store.entries_mut() {
        e.value.map_inplace(|v| v + 0.3 * (rng.random::<f64>() - 0.5));
    }
    cotlab_core::potentials::project_nonneg(&mut p);
    p
}

#[test]
fn inversion_round_trip_at_tight_tolerance() {
    let p = perturbed(4);
    let cfg = SampleConfig { tolerance: 1e-9, ..Default::default() };
    let mut inv = pcp::Inverter::new(&p).unwrap();
    let x = randn(50, 2, 8);
    let y = randn(50, 2, 9);
    let z = potential_grad_x(&p, &x, &y).unwrap();
    for r in 0..50 {
        let out = inv.invert(&p, z.row(r), y.row(r), &cfg).unwrap();
        assert!(out.converged, "row {r}: {out:?}");
        assert!(out.residual <= 1e-9);
        let err = (0..2).map(|i| (out.x[i] - x[(r, i)]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "row {r}: {err}");
    }
}

#[test]
fn samples_of_quadratic_are_scaled_gaussian() {
    let c = 2.0;
    let p = quadratic(2, 1, c);
    let cfg = SampleConfig::default();
    let s = pcp::sample_posterior(&p, &[0.5], 4000, &cfg, 21).unwrap();
    assert_eq!(s.non_converged(), 0);
    let mean = s.x.col_means();
    let cov = s.x.covariance();
    for i in 0..2 {
        assert!(mean[i].abs() < 4.0 * 0.5 / 4000f64.sqrt());
        assert!((cov[(i, i)] - 0.25).abs() < 0.025);
    }
    let again = pcp::sample_posterior(&p, &[0.5], 4000, &cfg, 21).unwrap();
    assert_eq!(s, again);
}

#[test]
fn map_of_quadratic_is_origin_from_any_start() {
    let p = quadratic(2, 1, 1.3);
    let cfg = SampleConfig::default();
    for x0 in [[0.4, -0.2], [-1.0, 2.0]] {
        let m = pcp::map_point(&p, &[0.0], &x0, &cfg).unwrap();
        assert!(m.converged);
        assert!(m.x.iter().all(|v| v.abs() < 1e-6), "{m:?}");
        let want = 2.0 * 1.3f64.ln() - LN_2PI;
        assert!((m.log_density - want).abs() < 1e-9);
    }
}

#[test]
fn map_agrees_across_starts_on_perturbed_model() {
    let p = perturbed(2);
    let cfg = SampleConfig { tolerance: 1e-8, ..Default::default() };
    let y = [0.2, -0.1];
    let a = pcp::map_point(&p, &y, &[0.1, 0.1], &cfg).unwrap();
    let b = pcp::map_point(&p, &y, &[-0.2, 0.3], &cfg).unwrap();
    for i in 0..2 {
        assert!((a.x[i] - b.x[i]).abs() < 1e-4);
    }
}

#[test]
fn joint_nll_of_identity_blocks_is_joint_entropy() {
    let (n, m) = (2, 2);
    let px = quadratic(n, m, 1.0);
    let mut py = FicnnParams::init(FicnnDims { m, depth: 2, width: 4 }, 1).unwrap();
    py.set_gammas([-80.0, 0.0, softplus_inv(1.0)]);
    let x = randn(40000, n, 30);
    let y = randn(40000, m, 31);
    let model = pcp::JointPcp { pot_x: px.clone(), pot_y: py.clone() };
    let per = pcp::joint_nll_per_sample(&model, &x, &y).unwrap();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    let want = 0.5 * (n + m) as f64 * (1.0 + LN_2PI);
    assert!((mean - want).abs() < 0.03, "{mean} vs {want}");
    // The joint value is the sum of the two block terms.
    let jx = pcp::nll_loss(&px, &x, &y).unwrap();
    let joint = pcp::joint_nll(&px, &py, &x, &y).unwrap();
    let mut cache = pcp::NllCache::new();
    let jy = cache.mean_loss(&py, &y, None, 512).unwrap();
    assert!((joint - jx - jy).abs() < 1e-10);
}

#[test]
fn ficnn_nll_gradient_matches_finite_differences() {
    let mut p = FicnnParams::init(FicnnDims { m: 2, depth: 3, width: 5 }, 3).unwrap();
    for e in p.store.entries_mut() {
        if e.constraint == Constraint::NonNegative {
            e.value.map_inplace(|v| v + 0.05);
        }
    }
    p.set_gammas([0.1, 0.3, 0.2]);
    let y = randn(4, 2, 3);
    let mut graph = NllGraph::new(&p, 4).unwrap();
    let (_, grads) = graph.loss_and_grad(&p, &y, None).unwrap();
    let mut cache = pcp::NllCache::new();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut q = p.clone();
            q.store.get_mut(k).data_mut()[j] += h;
            let fp = cache.mean_loss(&q, &y, None, 4).unwrap();
            q.store.get_mut(k).data_mut()[j] -= 2.0 * h;
            let fm = cache.mean_loss(&q, &y, None, 4).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (g.data()[j] - fd).abs() / g.data()[j].abs().max(fd.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-5, "{worst}");
    assert_eq!(p.input_dim(), 2);
}
