use cotlab_core::data::*;
use cotlab_core::linalg::sym_eigen;
use cotlab_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn two_by_two() -> GaussianBenchSpec {
    GaussianBenchSpec::new(1, 1, vec![0.0, 0.0], Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 1.0]])).unwrap()
}

fn mean_cov(t: &Tensor) -> (Vec<f64>, Tensor) {
    (t.col_means(), t.covariance())
}

#[test]
fn schur_complement_by_hand() {
    let c = analytic_conditional(&two_by_two(), &[1.0]).unwrap();
    assert!((c.mean[0] - 1.0).abs() < 1e-14);
    assert!((c.cov[(0, 0)] - 1.0).abs() < 1e-14);
    let out = c.map(&Tensor::from_rows(&[vec![0.0], vec![0.7]]));
    assert!((out[(0, 0)] - 1.0).abs() < 1e-12 && (out[(1, 0)] - 1.7).abs() < 1e-12);
}

#[test]
fn conditional_matches_monte_carlo_residuals() {
    let (x, y) = sample_joint(&two_by_two(), 100_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let r: Vec<f64> = (0..x.rows()).map(|i| x[(i, 0)] - y[(i, 0)]).collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let cov_ry = r.iter().zip(y.data()).map(|(a, b)| (a - mean) * b).sum::<f64>() / n;
    assert!(mean.abs() < 0.015, "{mean}");
    assert!((var - 1.0).abs() < 0.02, "{var}");
    assert!(cov_ry.abs() < 0.015, "{cov_ry}");
}

#[test]
fn independent_blocks_give_the_marginal() {
    let cov = Tensor::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 0.5, 0.0], vec![0.0, 0.0, 2.0]]);
    let spec = GaussianBenchSpec::new(2, 1, vec![1.0, -1.0, 4.0], cov).unwrap();
    let a = analytic_conditional(&spec, &[0.0]).unwrap();
    let b = analytic_conditional(&spec, &[9.0]).unwrap();
    assert_eq!(a.mean, vec![1.0, -1.0]);
    assert_eq!(a.mean, b.mean);
    assert!((a.cov[(0, 0)] - 3.0).abs() < 1e-14 && (a.cov[(1, 1)] - 0.5).abs() < 1e-14);
    assert!((a.sqrt[(0, 0)] - 3f64.sqrt()).abs() < 1e-12);
}

#[test]
fn joint_sample_covariance_converges() {
    let spec = GaussianBenchSpec::standard();
    let (x, y) = sample_joint(&spec, 100_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let joint = Tensor::hcat(&[&x, &y]);
    let err = joint.covariance().sub(&spec.cov).frobenius() / spec.cov.frobenius();
    assert!(err < 0.05, "{err}");
}

#[test]
fn brenier_map_reproduces_the_conditional() {
    let spec = GaussianBenchSpec::standard();
    let c = analytic_conditional(&spec, &[0.8]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = Tensor::from_fn(100_000, 2, |_, _| StandardNormal.sample(&mut rng));
    let (m, s) = mean_cov(&c.map(&z));
    // Σxx − Σxy Σyy⁻¹ Σyx by hand for the standard spec, and mean = Σxy·y.
    let want_cov = Tensor::from_rows(&[vec![1.0 - 0.36, 0.4 + 0.18], vec![0.4 + 0.18, 1.0 - 0.09]]);
    assert!((m[0] - 0.48).abs() < 0.01 && (m[1] + 0.24).abs() < 0.01, "{m:?}");
    assert!(s.sub(&want_cov).frobenius() / want_cov.frobenius() < 0.02);
    assert!(c.cov.sub(&want_cov).max_abs() < 1e-12);
    let entropy = 1.0 + (2.0 * std::f64::consts::PI).ln() + 0.5 * (0.64 * 0.91 - 0.58 * 0.58f64).ln();
    assert!((c.entropy - entropy).abs() < 1e-12);
}

#[test]
fn normalized_oracle_shifts_nll_by_the_log_scale() {
    let bench = gaussian_bench(&GaussianBenchSpec::standard(), 2000, 4).unwrap();
    let ds = &bench.dataset;
    let (xn, yn) = ds.part(Split::Test);
    let idx = &ds.splits.test;
    let raw = bench.oracle.nll(&ds.x.select_rows(idx), &ds.y.select_rows(idx));
    let norm = bench.normalized.nll(&xn, &yn);
    let shift = ds.norm.x.log_scale();
    for (a, b) in raw.iter().zip(&norm) {
        assert!((a - (b + shift)).abs() < 1e-10);
    }
    assert_eq!((ds.splits.train.len(), ds.splits.valid.len(), ds.splits.test.len()), (1600, 200, 200));
}

#[test]
fn non_spd_benchmark_is_rejected() {
    let bad = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
    assert!(GaussianBenchSpec::new(1, 1, vec![0.0, 0.0], bad).is_err());
    let asym = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]);
    assert!(GaussianBenchSpec::new(1, 1, vec![0.0, 0.0], asym).is_err());
}

fn ks_uniform(mut v: Vec<f64>, lo: f64, hi: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = (x - lo) / (hi - lo);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn prior_marginals_are_uniform() {
    let draws: Vec<[f64; 4]> = (0..10_000).map(|i| sample_lv_prior(&mut stream_rng(11, i))).collect();
    for c in 0..4 {
        let col: Vec<f64> = draws.iter().map(|d| d[c]).collect();
        assert!(col.iter().all(|v| (-5.0..2.0).contains(v)));
        let ks = ks_uniform(col, LV_PRIOR.0, LV_PRIOR.1);
        assert!(ks < 0.02, "component {c}: {ks}");
    }
}

#[test]
fn reference_rates_lie_inside_the_prior() {
    for x in [0.01f64, 0.5, 1.0, 0.01] {
        let l = x.ln();
        assert!(l > LV_PRIOR.0 && l < LV_PRIOR.1);
    }
}

#[test]
fn fixed_seed_gives_identical_events() {
    let cfg = LvConfig::default();
    let p = LvParams { rates: [0.01, 0.5, 1.0, 0.01] };
    let a = gillespie_lv(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = gillespie_lv(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.s1.len(), 151);
    assert!(a.events > 0);
    let c = gillespie_lv(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    assert_ne!(a.s1, c.s1);
}

#[test]
fn summary_has_nine_named_entries() {
    assert_eq!(LV_SUMMARY_NAMES.len(), 9);
    let d = lv_draw(0, 0, &LvConfig::default()).unwrap();
    assert_eq!(d.summary.len(), 9);
    assert!(d.summary.iter().all(|v| v.is_finite()));
}

#[test]
fn small_lv_dataset_is_deterministic() {
    let cfg = LvConfig::default();
    let a = build_lv_dataset(10, 5, &cfg).unwrap();
    let b = build_lv_dataset(10, 5, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.truncated.len(), 10);
    assert_eq!((a.dataset.n(), a.dataset.m()), (4, 9));
    assert_eq!((a.dataset.splits.train.len(), a.dataset.splits.valid.len()), (9, 1));
    assert!(a.dataset.x.data().iter().all(|v| (-5.0..2.0).contains(v)));
}

#[test]
fn pca_of_a_line_explains_everything() {
    let d = Tensor::from_fn(50, 3, |r, c| (r as f64 - 20.0) * [1.0, -2.0, 0.5][c] + 7.0);
    let p = pca_project(&d, 1).unwrap();
    assert!((p.explained - 1.0).abs() < 1e-12);
    let dir = [1.0, -2.0, 0.5];
    let norm = (1.0f64 + 4.0 + 0.25).sqrt();
    let cos: f64 = (0..3).map(|i| p.basis[(i, 0)] * dir[i] / norm).sum();
    assert!((cos.abs() - 1.0).abs() < 1e-10);
    assert!(p.reconstruct(&p.projected).sub(&d).max_abs() < 1e-9);
}

#[test]
fn pca_basis_is_orthonormal_and_ratios_match_the_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let raw = Tensor::from_fn(300, 5, |_, _| StandardNormal.sample(&mut rng));
    let mix = Tensor::from_fn(5, 5, |r, c| if r <= c { 1.0 + (r * c) as f64 * 0.3 } else { 0.0 });
    let d = raw.matmul(&mix);
    let k = 3;
    let p = pca_project(&d, k).unwrap();
    let gram = p.basis.transpose().matmul(&p.basis);
    assert!(gram.sub(&Tensor::identity(k)).max_abs() < 1e-10);
    let cov = d.covariance();
    let trace: f64 = (0..5).map(|i| cov[(i, i)]).sum();
    let mut all = sym_eigen(&cov).unwrap().values;
    all.reverse();
    let want = all[..k].iter().sum::<f64>() / trace;
    assert!((p.explained - want).abs() < 1e-10);
    let proj_var = p.projected.covariance();
    for j in 0..k {
        assert!((proj_var[(j, j)] - p.values[j]).abs() < 1e-8 * p.values[0]);
    }
    assert!(pca_project(&d, 0).is_err() && pca_project(&d, 6).is_err());
}

#[test]
fn uci_split_of_concrete_size() {
    let t = RawTable {
        headers: (0..4).map(|i| format!("f{i}")).collect(),
        rows: Tensor::from_fn(1030, 4, |r, c| ((r * (c + 3)) as f64 * 0.731).sin() + 0.001 * r as f64),
    };
    let (ds, _) = preprocess_uci(&t, &UciOptions::new(UciTask::Conditional)).unwrap();
    let s = &ds.splits;
    assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (824, 103, 103));
    assert_eq!(ds.x_names, vec!["f3".to_string()]);
    let (xt, _) = ds.part(Split::Train);
    let var = xt.covariance()[(0, 0)];
    assert!((var - 1.0).abs() < 1e-10);
}

proptest! {
    #[test]
    fn normalization_round_trips(vals in proptest::collection::vec(-1e3f64..1e3, 24), seed in 0u64..100) {
        let x = Tensor::from_vec(8, 3, vals);
        let stats = ColumnStats::fit(&x, &Splits::random(8, [8, 1, 1], seed).train);
        let back = stats.denormalize(&stats.normalize(&x));
        prop_assert!(back.sub(&x).max_abs() < 1e-12 * (1.0 + x.max_abs()));
    }

    #[test]
    fn summary_correlations_are_bounded(s1 in proptest::collection::vec(0.0f64..500.0, 3..40), shift in 0usize..5) {
        let s2: Vec<f64> = s1.iter().cycle().skip(shift).take(s1.len()).map(|v| 3.0 * v + 1.0).collect();
        let s = lv_summary(&s1, &s2, 1e-12).unwrap();
        prop_assert!(s[4..].iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert!(s.iter().all(|v| v.is_finite()));
    }
}
