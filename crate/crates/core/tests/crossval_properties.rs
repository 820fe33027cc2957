mod common;

use proptest::prelude::*;
use smokecausal_core::crossval::*;
use smokecausal_core::gibbs::ChainConfig;
use smokecausal_core::synth::*;

#[test]
fn normal_intervals_cover_ninety_five_percent() {
    let cov = common::normal_coverage(100_000, 17);
    assert!((cov - 0.95).abs() < 0.01, "{cov}");
}

#[test]
fn fold_examples() {
    let f = kfold_split(10, 5, 1).unwrap();
    assert!(f.iter().all(|x| x.len() == 2));
    let sizes: Vec<usize> = kfold_split(11, 5, 1).unwrap().iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
    assert_eq!(kfold_split(11, 5, 9).unwrap(), kfold_split(11, 5, 9).unwrap());
    assert!(kfold_split(3, 4, 0).is_err());
}

fn vectors() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-20.0..20.0f64, n),
            prop::collection::vec(0.01..5.0f64, n),
            prop::collection::vec(-20.0..20.0f64, n),
        )
    })
}

proptest! {
    #[test]
    fn folds_partition_the_sites(n in 1usize..60, k in 1usize..10, seed in 0u64..100) {
        prop_assume!(k <= n);
        let folds = kfold_split(n, k, seed).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn rmse_squared_is_mse((p, s, o) in vectors()) {
        let m = cv_metrics(&p, &s, &o).unwrap();
        prop_assert!((m.rmse * m.rmse - m.mse).abs() <= 1e-9 * (1.0 + m.mse));
        prop_assert!((0.0..=1.0).contains(&m.coverage));
    }

    #[test]
    fn metrics_ignore_observation_order((p, s, o) in vectors(), rot in 0usize..40) {
        let n = p.len();
        let r = |v: &Vec<f64>| (0..n).map(|i| v[(i + rot) % n]).collect::<Vec<f64>>();
        let a = cv_metrics(&p, &s, &o).unwrap();
        let b = cv_metrics(&r(&p), &r(&s), &r(&o)).unwrap();
        prop_assert!((a.mse - b.mse).abs() < 1e-9 && (a.mad - b.mad).abs() < 1e-9);
        prop_assert!((a.sd - b.sd).abs() < 1e-9 && a.coverage == b.coverage);
    }

    #[test]
    fn coverage_grows_with_the_multiplier((p, s, o) in vectors(), z in 0.0..4.0f64, dz in 0.0..2.0f64) {
        let a = cv_metrics_with(&p, &s, &o, z).unwrap();
        let b = cv_metrics_with(&p, &s, &o, z + dz).unwrap();
        prop_assert!(b.coverage >= a.coverage);
    }
}

#[test]
fn single_threshold_grid_is_recommended() {
    let sites = layout_sites(&[RegionLayout::new("R", (0.0, 0.0), 150.0, 12)], DEFAULT_ORIGIN, 3).unwrap();
    let cfg = SimulationConfig {
        n_days: 60,
        ..SimulationConfig::default()
    };
    let sim = simulate_panel(&sites, &TrueParams::default(), &cfg, 3).unwrap();
    let cv = CvConfig {
        folds: 3,
        tau_grid: vec![2.0],
        seed: 3,
        chain: ChainConfig {
            n_iter: 300,
            burn_in: 100,
            thin: 2,
            ..ChainConfig::default()
        },
    };
    let table = tau_selection(&sim.data, &cv).unwrap();
    assert_eq!(table.recommended_tau, 2.0);
    assert_eq!(table.pooled().count(), 1);
    assert_eq!(table.rows.len(), 4);
    for r in &table.rows {
        assert!((r.metrics.rmse.powi(2) - r.metrics.mse).abs() < 1e-9);
    }
}

#[test]
fn fold_without_training_smoke_days_is_skipped_and_not_recommended() {
    let sites = layout_sites(&[RegionLayout::new("R", (0.0, 0.0), 150.0, 12)], DEFAULT_ORIGIN, 4).unwrap();
    let cfg = SimulationConfig {
        n_days: 60,
        ..SimulationConfig::default()
    };
    let mut data = simulate_panel(&sites, &TrueParams::default(), &cfg, 4).unwrap().data;
    data.delta_hat.apply(|v| *v = v.min(5.0));
    // Only site 0 exceeds the upper threshold.
    let days: Vec<usize> = (0..data.n_days()).filter(|&t| !data.missing[(0, t)]).take(2).collect();
    for &t in &days {
        data.delta_hat[(0, t)] = 20.0;
    }
    let data = data.with_tau(1.0).unwrap();
    let cv = CvConfig {
        folds: 3,
        tau_grid: vec![1.0, 10.0],
        seed: 4,
        chain: ChainConfig {
            n_iter: 300,
            burn_in: 100,
            thin: 2,
            ..ChainConfig::default()
        },
    };
    let table = tau_selection(&data, &cv).unwrap();
    assert_eq!(table.recommended_tau, 1.0);
    assert_eq!(table.rows.iter().filter(|r| r.tau == 10.0 && r.fold.is_some()).count(), 2);
    assert_eq!(table.pooled().count(), 2);
    assert!(table.notes.iter().any(|n| n.contains("tau 10") && n.contains("no smoke days")), "{:?}", table.notes);
    assert!(table.notes.iter().any(|n| n.contains("not considered")), "{:?}", table.notes);
}
