use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use smokecausal_core::inference::*;

fn sources() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 2..10).prop_filter("distinct", |v| {
        v.iter()
            .enumerate()
            .all(|(i, a)| v[i + 1..].iter().all(|b| (a.0 - b.0).hypot(a.1 - b.1) > 1.0))
    })
}

fn kernel(range: f64) -> KrigingKernel {
    KrigingKernel {
        sill: 1.5,
        range,
        nugget: 0.0,
    }
}

proptest! {
    #[test]
    fn kriging_interpolates_sources_exactly(xy in sources(), range in 5.0..300.0f64, seed in 0u64..1000) {
        let n = xy.len();
        let values = DVector::from_fn(n, |i, _| ((i as u64 * 7919 + seed) % 97) as f64 / 10.0);
        let (mean, sd) = krige(&values, &xy, &xy, kernel(range), DuplicatePolicy::Error).unwrap();
        prop_assert!((&mean - &values).abs().max() < 1e-9);
        prop_assert!(sd.iter().all(|s| s.abs() < 1e-6));
    }

    #[test]
    fn kriging_sd_ignores_the_values(xy in sources(), t in (-150.0..150.0f64, -150.0..150.0f64), shift in 1usize..9) {
        let n = xy.len();
        let a = DVector::from_fn(n, |i, _| (i * i) as f64);
        let b = DVector::from_fn(n, |i, _| a[(i + shift) % n] * 3.0 - 1.0);
        let targets = [t, (t.0 + 5.0, t.1 - 7.0)];
        let (_, sd_a) = krige(&a, &xy, &targets, kernel(40.0), DuplicatePolicy::Error).unwrap();
        let (_, sd_b) = krige(&b, &xy, &targets, kernel(40.0), DuplicatePolicy::Error).unwrap();
        prop_assert_eq!(sd_a, sd_b);
    }

    #[test]
    fn kriging_weights_sum_to_one(xy in sources(), t in (-150.0..150.0f64, -150.0..150.0f64)) {
        let k = Kriging::new(&xy, &[t], kernel(30.0), DuplicatePolicy::Error).unwrap();
        prop_assert!((k.weights.row(0).sum() - 1.0).abs() < 1e-9);
        prop_assert!(k.sd[0] >= 0.0);
    }

    #[test]
    fn effect_is_linear_in_the_draws(k in -5.0..5.0f64, seed in 0u64..1000) {
        let c = DMatrix::from_fn(3, 6, |i, t| ((i * 5 + t + seed as usize) % 3 == 0) as u8);
        let delta = DMatrix::from_fn(3, 6, |i, t| ((i * 31 + t * 17) as u64 ^ seed) as f64 % 13.0 - 4.0);
        let a = effect_draw(&c, &(&delta * k));
        let b = effect_draw(&c, &delta) * k;
        prop_assert!((a - b).abs().max() < 1e-12);
    }
}

#[test]
fn far_targets_get_the_generalized_least_squares_mean() {
    let xy = [(0.0, 0.0), (10.0, 0.0), (0.0, 15.0), (12.0, 20.0)];
    let values = DVector::from_vec(vec![1.0, 4.0, 2.0, 7.0]);
    let kern = kernel(10.0);
    let k = Kriging::new(&xy, &[(1e5, 1e5)], kern, DuplicatePolicy::Error).unwrap();
    let pred = k.predict(&values)[0];
    assert!((pred - k.global_mean(&values)).abs() < 1e-6);
    // Far-field variance is the sill plus the variance of the estimated mean.
    let c = DMatrix::from_fn(4, 4, |i, j| kern.cov((xy[i].0 - xy[j].0).hypot(xy[i].1 - xy[j].1)));
    let ones = DVector::from_element(4, 1.0);
    let denom = ones.dot(&(c.try_inverse().unwrap() * &ones));
    assert!((k.sd[0] - (kern.sill + 1.0 / denom).sqrt()).abs() < 1e-6);
}

#[test]
fn symmetric_sources_get_equal_weights() {
    let xy = [(-5.0, 0.0), (5.0, 0.0)];
    let k = Kriging::new(&xy, &[(0.0, 3.0)], kernel(20.0), DuplicatePolicy::Error).unwrap();
    assert!((k.weights[(0, 0)] - k.weights[(0, 1)]).abs() < 1e-12);
}

#[test]
fn credible_intervals() {
    let draws: Vec<f64> = (1..=100).map(f64::from).collect();
    let (lo, hi) = credible_interval(&draws, 0.95);
    assert!((lo - 3.475).abs() < 1e-12 && (hi - 97.525).abs() < 1e-12);
    assert_eq!(credible_interval(&[2.5; 40], 0.95), (2.5, 2.5));
    let sym: Vec<f64> = (1..=50).flat_map(|k| [k as f64 * 0.1, -(k as f64) * 0.1]).collect();
    let (lo, hi) = credible_interval(&sym, 0.9);
    assert!((lo + hi).abs() < 1e-12);
}

#[test]
fn effect_posterior_mean_is_the_effect_of_the_mean_draw() {
    let c = DMatrix::from_row_slice(2, 3, &[1u8, 0, 1, 0, 0, 0]);
    let deltas: Vec<DMatrix<f64>> = (0..5).map(|k| DMatrix::from_fn(2, 3, |i, t| (k * 3 + i + t) as f64)).collect();
    let draws: Vec<DVector<f64>> = deltas.iter().map(|d| effect_draw(&c, d)).collect();
    let theta = vec![DVector::zeros(2); 5];
    let post = CausalEffectPosterior::from_draws(vec!["a".into(), "b".into()], draws.clone(), &theta);
    let mean_delta = deltas.iter().fold(DMatrix::zeros(2, 3), |a, d| a + d) / 5.0;
    let direct = effect_draw(&c, &mean_delta);
    assert!((&post.mean - direct).abs().max() < 1e-12);
    // A site never under smoke has zero effect in every draw.
    assert!(draws.iter().all(|d| d[1] == 0.0));
}
