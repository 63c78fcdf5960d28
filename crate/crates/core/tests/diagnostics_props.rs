use proptest::prelude::*;
use saecount::diagnostics::{
    dean_pb_test, dispersion_ratio, pearson_residuals, residual_df, summarize,
};
use saecount::rng::{sample_poisson, sample_uniform};
use saecount::RngHandle;

/// Means in [1, 20] and Poisson outcomes, or `scale * Pois(mu / scale)`.
fn counts(seed: u64, n: usize, scale: u64) -> (Vec<u64>, Vec<f64>) {
    let mut r = RngHandle::new(seed).rng();
    let mu: Vec<f64> = (0..n)
        .map(|_| sample_uniform(&mut r, 1.0, 20.0).unwrap())
        .collect();
    let y = mu
        .iter()
        .map(|&m| scale * sample_poisson(&mut r, m / scale as f64).unwrap())
        .collect();
    (y, mu)
}

fn ratio(y: &[u64], mu: &[f64]) -> f64 {
    let df = residual_df(y.len(), 0, 0).unwrap();
    dispersion_ratio(&pearson_residuals(y, mu).unwrap(), df).unwrap()
}

proptest! {
    #[test]
    fn dean_statistic_ignores_unit_order(seed in 0u64..1000, n in 2usize..200, shift in 1usize..199) {
        let (y, mu) = counts(seed, n, 1);
        let k = shift % n;
        let (mut y2, mut mu2) = (y.clone(), mu.clone());
        y2.rotate_left(k);
        mu2.rotate_left(k);
        y2.reverse();
        mu2.reverse();
        let (t, p) = dean_pb_test(&y, &mu).unwrap();
        let (t2, p2) = dean_pb_test(&y2, &mu2).unwrap();
        prop_assert!((t - t2).abs() <= 1e-13 * (1.0 + t.abs()));
        prop_assert!((p - p2).abs() <= 1e-13);
    }
}

#[test]
fn poisson_outcomes_have_unit_dispersion() {
    let seeds = 50;
    let inside = (0..seeds)
        .filter(|&s| {
            let (y, mu) = counts(s, 5000, 1);
            (0.9..=1.1).contains(&ratio(&y, &mu))
        })
        .count();
    assert!(inside >= 45, "{inside} of {seeds}");
}

#[test]
fn doubled_poisson_is_flagged_as_overdispersed() {
    for seed in 0..10 {
        let (y, mu) = counts(100 + seed, 5000, 2);
        let r = ratio(&y, &mu);
        assert!((1.8..=2.2).contains(&r), "seed {seed}: ratio {r}");
        let s = summarize(&y, &mu, 0, 0).unwrap();
        assert!(
            s.dean_statistic > 10.0 && s.dean_p_value < 1e-6,
            "seed {seed}: T = {}, p = {}",
            s.dean_statistic,
            s.dean_p_value
        );
    }
}

#[test]
fn exact_fit_has_zero_dispersion() {
    let y = vec![1, 4, 9];
    let mu = vec![1.0, 4.0, 9.0];
    let s = summarize(&y, &mu, 0, 0).unwrap();
    assert_eq!(s.dispersion_ratio, 0.0);
    assert!(s.pearson.iter().all(|&r| r == 0.0));
}
