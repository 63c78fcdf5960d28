use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use saecount::lmm::{fit_intercept_lmm, fit_linear_lmm, marginal_loglik, VarianceComponents};
use saecount::{Covariates, DomainId};

/// Toy data: up to 3 domains with 1 to 4 units each.
fn toy() -> impl Strategy<Value = (Vec<DomainId>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    prop::collection::vec(1usize..=4, 1..=3).prop_flat_map(|sizes| {
        let domains: Vec<DomainId> = sizes
            .iter()
            .enumerate()
            .flat_map(|(d, &k)| std::iter::repeat_n(DomainId(d as i64 * 7 - 3), k))
            .collect();
        let n = domains.len();
        (
            Just(domains),
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(0.2f64..4.0, n),
        )
    })
}

/// Multivariate normal log-density of `r` with covariance
/// `s2_nu Z Z' + s2_eps W^-1`, built and factorized densely.
fn dense_loglik(vc: &VarianceComponents, r: &[f64], w: &[f64], domains: &[DomainId]) -> f64 {
    let n = r.len();
    let v = DMatrix::from_fn(n, n, |i, j| {
        let shared = if domains[i] == domains[j] {
            vc.sigma2_nu
        } else {
            0.0
        };
        shared + if i == j { vc.sigma2_eps / w[i] } else { 0.0 }
    });
    let chol = v.cholesky().expect("covariance is positive definite");
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let r = DVector::from_column_slice(r);
    let quad = r.dot(&chol.solve(&r));
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn structured_loglik_matches_dense(
        (domains, t, o, w) in toy(),
        s2_nu in 0.0f64..3.0,
        s2_eps in 0.05f64..3.0,
    ) {
        let vc = VarianceComponents { sigma2_nu: s2_nu, sigma2_eps: s2_eps };
        let r: Vec<f64> = t.iter().zip(&o).map(|(a, b)| a - b).collect();
        let got = marginal_loglik(&vc, &t, &o, &w, &domains).unwrap();
        let want = dense_loglik(&vc, &r, &w, &domains);
        prop_assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
    }

    #[test]
    fn fit_is_consistent_monotone_and_shrinks((domains, t, o, w) in toy()) {
        let fit = fit_intercept_lmm(&t, &o, &w, &domains).unwrap();
        prop_assert!(fit.loglik >= fit.init_loglik - 1e-9, "{} < {}", fit.loglik, fit.init_loglik);
        let at_fit = marginal_loglik(&fit.vc, &t, &o, &w, &domains).unwrap();
        prop_assert!((at_fit - fit.loglik).abs() < 1e-8 * (1.0 + at_fit.abs()));
        for (d, nu) in fit.re.iter() {
            let (mut sw, mut swr) = (0.0, 0.0);
            for i in (0..t.len()).filter(|&i| domains[i] == d) {
                sw += w[i];
                swr += w[i] * (t[i] - o[i]);
            }
            prop_assert!(nu.abs() <= (swr / sw).abs() + 1e-12, "domain {}: {} vs {}", d, nu, swr / sw);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn linear_fit_reports_its_own_likelihood((domains, t, x1, w) in toy()) {
        let n = t.len();
        prop_assume!(n >= 3);
        let values = x1.iter().flat_map(|v| [1.0, *v]).collect();
        let x = Covariates::new(n, 2, values, vec!["(intercept)".into(), "x1".into()]).unwrap();
        prop_assume!(x1.iter().any(|v| (v - x1[0]).abs() > 1e-3));
        let fit = fit_linear_lmm(&t, &x, &w, &domains).unwrap();
        prop_assume!(fit.vc.sigma2_eps > 1e-8);
        let offset: Vec<f64> = x1.iter().map(|v| fit.beta[0] + fit.beta[1] * v).collect();
        let at_fit = marginal_loglik(&fit.vc, &t, &offset, &w, &domains).unwrap();
        prop_assert!((at_fit - fit.loglik).abs() < 1e-8 * (1.0 + at_fit.abs()), "{} vs {}", at_fit, fit.loglik);
        let null = VarianceComponents { sigma2_nu: 0.0, sigma2_eps: fit.vc.sigma2_eps };
        prop_assert!(fit.loglik >= marginal_loglik(&null, &t, &offset, &w, &domains).unwrap() - 1e-9);
    }
}

#[test]
fn two_by_two_example() {
    let domains = [DomainId(1), DomainId(1), DomainId(2), DomainId(2)];
    let t = [0.4, -1.3, 2.2, 0.9];
    let o = [0.0; 4];
    let w = [1.0, 2.0, 0.5, 1.5];
    let vc = VarianceComponents {
        sigma2_nu: 0.09,
        sigma2_eps: 1.0,
    };
    let got = marginal_loglik(&vc, &t, &o, &w, &domains).unwrap();
    assert!((got - dense_loglik(&vc, &t, &w, &domains)).abs() < 1e-10);
}
