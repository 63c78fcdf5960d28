//! Poisson GLM with log link fitted by IRLS, and forward AIC selection.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::Covariates;
use crate::error::{Result, SaeError};
use crate::linalg::{Cholesky, SquareMatrix};

/// Largest |eta| accepted before IRLS is declared divergent.
const ETA_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonGlm {
    /// Intercept first, then one coefficient per covariate.
    pub coefficients: Vec<f64>,
    /// Fitted linear predictors of the training rows.
    pub eta: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PoissonGlm {
    /// Akaike information criterion `-2 loglik + 2 k`.
    pub fn aic(&self) -> f64 {
        -2.0 * self.loglik + 2.0 * self.coefficients.len() as f64
    }
}

/// Prepends an intercept column named `(intercept)`.
pub fn with_intercept(x: &Covariates) -> Covariates {
    let p = x.ncols();
    let mut values = Vec::with_capacity(x.nrows() * (p + 1));
    for i in 0..x.nrows() {
        values.push(1.0);
        values.extend_from_slice(x.row(i));
    }
    let mut names = vec!["(intercept)".to_string()];
    names.extend(x.names().iter().cloned());
    Covariates::new(x.nrows(), p + 1, values, names).expect("shape preserved")
}

/// Poisson log-likelihood of counts `y` under means `mu`.
pub fn poisson_loglik(y: &[f64], mu: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let lg = ln_gamma(y + 1.0);
            if y == 0.0 {
                -m - lg
            } else {
                y * m.ln() - m - lg
            }
        })
        .sum()
}

/// Weighted least squares `(X'WX) b = X'Wz`; reports collinear columns by name.
pub(crate) fn weighted_least_squares(x: &Covariates, z: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let k = x.ncols();
    let mut m = SquareMatrix::zeros(k);
    let mut v = vec![0.0; k];
    for i in 0..x.nrows() {
        let row = x.row(i);
        for r in 0..k {
            let wr = w[i] * row[r];
            v[r] += wr * z[i];
            for c in 0..k {
                m.add(r, c, wr * row[c]);
            }
        }
    }
    match Cholesky::factor(&m) {
        Ok(chol) => Ok(chol.solve(&v)),
        Err(def) => Err(SaeError::RankDeficient {
            columns: def.columns.iter().map(|&c| x.names()[c].clone()).collect(),
        }),
    }
}

/// Fits `log E[y] = b0 + x'b` by iteratively reweighted least squares.
///
/// Divergence (|eta| beyond 30 or no convergence within `max_iter`) is an
/// [`SaeError::Optimizer`] error.
pub fn fit_poisson_glm(x: &Covariates, y: &[f64], tol: f64, max_iter: usize) -> Result<PoissonGlm> {
    let n = x.nrows();
    if n == 0 {
        return Err(SaeError::Input("GLM needs at least one observation".into()));
    }
    if y.len() != n {
        return Err(SaeError::Dimension {
            expected: n,
            got: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(SaeError::InvalidParameter(
            "Poisson responses must be >= 0".into(),
        ));
    }
    if y.iter().all(|&v| v == 0.0) {
        return Err(SaeError::Optimizer(
            "all counts are zero; the intercept diverges to -infinity".into(),
        ));
    }
    let design = with_intercept(x);
    let mut mu: Vec<f64> = y.iter().map(|&v| v + 0.5).collect();
    let mut eta: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
    let mut beta = vec![0.0; design.ncols()];
    let mut dev_old = f64::INFINITY;
    for iter in 1..=max_iter {
        let z: Vec<f64> = (0..n).map(|i| eta[i] + (y[i] - mu[i]) / mu[i]).collect();
        beta = weighted_least_squares(&design, &z, &mu)?;
        for i in 0..n {
            eta[i] = design.row(i).iter().zip(&beta).map(|(a, b)| a * b).sum();
        }
        if eta.iter().any(|e| !e.is_finite() || e.abs() > ETA_LIMIT) {
            return Err(SaeError::Optimizer(format!(
                "Poisson IRLS diverged at iteration {iter}"
            )));
        }
        for i in 0..n {
            mu[i] = eta[i].exp();
        }
        let dev = deviance(y, &mu);
        if (dev - dev_old).abs() <= tol * (dev.abs() + 0.1) {
            return Ok(PoissonGlm {
                coefficients: beta,
                loglik: poisson_loglik(y, &mu),
                eta,
                iterations: iter,
                converged: true,
            });
        }
        dev_old = dev;
    }
    Err(SaeError::Optimizer(format!(
        "Poisson IRLS did not converge in {max_iter} iterations (last coefficients {beta:?})"
    )))
}

fn deviance(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let t = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
            t - (y - m)
        })
        .sum::<f64>()
}

/// Outcome of forward stepwise AIC selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AicSelection {
    /// Selected covariate columns, in order of entry.
    pub selected: Vec<usize>,
    /// AIC after each step, starting with the intercept-only model.
    pub path: Vec<f64>,
}

/// Greedy forward selection on the Poisson GLM: add the covariate that lowers
/// AIC most, stop when no addition lowers it.
pub fn forward_aic(x: &Covariates, y: &[f64]) -> Result<AicSelection> {
    let mut selected: Vec<usize> = Vec::new();
    let mut current = fit_poisson_glm(&x.select_columns(&[]), y, 1e-10, 100)?.aic();
    let mut path = vec![current];
    loop {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..x.ncols() {
            if selected.contains(&j) {
                continue;
            }
            let mut cols = selected.clone();
            cols.push(j);
            let Ok(fit) = fit_poisson_glm(&x.select_columns(&cols), y, 1e-10, 100) else {
                continue;
            };
            let aic = fit.aic();
            if best.is_none_or(|(_, b)| aic < b) {
                best = Some((j, aic));
            }
        }
        match best {
            Some((j, aic)) if aic < current => {
                selected.push(j);
                current = aic;
                path.push(aic);
            }
            _ => break,
        }
    }
    Ok(AicSelection { selected, path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_poisson, sample_uniform, RngHandle};

    #[test]
    fn intercept_only_recovers_log_mean() {
        let y = [3.0, 7.0, 5.0, 4.0, 6.0];
        let x = Covariates::from_rows(&vec![vec![]; 5]).unwrap();
        let fit = fit_poisson_glm(&x, &y, 1e-12, 50).unwrap();
        assert!((fit.coefficients[0] - 5f64.ln()).abs() < 1e-9);
        assert!(fit.eta.iter().all(|e| (e - 5f64.ln()).abs() < 1e-9));
    }

    #[test]
    fn exact_log_linear_data_recovers_coefficients() {
        // the score vanishes at the generating coefficients when y = exp(X b)
        let mut rng = RngHandle::new(3).rng();
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                vec![
                    sample_uniform(&mut rng, -1.0, 1.0).unwrap(),
                    sample_uniform(&mut rng, 0.0, 2.0).unwrap(),
                ]
            })
            .collect();
        let truth = [0.7, -0.4, 1.1];
        let y: Vec<f64> = rows
            .iter()
            .map(|r| (truth[0] + truth[1] * r[0] + truth[2] * r[1]).exp())
            .collect();
        let fit = fit_poisson_glm(&Covariates::from_rows(&rows).unwrap(), &y, 1e-14, 100).unwrap();
        for (b, t) in fit.coefficients.iter().zip(&truth) {
            assert!((b - t).abs() < 1e-6, "{b} vs {t}");
        }
    }

    #[test]
    fn all_zero_counts_diverge() {
        let x = Covariates::from_rows(&vec![vec![1.0]; 6]).unwrap();
        let x = x.select_columns(&[]);
        assert!(matches!(
            fit_poisson_glm(&x, &[0.0; 6], 1e-10, 100),
            Err(SaeError::Optimizer(_))
        ));
    }

    #[test]
    fn aic_keeps_signal_drops_noise() {
        let mut rng = RngHandle::new(8).rng();
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                (0..3)
                    .map(|_| sample_uniform(&mut rng, -1.0, 1.0).unwrap())
                    .collect()
            })
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| sample_poisson(&mut rng, (1.0 + 0.8 * r[1]).exp()).unwrap() as f64)
            .collect();
        let sel = forward_aic(&Covariates::from_rows(&rows).unwrap(), &y).unwrap();
        assert_eq!(sel.selected.first(), Some(&1));
        assert!(sel.path.windows(2).all(|w| w[1] < w[0]));
    }
}
