//! Poisson GLMM with a random intercept fitted by penalized quasi-likelihood,
//! and the empirical best plug-in predictor of domain means.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{domain_index, DomainId, DomainUnits, Population, Sample};
use crate::error::{Result, SaeError};
use crate::glm::with_intercept;
use crate::gmerf::{init_glm_poisson, poisson_working_update};
use crate::lmm::{blup_predict, fit_linear_lmm, RandomEffects, VarianceComponents};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmFit {
    /// Intercept first.
    pub beta: Vec<f64>,
    pub coefficient_names: Vec<String>,
    pub vc: VarianceComponents,
    pub re: RandomEffects,
    /// Linear predictors of the sample units.
    pub eta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub sample_sizes: BTreeMap<DomainId, usize>,
}

impl GlmmFit {
    /// `x'beta + nu_domain`.
    pub fn linear_predictor(&self, x: &[f64], domain: DomainId) -> Result<f64> {
        if x.len() + 1 != self.beta.len() {
            return Err(SaeError::Dimension {
                expected: self.beta.len() - 1,
                got: x.len(),
            });
        }
        let fixed = self.beta[0]
            + self.beta[1..]
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>();
        Ok(fixed + blup_predict(&self.vc, &self.re, domain))
    }
}

/// Tolerance and iteration limit of the PQL loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PqlConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PqlConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100,
        }
    }
}

fn max_relative_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .map(|(a, b)| (b - a).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// PQL: alternate the Poisson working update with a weighted linear LMM until
/// the coefficients and `s2_nu` change by less than `tol` (relative).
pub fn fit_poisson_glmm_pql(sample: &Sample, tol: f64, max_iter: usize) -> Result<GlmmFit> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(SaeError::InvalidParameter(
            "PQL needs tol > 0 and max_iter >= 1".into(),
        ));
    }
    let y = sample.outcome_f64();
    let design = with_intercept(sample.covariates());
    let domains = sample.domains();
    let mut eta = init_glm_poisson(sample)?;
    let mut params: Option<Vec<f64>> = None;
    let mut fit = None;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter {
        let step = poisson_working_update(&y, &eta)
            .and_then(|state| fit_linear_lmm(&state.y_l, &design, &state.w, domains));
        let lf = match step {
            Ok(lf) => lf,
            Err(e @ SaeError::RankDeficient { .. }) => return Err(e),
            Err(e) if fit.is_some() => {
                warn!("PQL stopped at iteration {it}: {e}");
                break;
            }
            Err(e) => return Err(e),
        };
        iterations = it;
        eta = (0..design.nrows())
            .map(|i| {
                design
                    .row(i)
                    .iter()
                    .zip(&lf.beta)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + lf.re.get(domains[i])
            })
            .collect();
        let mut new_params = lf.beta.clone();
        new_params.push(lf.vc.sigma2_nu);
        let change = params.as_ref().map(|p| max_relative_change(p, &new_params));
        params = Some(new_params);
        fit = Some(lf);
        if change.is_some_and(|c| c < tol) {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("PQL did not converge in {max_iter} iterations");
    }
    let lf = fit.expect("at least one PQL iteration");
    Ok(GlmmFit {
        beta: lf.beta,
        coefficient_names: design.names().to_vec(),
        vc: lf.vc,
        re: lf.re,
        eta,
        converged,
        iterations,
        sample_sizes: sample
            .sizes()
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(d, n)| (*d, *n))
            .collect(),
    })
}

/// EBPP means for every census domain.
///
/// Non-sampled units are the census rows not linked to a sample unit. For an
/// unlinked sample the `N_i - n_i` non-sampled units are represented by the
/// census mean of `mu` over the whole domain.
pub fn ebpp_means_by_domain(
    fit: &GlmmFit,
    sample: &Sample,
    population: &Population,
) -> Result<BTreeMap<DomainId, f64>> {
    ebpp_means_for(fit, sample, population, None)
}

/// EBPP mean of a single census domain.
pub fn ebpp_domain_mean(
    fit: &GlmmFit,
    sample: &Sample,
    population: &Population,
    domain: DomainId,
) -> Result<f64> {
    ebpp_means_for(fit, sample, population, Some(domain))?
        .remove(&domain)
        .ok_or_else(|| SaeError::Input(format!("domain {domain} not in census")))
}

fn ebpp_means_for(
    fit: &GlmmFit,
    sample: &Sample,
    population: &Population,
    only: Option<DomainId>,
) -> Result<BTreeMap<DomainId, f64>> {
    let census = domain_index(population);
    let mut observed: BTreeMap<DomainId, (f64, usize)> = BTreeMap::new();
    for (d, &y) in sample.domains().iter().zip(sample.outcome()) {
        let e = observed.entry(*d).or_insert((0.0, 0));
        e.0 += y as f64;
        e.1 += 1;
    }
    let mut sampled_rows = vec![false; population.len()];
    if let Some(rows) = sample.population_rows() {
        for &r in rows {
            sampled_rows[r] = true;
        }
    }
    let linked = sample.population_rows().is_some();
    let x = population.covariates();
    let mut out = BTreeMap::new();
    for (d, rows) in &census {
        if only.is_some_and(|o| o != *d) {
            continue;
        }
        let n_pop = rows.len();
        let (sum_y, n_s) = observed.get(d).copied().unwrap_or((0.0, 0));
        if n_s > n_pop {
            return Err(SaeError::Input(format!(
                "domain {d}: sample size {n_s} exceeds census size {n_pop}"
            )));
        }
        let rest = if linked {
            let mut s = 0.0;
            for &r in rows.iter().filter(|&&r| !sampled_rows[r]) {
                s += fit.linear_predictor(x.row(r), *d)?.exp();
            }
            s
        } else if n_s == n_pop {
            0.0
        } else {
            let mut s = 0.0;
            for &r in rows {
                s += fit.linear_predictor(x.row(r), *d)?.exp();
            }
            (n_pop - n_s) as f64 * s / n_pop as f64
        };
        out.insert(*d, (sum_y + rest) / n_pop as f64);
    }
    Ok(out)
}
