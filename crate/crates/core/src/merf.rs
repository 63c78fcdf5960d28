//! Mixed effects random forest for a continuous (or treated-as-continuous)
//! target: alternate a forest fit on `y - nu` with a random-intercept LMM on
//! the forest's out-of-bag residuals.

use std::collections::BTreeMap;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, DomainId, DomainUnits, Sample};
use crate::error::{Result, SaeError};
use crate::fixed::{FixedPart, FixedPartLearner};
use crate::forest::{Forest, ForestParams};
use crate::lmm::{blup_predict, fit_linear_lmm, RandomEffects, VarianceComponents};

/// `|b - a| / |a|`, with equal values (including equal infinities) giving 0.
pub(crate) fn relative_change(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (b - a).abs() / a.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MerfConfig {
    pub forest: ForestParams,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MerfConfig {
    fn default() -> Self {
        Self {
            forest: ForestParams::default(),
            tol: 1e-5,
            max_iter: 25,
        }
    }
}

impl MerfConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(SaeError::InvalidParameter("tol must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(SaeError::InvalidParameter("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MerfFit<M = Forest> {
    pub forest: M,
    pub vc: VarianceComponents,
    pub re: RandomEffects,
    /// Marginal log-likelihood after each iteration.
    #[serde(with = "crate::serde_float::vec")]
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Sample size per domain of the training data.
    pub sample_sizes: BTreeMap<DomainId, usize>,
}

/// Output of the alternating forest/LMM loop.
pub(crate) struct Alternation<M> {
    pub model: M,
    pub vc: VarianceComponents,
    pub re: RandomEffects,
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Runs forest-on-`target - nu` / LMM-on-OOB-residuals to a relative loglik
/// change below `tol`, then refits the forest at the converged effects.
///
/// The residual LMM carries a fixed intercept that absorbs the systematic
/// gap between out-of-bag and in-bag predictions; it is not fed back into
/// the forest target, so the effects stay centred.
pub(crate) fn alternate<L: FixedPartLearner>(
    learner: &L,
    x: &Covariates,
    target: &[f64],
    weights: &[f64],
    domains: &[DomainId],
    init: &RandomEffects,
    tol: f64,
    max_iter: usize,
) -> Result<Alternation<L::Model>> {
    let mut re = init.clone();
    let mut vc = VarianceComponents {
        sigma2_nu: 0.0,
        sigma2_eps: 0.0,
    };
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let n = target.len();
    let ones = Covariates::new(n, 1, vec![1.0; n], vec!["(intercept)".into()])?;
    for iter in 1..=max_iter {
        let nu = re.per_unit(domains);
        let adjusted: Vec<f64> = target.iter().zip(&nu).map(|(t, v)| t - v).collect();
        let model = learner.fit(x, &adjusted, weights)?;
        let resid: Vec<f64> = target
            .iter()
            .zip(model.oob_predictions())
            .map(|(t, f)| t - f)
            .collect();
        let lmm = fit_linear_lmm(&resid, &ones, weights, domains)?;
        vc = lmm.vc;
        re = lmm.re;
        let change = trace.last().map(|&prev| relative_change(prev, lmm.loglik));
        trace.push(lmm.loglik);
        debug!("iteration {iter}: loglik {} change {change:?}", lmm.loglik);
        if change.is_some_and(|c| c < tol) {
            converged = true;
            break;
        }
    }
    let nu = re.per_unit(domains);
    let adjusted: Vec<f64> = target.iter().zip(&nu).map(|(t, v)| t - v).collect();
    let model = learner.fit(x, &adjusted, weights)?;
    Ok(Alternation {
        model,
        vc,
        re,
        trace,
        converged,
    })
}

/// Fits MERF with unit weights, starting from zero random effects.
pub fn fit_merf(sample: &Sample, config: &MerfConfig) -> Result<MerfFit> {
    fit_merf_from(sample, config, &RandomEffects::default())
}

/// Fits MERF starting from the given random effects.
pub fn fit_merf_from(
    sample: &Sample,
    config: &MerfConfig,
    init: &RandomEffects,
) -> Result<MerfFit> {
    fit_merf_with(sample, &config.forest, config.tol, config.max_iter, init)
}

/// MERF with an arbitrary fixed-part learner.
pub fn fit_merf_with<L: FixedPartLearner>(
    sample: &Sample,
    learner: &L,
    tol: f64,
    max_iter: usize,
    init: &RandomEffects,
) -> Result<MerfFit<L::Model>> {
    MerfConfig {
        forest: ForestParams::default(),
        tol,
        max_iter,
    }
    .validate()?;
    if sample.is_empty() {
        return Err(SaeError::Input("MERF needs a nonempty sample".into()));
    }
    let y = sample.outcome_f64();
    let weights = vec![1.0; y.len()];
    let alt = alternate(
        learner,
        sample.covariates(),
        &y,
        &weights,
        sample.domains(),
        init,
        tol,
        max_iter,
    )?;
    if !alt.converged {
        warn!("MERF did not converge in {max_iter} iterations");
    }
    Ok(MerfFit {
        forest: alt.model,
        vc: alt.vc,
        re: alt.re,
        iterations: alt.trace.len(),
        trace: alt.trace,
        converged: alt.converged,
        sample_sizes: sample
            .sizes()
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(d, n)| (*d, *n))
            .collect(),
    })
}

impl<M: FixedPart> MerfFit<M> {
    /// `f(x) + nu_domain` on the response scale.
    pub fn predict_unit(&self, x: &[f64], domain: DomainId) -> Result<f64> {
        if x.len() != self.forest.num_features() {
            return Err(SaeError::Dimension {
                expected: self.forest.num_features(),
                got: x.len(),
            });
        }
        Ok(self.forest.predict_row(x) + blup_predict(&self.vc, &self.re, domain))
    }
}

/// Free-function form of [`MerfFit::predict_unit`].
pub fn predict_unit_merf<M: FixedPart>(
    fit: &MerfFit<M>,
    x: &[f64],
    domain: DomainId,
) -> Result<f64> {
    fit.predict_unit(x, domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed::LinearPredictor;

    fn toy_sample(values: &[(i64, u64, f64)]) -> Sample {
        let domain = values.iter().map(|v| DomainId(v.0)).collect();
        let y = values.iter().map(|v| v.1).collect();
        let rows: Vec<Vec<f64>> = values.iter().map(|v| vec![v.2]).collect();
        Sample::new(domain, y, Covariates::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn relative_change_handles_equal_infinities() {
        assert_eq!(relative_change(f64::INFINITY, f64::INFINITY), 0.0);
        assert_eq!(relative_change(-2.0, -1.0), 0.5);
    }

    #[test]
    fn single_domain_gives_finite_effect() {
        let s = toy_sample(&[
            (1, 3, 0.1),
            (1, 5, 0.4),
            (1, 2, 0.9),
            (1, 7, 0.3),
            (1, 4, 0.2),
        ]);
        let cfg = MerfConfig {
            forest: ForestParams {
                num_trees: 20,
                ..Default::default()
            },
            ..Default::default()
        };
        let fit = fit_merf(&s, &cfg).unwrap();
        assert!(fit.re.get(DomainId(1)).is_finite());
        assert_eq!(fit.trace.len(), fit.iterations);
    }

    #[test]
    fn constant_fixed_part_plus_effect() {
        let s = toy_sample(&[(1, 6, 0.0), (1, 7, 1.0), (2, 4, 0.0), (2, 3, 1.0)]);
        let lin = LinearPredictor {
            intercept: 5.0,
            coefficients: vec![0.0],
        };
        let fit = fit_merf_with(&s, &lin, 1e-5, 10, &RandomEffects::default()).unwrap();
        assert!(fit.vc.sigma2_nu > 0.0);
        // unseen domain falls back to the fixed part
        assert_eq!(fit.predict_unit(&[0.3], DomainId(9)).unwrap(), 5.0);
        let nu1 = fit.re.get(DomainId(1));
        assert_eq!(fit.predict_unit(&[0.3], DomainId(1)).unwrap(), 5.0 + nu1);
        assert!(fit.predict_unit(&[0.3, 1.0], DomainId(1)).is_err());
    }
}
