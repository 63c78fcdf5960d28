//! Generalized mixed effects random forest for Poisson counts.
//!
//! Macro iterations linearize the log link around the current `eta`
//! (working target `y_L` and weights `w`); micro iterations fit the weighted
//! forest/LMM pseudo-model to `y_L` until its log-likelihood settles.

use std::collections::BTreeMap;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{DomainId, DomainUnits, Sample};
use crate::error::{Result, SaeError};
use crate::fixed::{FixedPart, FixedPartLearner};
use crate::forest::{Forest, ForestParams};
use crate::glm::fit_poisson_glm;
use crate::lmm::{blup_predict, RandomEffects, VarianceComponents};
use crate::merf::alternate;

/// Linear predictors are clamped to this range before exponentiation.
pub const ETA_CLAMP: f64 = 30.0;
/// Floor applied to `mu` inside the working target and weights.
pub const MU_FLOOR: f64 = 1e-8;

/// Linearized Poisson model around the current linear predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingState {
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    pub y_l: Vec<f64>,
    pub w: Vec<f64>,
}

/// `mu = exp(eta)`, `y_L = log mu + (y - mu) / mu`, `w = mu`.
pub fn poisson_working_update(y: &[f64], eta: &[f64]) -> Result<WorkingState> {
    if y.len() != eta.len() {
        return Err(SaeError::Dimension {
            expected: y.len(),
            got: eta.len(),
        });
    }
    if eta.iter().any(|e| !e.is_finite()) {
        return Err(SaeError::NonFinite("linear predictor"));
    }
    let n = y.len();
    let mut state = WorkingState {
        eta: Vec::with_capacity(n),
        mu: Vec::with_capacity(n),
        y_l: Vec::with_capacity(n),
        w: Vec::with_capacity(n),
    };
    let mut clamped = 0usize;
    let mut floored = 0usize;
    for (&yi, &e) in y.iter().zip(eta) {
        let e = if e.abs() > ETA_CLAMP {
            clamped += 1;
            e.clamp(-ETA_CLAMP, ETA_CLAMP)
        } else {
            e
        };
        let mu = e.exp();
        let (log_m, m) = if mu < MU_FLOOR {
            floored += 1;
            (MU_FLOOR.ln(), MU_FLOOR)
        } else {
            (e, mu)
        };
        state.eta.push(e);
        state.mu.push(mu);
        state.y_l.push(log_m + (yi - m) / m);
        state.w.push(m);
    }
    if clamped > 0 {
        warn!("working update: {clamped} linear predictors clamped to +-{ETA_CLAMP}");
    }
    if floored > 0 {
        warn!("working update: {floored} means floored at {MU_FLOOR}");
    }
    Ok(state)
}

/// Fitted linear predictors of a Poisson GLM without random effects, or the
/// constant `log(mean y + 0.5)` when IRLS fails.
pub fn init_glm_poisson(sample: &Sample) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(SaeError::Input(
            "GLM initialization needs a nonempty sample".into(),
        ));
    }
    let y = sample.outcome_f64();
    match fit_poisson_glm(sample.covariates(), &y, 1e-8, 100) {
        Ok(glm) => Ok(glm.eta),
        Err(e) => {
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            warn!("GLM initialization failed ({e}); using log(mean + 0.5)");
            Ok(vec![(mean + 0.5).ln(); y.len()])
        }
    }
}

/// Tolerances and iteration limits of the doubly iterative fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Convergence {
    pub micro_tol: f64,
    pub macro_tol: f64,
    pub max_macro: usize,
    pub max_micro: usize,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            micro_tol: 1e-5,
            macro_tol: 1e-3,
            max_macro: 10,
            max_micro: 10,
        }
    }
}

impl Convergence {
    fn validate(&self) -> Result<()> {
        if !(self.micro_tol > 0.0 && self.macro_tol > 0.0) {
            return Err(SaeError::InvalidParameter("tolerances must be > 0".into()));
        }
        if self.max_macro == 0 || self.max_micro == 0 {
            return Err(SaeError::InvalidParameter(
                "iteration limits must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Same tolerances with both iteration limits halved (at least 1).
    pub fn halved(&self) -> Self {
        Self {
            max_macro: (self.max_macro / 2).max(1),
            max_micro: (self.max_micro / 2).max(1),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmerfConfig {
    pub forest: ForestParams,
    pub micro_tol: f64,
    pub macro_tol: f64,
    pub max_macro: usize,
    pub max_micro: usize,
}

impl Default for GmerfConfig {
    fn default() -> Self {
        let c = Convergence::default();
        Self {
            forest: ForestParams::default(),
            micro_tol: c.micro_tol,
            macro_tol: c.macro_tol,
            max_macro: c.max_macro,
            max_micro: c.max_micro,
        }
    }
}

impl GmerfConfig {
    pub fn convergence(&self) -> Convergence {
        Convergence {
            micro_tol: self.micro_tol,
            macro_tol: self.macro_tol,
            max_macro: self.max_macro,
            max_micro: self.max_micro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmerfFit<M = Forest> {
    pub forest: M,
    pub vc: VarianceComponents,
    pub re: RandomEffects,
    /// Out-of-bag linear predictors of the sample units at the final state.
    pub eta: Vec<f64>,
    /// Relative change of `eta` after each macro iteration.
    #[serde(with = "crate::serde_float::vec")]
    pub macro_trace: Vec<f64>,
    /// Pseudo-model log-likelihoods of each micro loop.
    #[serde(with = "crate::serde_float::vec_vec")]
    pub micro_traces: Vec<Vec<f64>>,
    pub micro_converged: Vec<bool>,
    pub converged: bool,
    pub sample_sizes: BTreeMap<DomainId, usize>,
}

pub fn fit_gmerf(sample: &Sample, config: &GmerfConfig) -> Result<GmerfFit> {
    fit_gmerf_with(sample, &config.forest, &config.convergence())
}

/// GMERF with an arbitrary fixed-part learner.
pub fn fit_gmerf_with<L: FixedPartLearner>(
    sample: &Sample,
    learner: &L,
    conv: &Convergence,
) -> Result<GmerfFit<L::Model>> {
    let eta0 = init_glm_poisson(sample)?;
    fit_gmerf_from(sample, learner, conv, eta0, RandomEffects::default())
}

/// GMERF from a given starting linear predictor and random effects.
pub fn fit_gmerf_from<L: FixedPartLearner>(
    sample: &Sample,
    learner: &L,
    conv: &Convergence,
    mut eta: Vec<f64>,
    mut re: RandomEffects,
) -> Result<GmerfFit<L::Model>> {
    conv.validate()?;
    if sample.is_empty() {
        return Err(SaeError::Input("GMERF needs a nonempty sample".into()));
    }
    if eta.len() != sample.len() {
        return Err(SaeError::Dimension {
            expected: sample.len(),
            got: eta.len(),
        });
    }
    let y = sample.outcome_f64();
    let x = sample.covariates();
    let domains = sample.domains();
    let mut macro_trace = Vec::new();
    let mut micro_traces = Vec::new();
    let mut micro_converged = Vec::new();
    let mut converged = false;
    let mut last = None;
    for it in 1..=conv.max_macro {
        let state = poisson_working_update(&y, &eta)?;
        let alt = alternate(
            learner,
            x,
            &state.y_l,
            &state.w,
            domains,
            &re,
            conv.micro_tol,
            conv.max_micro,
        )?;
        if !alt.converged {
            warn!(
                "macro iteration {it}: micro loop hit {} iterations",
                conv.max_micro
            );
        }
        let new_eta: Vec<f64> = alt
            .model
            .oob_predictions()
            .iter()
            .zip(domains)
            .map(|(f, d)| f + alt.re.get(*d))
            .collect();
        let change = eta
            .iter()
            .zip(&new_eta)
            .map(|(a, b)| (b - a).abs() / (a.abs() + 1.0))
            .fold(0.0, f64::max);
        info!("macro iteration {it}: eta change {change:.3e}");
        macro_trace.push(change);
        micro_traces.push(alt.trace);
        micro_converged.push(alt.converged);
        eta = new_eta;
        re = alt.re.clone();
        last = Some((alt.model, alt.vc, alt.re));
        if change < conv.macro_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!(
            "GMERF did not converge in {} macro iterations",
            conv.max_macro
        );
    }
    let (forest, vc, re) = last.expect("at least one macro iteration");
    Ok(GmerfFit {
        forest,
        vc,
        re,
        eta,
        macro_trace,
        micro_traces,
        micro_converged,
        converged,
        sample_sizes: sample
            .sizes()
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(d, n)| (*d, *n))
            .collect(),
    })
}

impl<M: FixedPart> GmerfFit<M> {
    /// `(eta, mu)` with `eta = f(x) + nu_domain`.
    pub fn predict_unit(&self, x: &[f64], domain: DomainId) -> Result<(f64, f64)> {
        if x.len() != self.forest.num_features() {
            return Err(SaeError::Dimension {
                expected: self.forest.num_features(),
                got: x.len(),
            });
        }
        let eta = self.forest.predict_row(x) + blup_predict(&self.vc, &self.re, domain);
        Ok((eta, eta.exp()))
    }

    /// Out-of-bag fitted means of the sample units.
    pub fn fitted_mu(&self) -> Vec<f64> {
        self.eta.iter().map(|e| e.exp()).collect()
    }
}

pub fn predict_unit_gmerf<M: FixedPart>(
    fit: &GmerfFit<M>,
    x: &[f64],
    domain: DomainId,
) -> Result<(f64, f64)> {
    fit.predict_unit(x, domain)
}
