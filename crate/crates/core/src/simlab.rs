//! Simulation harnesses: synthetic populations, repeated sampling and
//! estimation, and the evaluation metrics for point and MSE estimates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{
    nonparametric_bootstrap_gmerf, nonparametric_bootstrap_merf, parametric_bootstrap_gmerf, Scheme,
};
use crate::data::{Covariates, DomainId, Population, Sample};
use crate::ebpp::{fit_poisson_glmm_pql, PqlConfig};
use crate::error::{Result, SaeError};
use crate::forest::ForestParams;
use crate::gmerf::{fit_gmerf, GmerfConfig, GmerfFit};
use crate::merf::{fit_merf, MerfConfig, MerfFit};
use crate::predict::{
    direct_domain_means, ebpp_domain_means, gmerf_domain_means, merf_domain_means, Aggregation,
    Method,
};
use crate::rng::{
    model_based_plan, sample_negbinom, sample_normal, sample_poisson, sample_uniform,
    stratified_srswor, RngHandle,
};

/// Fixed part of the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    /// `2 + x1 + x2`
    Linear,
    /// `2 + 2 x1 x2 + x2^2`
    Interaction,
}

impl Predictor {
    pub fn eta(&self, x1: f64, x2: f64, nu: f64) -> f64 {
        match self {
            Predictor::Linear => 2.0 + x1 + x2 + nu,
            Predictor::Interaction => 2.0 + 2.0 * x1 * x2 + x2 * x2 + nu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Family {
    Poisson,
    /// Gamma-Poisson mixture with mean `mu` and variance `mu + mu^2 / scale`.
    NegativeBinomial {
        scale: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioName {
    #[serde(rename = "normal-poisson")]
    NormalPoisson,
    #[serde(rename = "interaction-poisson")]
    InteractionPoisson,
    #[serde(rename = "nb3")]
    Nb3,
    #[serde(rename = "nb1")]
    Nb1,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 4] = [
        ScenarioName::NormalPoisson,
        ScenarioName::InteractionPoisson,
        ScenarioName::Nb3,
        ScenarioName::Nb1,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioName::NormalPoisson => "normal-poisson",
            ScenarioName::InteractionPoisson => "interaction-poisson",
            ScenarioName::Nb3 => "nb3",
            ScenarioName::Nb1 => "nb1",
        }
    }
}

impl FromStr for ScenarioName {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| SaeError::InvalidParameter(format!("unknown scenario '{s}'")))
    }
}

/// Data-generating process of a synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: ScenarioName,
    pub predictor: Predictor,
    pub family: Family,
    /// `N_i` for domains `1..=D`.
    pub domain_sizes: Vec<usize>,
    /// Sample size per domain.
    pub plan: BTreeMap<DomainId, usize>,
    pub nu_sd: f64,
}

impl Scenario {
    /// The four model-based scenarios: 50 domains of 1000 units, the fixed
    /// 921-unit plan, `x1 ~ U(-1, 1)`, `x2 ~ N(-1, 1)`, `nu ~ N(0, 0.3^2)`.
    pub fn standard(name: ScenarioName) -> Self {
        let (predictor, family) = match name {
            ScenarioName::NormalPoisson => (Predictor::Linear, Family::Poisson),
            ScenarioName::InteractionPoisson => (Predictor::Interaction, Family::Poisson),
            ScenarioName::Nb3 => (
                Predictor::Interaction,
                Family::NegativeBinomial { scale: 3.0 },
            ),
            ScenarioName::Nb1 => (
                Predictor::Interaction,
                Family::NegativeBinomial { scale: 1.0 },
            ),
        };
        Self {
            name,
            predictor,
            family,
            domain_sizes: vec![1000; 50],
            plan: model_based_plan(),
            nu_sd: 0.3,
        }
    }

    /// Keeps only the first `d` domains (and their planned sample sizes).
    pub fn truncated(mut self, d: usize) -> Self {
        self.domain_sizes.truncate(d);
        self.plan.retain(|k, _| k.0 >= 1 && (k.0 as usize) <= d);
        self
    }
}

/// Draws a population: `nu_i` per domain and `x1`, `x2` per unit from
/// `rng.child(0)`, then `y` per unit from `rng.child(1)`. Scenarios that
/// differ only in the family therefore share covariates and effects.
pub fn generate_population(scenario: &Scenario, rng: &RngHandle) -> Result<Population> {
    let mut rx = rng.child(0).rng();
    let mut ry = rng.child(1).rng();
    let nu: Vec<f64> = (0..scenario.domain_sizes.len())
        .map(|_| sample_normal(&mut rx, 0.0, scenario.nu_sd))
        .collect::<Result<_>>()?;
    let total: usize = scenario.domain_sizes.iter().sum();
    let mut domain = Vec::with_capacity(total);
    let mut y = Vec::with_capacity(total);
    let mut values = Vec::with_capacity(2 * total);
    for (i, &n_i) in scenario.domain_sizes.iter().enumerate() {
        for _ in 0..n_i {
            let x1 = sample_uniform(&mut rx, -1.0, 1.0)?;
            let x2 = sample_normal(&mut rx, -1.0, 1.0)?;
            let mu = scenario.predictor.eta(x1, x2, nu[i]).exp();
            let yi = match scenario.family {
                Family::Poisson => sample_poisson(&mut ry, mu)?,
                Family::NegativeBinomial { scale } => sample_negbinom(&mut ry, mu, scale)?,
            };
            domain.push(DomainId(i as i64 + 1));
            y.push(yi);
            values.extend([x1, x2]);
        }
    }
    let x = Covariates::new(total, 2, values, vec!["x1".into(), "x2".into()])?;
    Population::new(domain, Some(y), x)
}

/// Settings shared by the simulation runners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub methods: Vec<Method>,
    pub schemes: Vec<Scheme>,
    /// Simulation replicates `M`.
    pub replicates: usize,
    /// Bootstrap replicates `B` per simulation replicate.
    pub bootstrap: usize,
    pub gmerf: GmerfConfig,
    pub merf: MerfConfig,
    pub pql: PqlConfig,
    pub aggregation: Aggregation,
}

impl Default for SimConfig {
    fn default() -> Self {
        let forest = ForestParams {
            num_trees: 200,
            ..Default::default()
        };
        Self {
            methods: vec![Method::Ebpp, Method::Gmerf, Method::Merf],
            schemes: Vec::new(),
            replicates: 50,
            bootstrap: 100,
            gmerf: GmerfConfig {
                forest: forest.clone(),
                max_macro: 5,
                max_micro: 5,
                ..Default::default()
            },
            merf: MerfConfig {
                forest,
                ..Default::default()
            },
            pql: PqlConfig::default(),
            aggregation: Aggregation::ExpOfMean,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(SaeError::InvalidParameter("replicates must be >= 1".into()));
        }
        if !self.schemes.is_empty() && self.bootstrap == 0 {
            return Err(SaeError::InvalidParameter(
                "bootstrap schemes need bootstrap >= 1".into(),
            ));
        }
        for s in &self.schemes {
            let needed = scheme_method(*s);
            if !self.methods.contains(&needed) {
                return Err(SaeError::InvalidParameter(format!(
                    "scheme {s} needs method {needed}"
                )));
            }
        }
        Ok(())
    }
}

/// The method whose MSE a scheme estimates.
pub fn scheme_method(scheme: Scheme) -> Method {
    match scheme {
        Scheme::Parametric | Scheme::NonparametricGmerf => Method::Gmerf,
        Scheme::NonparametricMerf => Method::Merf,
    }
}

/// Estimates of one simulation replicate. Methods and schemes that failed in
/// this replicate are absent from the maps and listed in the failure fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub truth: BTreeMap<DomainId, f64>,
    pub estimates: BTreeMap<Method, BTreeMap<DomainId, f64>>,
    pub mse: BTreeMap<Scheme, BTreeMap<DomainId, f64>>,
    pub failed_methods: Vec<Method>,
    pub failed_schemes: Vec<Scheme>,
}

fn stream_of(scheme: Scheme) -> u64 {
    match scheme {
        Scheme::Parametric => 2,
        Scheme::NonparametricGmerf => 3,
        Scheme::NonparametricMerf => 4,
    }
}

/// Fits every configured method on `sample` and runs the bootstrap schemes;
/// a failing method (or scheme) is logged and recorded, not propagated.
fn estimate_all(
    sample: &Sample,
    population: &Population,
    truth: BTreeMap<DomainId, f64>,
    config: &SimConfig,
    rng: &RngHandle,
) -> ReplicateOutcome {
    let mut out = ReplicateOutcome {
        truth,
        estimates: BTreeMap::new(),
        mse: BTreeMap::new(),
        failed_methods: Vec::new(),
        failed_schemes: Vec::new(),
    };
    let mut gmerf: Option<GmerfFit> = None;
    let mut merf: Option<MerfFit> = None;
    for m in &config.methods {
        let est = match m {
            Method::Gmerf => fit_gmerf(sample, &config.gmerf).and_then(|fit| {
                let e = gmerf_domain_means(&fit, population, config.aggregation)?;
                gmerf = Some(fit);
                Ok(e)
            }),
            Method::Merf => fit_merf(sample, &config.merf).and_then(|fit| {
                let e = merf_domain_means(&fit, population)?;
                merf = Some(fit);
                Ok(e)
            }),
            Method::Ebpp => fit_poisson_glmm_pql(sample, config.pql.tol, config.pql.max_iter)
                .and_then(|fit| ebpp_domain_means(&fit, sample, population)),
            Method::Direct => direct_domain_means(sample, population),
        };
        match est {
            Ok(e) => {
                out.estimates.insert(*m, e.values());
            }
            Err(e) => {
                warn!("{m} failed: {e}");
                out.failed_methods.push(*m);
            }
        }
    }
    let plan: BTreeMap<DomainId, usize> = sample.sizes().clone();
    for s in &config.schemes {
        let handle = rng.child(stream_of(*s));
        let report = match (s, gmerf.as_ref(), merf.as_ref()) {
            (Scheme::Parametric, Some(fit), _) => parametric_bootstrap_gmerf(
                fit,
                &config.gmerf,
                population,
                &plan,
                config.bootstrap,
                &handle,
                config.aggregation,
            ),
            (Scheme::NonparametricGmerf, Some(fit), _) => nonparametric_bootstrap_gmerf(
                fit,
                &config.gmerf,
                sample,
                population,
                config.bootstrap,
                &handle,
                config.aggregation,
            ),
            (Scheme::NonparametricMerf, _, Some(fit)) => nonparametric_bootstrap_merf(
                fit,
                &config.merf,
                sample,
                population,
                config.bootstrap,
                &handle,
            ),
            _ => Err(SaeError::Input(format!(
                "{s} needs a {} fit, which failed",
                scheme_method(*s)
            ))),
        };
        match report {
            Ok(r) => {
                out.mse.insert(*s, r.mse());
            }
            Err(e) => {
                warn!("{s} failed: {e}");
                out.failed_schemes.push(*s);
            }
        }
    }
    out
}

/// Model-based simulation: a fresh population per replicate, sampled with
/// the scenario plan. Replicate `m` draws only from `rng.child(m)`.
pub fn run_model_based(
    scenario: &Scenario,
    config: &SimConfig,
    rng: &RngHandle,
) -> Result<SimReport> {
    config.validate()?;
    let outcomes: Vec<Result<ReplicateOutcome>> = (0..config.replicates)
        .into_par_iter()
        .map(|m| {
            let r = rng.child(m as u64);
            let population = generate_population(scenario, &r.child(0))?;
            let truth = population.domain_means().expect("generated with outcome");
            let sample = stratified_srswor(&mut r.child(1).rng(), &population, &scenario.plan)?;
            let outcome = estimate_all(&sample, &population, truth, config, &r);
            info!("model-based replicate {m} done");
            Ok(outcome)
        })
        .collect();
    let in_sample = scenario
        .plan
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(d, _)| *d)
        .collect();
    SimReport::from_outcomes(scenario.name.as_str(), outcomes, in_sample, config)
}

/// Design-based simulation: repeated stratified samples from a fixed census;
/// the truths are the census domain means.
pub fn run_design_based(
    census: &Population,
    plan: &BTreeMap<DomainId, usize>,
    config: &SimConfig,
    rng: &RngHandle,
) -> Result<SimReport> {
    config.validate()?;
    let truth = census
        .domain_means()
        .ok_or_else(|| SaeError::Input("design-based simulation needs census outcomes".into()))?;
    for d in plan.keys() {
        if !truth.contains_key(d) {
            return Err(SaeError::Input(format!(
                "planned domain {d} is not in the census"
            )));
        }
    }
    let outcomes: Vec<Result<ReplicateOutcome>> = (0..config.replicates)
        .into_par_iter()
        .map(|m| {
            let r = rng.child(m as u64);
            let sample = stratified_srswor(&mut r.child(1).rng(), census, plan)?;
            let outcome = estimate_all(&sample, census, truth.clone(), config, &r);
            info!("design-based replicate {m} done");
            Ok(outcome)
        })
        .collect();
    let in_sample = plan
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(d, _)| *d)
        .collect();
    SimReport::from_outcomes("design-based", outcomes, in_sample, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub bias: f64,
    pub rmse: f64,
    /// Replicates contributing to this domain.
    pub count: usize,
}

/// Per-domain bias and RMSE over replicates; domains missing from a
/// replicate's estimates are skipped for that replicate. The RMSE is
/// `sqrt(bias^2 + variance)`, so `rmse >= |bias|` holds exactly.
pub fn point_metrics(
    estimates: &[BTreeMap<DomainId, f64>],
    truths: &[BTreeMap<DomainId, f64>],
) -> Result<BTreeMap<DomainId, PointMetrics>> {
    if estimates.len() != truths.len() {
        return Err(SaeError::Dimension {
            expected: truths.len(),
            got: estimates.len(),
        });
    }
    let mut errors: BTreeMap<DomainId, Vec<f64>> = BTreeMap::new();
    for (est, truth) in estimates.iter().zip(truths) {
        for (d, e) in est {
            let t = truth
                .get(d)
                .ok_or_else(|| SaeError::Input(format!("no true mean for domain {d}")))?;
            errors.entry(*d).or_default().push(e - t);
        }
    }
    Ok(errors
        .into_iter()
        .map(|(d, err)| {
            let m = err.len() as f64;
            let bias = err.iter().sum::<f64>() / m;
            let var = err.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / m;
            (
                d,
                PointMetrics {
                    bias,
                    rmse: (bias * bias + var).sqrt(),
                    count: err.len(),
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseMetrics {
    /// Relative bias of the bootstrap RMSE; missing when the empirical RMSE is 0.
    pub rb_rmse: Option<f64>,
    /// Relative RMSE of the bootstrap RMSE; missing when the empirical RMSE is 0.
    pub rrmse_rmse: Option<f64>,
}

/// Relative bias and relative RMSE of the estimated RMSE against the
/// empirical `rmse` of each domain.
pub fn mse_metrics(
    mse_estimates: &[BTreeMap<DomainId, f64>],
    rmse: &BTreeMap<DomainId, f64>,
) -> BTreeMap<DomainId, MseMetrics> {
    rmse.iter()
        .map(|(d, &r)| {
            let vals: Vec<f64> = mse_estimates
                .iter()
                .filter_map(|m| m.get(d).copied())
                .collect();
            let metrics = if r == 0.0 || vals.is_empty() {
                MseMetrics {
                    rb_rmse: None,
                    rrmse_rmse: None,
                }
            } else {
                let m = vals.len() as f64;
                let mean_mse = vals.iter().sum::<f64>() / m;
                let sq = vals.iter().map(|v| (v.sqrt() - r).powi(2)).sum::<f64>() / m;
                MseMetrics {
                    rb_rmse: Some((mean_mse.sqrt() - r) / r),
                    rrmse_rmse: Some(sq.sqrt() / r),
                }
            };
            (*d, metrics)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub count: usize,
}

/// Median and mean of the values; `None` for an empty input.
pub fn summarize(values: impl IntoIterator<Item = f64>) -> Option<Summary> {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    Some(Summary {
        median,
        mean: v.iter().sum::<f64>() / n as f64,
        count: n,
    })
}

/// Which domains a summary covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    InSample,
    OutOfSample,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::All => "all",
            Split::InSample => "in_sample",
            Split::OutOfSample => "out_of_sample",
        }
    }

    fn admits(&self, in_sample: bool) -> bool {
        match self {
            Split::All => true,
            Split::InSample => in_sample,
            Split::OutOfSample => !in_sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub label: String,
    pub replicates: usize,
    /// Replicates lost before any method ran.
    pub failures: usize,
    /// Replicates in which each method (or scheme) failed.
    pub method_failures: BTreeMap<Method, usize>,
    pub scheme_failures: BTreeMap<Scheme, usize>,
    /// Domains with a planned sample.
    pub in_sample: Vec<DomainId>,
    pub point: BTreeMap<Method, BTreeMap<DomainId, PointMetrics>>,
    pub mse: BTreeMap<Scheme, BTreeMap<DomainId, MseMetrics>>,
}

impl SimReport {
    fn from_outcomes(
        label: &str,
        outcomes: Vec<Result<ReplicateOutcome>>,
        in_sample: Vec<DomainId>,
        config: &SimConfig,
    ) -> Result<Self> {
        let replicates = outcomes.len();
        let mut ok = Vec::with_capacity(replicates);
        let mut first_error = None;
        for (m, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(o) => ok.push(o),
                Err(e) => {
                    warn!("replicate {m} failed: {e}");
                    first_error.get_or_insert(e);
                }
            }
        }
        if ok.is_empty() {
            return Err(first_error.expect("replicates >= 1"));
        }
        let failures = replicates - ok.len();
        let mut method_failures = BTreeMap::new();
        let mut point = BTreeMap::new();
        for m in &config.methods {
            let (est, truths): (Vec<_>, Vec<_>) = ok
                .iter()
                .filter_map(|o| o.estimates.get(m).map(|e| (e.clone(), o.truth.clone())))
                .unzip();
            method_failures.insert(*m, ok.len() - est.len());
            if est.is_empty() {
                warn!("{m} failed in every replicate");
                continue;
            }
            point.insert(*m, point_metrics(&est, &truths)?);
        }
        let mut scheme_failures = BTreeMap::new();
        let mut mse = BTreeMap::new();
        for s in &config.schemes {
            let est: Vec<_> = ok.iter().filter_map(|o| o.mse.get(s).cloned()).collect();
            scheme_failures.insert(*s, ok.len() - est.len());
            let Some(p) = point.get(&scheme_method(*s)) else {
                continue;
            };
            if est.is_empty() {
                warn!("{s} failed in every replicate");
                continue;
            }
            let rmse: BTreeMap<DomainId, f64> = p.iter().map(|(d, p)| (*d, p.rmse)).collect();
            mse.insert(*s, mse_metrics(&est, &rmse));
        }
        Ok(Self {
            label: label.to_string(),
            replicates,
            failures,
            method_failures,
            scheme_failures,
            in_sample,
            point,
            mse,
        })
    }

    fn is_in_sample(&self, d: DomainId) -> bool {
        self.in_sample.binary_search(&d).is_ok()
    }

    pub fn bias_summary(&self, method: Method, split: Split) -> Option<Summary> {
        let p = self.point.get(&method)?;
        summarize(
            p.iter()
                .filter(|(d, _)| split.admits(self.is_in_sample(**d)))
                .map(|(_, m)| m.bias),
        )
    }

    pub fn rmse_summary(&self, method: Method, split: Split) -> Option<Summary> {
        let p = self.point.get(&method)?;
        summarize(
            p.iter()
                .filter(|(d, _)| split.admits(self.is_in_sample(**d)))
                .map(|(_, m)| m.rmse),
        )
    }

    pub fn rb_rmse_summary(&self, scheme: Scheme, split: Split) -> Option<Summary> {
        let s = self.mse.get(&scheme)?;
        summarize(
            s.iter()
                .filter(|(d, _)| split.admits(self.is_in_sample(**d)))
                .filter_map(|(_, m)| m.rb_rmse),
        )
    }

    pub fn rrmse_rmse_summary(&self, scheme: Scheme, split: Split) -> Option<Summary> {
        let s = self.mse.get(&scheme)?;
        summarize(
            s.iter()
                .filter(|(d, _)| split.admits(self.is_in_sample(**d)))
                .filter_map(|(_, m)| m.rrmse_rmse),
        )
    }

    /// Number of domains with point metrics for `method` outside the plan.
    pub fn out_of_sample_count(&self, method: Method) -> usize {
        self.point
            .get(&method)
            .map(|p| p.keys().filter(|d| !self.is_in_sample(**d)).count())
            .unwrap_or(0)
    }

    /// CSV `kind,name,domain_id,in_sample,bias,rmse,rb_rmse,rrmse_rmse`.
    pub fn write_domain_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "kind",
            "name",
            "domain_id",
            "in_sample",
            "bias",
            "rmse",
            "rb_rmse",
            "rrmse_rmse",
        ])?;
        for (m, per) in &self.point {
            for (d, p) in per {
                w.write_record([
                    "method".to_string(),
                    m.to_string(),
                    d.to_string(),
                    self.is_in_sample(*d).to_string(),
                    p.bias.to_string(),
                    p.rmse.to_string(),
                    String::new(),
                    String::new(),
                ])?;
            }
        }
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for (s, per) in &self.mse {
            for (d, p) in per {
                w.write_record([
                    "scheme".to_string(),
                    s.to_string(),
                    d.to_string(),
                    self.is_in_sample(*d).to_string(),
                    String::new(),
                    String::new(),
                    opt(p.rb_rmse),
                    opt(p.rrmse_rmse),
                ])?;
            }
        }
        w.flush().map_err(|e| SaeError::Csv(e.into()))?;
        Ok(())
    }

    fn summary_rows(&self) -> Vec<(String, String, &'static str, &'static str, Summary)> {
        let mut rows = Vec::new();
        for split in [Split::All, Split::InSample, Split::OutOfSample] {
            for m in self.point.keys() {
                if let Some(s) = self.bias_summary(*m, split) {
                    rows.push(("method".into(), m.to_string(), "bias", split.as_str(), s));
                }
                if let Some(s) = self.rmse_summary(*m, split) {
                    rows.push(("method".into(), m.to_string(), "rmse", split.as_str(), s));
                }
            }
            for sch in self.mse.keys() {
                if let Some(s) = self.rb_rmse_summary(*sch, split) {
                    rows.push((
                        "scheme".into(),
                        sch.to_string(),
                        "rb_rmse",
                        split.as_str(),
                        s,
                    ));
                }
                if let Some(s) = self.rrmse_rmse_summary(*sch, split) {
                    rows.push((
                        "scheme".into(),
                        sch.to_string(),
                        "rrmse_rmse",
                        split.as_str(),
                        s,
                    ));
                }
            }
        }
        rows
    }

    /// CSV `kind,name,measure,split,median,mean,domains`.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "kind", "name", "measure", "split", "median", "mean", "domains",
        ])?;
        for (kind, name, measure, split, s) in self.summary_rows() {
            w.write_record([
                kind,
                name,
                measure.to_string(),
                split.to_string(),
                s.median.to_string(),
                s.mean.to_string(),
                s.count.to_string(),
            ])?;
        }
        w.flush().map_err(|e| SaeError::Csv(e.into()))?;
        Ok(())
    }

    /// Plain-text table of medians and means.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} ({} replicates, {} failed)",
            self.label, self.replicates, self.failures
        );
        for (m, n) in self.method_failures.iter().filter(|(_, n)| **n > 0) {
            let _ = writeln!(out, "{m} failed in {n} replicates");
        }
        for (s, n) in self.scheme_failures.iter().filter(|(_, n)| **n > 0) {
            let _ = writeln!(out, "{s} failed in {n} replicates");
        }
        let _ = writeln!(
            out,
            "{:<10} {:<10} {:<11} {:<14} {:>12} {:>12}",
            "kind", "name", "measure", "split", "median", "mean"
        );
        for (kind, name, measure, split, s) in self.summary_rows() {
            let _ = writeln!(
                out,
                "{kind:<10} {name:<10} {measure:<11} {split:<14} {:>12.4} {:>12.4}",
                s.median, s.mean
            );
        }
        out
    }
}
