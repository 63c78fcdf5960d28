//! The five subcommands.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use saecount::bootstrap::{
    nonparametric_bootstrap_gmerf, nonparametric_bootstrap_merf, parametric_bootstrap_gmerf, Scheme,
};
use saecount::data::{load_population, load_sample};
use saecount::diagnostics::{histogram, summarize, write_histogram_csv};
use saecount::ebpp::{fit_poisson_glmm_pql, GlmmFit, PqlConfig};
use saecount::gmerf::{fit_gmerf, GmerfConfig, GmerfFit};
use saecount::lmm::blup_predict;
use saecount::merf::{fit_merf, MerfConfig, MerfFit};
use saecount::predict::{
    ebpp_domain_means, gmerf_domain_means, merf_domain_means, DomainEstimates, Method,
};
use saecount::simlab::{run_design_based, run_model_based, scheme_method, Scenario, SimConfig};
use saecount::{CsvSchema, DomainId, DomainUnits, Population, RngHandle, Sample};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedModel {
    #[serde(rename = "gmerf")]
    Gmerf { config: GmerfConfig, fit: GmerfFit },
    #[serde(rename = "merf")]
    Merf { config: MerfConfig, fit: MerfFit },
    #[serde(rename = "ebpp")]
    Ebpp { config: PqlConfig, fit: GlmmFit },
}

impl FittedModel {
    pub fn method(&self) -> Method {
        match self {
            FittedModel::Gmerf { .. } => Method::Gmerf,
            FittedModel::Merf { .. } => Method::Merf,
            FittedModel::Ebpp { .. } => Method::Ebpp,
        }
    }

    pub fn converged(&self) -> bool {
        match self {
            FittedModel::Gmerf { fit, .. } => fit.converged,
            FittedModel::Merf { fit, .. } => fit.converged,
            FittedModel::Ebpp { fit, .. } => fit.converged,
        }
    }

    fn sample_sizes(&self) -> &BTreeMap<DomainId, usize> {
        match self {
            FittedModel::Gmerf { fit, .. } => &fit.sample_sizes,
            FittedModel::Merf { fit, .. } => &fit.sample_sizes,
            FittedModel::Ebpp { fit, .. } => &fit.sample_sizes,
        }
    }
}

/// Serialized fit written by `fit` and read by the other commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub seed: u64,
    pub schema: CsvSchema,
    pub model: FittedModel,
}

impl FitArtifact {
    pub fn to_json(&self) -> Result<String, CliError> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_json(&read(path)?)
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    info!("wrote {}", path.display());
    Ok(())
}

/// CSV preceded by a `# seed: N` line.
fn write_csv<F>(path: &Path, seed: u64, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut Vec<u8>) -> saecount::Result<()>,
{
    let mut buf = format!("# seed: {seed}\n").into_bytes();
    body(&mut buf)?;
    write(path, &buf)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write(path, text.as_bytes())
}

fn survey_schema(config: &RunConfig) -> Result<&CsvSchema, CliError> {
    let schema = config.schema()?;
    if schema.outcome.is_none() {
        return Err(CliError::Config(
            "schema.outcome is required for the survey".into(),
        ));
    }
    Ok(schema)
}

fn load_census(config: &RunConfig, fit_schema: &CsvSchema) -> Result<Population, CliError> {
    let schema = config.schema.as_ref().unwrap_or(fit_schema);
    if schema.covariates != fit_schema.covariates {
        return Err(CliError::Config(format!(
            "census covariates {:?} do not match the fit covariates {:?}",
            schema.covariates, fit_schema.covariates
        )));
    }
    let census_schema = CsvSchema {
        outcome: None,
        ..schema.clone()
    };
    Ok(load_population(config.census_path()?, &census_schema)?)
}

fn load_survey_for(config: &RunConfig, fit_schema: &CsvSchema) -> Result<Sample, CliError> {
    let schema = config.schema.as_ref().unwrap_or(fit_schema);
    if schema.outcome.is_none() {
        return Err(CliError::Config(
            "schema.outcome is required for the survey".into(),
        ));
    }
    Ok(load_sample(config.survey_path()?, schema)?)
}

pub fn fit(config: &RunConfig) -> Result<(), CliError> {
    let schema = survey_schema(config)?;
    let sample = load_sample(config.survey_path()?, schema)?;
    info!(
        "loaded {} survey units in {} domains",
        sample.len(),
        sample.sizes().len()
    );
    let model = match config.method {
        Method::Gmerf => {
            let c = config.gmerf_config(GmerfConfig::default());
            let fit = fit_gmerf(&sample, &c)?;
            FittedModel::Gmerf { config: c, fit }
        }
        Method::Merf => {
            let c = config.merf_config(MerfConfig::default());
            let fit = fit_merf(&sample, &c)?;
            FittedModel::Merf { config: c, fit }
        }
        Method::Ebpp => {
            let fit = fit_poisson_glmm_pql(&sample, config.pql.tol, config.pql.max_iter)?;
            FittedModel::Ebpp {
                config: config.pql,
                fit,
            }
        }
        Method::Direct => {
            return Err(CliError::Config(
                "method `direct` has no model to fit".into(),
            ));
        }
    };
    let artifact = FitArtifact {
        seed: config.seed,
        schema: schema.clone(),
        model,
    };
    write(&config.fit_path(), artifact.to_json()?.as_bytes())?;
    write_json(
        &config.out.join("fit_summary.json"),
        &fit_summary(&artifact, &sample),
    )?;
    if !artifact.model.converged() {
        return Err(CliError::NotConverged(artifact.model.method().to_string()));
    }
    Ok(())
}

fn fit_summary(artifact: &FitArtifact, sample: &Sample) -> serde_json::Value {
    let mut v = json!({
        "seed": artifact.seed,
        "method": artifact.model.method(),
        "n": sample.len(),
        "domains": artifact.model.sample_sizes().len(),
        "converged": artifact.model.converged(),
    });
    let extra = match &artifact.model {
        FittedModel::Gmerf { fit, .. } => json!({
            "sigma2_nu": fit.vc.sigma2_nu,
            "sigma2_eps": fit.vc.sigma2_eps,
            "macro_iterations": fit.macro_trace.len(),
            "macro_trace": fit.macro_trace,
            "micro_iterations": fit.micro_traces.iter().map(Vec::len).collect::<Vec<_>>(),
            "micro_converged": fit.micro_converged,
        }),
        FittedModel::Merf { fit, .. } => json!({
            "sigma2_nu": fit.vc.sigma2_nu,
            "sigma2_eps": fit.vc.sigma2_eps,
            "iterations": fit.iterations,
            "loglik_trace": fit.trace,
        }),
        FittedModel::Ebpp { fit, .. } => json!({
            "sigma2_nu": fit.vc.sigma2_nu,
            "sigma2_eps": fit.vc.sigma2_eps,
            "iterations": fit.iterations,
            "coefficients": fit
                .coefficient_names
                .iter()
                .zip(&fit.beta)
                .map(|(n, b)| json!({ "name": n, "estimate": b }))
                .collect::<Vec<_>>(),
        }),
    };
    if let (Some(a), Some(b)) = (v.as_object_mut(), extra.as_object()) {
        a.extend(b.clone());
    }
    v
}

fn estimates_for(
    config: &RunConfig,
    artifact: &FitArtifact,
    census: &Population,
) -> Result<DomainEstimates, CliError> {
    Ok(match &artifact.model {
        FittedModel::Gmerf { fit, .. } => gmerf_domain_means(fit, census, config.aggregation)?,
        FittedModel::Merf { fit, .. } => merf_domain_means(fit, census)?,
        FittedModel::Ebpp { fit, .. } => {
            let sample = load_survey_for(config, &artifact.schema)?;
            ebpp_domain_means(fit, &sample, census)?
        }
    })
}

pub fn predict(config: &RunConfig) -> Result<(), CliError> {
    let artifact = FitArtifact::load(&config.fit_path())?;
    let census = load_census(config, &artifact.schema)?;
    let est = estimates_for(config, &artifact, &census)?;
    let out_of_sample = est.iter().filter(|e| !e.in_sample).count();
    info!(
        "{} domains estimated, {out_of_sample} out of sample",
        est.len()
    );
    write_csv(&config.out.join("estimates.csv"), config.seed, |buf| {
        est.write_csv(buf)
    })
}

pub fn mse(config: &RunConfig) -> Result<(), CliError> {
    let artifact = FitArtifact::load(&config.fit_path())?;
    let method = artifact.model.method();
    let scheme = match (config.mse.scheme, method) {
        (Some(s), _) => s,
        (None, Method::Gmerf) => Scheme::Parametric,
        (None, Method::Merf) => Scheme::NonparametricMerf,
        (None, m) => {
            return Err(CliError::Config(format!(
                "no bootstrap scheme for method {m}"
            )));
        }
    };
    if scheme_method(scheme) != method {
        return Err(CliError::Config(format!(
            "scheme {scheme} needs a {} fit, got {method}",
            scheme_method(scheme)
        )));
    }
    let census = load_census(config, &artifact.schema)?;
    let rng = RngHandle::new(config.seed);
    let b = config.mse.replicates;
    let report = match (&artifact.model, scheme) {
        (FittedModel::Gmerf { config: c, fit }, Scheme::Parametric) => {
            let plan = match config.data.survey {
                Some(_) => load_survey_for(config, &artifact.schema)?.sizes().clone(),
                None => fit.sample_sizes.clone(),
            };
            parametric_bootstrap_gmerf(fit, c, &census, &plan, b, &rng, config.aggregation)?
        }
        (FittedModel::Gmerf { config: c, fit }, Scheme::NonparametricGmerf) => {
            let sample = load_survey_for(config, &artifact.schema)?;
            nonparametric_bootstrap_gmerf(fit, c, &sample, &census, b, &rng, config.aggregation)?
        }
        (FittedModel::Merf { config: c, fit }, Scheme::NonparametricMerf) => {
            let sample = load_survey_for(config, &artifact.schema)?;
            nonparametric_bootstrap_merf(fit, c, &sample, &census, b, &rng)?
        }
        _ => unreachable!("scheme/method pairing checked above"),
    };
    if report.failures > 0 || report.nonconverged > 0 {
        warn!(
            "{scheme}: {} failed and {} non-converged replicates of {b}",
            report.failures, report.nonconverged
        );
    }
    write_csv(&config.out.join("mse.csv"), config.seed, |buf| {
        report.write_csv(buf)
    })
}

fn read_plan(path: &Path) -> Result<BTreeMap<DomainId, usize>, CliError> {
    let text = read(path)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(saecount::SaeError::from)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| {
                CliError::Config(format!("plan {} lacks a `{name}` column", path.display()))
            })
    };
    let (dc, nc) = (col("domain")?, col("n")?);
    let mut plan = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(saecount::SaeError::from)?;
        let parse_err = || CliError::Config(format!("plan row {} is malformed", i + 1));
        let d: i64 = rec
            .get(dc)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(parse_err)?;
        let n: usize = rec
            .get(nc)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(parse_err)?;
        plan.insert(DomainId(d), n);
    }
    Ok(plan)
}

pub fn simulate(config: &RunConfig) -> Result<(), CliError> {
    let s = &config.simulate;
    let defaults = SimConfig::default();
    let schemes = if s.bootstrap == 0 {
        if !s.schemes.is_empty() {
            info!("bootstrap = 0: MSE schemes skipped");
        }
        Vec::new()
    } else {
        s.schemes.clone()
    };
    let sim = SimConfig {
        methods: s.methods.clone(),
        schemes,
        replicates: s.replicates,
        bootstrap: s.bootstrap,
        gmerf: config.gmerf_config(defaults.gmerf.clone()),
        merf: config.merf_config(defaults.merf.clone()),
        pql: config.pql,
        aggregation: config.aggregation,
    };
    sim.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let rng = RngHandle::new(config.seed);
    let report = match (&s.scenario, &s.design) {
        (Some(name), None) => {
            let mut scenario = Scenario::standard(*name);
            if let Some(d) = s.domains {
                if d == 0 || d > scenario.domain_sizes.len() {
                    return Err(CliError::Config(format!(
                        "simulate.domains must be in 1..={}",
                        scenario.domain_sizes.len()
                    )));
                }
                scenario = scenario.truncated(d);
            }
            run_model_based(&scenario, &sim, &rng)?
        }
        (None, Some(design)) => {
            let schema = survey_schema(config)?;
            let census = load_population(&design.census, schema)?;
            let plan = read_plan(&design.plan)?;
            run_design_based(&census, &plan, &sim, &rng)?
        }
        _ => {
            return Err(CliError::Config(
                "simulate needs exactly one of simulate.scenario and simulate.design".into(),
            ));
        }
    };
    print!("{}", report.summary_table());
    write_csv(&config.out.join("sim_domains.csv"), config.seed, |buf| {
        report.write_domain_csv(buf)
    })?;
    write_csv(&config.out.join("sim_summary.csv"), config.seed, |buf| {
        report.write_summary_csv(buf)
    })
}

pub fn diagnose(config: &RunConfig) -> Result<(), CliError> {
    let artifact = FitArtifact::load(&config.fit_path())?;
    let sample = load_survey_for(config, &artifact.schema)?;
    let x = sample.covariates();
    let n = sample.len();
    let oob_len = match &artifact.model {
        FittedModel::Gmerf { fit, .. } => Some(fit.eta.len()),
        FittedModel::Merf { fit, .. } => Some(fit.forest.oob_predictions().len()),
        FittedModel::Ebpp { .. } => None,
    };
    if oob_len.is_some_and(|m| m != n) {
        return Err(CliError::Config(format!(
            "diagnose needs the survey the forest was fitted on ({} units), got {n}",
            oob_len.unwrap_or_default()
        )));
    }
    // forests are judged on out-of-bag fitted values, the GLMM on its fit
    let mu: Vec<f64> = match &artifact.model {
        FittedModel::Gmerf { fit, .. } => fit.fitted_mu(),
        FittedModel::Merf { fit, .. } => fit
            .forest
            .oob_predictions()
            .iter()
            .zip(sample.domains())
            .map(|(f, d)| f + blup_predict(&fit.vc, &fit.re, *d))
            .collect(),
        FittedModel::Ebpp { fit, .. } => (0..n)
            .map(|i| {
                fit.linear_predictor(x.row(i), sample.domains()[i])
                    .map(f64::exp)
            })
            .collect::<saecount::Result<_>>()?,
    };
    // MERF works on the count scale, so its fitted means can be <= 0
    let keep: Vec<usize> = (0..n)
        .filter(|&i| mu[i].is_finite() && mu[i] > 0.0)
        .collect();
    let excluded = n - keep.len();
    if excluded > 0 {
        warn!("{excluded} units with a non-positive fitted mean left out of the diagnostics");
    }
    let y = sample.outcome();
    let y_kept: Vec<u64> = keep.iter().map(|&i| y[i]).collect();
    let mu_kept: Vec<f64> = keep.iter().map(|&i| mu[i]).collect();
    let p = artifact.schema.covariates.len();
    let summary = summarize(&y_kept, &mu_kept, p, artifact.model.sample_sizes().len())?;
    write_json(
        &config.out.join("diagnostics.json"),
        &json!({
            "seed": config.seed,
            "method": artifact.model.method(),
            "n": y_kept.len(),
            "excluded_units": excluded,
            "df": summary.df,
            "dispersion_ratio": summary.dispersion_ratio,
            "dean_statistic": summary.dean_statistic,
            "dean_p_value": summary.dean_p_value,
        }),
    )?;
    let mut pearson = vec![None; n];
    for (&i, &r) in keep.iter().zip(&summary.pearson) {
        pearson[i] = Some(r);
    }
    write_csv(&config.out.join("pearson.csv"), config.seed, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["domain_id", "y", "mu", "pearson"])?;
        for i in 0..n {
            w.write_record([
                sample.domains()[i].to_string(),
                y[i].to_string(),
                mu[i].to_string(),
                pearson[i].map(|r| r.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| saecount::SaeError::Csv(e.into()))?;
        Ok(())
    })?;
    let bins = histogram(&summary.pearson, config.diagnose.bins)?;
    write_csv(&config.out.join("pearson_hist.csv"), config.seed, |buf| {
        write_histogram_csv(&bins, buf)
    })
}
