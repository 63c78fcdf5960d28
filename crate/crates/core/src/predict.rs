//! Domain-mean estimators for the fitted models.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{domain_index, DomainId, DomainUnits, Population, Sample};
use crate::ebpp::{ebpp_means_by_domain, GlmmFit};
use crate::error::{Result, SaeError};
use crate::fixed::FixedPart;
use crate::gmerf::GmerfFit;
use crate::lmm::blup_predict;
use crate::merf::MerfFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gmerf,
    Merf,
    Ebpp,
    Direct,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Gmerf => "gmerf",
            Method::Merf => "merf",
            Method::Ebpp => "ebpp",
            Method::Direct => "direct",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmerf" => Ok(Method::Gmerf),
            "merf" => Ok(Method::Merf),
            "ebpp" => Ok(Method::Ebpp),
            "direct" => Ok(Method::Direct),
            other => Err(SaeError::InvalidParameter(format!(
                "unknown method '{other}'"
            ))),
        }
    }
}

/// How GMERF unit predictions are turned into a domain mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `exp(mean_j f(x_ij) + nu_i)`.
    #[default]
    ExpOfMean,
    /// `mean_j exp(f(x_ij) + nu_i)`.
    MeanOfExp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEstimate {
    pub domain: DomainId,
    pub method: Method,
    pub estimate: f64,
    pub in_sample: bool,
    pub population_size: usize,
    pub sample_size: usize,
}

/// One estimate per census domain, ordered by domain id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEstimates {
    pub method: Method,
    estimates: Vec<DomainEstimate>,
}

impl DomainEstimates {
    pub fn iter(&self) -> impl Iterator<Item = &DomainEstimate> {
        self.estimates.iter()
    }

    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn get(&self, domain: DomainId) -> Option<&DomainEstimate> {
        self.estimates
            .binary_search_by_key(&domain, |e| e.domain)
            .ok()
            .map(|i| &self.estimates[i])
    }

    pub fn values(&self) -> BTreeMap<DomainId, f64> {
        self.estimates
            .iter()
            .map(|e| (e.domain, e.estimate))
            .collect()
    }

    /// CSV with columns `domain_id,method,estimate,in_sample,N_i,n_i`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["domain_id", "method", "estimate", "in_sample", "N_i", "n_i"])?;
        for e in &self.estimates {
            w.write_record([
                e.domain.to_string(),
                e.method.to_string(),
                e.estimate.to_string(),
                e.in_sample.to_string(),
                e.population_size.to_string(),
                e.sample_size.to_string(),
            ])?;
        }
        w.flush().map_err(|e| SaeError::Csv(e.into()))?;
        Ok(())
    }
}

fn check_sampled_domains(
    sample_sizes: &BTreeMap<DomainId, usize>,
    population: &Population,
) -> Result<()> {
    for d in sample_sizes.keys() {
        if !population.sizes().contains_key(d) {
            return Err(SaeError::Input(format!(
                "sampled domain {d} missing from census"
            )));
        }
    }
    Ok(())
}

fn assemble(
    method: Method,
    population: &Population,
    sample_sizes: &BTreeMap<DomainId, usize>,
    values: BTreeMap<DomainId, f64>,
) -> Result<DomainEstimates> {
    if let Some((d, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(SaeError::Optimizer(format!(
            "{method} estimate for domain {d} is not finite ({v})"
        )));
    }
    let estimates = population
        .sizes()
        .iter()
        .map(|(d, &n_pop)| {
            let n = sample_sizes.get(d).copied().unwrap_or(0);
            DomainEstimate {
                domain: *d,
                method,
                estimate: values[d],
                in_sample: n > 0,
                population_size: n_pop,
                sample_size: n,
            }
        })
        .collect();
    Ok(DomainEstimates { method, estimates })
}

/// Fixed-part predictions over the census, grouped by domain.
fn fixed_part_by_domain<M: FixedPart>(
    forest: &M,
    population: &Population,
) -> Result<BTreeMap<DomainId, Vec<f64>>> {
    let f = forest.predict(population.covariates())?;
    Ok(domain_index(population)
        .into_iter()
        .map(|(d, rows)| (d, rows.iter().map(|&r| f[r]).collect()))
        .collect())
}

pub fn gmerf_domain_means<M: FixedPart>(
    fit: &GmerfFit<M>,
    population: &Population,
    aggregation: Aggregation,
) -> Result<DomainEstimates> {
    check_sampled_domains(&fit.sample_sizes, population)?;
    let values = fixed_part_by_domain(&fit.forest, population)?
        .into_iter()
        .map(|(d, f)| {
            let nu = if fit.sample_sizes.contains_key(&d) {
                blup_predict(&fit.vc, &fit.re, d)
            } else {
                0.0
            };
            let m = match aggregation {
                Aggregation::ExpOfMean => (f.iter().sum::<f64>() / f.len() as f64 + nu).exp(),
                Aggregation::MeanOfExp => {
                    f.iter().map(|v| (v + nu).exp()).sum::<f64>() / f.len() as f64
                }
            };
            (d, m)
        })
        .collect();
    assemble(Method::Gmerf, population, &fit.sample_sizes, values)
}

/// Mean forest prediction plus `nu_i`, clamped at zero.
pub fn merf_domain_means<M: FixedPart>(
    fit: &MerfFit<M>,
    population: &Population,
) -> Result<DomainEstimates> {
    check_sampled_domains(&fit.sample_sizes, population)?;
    let values = fixed_part_by_domain(&fit.forest, population)?
        .into_iter()
        .map(|(d, f)| {
            let nu = if fit.sample_sizes.contains_key(&d) {
                blup_predict(&fit.vc, &fit.re, d)
            } else {
                0.0
            };
            let raw = f.iter().sum::<f64>() / f.len() as f64 + nu;
            if raw < 0.0 {
                warn!("MERF mean for domain {d} is {raw}; clamped to 0");
            }
            (d, raw.max(0.0))
        })
        .collect();
    assemble(Method::Merf, population, &fit.sample_sizes, values)
}

pub fn ebpp_domain_means(
    fit: &GlmmFit,
    sample: &Sample,
    population: &Population,
) -> Result<DomainEstimates> {
    check_sampled_domains(&fit.sample_sizes, population)?;
    let values = ebpp_means_by_domain(fit, sample, population)?;
    assemble(Method::Ebpp, population, &fit.sample_sizes, values)
}

/// Sample means of the sampled census domains; unsampled domains are omitted.
pub fn direct_domain_means(sample: &Sample, population: &Population) -> Result<DomainEstimates> {
    let means = sample.direct_means();
    let mut estimates = Vec::with_capacity(means.len());
    for (d, m) in means {
        let Some(&n_pop) = population.sizes().get(&d) else {
            return Err(SaeError::Input(format!(
                "sampled domain {d} missing from census"
            )));
        };
        estimates.push(DomainEstimate {
            domain: d,
            method: Method::Direct,
            estimate: m,
            in_sample: true,
            population_size: n_pop,
            sample_size: sample.sizes()[&d],
        });
    }
    Ok(DomainEstimates {
        method: Method::Direct,
        estimates,
    })
}
