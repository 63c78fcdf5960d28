//! Bootstrap MSE estimation for the domain means: parametric and
//! non-parametric schemes for GMERF, and a non-parametric scheme for MERF.
//!
//! Every replicate draws from its own stream `rng.child(b)`, so replicate `b`
//! is reproducible on its own and the result does not depend on the number
//! of worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{domain_index, DomainId, DomainUnits, Population, Sample};
use crate::error::{Result, SaeError};
use crate::forest::Forest;
use crate::gmerf::{fit_gmerf_with, GmerfConfig, GmerfFit};
use crate::lmm::RandomEffects;
use crate::merf::{fit_merf_with, MerfConfig, MerfFit};
use crate::predict::{gmerf_domain_means, merf_domain_means, Aggregation};
use crate::rng::{sample_normal, sample_poisson, srswr, stratified_srswor, RngHandle, SaeRng};

/// Largest share of failed replicates tolerated before aborting.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "parametric")]
    Parametric,
    #[serde(rename = "gmerf-np")]
    NonparametricGmerf,
    #[serde(rename = "merf-npc")]
    NonparametricMerf,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Parametric => "parametric",
            Scheme::NonparametricGmerf => "gmerf-np",
            Scheme::NonparametricMerf => "merf-npc",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parametric" => Ok(Scheme::Parametric),
            "gmerf-np" => Ok(Scheme::NonparametricGmerf),
            "merf-npc" => Ok(Scheme::NonparametricMerf),
            other => Err(SaeError::InvalidParameter(format!(
                "unknown scheme '{other}'"
            ))),
        }
    }
}

/// Centers `z` and rescales it so its variance (denominator `n`) equals
/// `target_var`. Zero-variance input gives zeros.
pub fn center_scale_residuals(z: &[f64], target_var: f64) -> Vec<f64> {
    if z.is_empty() {
        return Vec::new();
    }
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 || target_var <= 0.0 {
        if var == 0.0 && target_var > 0.0 {
            warn!("residuals have zero variance; scaled residuals set to 0");
        }
        return vec![0.0; z.len()];
    }
    let s = (target_var / var).sqrt();
    z.iter().map(|v| (v - mean) * s).collect()
}

/// Two-level split of marginal residuals with centered, rescaled pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDecomposition {
    pub z: Vec<f64>,
    pub zbar: BTreeMap<DomainId, f64>,
    pub level1: Vec<f64>,
    pub level2: Vec<f64>,
}

impl ResidualDecomposition {
    /// Level 1 is scaled to `sum(zhat^2) / (n - D)`, level 2 to `sigma2_nu`.
    pub fn new(z: Vec<f64>, domains: &[DomainId], sigma2_nu: f64) -> Result<Self> {
        if z.len() != domains.len() {
            return Err(SaeError::Dimension {
                expected: domains.len(),
                got: z.len(),
            });
        }
        if z.is_empty() {
            return Err(SaeError::Input("no residuals to decompose".into()));
        }
        let mut acc: BTreeMap<DomainId, (f64, usize)> = BTreeMap::new();
        for (v, d) in z.iter().zip(domains) {
            let e = acc.entry(*d).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        let zbar: BTreeMap<DomainId, f64> = acc
            .into_iter()
            .map(|(d, (s, c))| (d, s / c as f64))
            .collect();
        let zhat: Vec<f64> = z.iter().zip(domains).map(|(v, d)| v - zbar[d]).collect();
        let dof = zhat.len().saturating_sub(zbar.len());
        let target1 = if dof > 0 {
            zhat.iter().map(|v| v * v).sum::<f64>() / dof as f64
        } else {
            0.0
        };
        let level1 = center_scale_residuals(&zhat, target1);
        let means: Vec<f64> = zbar.values().copied().collect();
        let level2 = center_scale_residuals(&means, sigma2_nu);
        Ok(Self {
            z,
            zbar,
            level1,
            level2,
        })
    }
}

/// Nearest-value lookup; ties go to the lowest index.
#[derive(Debug, Clone)]
pub struct NearestMatcher {
    sorted: Vec<(f64, usize)>,
}

impl NearestMatcher {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(SaeError::Input("nothing to match against".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SaeError::NonFinite("matching predictors"));
        }
        let mut sorted: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(Self { sorted })
    }

    /// Index of the value closest to `v`.
    pub fn nearest(&self, v: f64) -> usize {
        let s = &self.sorted;
        let pos = s.partition_point(|(x, _)| *x < v);
        // first entry of the run of equal values at or above v
        let above = s.get(pos).map(|&(x, _)| (x, s[pos].1));
        // first entry of the run of equal values below v
        let below = pos.checked_sub(1).map(|k| {
            let x = s[k].0;
            let first = s[..k].partition_point(|(y, _)| *y < x);
            (x, s[first].1)
        });
        match (below, above) {
            (Some((xb, ib)), Some((xa, ia))) => {
                let (db, da) = (v - xb, xa - v);
                if db < da || (db == da && ib < ia) {
                    ib
                } else {
                    ia
                }
            }
            (Some((_, i)), None) | (None, Some((_, i))) => i,
            (None, None) => unreachable!("matcher is nonempty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMse {
    pub domain: DomainId,
    pub mse: f64,
    pub rmse: f64,
    /// `rmse / estimate`, defined only for positive estimates.
    pub cv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub scheme: Scheme,
    /// Requested replicates.
    pub replicates: usize,
    /// Replicates dropped because their refit failed.
    pub failures: usize,
    /// Replicates whose refit stopped at the iteration limit (kept).
    pub nonconverged: usize,
    /// Replicate refits ran with halved iteration limits.
    pub halved_iterations: bool,
    pub domains: Vec<DomainMse>,
}

impl MseReport {
    pub fn get(&self, domain: DomainId) -> Option<&DomainMse> {
        self.domains.iter().find(|d| d.domain == domain)
    }

    pub fn mse(&self) -> BTreeMap<DomainId, f64> {
        self.domains.iter().map(|d| (d.domain, d.mse)).collect()
    }

    /// CSV with columns `domain_id,scheme,mse,rmse,cv,B,failures`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["domain_id", "scheme", "mse", "rmse", "cv", "B", "failures"])?;
        for d in &self.domains {
            w.write_record([
                d.domain.to_string(),
                self.scheme.to_string(),
                d.mse.to_string(),
                d.rmse.to_string(),
                d.cv.map(|v| v.to_string()).unwrap_or_default(),
                self.replicates.to_string(),
                self.failures.to_string(),
            ])?;
        }
        w.flush().map_err(|e| SaeError::Csv(e.into()))?;
        Ok(())
    }
}

/// Outcome of one bootstrap replicate.
struct Replicate {
    truth: BTreeMap<DomainId, f64>,
    estimate: BTreeMap<DomainId, f64>,
    converged: bool,
}

/// Runs `b_count` replicates in parallel and averages squared errors.
fn run_replicates<F>(
    scheme: Scheme,
    b_count: usize,
    rng: &RngHandle,
    point: &BTreeMap<DomainId, f64>,
    replicate: F,
) -> Result<MseReport>
where
    F: Fn(&mut SaeRng) -> Result<Replicate> + Sync,
{
    if b_count == 0 {
        return Err(SaeError::InvalidParameter("B must be >= 1".into()));
    }
    let results: Vec<Result<Replicate>> = (0..b_count)
        .into_par_iter()
        .map(|b| {
            let mut r = rng.child(b as u64).rng();
            let out = replicate(&mut r);
            match &out {
                Ok(_) => info!("{scheme} replicate {b} done"),
                Err(e) => warn!("{scheme} replicate {b} failed: {e}"),
            }
            out
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_err()).count();
    if failures as f64 > MAX_FAILURE_SHARE * b_count as f64 {
        let first = results
            .iter()
            .find_map(|r| r.as_ref().err())
            .map(|e| e.to_string())
            .unwrap_or_default();
        warn!("{scheme}: {failures} of {b_count} replicates failed; first error: {first}");
        return Err(SaeError::TooManyFailures {
            failures,
            replicates: b_count,
        });
    }
    let ok: Vec<Replicate> = results.into_iter().filter_map(|r| r.ok()).collect();
    let nonconverged = ok.iter().filter(|r| !r.converged).count();
    let mut sums: BTreeMap<DomainId, f64> = point.keys().map(|d| (*d, 0.0)).collect();
    for r in &ok {
        for (d, s) in sums.iter_mut() {
            let t = r.truth.get(d).copied().unwrap_or(f64::NAN);
            let e = r.estimate.get(d).copied().unwrap_or(f64::NAN);
            *s += (t - e).powi(2);
        }
    }
    let kept = ok.len() as f64;
    let domains = sums
        .into_iter()
        .map(|(d, s)| {
            let mse = s / kept;
            let rmse = mse.sqrt();
            let est = point[&d];
            DomainMse {
                domain: d,
                mse,
                rmse,
                cv: (est > 0.0).then(|| rmse / est.abs()),
            }
        })
        .collect();
    Ok(MseReport {
        scheme,
        replicates: b_count,
        failures,
        nonconverged,
        halved_iterations: true,
        domains,
    })
}

/// Census domain means of a generated outcome.
fn census_means(population: &Population, y: &[u64]) -> BTreeMap<DomainId, f64> {
    domain_index(population)
        .into_iter()
        .map(|(d, rows)| {
            let s: f64 = rows.iter().map(|&r| y[r] as f64).sum();
            (d, s / rows.len() as f64)
        })
        .collect()
}

/// Samples the bootstrap census with the original plan and refits GMERF.
fn gmerf_replicate(
    population: &Population,
    y: Vec<u64>,
    plan: &BTreeMap<DomainId, usize>,
    config: &GmerfConfig,
    aggregation: Aggregation,
    rng: &mut SaeRng,
) -> Result<Replicate> {
    let truth = census_means(population, &y);
    let boot = population.with_outcome(y)?;
    let sample = stratified_srswor(rng, &boot, plan)?;
    let fit = fit_gmerf_with(&sample, &config.forest, &config.convergence().halved())?;
    let estimate = gmerf_domain_means(&fit, &boot, aggregation)?.values();
    Ok(Replicate {
        truth,
        estimate,
        converged: fit.converged,
    })
}

fn merf_replicate(
    population: &Population,
    y: Vec<u64>,
    plan: &BTreeMap<DomainId, usize>,
    config: &MerfConfig,
    rng: &mut SaeRng,
) -> Result<Replicate> {
    let truth = census_means(population, &y);
    let boot = population.with_outcome(y)?;
    let sample = stratified_srswor(rng, &boot, plan)?;
    let fit = fit_merf_with(
        &sample,
        &config.forest,
        config.tol,
        (config.max_iter / 2).max(1),
        &RandomEffects::default(),
    )?;
    let estimate = merf_domain_means(&fit, &boot)?.values();
    Ok(Replicate {
        truth,
        estimate,
        converged: fit.converged,
    })
}

fn sample_plan(sample: &Sample) -> BTreeMap<DomainId, usize> {
    sample.sizes().iter().map(|(d, n)| (*d, *n)).collect()
}

/// Bootstrap census outcomes of the parametric scheme:
/// `y ~ Pois(exp(f(x) + nu_i))` with `nu_i ~ N(0, s2_nu)`.
#[derive(Debug, Clone)]
pub struct ParametricGenerator {
    f: Vec<f64>,
    sd: f64,
    ids: Vec<DomainId>,
    domains: Vec<DomainId>,
}

impl ParametricGenerator {
    pub fn new(fit: &GmerfFit<Forest>, population: &Population) -> Result<Self> {
        Ok(Self {
            f: fit.forest.predict(population.covariates())?,
            sd: fit.vc.sigma2_nu.max(0.0).sqrt(),
            ids: population.domain_ids().collect(),
            domains: population.domains().to_vec(),
        })
    }

    /// One bootstrap population: outcomes and the drawn domain effects.
    pub fn draw(&self, r: &mut SaeRng) -> Result<(Vec<u64>, BTreeMap<DomainId, f64>)> {
        let mut nu = BTreeMap::new();
        for d in &self.ids {
            nu.insert(*d, sample_normal(r, 0.0, self.sd)?);
        }
        let y = self
            .f
            .iter()
            .zip(&self.domains)
            .map(|(fx, d)| sample_poisson(r, (fx + nu[d]).exp()))
            .collect::<Result<Vec<u64>>>()?;
        Ok((y, nu))
    }
}

/// Scale on which the non-parametric residuals live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ResidualScale {
    /// Pearson residuals around `exp(f)`.
    Pearson,
    /// Raw residuals around `f`.
    Raw,
}

/// Bootstrap census outcomes of the non-parametric schemes. Every generated
/// value is a sample outcome, matched on the nearest fitted value.
#[derive(Debug, Clone)]
pub struct NonparametricGenerator {
    y: Vec<u64>,
    scale: ResidualScale,
    decomposition: ResidualDecomposition,
    matcher: NearestMatcher,
    f: Vec<f64>,
    ids: Vec<DomainId>,
    domains: Vec<DomainId>,
}

impl NonparametricGenerator {
    /// GMERF scheme from marginal Pearson residuals.
    pub fn gmerf(fit: &GmerfFit<Forest>, sample: &Sample, population: &Population) -> Result<Self> {
        Self::build(
            &fit.forest,
            fit.vc.sigma2_nu,
            &fit.re,
            sample,
            population,
            ResidualScale::Pearson,
        )
    }

    /// MERF scheme from raw marginal residuals.
    pub fn merf(fit: &MerfFit<Forest>, sample: &Sample, population: &Population) -> Result<Self> {
        Self::build(
            &fit.forest,
            fit.vc.sigma2_nu,
            &fit.re,
            sample,
            population,
            ResidualScale::Raw,
        )
    }

    fn build(
        forest: &Forest,
        sigma2_nu: f64,
        re: &RandomEffects,
        sample: &Sample,
        population: &Population,
        scale: ResidualScale,
    ) -> Result<Self> {
        let y = sample.outcome();
        let f_s = forest.oob_predictions();
        if f_s.len() != y.len() {
            return Err(SaeError::Dimension {
                expected: y.len(),
                got: f_s.len(),
            });
        }
        let z: Vec<f64> = y
            .iter()
            .zip(f_s)
            .map(|(&yi, f)| match scale {
                ResidualScale::Pearson => {
                    let m = f.exp();
                    (yi as f64 - m) / m.sqrt()
                }
                ResidualScale::Raw => yi as f64 - f,
            })
            .collect();
        let decomposition = ResidualDecomposition::new(z, sample.domains(), sigma2_nu)?;
        let fitted: Vec<f64> = f_s
            .iter()
            .zip(sample.domains())
            .map(|(f, d)| match scale {
                ResidualScale::Pearson => (f + re.get(*d)).exp(),
                ResidualScale::Raw => f + re.get(*d),
            })
            .collect();
        Ok(Self {
            y: y.to_vec(),
            scale,
            decomposition,
            matcher: NearestMatcher::new(&fitted)?,
            f: forest.predict(population.covariates())?,
            ids: population.domain_ids().collect(),
            domains: population.domains().to_vec(),
        })
    }

    pub fn decomposition(&self) -> &ResidualDecomposition {
        &self.decomposition
    }

    /// One bootstrap population of outcomes.
    pub fn draw(&self, r: &mut SaeRng) -> Result<Vec<u64>> {
        let z1 = srswr(r, &self.decomposition.level1, self.f.len())?;
        let z2 = srswr(r, &self.decomposition.level2, self.ids.len())?;
        let zbar: BTreeMap<DomainId, f64> = self.ids.iter().copied().zip(z2).collect();
        Ok(self
            .f
            .iter()
            .zip(&self.domains)
            .zip(&z1)
            .map(|((fx, d), e)| {
                let v = match self.scale {
                    ResidualScale::Pearson => {
                        let m = (fx + zbar[d]).exp();
                        m + m.sqrt() * e
                    }
                    ResidualScale::Raw => fx + zbar[d] + e,
                };
                self.y[self.matcher.nearest(v)]
            })
            .collect())
    }
}

pub fn parametric_bootstrap_gmerf(
    fit: &GmerfFit<Forest>,
    config: &GmerfConfig,
    population: &Population,
    plan: &BTreeMap<DomainId, usize>,
    b_count: usize,
    rng: &RngHandle,
    aggregation: Aggregation,
) -> Result<MseReport> {
    let point = gmerf_domain_means(fit, population, aggregation)?.values();
    let generator = ParametricGenerator::new(fit, population)?;
    run_replicates(Scheme::Parametric, b_count, rng, &point, |r| {
        let (y, _) = generator.draw(r)?;
        gmerf_replicate(population, y, plan, config, aggregation, r)
    })
}

/// Non-parametric bootstrap for GMERF from marginal Pearson residuals.
pub fn nonparametric_bootstrap_gmerf(
    fit: &GmerfFit<Forest>,
    config: &GmerfConfig,
    sample: &Sample,
    population: &Population,
    b_count: usize,
    rng: &RngHandle,
    aggregation: Aggregation,
) -> Result<MseReport> {
    let point = gmerf_domain_means(fit, population, aggregation)?.values();
    let generator = NonparametricGenerator::gmerf(fit, sample, population)?;
    let plan = sample_plan(sample);
    run_replicates(Scheme::NonparametricGmerf, b_count, rng, &point, |r| {
        let y = generator.draw(r)?;
        gmerf_replicate(population, y, &plan, config, aggregation, r)
    })
}

/// Non-parametric bootstrap for MERF from raw marginal residuals.
pub fn nonparametric_bootstrap_merf(
    fit: &MerfFit<Forest>,
    config: &MerfConfig,
    sample: &Sample,
    population: &Population,
    b_count: usize,
    rng: &RngHandle,
) -> Result<MseReport> {
    let point = merf_domain_means(fit, population)?.values();
    let generator = NonparametricGenerator::merf(fit, sample, population)?;
    let plan = sample_plan(sample);
    run_replicates(Scheme::NonparametricMerf, b_count, rng, &point, |r| {
        let y = generator.draw(r)?;
        merf_replicate(population, y, &plan, config, r)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_scale_examples() {
        assert_eq!(center_scale_residuals(&[1.0, -1.0], 4.0), vec![2.0, -2.0]);
        assert_eq!(center_scale_residuals(&[3.0, 1.0, 2.0], 0.0), vec![0.0; 3]);
        assert_eq!(center_scale_residuals(&[2.0, 2.0], 1.0), vec![0.0; 2]);
    }

    #[test]
    fn nearest_examples() {
        let m = NearestMatcher::new(&[2.0, 5.0, 9.0]).unwrap();
        assert_eq!(m.nearest(4.9), 1);
        assert_eq!(m.nearest(-100.0), 0);
        assert_eq!(m.nearest(100.0), 2);
        let m = NearestMatcher::new(&[1.0, 3.0, 6.0]).unwrap();
        assert_eq!(m.nearest(3.2), 1);
    }

    #[test]
    fn nearest_ties_take_lower_index() {
        // 4.0 is equidistant from 3.0 (index 2) and 5.0 (index 0)
        let m = NearestMatcher::new(&[5.0, 7.0, 3.0]).unwrap();
        assert_eq!(m.nearest(4.0), 0);
        let m = NearestMatcher::new(&[3.0, 7.0, 5.0]).unwrap();
        assert_eq!(m.nearest(4.0), 0);
        // duplicated values resolve to the first occurrence
        let m = NearestMatcher::new(&[8.0, 2.0, 8.0, 2.0]).unwrap();
        assert_eq!(m.nearest(2.0), 1);
        assert_eq!(m.nearest(7.0), 0);
        assert_eq!(m.nearest(5.0), 0);
    }

    #[test]
    fn decomposition_targets() {
        let d = |i| DomainId(i);
        let z = vec![1.0, 2.0, 6.0, -1.0, 0.5, 3.0];
        let doms = vec![d(1), d(1), d(1), d(2), d(2), d(2)];
        let dec = ResidualDecomposition::new(z, &doms, 0.25).unwrap();
        assert!((dec.zbar[&d(1)] - 3.0).abs() < 1e-15);
        let zhat = [
            -2.0,
            -1.0,
            3.0,
            -1.833_333_333_333_333_5,
            -0.333_333_333_333_333_3,
            2.166_666_666_666_667,
        ];
        let target1 = zhat.iter().map(|v| v * v).sum::<f64>() / 4.0;
        let var1 = dec.level1.iter().map(|v| v * v).sum::<f64>() / 6.0;
        assert!((var1 - target1).abs() < 1e-12);
        let mean2 = dec.level2.iter().sum::<f64>() / 2.0;
        let var2 = dec.level2.iter().map(|v| (v - mean2).powi(2)).sum::<f64>() / 2.0;
        assert!(mean2.abs() < 1e-15 && (var2 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in [
            Scheme::Parametric,
            Scheme::NonparametricGmerf,
            Scheme::NonparametricMerf,
        ] {
            assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
        }
        assert!("wild".parse::<Scheme>().is_err());
    }
}
