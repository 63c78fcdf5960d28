//! Seeded random streams, distribution samplers and sampling designs.
//!
//! Every random quantity in the crate is drawn from a [`RngHandle`]: a
//! `(seed, stream)` pair that maps onto a ChaCha8 generator with an explicit
//! stream id. Child handles for simulation replicates, bootstrap replicates
//! and individual trees are derived with [`RngHandle::child`], so any single
//! replicate can be rebuilt without replaying the ones before it.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{DomainId, DomainUnits, Population, Sample};
use crate::error::{Result, SaeError};

/// Generator type behind every handle.
pub type SaeRng = ChaCha8Rng;

/// Reconstructible random stream identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngHandle {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngHandle {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Derives an independent handle for sub-task `index`.
    pub fn child(&self, index: u64) -> Self {
        Self {
            seed: splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x5ae0))),
            stream: index,
        }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> SaeRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

pub fn sample_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> Result<f64> {
    if !(sd >= 0.0) || !sd.is_finite() || !mean.is_finite() {
        return Err(SaeError::InvalidParameter(format!(
            "normal distribution needs finite mean and sd >= 0, got ({mean}, {sd})"
        )));
    }
    if sd == 0.0 {
        return Ok(mean);
    }
    let dist = Normal::new(mean, sd).map_err(|e| SaeError::InvalidParameter(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Draw from `U[lo, hi)`; `lo == hi` returns `lo`.
pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Result<f64> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(SaeError::InvalidParameter(format!(
            "uniform bounds must satisfy lo <= hi, got ({lo}, {hi})"
        )));
    }
    if lo == hi {
        return Ok(lo);
    }
    let u: f64 = rng.random();
    Ok(lo + (hi - lo) * u)
}

// Above this mean the Poisson law is replaced by its rounded normal limit.
const POISSON_NORMAL_LIMIT: f64 = 1e15;

pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, mu: f64) -> Result<u64> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(SaeError::InvalidParameter(format!(
            "Poisson mean must be finite and >= 0, got {mu}"
        )));
    }
    if mu == 0.0 {
        return Ok(0);
    }
    if mu > POISSON_NORMAL_LIMIT {
        let draw = sample_normal(rng, mu, mu.sqrt())?.max(0.0).round();
        if draw >= u64::MAX as f64 {
            return Err(SaeError::InvalidParameter(format!(
                "Poisson draw with mean {mu} exceeds the count range"
            )));
        }
        return Ok(draw as u64);
    }
    let dist = Poisson::new(mu).map_err(|e| SaeError::InvalidParameter(e.to_string()))?;
    Ok(dist.sample(rng) as u64)
}

/// Negative binomial with mean `mu` and size `scale`, drawn as a
/// gamma–Poisson mixture: `Var = mu + mu^2 / scale`.
pub fn sample_negbinom<R: Rng + ?Sized>(rng: &mut R, mu: f64, scale: f64) -> Result<u64> {
    if !(mu >= 0.0) || !mu.is_finite() || !(scale > 0.0) || !scale.is_finite() {
        return Err(SaeError::InvalidParameter(format!(
            "negative binomial needs mu >= 0 and scale > 0, got ({mu}, {scale})"
        )));
    }
    if mu == 0.0 {
        return Ok(0);
    }
    let gamma =
        Gamma::new(scale, mu / scale).map_err(|e| SaeError::InvalidParameter(e.to_string()))?;
    let lambda: f64 = gamma.sample(rng);
    sample_poisson(rng, lambda)
}

/// Stratified simple random sampling without replacement, domains as strata.
///
/// Domains absent from `plan` (or planned with zero units) stay in the
/// sample's size table with `n_i = 0`. The sample keeps census row links.
pub fn stratified_srswor<R: Rng + ?Sized>(
    rng: &mut R,
    population: &Population,
    plan: &BTreeMap<DomainId, usize>,
) -> Result<Sample> {
    let y = population.outcome().ok_or_else(|| {
        SaeError::Input("stratified sampling needs a population with outcomes".into())
    })?;
    for (d, &n_i) in plan {
        let n_pop =
            population.sizes().get(d).copied().ok_or_else(|| {
                SaeError::Input(format!("planned domain {d} is not in the census"))
            })?;
        if n_i > n_pop {
            return Err(SaeError::InvalidParameter(format!(
                "domain {d}: planned sample size {n_i} exceeds census size {n_pop}"
            )));
        }
    }
    let buckets = crate::data::domain_index(population);
    let mut rows = Vec::new();
    for (d, members) in &buckets {
        let n_i = plan.get(d).copied().unwrap_or(0);
        if n_i == 0 {
            continue;
        }
        let mut picked: Vec<usize> = index::sample(rng, members.len(), n_i)
            .into_iter()
            .map(|k| members[k])
            .collect();
        picked.sort_unstable();
        rows.extend(picked);
    }
    let domains = rows.iter().map(|&r| population.domains()[r]).collect();
    let outcome = rows.iter().map(|&r| y[r]).collect();
    let x = population.covariates().select_rows(&rows);
    Sample::new(domains, outcome, x)?.linked_to(population, rows)
}

/// `m` independent draws with replacement from `pool`.
pub fn srswr<R: Rng + ?Sized>(rng: &mut R, pool: &[f64], m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(SaeError::InvalidParameter(
            "cannot resample from an empty pool".into(),
        ));
    }
    Ok((0..m)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect())
}

/// Per-domain sample sizes of the model-based design: 50 areas, sizes
/// between 8 and 29 with median 18, summing to 921.
pub const MODEL_BASED_SAMPLE_SIZES: [usize; 50] = [
    28, 13, 21, 8, 15, 17, 16, 19, 28, 13, 21, 22, 24, 14, 23, 16, 26, 14, 17, 22, 18, 14, 18, 26,
    21, 11, 24, 20, 21, 12, 26, 21, 16, 28, 18, 8, 10, 14, 18, 19, 19, 9, 15, 29, 14, 13, 17, 19,
    17, 29,
];

/// Plan assigning [`MODEL_BASED_SAMPLE_SIZES`] to domains `1..=50`.
pub fn model_based_plan() -> BTreeMap<DomainId, usize> {
    MODEL_BASED_SAMPLE_SIZES
        .iter()
        .enumerate()
        .map(|(i, &n)| (DomainId(i as i64 + 1), n))
        .collect()
}
