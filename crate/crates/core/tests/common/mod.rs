#![allow(dead_code)]

use std::collections::BTreeMap;

use saecount::rng::stratified_srswor;
pub use saecount::simlab::Scenario;
use saecount::simlab::{generate_population, Family, Predictor, ScenarioName};
use saecount::{DomainId, Population, RngHandle, Sample};

/// A small Normal-Poisson style scenario with `d` domains of `n_pop` units
/// and `n_s` sampled units each.
pub fn small_scenario(d: usize, n_pop: usize, n_s: usize, nu_sd: f64) -> Scenario {
    Scenario {
        name: ScenarioName::NormalPoisson,
        predictor: Predictor::Linear,
        family: Family::Poisson,
        domain_sizes: vec![n_pop; d],
        plan: (1..=d as i64).map(|i| (DomainId(i), n_s)).collect(),
        nu_sd,
    }
}

pub fn population_and_sample(scenario: &Scenario, seed: u64) -> (Population, Sample) {
    let rng = RngHandle::new(seed);
    let population = generate_population(scenario, &rng.child(0)).unwrap();
    let sample = stratified_srswor(&mut rng.child(1).rng(), &population, &scenario.plan).unwrap();
    (population, sample)
}

pub fn plan_of(sample: &Sample) -> BTreeMap<DomainId, usize> {
    sample.sizes().clone()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}
