//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4 compare simulation summaries with published reference values
//! and are reported without failing the run; 5 and 6 must pass. Set
//! `SAECOUNT_ACCEPTANCE=desk` for the desk-scale simulations (slow); the
//! default quick scale only exercises the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use saecount::bootstrap::{center_scale_residuals, NonparametricGenerator, Scheme};
use saecount::data::{write_population_csv, write_sample_csv};
use saecount::diagnostics::{dean_pb_test, dispersion_ratio, pearson_residuals, residual_df};
use saecount::ebpp::fit_poisson_glmm_pql;
use saecount::fixed::LinearPredictor;
use saecount::forest::ForestParams;
use saecount::glm::fit_poisson_glm;
use saecount::gmerf::{
    fit_gmerf, fit_gmerf_from, init_glm_poisson, poisson_working_update, Convergence, GmerfConfig,
};
use saecount::lmm::{marginal_loglik, RandomEffects, VarianceComponents};
use saecount::merf::{fit_merf, MerfConfig};
use saecount::predict::{Aggregation, Method};
use saecount::rng::{
    sample_negbinom, sample_normal, sample_poisson, sample_uniform, stratified_srswor,
};
use saecount::simlab::{
    generate_population, point_metrics, run_model_based, Scenario, ScenarioName, SimConfig,
    SimReport, Split,
};
use saecount::{Covariates, DomainId, RngHandle, Sample};
use tempfile::TempDir;

struct Scale {
    name: &'static str,
    replicates: usize,
    trees: usize,
    bootstrap: usize,
    boot_replicates: usize,
    boot_domains: usize,
}

const QUICK: Scale = Scale {
    name: "quick",
    replicates: 3,
    trees: 50,
    bootstrap: 4,
    boot_replicates: 2,
    boot_domains: 10,
};
const DESK: Scale = Scale {
    name: "desk",
    replicates: 50,
    trees: 200,
    bootstrap: 100,
    boot_replicates: 50,
    boot_domains: 20,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn sim_config(scale: &Scale, methods: Vec<Method>) -> SimConfig {
    let d = SimConfig::default();
    let forest = ForestParams {
        num_trees: scale.trees,
        ..Default::default()
    };
    SimConfig {
        methods,
        replicates: scale.replicates,
        gmerf: GmerfConfig {
            forest: forest.clone(),
            ..d.gmerf.clone()
        },
        merf: MerfConfig {
            forest,
            ..d.merf.clone()
        },
        ..d
    }
}

fn median_rmse(r: &SimReport, m: Method) -> Option<f64> {
    r.rmse_summary(m, Split::All).map(|s| s.median)
}

fn median_bias(r: &SimReport, m: Method) -> Option<f64> {
    r.bias_summary(m, Split::All).map(|s| s.median)
}

fn within(v: Option<f64>, reference: f64, rel: f64) -> bool {
    v.is_some_and(|v| (v - reference).abs() <= rel * reference)
}

fn show(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

fn simulate(name: ScenarioName, scale: &Scale, methods: Vec<Method>, seed: u64) -> SimReport {
    run_model_based(
        &Scenario::standard(name),
        &sim_config(scale, methods),
        &RngHandle::new(seed),
    )
    .unwrap()
}

fn all_methods() -> Vec<Method> {
    vec![Method::Ebpp, Method::Gmerf, Method::Merf]
}

fn criterion_1(scale: &Scale) -> Verdict {
    let r = simulate(ScenarioName::NormalPoisson, scale, all_methods(), 101);
    let (e, g, m) = (
        median_rmse(&r, Method::Ebpp),
        median_rmse(&r, Method::Gmerf),
        median_rmse(&r, Method::Merf),
    );
    let ordered = matches!((e, g, m), (Some(e), Some(g), Some(m)) if e < g && e < m);
    let config = SimConfig {
        aggregation: Aggregation::MeanOfExp,
        ..sim_config(scale, vec![Method::Gmerf])
    };
    let alt = run_model_based(
        &Scenario::standard(ScenarioName::NormalPoisson),
        &config,
        &RngHandle::new(101),
    )
    .unwrap();
    verdict(
        ordered && within(e, 1.0910, 0.30),
        format!(
            "normal-poisson median RMSE ebpp {} (ref 1.0910) gmerf {} merf {}; gmerf with mean_of_exp {} (informational)",
            show(e),
            show(g),
            show(m),
            show(median_rmse(&alt, Method::Gmerf))
        ),
    )
}

fn criterion_2(scale: &Scale) -> Verdict {
    let r = simulate(ScenarioName::InteractionPoisson, scale, all_methods(), 102);
    let (e, g, m) = (
        median_rmse(&r, Method::Ebpp),
        median_rmse(&r, Method::Gmerf),
        median_rmse(&r, Method::Merf),
    );
    let ordered = matches!((e, g, m), (Some(e), Some(g), Some(m)) if g < e && e < m);
    let close = within(g, 1.4300, 0.30) && within(e, 1.5450, 0.30) && within(m, 1.9300, 0.30);
    verdict(
        ordered && close,
        format!(
            "interaction-poisson median RMSE gmerf {} (ref 1.4300) ebpp {} (ref 1.5450) merf {} (ref 1.9300); failed fits {:?}",
            show(g),
            show(e),
            show(m),
            r.method_failures
        ),
    )
}

fn criterion_3(scale: &Scale) -> Verdict {
    let r = simulate(ScenarioName::Nb1, scale, all_methods(), 103);
    let (e, g, m) = (
        median_rmse(&r, Method::Ebpp),
        median_rmse(&r, Method::Gmerf),
        median_rmse(&r, Method::Merf),
    );
    let ordered = matches!((e, g, m), (Some(e), Some(g), Some(m)) if m < e && e < g);
    let close = within(m, 5.6160, 0.35) && within(e, 7.3670, 0.35) && within(g, 8.2460, 0.35);
    let (gb, mb) = (
        median_bias(&r, Method::Gmerf),
        median_bias(&r, Method::Merf),
    );
    let bias_ok = gb.is_some_and(|b| b > 1.5) && mb.is_some_and(|b| (-0.5..=0.5).contains(&b));
    verdict(
        ordered && close && bias_ok,
        format!(
            "nb1 median RMSE merf {} (ref 5.6160) ebpp {} (ref 7.3670) gmerf {} (ref 8.2460); median bias gmerf {} (ref 3.1600) merf {} (ref 0.0675); failed fits {:?}",
            show(m),
            show(e),
            show(g),
            show(gb),
            show(mb),
            r.method_failures
        ),
    )
}

fn criterion_4(scale: &Scale) -> Verdict {
    let cases = [
        (
            ScenarioName::NormalPoisson,
            Method::Gmerf,
            Scheme::Parametric,
            0.0357,
        ),
        (
            ScenarioName::Nb3,
            Method::Gmerf,
            Scheme::NonparametricGmerf,
            0.0581,
        ),
        (
            ScenarioName::InteractionPoisson,
            Method::Merf,
            Scheme::NonparametricMerf,
            0.0028,
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, (name, method, scheme, reference)) in cases.into_iter().enumerate() {
        let scenario = Scenario::standard(name).truncated(scale.boot_domains);
        let config = SimConfig {
            replicates: scale.boot_replicates,
            bootstrap: scale.bootstrap,
            schemes: vec![scheme],
            ..sim_config(scale, vec![method])
        };
        let rb = run_model_based(&scenario, &config, &RngHandle::new(104 + k as u64))
            .ok()
            .and_then(|r| r.rb_rmse_summary(scheme, Split::All))
            .map(|s| s.median);
        pass &= rb.is_some_and(|v| (v - reference).abs() <= 0.15);
        parts.push(format!(
            "{name} {scheme} {} (ref {:+.2}%)",
            rb.map(|v| format!("{:+.2}%", 100.0 * v))
                .unwrap_or_else(|| "n/a".into()),
            100.0 * reference,
            name = name.as_str()
        ));
    }
    verdict(
        pass,
        format!(
            "median RB-RMSE over {} domains: {}",
            scale.boot_domains,
            parts.join("; ")
        ),
    )
}

fn small_sample(d: usize, n_pop: usize, n_s: usize, seed: u64) -> (saecount::Population, Sample) {
    let mut scenario = Scenario::standard(ScenarioName::NormalPoisson).truncated(d);
    scenario.domain_sizes = vec![n_pop; d];
    scenario.plan = (1..=d as i64).map(|i| (DomainId(i), n_s)).collect();
    let rng = RngHandle::new(seed);
    let population = generate_population(&scenario, &rng.child(0)).unwrap();
    let sample = stratified_srswor(&mut rng.child(1).rng(), &population, &scenario.plan).unwrap();
    (population, sample)
}

fn dense_loglik(vc: &VarianceComponents, r: &[f64], w: &[f64], domains: &[DomainId]) -> f64 {
    let n = r.len();
    let v = DMatrix::from_fn(n, n, |i, j| {
        let shared = if domains[i] == domains[j] {
            vc.sigma2_nu
        } else {
            0.0
        };
        shared + if i == j { vc.sigma2_eps / w[i] } else { 0.0 }
    });
    let chol = v.cholesky().unwrap();
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let r = DVector::from_column_slice(r);
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + r.dot(&chol.solve(&r)))
}

/// Runs `saecount <cmd>` and returns the exit code.
fn cli(cmd: &str, config: &Path, out: &Path, threads: Option<usize>) -> i32 {
    let mut c = Command::new(env!("CARGO_BIN_EXE_saecount"));
    c.arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("SAECOUNT_LOG", "error");
    if let Some(t) = threads {
        c.arg("--threads").arg(t.to_string());
    }
    c.output().unwrap().status.code().unwrap()
}

fn read_dir(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().into(), std::fs::read(&p).unwrap())
        })
        .collect()
}

/// Every command on a small survey under 1, 3 and the default number of
/// threads; returns a description of the first difference.
fn determinism(dir: &Path) -> Result<(), String> {
    let (population, sample) = small_sample(12, 60, 8, 5);
    write_sample_csv(dir.join("survey.csv"), &sample).unwrap();
    write_population_csv(dir.join("census.csv"), &population).unwrap();
    let common = "[data]\nsurvey = \"survey.csv\"\ncensus = \"census.csv\"\n\
        [schema]\ndomain = \"domain\"\noutcome = \"y\"\ncovariates = [\"x1\", \"x2\"]\n\
        [gmerf]\nmax_macro = 3\nmax_micro = 3\n[gmerf.forest]\nnum_trees = 20\n\
        [merf]\nmax_iter = 4\n[merf.forest]\nnum_trees = 20\n[mse]\nreplicates = 3\n";
    let jobs: [(&str, &str, &[&str]); 4] = [
        ("gmerf", "", &["fit", "predict", "mse", "diagnose"]),
        ("merf", "", &["fit", "predict", "mse", "diagnose"]),
        ("ebpp", "", &["fit", "predict", "diagnose"]),
        (
            "simulate",
            "[simulate]\nscenario = \"normal-poisson\"\ndomains = 4\nreplicates = 2\nbootstrap = 2\nmethods = [\"gmerf\", \"merf\"]\nschemes = [\"parametric\", \"merf-npc\"]\n",
            &["simulate"],
        ),
    ];
    for (label, extra, commands) in jobs {
        let config = dir.join(format!("{label}.toml"));
        let method = if label == "simulate" { "gmerf" } else { label };
        let text = format!("seed = 3\nmethod = \"{method}\"\n{common}{extra}");
        std::fs::write(&config, text).unwrap();
        let mut reference: Option<BTreeMap<PathBuf, Vec<u8>>> = None;
        for threads in [Some(1), Some(3), None] {
            let out = dir.join(format!("{label}-{threads:?}"));
            for cmd in commands {
                let code = cli(cmd, &config, &out, threads);
                if !(code == 0 || (code == 3 && *cmd == "fit")) {
                    return Err(format!("{label} {cmd} exited with {code}"));
                }
            }
            let files = read_dir(&out);
            match &reference {
                None => reference = Some(files),
                Some(r) if *r != files => {
                    return Err(format!("{label} outputs differ with {threads:?} threads"))
                }
                Some(_) => {}
            }
        }
    }
    Ok(())
}

fn criterion_5() -> Verdict {
    let mut failures = Vec::new();
    let mut r = RngHandle::new(55).rng();

    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let mean = sample_uniform(&mut r, 0.0, 30.0).unwrap();
        let y = sample_poisson(&mut r, mean).unwrap() as f64;
        let eta = sample_uniform(&mut r, -5.0, 5.0).unwrap();
        let s = poisson_working_update(&[y], &[eta]).unwrap();
        let lhs = s.w[0] * (s.y_l[0] - eta);
        worst = worst.max((lhs - (y - s.mu[0])).abs() / (1.0 + y.abs() + s.mu[0]));
    }
    if worst > 1e-12 {
        failures.push(format!("working identity off by {worst:e}"));
    }

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = 2 + (sample_uniform(&mut r, 0.0, 10.0).unwrap() as usize);
        let domains: Vec<DomainId> = (0..n).map(|i| DomainId((i % 3) as i64)).collect();
        let t: Vec<f64> = (0..n)
            .map(|_| sample_normal(&mut r, 0.0, 2.0).unwrap())
            .collect();
        let o: Vec<f64> = (0..n)
            .map(|_| sample_normal(&mut r, 0.0, 1.0).unwrap())
            .collect();
        let w: Vec<f64> = (0..n)
            .map(|_| sample_uniform(&mut r, 0.2, 5.0).unwrap())
            .collect();
        let vc = VarianceComponents {
            sigma2_nu: sample_uniform(&mut r, 0.0, 3.0).unwrap(),
            sigma2_eps: sample_uniform(&mut r, 0.05, 3.0).unwrap(),
        };
        let res: Vec<f64> = t.iter().zip(&o).map(|(a, b)| a - b).collect();
        let got = marginal_loglik(&vc, &t, &o, &w, &domains).unwrap();
        worst = worst.max((got - dense_loglik(&vc, &res, &w, &domains)).abs());
    }
    if worst > 1e-10 {
        failures.push(format!("structured vs dense loglik off by {worst:e}"));
    }

    let mut worst = 0.0f64;
    for seed in [1, 2, 3] {
        let (_, sample) = small_sample(15, 200, 20, seed);
        let pql = fit_poisson_glmm_pql(&sample, 1e-7, 500).unwrap();
        let oracle = LinearPredictor {
            intercept: pql.beta[0],
            coefficients: pql.beta[1..].to_vec(),
        };
        let conv = Convergence {
            micro_tol: 1e-12,
            macro_tol: 1e-7,
            max_macro: 500,
            max_micro: 20,
        };
        let eta0 = init_glm_poisson(&sample).unwrap();
        let fit = fit_gmerf_from(&sample, &oracle, &conv, eta0, RandomEffects::default()).unwrap();
        for (d, nu) in pql.re.iter() {
            worst = worst.max((fit.re.get(d) - nu).abs());
        }
    }
    if worst > 1e-4 {
        failures.push(format!("oracle GMERF vs PQL effects off by {worst:e}"));
    }

    let (population, sample) = small_sample(10, 60, 8, 7);
    let observed: BTreeSet<u64> = sample.outcome().iter().copied().collect();
    let forest = ForestParams {
        num_trees: 30,
        ..Default::default()
    };
    let gm = fit_gmerf(
        &sample,
        &GmerfConfig {
            forest: forest.clone(),
            max_macro: 3,
            max_micro: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let mf = fit_merf(
        &sample,
        &MerfConfig {
            forest,
            max_iter: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let generators = [
        NonparametricGenerator::gmerf(&gm, &sample, &population).unwrap(),
        NonparametricGenerator::merf(&mf, &sample, &population).unwrap(),
    ];
    for g in &generators {
        for b in 0..20 {
            if !g
                .draw(&mut RngHandle::new(b).rng())
                .unwrap()
                .iter()
                .all(|v| observed.contains(v))
            {
                failures.push("bootstrap draw outside the sample outcomes".into());
            }
        }
    }

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 2 + (sample_uniform(&mut r, 0.0, 50.0).unwrap() as usize);
        let z: Vec<f64> = (0..n)
            .map(|_| sample_normal(&mut r, 1.0, 3.0).unwrap())
            .collect();
        let target = sample_uniform(&mut r, 0.01, 10.0).unwrap();
        let s = center_scale_residuals(&z, target);
        let m = s.iter().sum::<f64>() / n as f64;
        let v = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        worst = worst.max((v - target).abs() / target).max(m.abs());
    }
    if worst > 1e-12 {
        failures.push(format!("center_scale_residuals off by {worst:e}"));
    }

    for _ in 0..1000 {
        let m = 1 + (sample_uniform(&mut r, 0.0, 8.0).unwrap() as usize);
        let draw = |r: &mut _| -> Vec<BTreeMap<DomainId, f64>> {
            (0..m)
                .map(|_| {
                    (0..4)
                        .map(|d| (DomainId(d), sample_normal(r, 0.0, 100.0).unwrap()))
                        .collect()
                })
                .collect()
        };
        let (est, truth) = (draw(&mut r), draw(&mut r));
        if point_metrics(&est, &truth)
            .unwrap()
            .values()
            .any(|p| p.rmse < p.bias.abs())
        {
            failures.push("RMSE below |BIAS|".into());
            break;
        }
    }

    let dir = TempDir::new().unwrap();
    if let Err(e) = determinism(dir.path()) {
        failures.push(e);
    }

    if failures.is_empty() {
        verdict(true, "working identity, dense loglik, oracle GMERF, discreteness, rescaling, RMSE >= |BIAS|, CLI determinism over thread counts")
    } else {
        verdict(false, failures.join("; "))
    }
}

/// Counts from `log mu = 1 + 0.5 x`, `x ~ U(-1, 1)`, drawn by `draw`;
/// returns the outcomes and the fitted GLM means.
fn glm_case(
    seed: u64,
    n: usize,
    draw: impl Fn(&mut saecount::rng::SaeRng, f64) -> u64,
) -> (Vec<u64>, Vec<f64>) {
    let mut r = RngHandle::new(seed).rng();
    let x: Vec<f64> = (0..n)
        .map(|_| sample_uniform(&mut r, -1.0, 1.0).unwrap())
        .collect();
    let y: Vec<u64> = x
        .iter()
        .map(|&v| draw(&mut r, (1.0 + 0.5 * v).exp()))
        .collect();
    let cov = Covariates::new(n, 1, x, vec!["x".into()]).unwrap();
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let glm = fit_poisson_glm(&cov, &yf, 1e-10, 100).unwrap();
    (y, glm.eta.iter().map(|e| e.exp()).collect())
}

fn criterion_6() -> Verdict {
    let seeds = 500u64;
    let rate = |draw: &dyn Fn(&mut saecount::rng::SaeRng, f64) -> u64, offset: u64| {
        let rejected = (0..seeds)
            .filter(|s| {
                let (y, mu) = glm_case(offset + s, 2000, draw);
                dean_pb_test(&y, &mu).unwrap().1 < 0.05
            })
            .count();
        rejected as f64 / seeds as f64
    };
    let poisson = rate(&|r, mu| sample_poisson(r, mu).unwrap(), 0);
    let nb = rate(&|r, mu| sample_negbinom(r, mu, 1.0).unwrap(), 10_000);
    let ratios: Vec<f64> = (0..100)
        .map(|s| {
            let (y, mu) = glm_case(20_000 + s, 2000, |r, mu| {
                2 * sample_poisson(r, mu / 2.0).unwrap()
            });
            dispersion_ratio(
                &pearson_residuals(&y, &mu).unwrap(),
                residual_df(y.len(), 1, 0).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    verdict(
        (0.02..=0.09).contains(&poisson) && nb >= 0.95 && lo >= 1.8 && hi <= 2.2,
        format!(
            "Dean rejection at 5%: Poisson {:.1}%, NB(mu, 1) {:.1}%; quasi-Poisson theta = 2 ratios in [{lo:.3}, {hi:.3}]",
            100.0 * poisson,
            100.0 * nb
        ),
    )
}

fn main() {
    // ignore libtest arguments such as --nocapture or filters
    let scale = match std::env::var("SAECOUNT_ACCEPTANCE").as_deref() {
        Ok("desk") => &DESK,
        _ => &QUICK,
    };
    println!(
        "acceptance ({} scale: M = {}, trees = {}, bootstrap B = {} on {} domains with M = {})",
        scale.name,
        scale.replicates,
        scale.trees,
        scale.bootstrap,
        scale.boot_domains,
        scale.boot_replicates
    );
    type Check<'a> = (u32, Box<dyn Fn() -> Verdict + 'a>, bool);
    let checks: Vec<Check> = vec![
        (1, Box::new(|| criterion_1(scale)), false),
        (2, Box::new(|| criterion_2(scale)), false),
        (3, Box::new(|| criterion_3(scale)), false),
        (4, Box::new(|| criterion_4(scale)), false),
        (5, Box::new(criterion_5), true),
        (6, Box::new(criterion_6), true),
    ];
    let mut required_failed = Vec::new();
    for (k, check, required) in checks {
        let start = Instant::now();
        let v = check();
        println!(
            "criterion {k}: {} ({:.0} s) {}",
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
        if required && !v.pass {
            required_failed.push(k);
        }
    }
    if !required_failed.is_empty() {
        eprintln!("required criteria failed: {required_failed:?}");
        std::process::exit(1);
    }
}
