//! Run configuration read from a TOML file, with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use saecount::bootstrap::Scheme;
use saecount::ebpp::PqlConfig;
use saecount::gmerf::GmerfConfig;
use saecount::merf::MerfConfig;
use saecount::predict::{Aggregation, Method};
use saecount::simlab::ScenarioName;
use saecount::CsvSchema;

use crate::error::CliError;

/// Input files. Relative paths are taken relative to the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Survey CSV with the outcome column.
    pub survey: Option<PathBuf>,
    /// Census CSV with the covariates of every unit.
    pub census: Option<PathBuf>,
    /// Fit artifact written by `fit`; defaults to `<out>/fit.json`.
    pub fit: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MseSettings {
    pub scheme: Option<Scheme>,
    /// Bootstrap replicates `B`.
    pub replicates: usize,
}

impl Default for MseSettings {
    fn default() -> Self {
        Self {
            scheme: None,
            replicates: 100,
        }
    }
}

/// Census and per-domain sample sizes of a design-based simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSettings {
    /// Census CSV including the outcome column.
    pub census: PathBuf,
    /// CSV with columns `domain,n`.
    pub plan: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    pub scenario: Option<ScenarioName>,
    /// Keep only the first `domains` domains of the scenario.
    pub domains: Option<usize>,
    pub design: Option<DesignSettings>,
    /// Simulation replicates `M`.
    pub replicates: usize,
    /// Bootstrap replicates `B`; 0 skips the schemes.
    pub bootstrap: usize,
    pub methods: Vec<Method>,
    pub schemes: Vec<Scheme>,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            scenario: None,
            domains: None,
            design: None,
            replicates: 50,
            bootstrap: 0,
            methods: vec![Method::Ebpp, Method::Gmerf, Method::Merf],
            schemes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSettings {
    /// Bins of the Pearson residual histogram.
    pub bins: usize,
}

impl Default for DiagnoseSettings {
    fn default() -> Self {
        Self { bins: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub method: Method,
    pub aggregation: Aggregation,
    pub schema: Option<CsvSchema>,
    pub data: DataConfig,
    /// Unset sections take the library defaults (desk-scale defaults for `simulate`).
    pub gmerf: Option<GmerfConfig>,
    pub merf: Option<MerfConfig>,
    pub pql: PqlConfig,
    pub mse: MseSettings,
    pub simulate: SimulateSettings,
    pub diagnose: DiagnoseSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            out: PathBuf::from("out"),
            method: Method::Gmerf,
            aggregation: Aggregation::ExpOfMean,
            schema: None,
            data: DataConfig::default(),
            gmerf: None,
            merf: None,
            pql: PqlConfig::default(),
            mse: MseSettings::default(),
            simulate: SimulateSettings::default(),
            diagnose: DiagnoseSettings::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses a config file; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.rebase(base);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        rebase(base, &mut self.out);
        for p in [
            &mut self.data.survey,
            &mut self.data.census,
            &mut self.data.fit,
        ]
        .into_iter()
        .flatten()
        {
            rebase(base, p);
        }
        if let Some(d) = &mut self.simulate.design {
            rebase(base, &mut d.census);
            rebase(base, &mut d.plan);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be >= 1".into()));
        }
        if self.diagnose.bins == 0 {
            return Err(CliError::Config("diagnose.bins must be >= 1".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<&CsvSchema, CliError> {
        self.schema
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [schema] section".into()))
    }

    pub fn survey_path(&self) -> Result<&Path, CliError> {
        self.data
            .survey
            .as_deref()
            .ok_or_else(|| CliError::Config("missing data.survey".into()))
    }

    pub fn census_path(&self) -> Result<&Path, CliError> {
        self.data
            .census
            .as_deref()
            .ok_or_else(|| CliError::Config("missing data.census".into()))
    }

    pub fn fit_path(&self) -> PathBuf {
        self.data
            .fit
            .clone()
            .unwrap_or_else(|| self.out.join("fit.json"))
    }

    /// GMERF settings with the forest seeded from the run seed.
    pub fn gmerf_config(&self, fallback: GmerfConfig) -> GmerfConfig {
        let mut c = self.gmerf.clone().unwrap_or(fallback);
        c.forest.seed = self.seed;
        c
    }

    /// MERF settings with the forest seeded from the run seed.
    pub fn merf_config(&self, fallback: MerfConfig) -> MerfConfig {
        let mut c = self.merf.clone().unwrap_or(fallback);
        c.forest.seed = self.seed;
        c
    }
}
