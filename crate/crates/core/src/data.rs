//! Survey and census containers, domain bookkeeping and CSV ingestion.
//!
//! A [`Population`] holds the census: covariates for every unit and, when
//! known (simulations, design-based studies), the outcome. A [`Sample`] holds
//! survey units with observed counts. Both keep per-domain sizes; domains of
//! the census that received no sample units carry a size of zero in the
//! sample and are treated as out-of-sample rather than rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};

/// Label of a small area (domain).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub i64);

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A single unit row, used for construction and row-wise access.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitData {
    pub domain: DomainId,
    pub y: Option<u64>,
    pub x: Vec<f64>,
}

/// Row-major covariate matrix with column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    n: usize,
    p: usize,
    values: Vec<f64>,
    names: Vec<String>,
}

impl Covariates {
    pub fn new(n: usize, p: usize, values: Vec<f64>, names: Vec<String>) -> Result<Self> {
        if values.len() != n * p {
            return Err(SaeError::Dimension {
                expected: n * p,
                got: values.len(),
            });
        }
        if names.len() != p {
            return Err(SaeError::Dimension {
                expected: p,
                got: names.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SaeError::NonFinite("covariates"));
        }
        Ok(Self {
            n,
            p,
            values,
            names,
        })
    }

    /// Builds a matrix from rows, naming columns `x1..xp`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * p);
        for row in rows {
            if row.len() != p {
                return Err(SaeError::Dimension {
                    expected: p,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), p, values, default_names(p))
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.p + j]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.p);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Self {
            n: rows.len(),
            p: self.p,
            values,
            names: self.names.clone(),
        }
    }

    /// Copies the listed columns into a new matrix.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.n * cols.len());
        for i in 0..self.n {
            let row = self.row(i);
            values.extend(cols.iter().map(|&c| row[c]));
        }
        Self {
            n: self.n,
            p: cols.len(),
            values,
            names: cols.iter().map(|&c| self.names[c].clone()).collect(),
        }
    }

    pub(crate) fn with_column(&self, j: usize, value: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            out.values[i * self.p + j] = value;
        }
        out
    }
}

pub(crate) fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// Anything made of units that belong to domains.
pub trait DomainUnits {
    fn domains(&self) -> &[DomainId];

    fn covariates(&self) -> &Covariates;

    fn len(&self) -> usize {
        self.domains().len()
    }

    fn is_empty(&self) -> bool {
        self.domains().is_empty()
    }
}

/// Maps each domain to the positions of its units, in row order.
pub fn domain_index<D: DomainUnits + ?Sized>(data: &D) -> BTreeMap<DomainId, Vec<usize>> {
    index_domains(data.domains())
}

pub(crate) fn index_domains(domains: &[DomainId]) -> BTreeMap<DomainId, Vec<usize>> {
    let mut index: BTreeMap<DomainId, Vec<usize>> = BTreeMap::new();
    for (pos, d) in domains.iter().enumerate() {
        index.entry(*d).or_default().push(pos);
    }
    index
}

fn count_domains(domains: &[DomainId]) -> BTreeMap<DomainId, usize> {
    let mut sizes = BTreeMap::new();
    for d in domains {
        *sizes.entry(*d).or_insert(0) += 1;
    }
    sizes
}

/// Census of `N` units partitioned into domains.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    domain: Vec<DomainId>,
    y: Option<Vec<u64>>,
    x: Covariates,
    sizes: BTreeMap<DomainId, usize>,
}

impl Population {
    pub fn new(domain: Vec<DomainId>, y: Option<Vec<u64>>, x: Covariates) -> Result<Self> {
        if x.nrows() != domain.len() {
            return Err(SaeError::Dimension {
                expected: domain.len(),
                got: x.nrows(),
            });
        }
        if let Some(y) = &y {
            if y.len() != domain.len() {
                return Err(SaeError::Dimension {
                    expected: domain.len(),
                    got: y.len(),
                });
            }
        }
        let sizes = count_domains(&domain);
        Ok(Self {
            domain,
            y,
            x,
            sizes,
        })
    }

    pub fn from_units(units: &[UnitData]) -> Result<Self> {
        let (domain, y, x) = split_units(units)?;
        let y = if y.iter().all(Option::is_some) && !y.is_empty() {
            Some(y.into_iter().flatten().collect())
        } else if y.iter().all(Option::is_none) {
            None
        } else {
            return Err(SaeError::Input(
                "outcome must be present for all units or for none".into(),
            ));
        };
        Self::new(domain, y, x)
    }

    pub fn outcome(&self) -> Option<&[u64]> {
        self.y.as_deref()
    }

    /// Domain sizes `N_i`.
    pub fn sizes(&self) -> &BTreeMap<DomainId, usize> {
        &self.sizes
    }

    pub fn domain_ids(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.sizes.keys().copied()
    }

    pub fn unit(&self, i: usize) -> UnitData {
        UnitData {
            domain: self.domain[i],
            y: self.y.as_ref().map(|y| y[i]),
            x: self.x.row(i).to_vec(),
        }
    }

    /// Returns a copy with the outcome replaced.
    pub fn with_outcome(&self, y: Vec<u64>) -> Result<Self> {
        Self::new(self.domain.clone(), Some(y), self.x.clone())
    }

    /// Per-domain means of the census outcome.
    pub fn domain_means(&self) -> Option<BTreeMap<DomainId, f64>> {
        let y = self.y.as_ref()?;
        Some(domain_means(&self.domain, y.iter().map(|&v| v as f64)))
    }

    /// Restricts the census to the named covariate columns.
    pub fn with_covariates(&self, cols: &[usize]) -> Self {
        Self {
            domain: self.domain.clone(),
            y: self.y.clone(),
            x: self.x.select_columns(cols),
            sizes: self.sizes.clone(),
        }
    }
}

impl DomainUnits for Population {
    fn domains(&self) -> &[DomainId] {
        &self.domain
    }

    fn covariates(&self) -> &Covariates {
        &self.x
    }
}

/// Survey sample of `n` units with observed counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    domain: Vec<DomainId>,
    y: Vec<u64>,
    x: Covariates,
    sizes: BTreeMap<DomainId, usize>,
    population_rows: Option<Vec<usize>>,
}

impl Sample {
    pub fn new(domain: Vec<DomainId>, y: Vec<u64>, x: Covariates) -> Result<Self> {
        if x.nrows() != domain.len() || y.len() != domain.len() {
            return Err(SaeError::Dimension {
                expected: domain.len(),
                got: if y.len() != domain.len() {
                    y.len()
                } else {
                    x.nrows()
                },
            });
        }
        let sizes = count_domains(&domain);
        Ok(Self {
            domain,
            y,
            x,
            sizes,
            population_rows: None,
        })
    }

    pub fn from_units(units: &[UnitData]) -> Result<Self> {
        let (domain, y, x) = split_units(units)?;
        let y = y
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| SaeError::Input(format!("sample unit {i} has no outcome")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(domain, y, x)
    }

    /// Records which census rows the sample units were drawn from and
    /// registers every census domain, with `n_i = 0` where unsampled.
    pub fn linked_to(mut self, population: &Population, rows: Vec<usize>) -> Result<Self> {
        if rows.len() != self.domain.len() {
            return Err(SaeError::Dimension {
                expected: self.domain.len(),
                got: rows.len(),
            });
        }
        for (&r, d) in rows.iter().zip(&self.domain) {
            if r >= population.len() || population.domains()[r] != *d {
                return Err(SaeError::Input(format!(
                    "census row {r} does not belong to domain {d}"
                )));
            }
        }
        for (d, &n_pop) in population.sizes() {
            let n = self.sizes.entry(*d).or_insert(0);
            if *n > n_pop {
                return Err(SaeError::Input(format!(
                    "domain {d}: sample size {} exceeds census size {n_pop}",
                    *n
                )));
            }
        }
        self.population_rows = Some(rows);
        Ok(self)
    }

    pub fn outcome(&self) -> &[u64] {
        &self.y
    }

    pub fn outcome_f64(&self) -> Vec<f64> {
        self.y.iter().map(|&v| v as f64).collect()
    }

    /// Domain sizes `n_i`; may include zero-size out-of-sample domains.
    pub fn sizes(&self) -> &BTreeMap<DomainId, usize> {
        &self.sizes
    }

    /// Census row positions of the sampled units, when known.
    pub fn population_rows(&self) -> Option<&[usize]> {
        self.population_rows.as_deref()
    }

    pub fn unit(&self, i: usize) -> UnitData {
        UnitData {
            domain: self.domain[i],
            y: Some(self.y[i]),
            x: self.x.row(i).to_vec(),
        }
    }

    /// Direct estimator: the sample mean of each sampled domain.
    pub fn direct_means(&self) -> BTreeMap<DomainId, f64> {
        domain_means(&self.domain, self.y.iter().map(|&v| v as f64))
    }

    pub fn with_covariates(&self, cols: &[usize]) -> Self {
        Self {
            domain: self.domain.clone(),
            y: self.y.clone(),
            x: self.x.select_columns(cols),
            sizes: self.sizes.clone(),
            population_rows: self.population_rows.clone(),
        }
    }
}

impl DomainUnits for Sample {
    fn domains(&self) -> &[DomainId] {
        &self.domain
    }

    fn covariates(&self) -> &Covariates {
        &self.x
    }
}

pub(crate) fn domain_means(
    domains: &[DomainId],
    values: impl Iterator<Item = f64>,
) -> BTreeMap<DomainId, f64> {
    let mut acc: BTreeMap<DomainId, (f64, usize)> = BTreeMap::new();
    for (d, v) in domains.iter().zip(values) {
        let e = acc.entry(*d).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(d, (s, c))| (d, s / c as f64))
        .collect()
}

type SplitUnits = (Vec<DomainId>, Vec<Option<u64>>, Covariates);

fn split_units(units: &[UnitData]) -> Result<SplitUnits> {
    let p = units.first().map_or(0, |u| u.x.len());
    let mut domain = Vec::with_capacity(units.len());
    let mut y = Vec::with_capacity(units.len());
    let mut values = Vec::with_capacity(units.len() * p);
    for u in units {
        if u.x.len() != p {
            return Err(SaeError::Dimension {
                expected: p,
                got: u.x.len(),
            });
        }
        domain.push(u.domain);
        y.push(u.y);
        values.extend_from_slice(&u.x);
    }
    let x = Covariates::new(units.len(), p, values, default_names(p))?;
    Ok((domain, y, x))
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub domain: String,
    #[serde(default)]
    pub outcome: Option<String>,
    pub covariates: Vec<String>,
}

/// Result of [`load_csv`]: a sample when the schema names an outcome
/// column, a census otherwise.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Population(Population),
    Sample(Sample),
}

struct RawTable {
    domain: Vec<DomainId>,
    y: Option<Vec<u64>>,
    x: Covariates,
}

fn read_table(path: &Path, schema: &CsvSchema) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .delimiter(b',')
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => SaeError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => SaeError::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| {
                SaeError::Schema(format!("missing column `{name}` in {}", path.display()))
            })
    };
    let dom_col = column(&schema.domain)?;
    let y_col = schema.outcome.as_deref().map(column).transpose()?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;

    let mut domain = Vec::new();
    let mut y = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |c: usize| record.get(c).map(str::trim).unwrap_or("");
        let d: i64 = field(dom_col).parse().map_err(|_| SaeError::Parse {
            row,
            message: format!("domain `{}` is not an integer label", field(dom_col)),
        })?;
        domain.push(DomainId(d));
        if let Some(c) = y_col {
            let raw = field(c);
            let v: u64 = raw.parse().map_err(|_| SaeError::Parse {
                row,
                message: format!("outcome `{raw}` is not a nonnegative integer"),
            })?;
            y.push(v);
        }
        for &c in &x_cols {
            let raw = field(c);
            let v: f64 = raw.parse().map_err(|_| SaeError::Parse {
                row,
                message: format!(
                    "covariate `{}` value `{raw}` is not a real number",
                    headers[c].trim()
                ),
            })?;
            if !v.is_finite() {
                return Err(SaeError::Parse {
                    row,
                    message: format!("covariate `{}` is not finite", headers[c].trim()),
                });
            }
            values.push(v);
        }
    }
    if domain.is_empty() {
        return Err(SaeError::Input(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    let x = Covariates::new(
        domain.len(),
        x_cols.len(),
        values,
        schema.covariates.clone(),
    )?;
    Ok(RawTable {
        domain,
        y: y_col.map(|_| y),
        x,
    })
}

/// Loads a survey (outcome column in schema) or census file.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let t = read_table(path.as_ref(), schema)?;
    match t.y {
        Some(y) => Ok(Dataset::Sample(Sample::new(t.domain, y, t.x)?)),
        None => Ok(Dataset::Population(Population::new(t.domain, None, t.x)?)),
    }
}

pub fn load_sample(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Sample> {
    if schema.outcome.is_none() {
        return Err(SaeError::Schema(
            "survey schema needs an outcome column".into(),
        ));
    }
    match load_csv(path, schema)? {
        Dataset::Sample(s) => Ok(s),
        Dataset::Population(_) => unreachable!("outcome column requested"),
    }
}

/// Loads a census; the outcome column is kept when the schema names one.
pub fn load_population(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Population> {
    let t = read_table(path.as_ref(), schema)?;
    Population::new(t.domain, t.y, t.x)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SaeError + '_ {
    move |source| SaeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_rows(
    path: &Path,
    domain_col: &str,
    outcome_col: Option<&str>,
    domains: &[DomainId],
    y: Option<&[u64]>,
    x: &Covariates,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec![domain_col.to_string()];
    if let Some(c) = outcome_col {
        header.push(c.to_string());
    }
    header.extend(x.names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..domains.len() {
        let mut rec = vec![domains[i].to_string()];
        if let Some(y) = y {
            rec.push(y[i].to_string());
        }
        rec.extend(x.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes a sample with header `domain,y,<covariate names>`.
pub fn write_sample_csv(path: impl AsRef<Path>, sample: &Sample) -> Result<()> {
    write_rows(
        path.as_ref(),
        "domain",
        Some("y"),
        sample.domains(),
        Some(sample.outcome()),
        sample.covariates(),
    )
}

/// Writes a census; the outcome column is included when present.
pub fn write_population_csv(path: impl AsRef<Path>, population: &Population) -> Result<()> {
    write_rows(
        path.as_ref(),
        "domain",
        population.outcome().map(|_| "y"),
        population.domains(),
        population.outcome(),
        population.covariates(),
    )
}
