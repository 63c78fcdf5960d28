//! Overdispersion diagnostics for fitted Poisson models.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, SaeError};

fn check_pair(y: &[u64], mu: &[f64]) -> Result<()> {
    if y.len() != mu.len() {
        return Err(SaeError::Dimension {
            expected: y.len(),
            got: mu.len(),
        });
    }
    if y.is_empty() {
        return Err(SaeError::Input("diagnostics need at least one unit".into()));
    }
    if mu.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
        return Err(SaeError::InvalidParameter(
            "fitted means must be positive".into(),
        ));
    }
    Ok(())
}

/// `(y - mu) / sqrt(mu)` per unit.
pub fn pearson_residuals(y: &[u64], mu: &[f64]) -> Result<Vec<f64>> {
    check_pair(y, mu)?;
    Ok(y.iter()
        .zip(mu)
        .map(|(&y, &m)| (y as f64 - m) / m.sqrt())
        .collect())
}

/// Residual degrees of freedom `n - (p + 1) - D_in`.
pub fn residual_df(n: usize, p: usize, in_sample_domains: usize) -> Result<usize> {
    n.checked_sub(p + 1 + in_sample_domains)
        .filter(|&df| df > 0)
        .ok_or_else(|| {
            SaeError::InvalidParameter(format!(
                "no residual degrees of freedom: n = {n}, p = {p}, D = {in_sample_domains}"
            ))
        })
}

/// Sum of squared Pearson residuals over `df`.
pub fn dispersion_ratio(pearson: &[f64], df: usize) -> Result<f64> {
    if df == 0 {
        return Err(SaeError::InvalidParameter("df must be positive".into()));
    }
    Ok(pearson.iter().map(|r| r * r).sum::<f64>() / df as f64)
}

/// Dean's PB score statistic for overdispersion and its one-sided p-value.
pub fn dean_pb_test(y: &[u64], mu: &[f64]) -> Result<(f64, f64)> {
    check_pair(y, mu)?;
    let num: f64 = y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let y = y as f64;
            (y - m).powi(2) - y
        })
        .sum();
    let den = (2.0 * mu.iter().map(|m| m * m).sum::<f64>()).sqrt();
    let t = num / den;
    let p = Normal::standard().sf(t);
    Ok((t, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionSummary {
    pub pearson: Vec<f64>,
    pub df: usize,
    pub dispersion_ratio: f64,
    pub dean_statistic: f64,
    pub dean_p_value: f64,
}

/// All diagnostics for counts `y` with fitted means `mu` from a model with
/// `p` covariates and `in_sample_domains` random intercepts.
pub fn summarize(
    y: &[u64],
    mu: &[f64],
    p: usize,
    in_sample_domains: usize,
) -> Result<DispersionSummary> {
    let pearson = pearson_residuals(y, mu)?;
    let df = residual_df(y.len(), p, in_sample_domains)?;
    let dispersion_ratio = dispersion_ratio(&pearson, df)?;
    let (dean_statistic, dean_p_value) = dean_pb_test(y, mu)?;
    Ok(DispersionSummary {
        pearson,
        df,
        dispersion_ratio,
        dean_statistic,
        dean_p_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width histogram over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<Bin>> {
    if bins == 0 {
        return Err(SaeError::InvalidParameter("bins must be >= 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SaeError::NonFinite("histogram values"));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut out: Vec<Bin> = (0..bins)
        .map(|k| Bin {
            lower: lo + k as f64 * width,
            upper: if k + 1 == bins {
                hi.max(lo + width)
            } else {
                lo + (k + 1) as f64 * width
            },
            count: 0,
        })
        .collect();
    for v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        out[k].count += 1;
    }
    Ok(out)
}

/// CSV with columns `lower,upper,count`.
pub fn write_histogram_csv<W: Write>(bins: &[Bin], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lower", "upper", "count"])?;
    for b in bins {
        w.write_record([
            b.lower.to_string(),
            b.upper.to_string(),
            b.count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| SaeError::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        assert_eq!(pearson_residuals(&[4], &[4.0]).unwrap(), vec![0.0]);
        assert_eq!(pearson_residuals(&[9], &[4.0]).unwrap(), vec![2.5]);
        assert!(pearson_residuals(&[1], &[0.0]).is_err());
    }

    #[test]
    fn dispersion_examples() {
        assert_eq!(dispersion_ratio(&[0.0; 5], 3).unwrap(), 0.0);
        assert_eq!(dispersion_ratio(&[1.0, -1.0, 1.0, -1.0], 2).unwrap(), 2.0);
        assert!(dispersion_ratio(&[1.0], 0).is_err());
        assert_eq!(residual_df(100, 2, 10).unwrap(), 87);
        assert!(residual_df(5, 2, 2).is_err());
    }

    #[test]
    fn dean_without_overdispersion_direction() {
        let y = vec![100u64; 50];
        let mu = vec![100.0; 50];
        let (t, p) = dean_pb_test(&y, &mu).unwrap();
        assert!(t < -3.0);
        assert!(p > 0.999);
        assert!(dean_pb_test(&[], &[]).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.5, 1.0, 2.0, 2.0], 2).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!((h[0].lower, h[1].upper), (0.0, 2.0));
    }
}
