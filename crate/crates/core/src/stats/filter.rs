use serde::{Deserialize, Serialize};

use super::{mean, population_stddev, sample_stddev, t_statistic, tdist, StatsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StddevKind {
    #[default]
    Population,
    Sample,
}

/// Parameters of the per-call t-test on output error vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub confidence_level: f64,
    pub degrees_of_freedom: u32,
    /// When set, `confidence_level` bounds a single tail instead of the
    /// central interval.
    pub per_tail: bool,
    pub stddev: StddevKind,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            confidence_level: 0.9995,
            degrees_of_freedom: 5,
            per_tail: false,
            stddev: StddevKind::Population,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), StatsError> {
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(StatsError::Config(format!(
                "confidence level {} outside (0, 1)",
                self.confidence_level
            )));
        }
        if self.degrees_of_freedom == 0 {
            return Err(StatsError::Config(
                "degrees of freedom must be positive".into(),
            ));
        }
        if self.per_tail && self.confidence_level <= 0.5 {
            return Err(StatsError::Config(format!(
                "per-tail confidence {} must exceed 0.5",
                self.confidence_level
            )));
        }
        Ok(())
    }
}

/// Critical `|t|` for the configured confidence level.
///
/// Two-tailed (default): `P(|T| <= t*) = confidence`. Per-tail:
/// `P(T <= t*) = confidence`.
pub fn t_critical(config: &FilterConfig) -> Result<f64, StatsError> {
    config.validate()?;
    let tail = 1.0 - config.confidence_level;
    let tail = if config.per_tail { 2.0 * tail } else { tail };
    tdist::two_tailed_quantile(tail, f64::from(config.degrees_of_freedom))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterPartition {
    pub accepted: Vec<usize>,
    pub rejected: Vec<usize>,
}

/// Tests each error vector `e = output - exact` against mean zero and
/// partitions the call indices. All-zero vectors are always accepted;
/// vectors with non-finite entries are always rejected.
pub fn confidence_filter(
    call_errors: &[Vec<f64>],
    config: &FilterConfig,
) -> Result<FilterPartition, StatsError> {
    let critical = t_critical(config)?;
    let mut out = FilterPartition::default();
    for (idx, e) in call_errors.iter().enumerate() {
        if e.len() < 2 {
            return Err(StatsError::Config(format!(
                "error vector {idx} has {} components; at least 2 are needed",
                e.len()
            )));
        }
        if accepts(e, config.stddev, critical)? {
            out.accepted.push(idx);
        } else {
            out.rejected.push(idx);
        }
    }
    Ok(out)
}

fn accepts(e: &[f64], stddev: StddevKind, critical: f64) -> Result<bool, StatsError> {
    if e.iter().any(|v| !v.is_finite()) {
        return Ok(false);
    }
    if e.iter().all(|&v| v == 0.0) {
        return Ok(true);
    }
    let m = mean(e)?;
    let s = match stddev {
        StddevKind::Population => population_stddev(e)?,
        StddevKind::Sample => sample_stddev(e)?,
    };
    let t = t_statistic(m, 0.0, s, e.len());
    Ok(t.abs() <= critical)
}
