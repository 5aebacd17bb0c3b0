//! Duration summaries (mean, population standard deviation) and the
//! per-call t-test filter that decides which calls enter the summaries.

mod filter;
pub mod tdist;

pub use filter::{confidence_filter, t_critical, FilterConfig, FilterPartition, StddevKind};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("{0} requires at least one sample")]
    Empty(&'static str),
    #[error("invalid filter configuration: {0}")]
    Config(String),
}

/// `(1/n) * sum(x_i)`, with one refinement pass over the deviations so that
/// constant samples return exactly that constant.
pub fn mean(samples: &[f64]) -> Result<f64, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::Empty("mean"));
    }
    let n = samples.len() as f64;
    let rough = samples.iter().sum::<f64>() / n;
    let correction = samples.iter().map(|x| x - rough).sum::<f64>() / n;
    Ok(rough + correction)
}

/// `sqrt((1/n) * sum((x_i - mean)^2))`. Divides by `n`, not `n - 1`.
pub fn population_stddev(samples: &[f64]) -> Result<f64, StatsError> {
    let mu = mean(samples)?;
    let ss: f64 = samples.iter().map(|x| (x - mu) * (x - mu)).sum();
    Ok((ss / samples.len() as f64).sqrt())
}

/// Bessel-corrected standard deviation; `0` for a single sample.
pub fn sample_stddev(samples: &[f64]) -> Result<f64, StatsError> {
    let mu = mean(samples)?;
    if samples.len() == 1 {
        return Ok(0.0);
    }
    let ss: f64 = samples.iter().map(|x| (x - mu) * (x - mu)).sum();
    Ok((ss / (samples.len() - 1) as f64).sqrt())
}

/// One-sample t statistic `(sample_mean - reference_mean) / (stddev / sqrt(n))`.
///
/// A zero `stddev` yields `0` when the means agree and a signed infinity
/// otherwise; the filter rejects infinities.
pub fn t_statistic(sample_mean: f64, reference_mean: f64, stddev: f64, n: usize) -> f64 {
    let diff = sample_mean - reference_mean;
    if stddev == 0.0 {
        return if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(diff)
        };
    }
    diff / (stddev / (n as f64).sqrt())
}

/// Median of a sample (mean of the middle pair for even lengths).
pub fn median(samples: &[f64]) -> Result<f64, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::Empty("median"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub mean: f64,
    pub population_stddev: f64,
    pub count: usize,
    /// Samples excluded by the confidence filter before summarizing.
    pub filtered_out: usize,
}

pub fn summarize(durations: &[f64]) -> Result<StatsSummary, StatsError> {
    Ok(StatsSummary {
        mean: mean(durations)?,
        population_stddev: population_stddev(durations)?,
        count: durations.len(),
        filtered_out: 0,
    })
}
