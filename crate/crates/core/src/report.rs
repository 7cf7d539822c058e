//! Trimmed tail-latency aggregates over per-second series.

use thiserror::Error;

/// Seconds dropped from each end of a series.
pub const TRIM_SECONDS: f64 = 10.0;
/// Fewest samples a series may have before trimming.
pub const MIN_SAMPLES: usize = 21;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("too few samples: {got} (need at least {need})")]
    TooFewSamples { got: usize, need: usize },
    #[error("timestamps must be finite and non-decreasing (sample {0})")]
    BadTimestamp(usize),
}

/// The `ceil(p * N)`-th smallest value (1-based). `p` in (0, 1].
pub fn nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(p > 0.0 && p <= 1.0) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn p95(values: &[f64]) -> Option<f64> {
    nearest_rank(values, 0.95)
}

/// Values whose timestamp lies at least `head` seconds after the first sample
/// and at least `tail` seconds before the last one.
pub fn trim_by_time(samples: &[(f64, f64)], head: f64, tail: f64) -> Result<Vec<f64>, ReportError> {
    for (i, w) in samples.windows(2).enumerate() {
        if !(w[1].0 >= w[0].0) {
            return Err(ReportError::BadTimestamp(i + 1));
        }
    }
    if let Some(i) = samples.iter().position(|s| !s.0.is_finite()) {
        return Err(ReportError::BadTimestamp(i));
    }
    let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
        return Ok(Vec::new());
    };
    let (lo, hi) = (first.0 + head, last.0 - tail);
    // Small slack so that accumulated float time steps do not drop a sample.
    let eps = 1e-9 * (1.0 + last.0.abs());
    Ok(samples
        .iter()
        .filter(|(t, _)| *t >= lo - eps && *t <= hi + eps)
        .map(|(_, v)| *v)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSummary {
    pub retained: usize,
    pub p95: f64,
    pub mean: f64,
    pub max: f64,
    /// Local maxima more than two standard deviations above the mean.
    pub peaks: usize,
}

pub fn count_peaks(values: &[f64]) -> usize {
    if values.len() < 3 {
        return 0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let bar = mean + 2.0 * sd;
    values
        .windows(3)
        .filter(|w| w[1] > bar && w[1] >= w[0] && w[1] > w[2])
        .count()
}

/// Drops the first and last ten seconds and aggregates the rest.
pub fn summarize(samples: &[(f64, f64)]) -> Result<SeriesSummary, ReportError> {
    if samples.len() < MIN_SAMPLES {
        return Err(ReportError::TooFewSamples {
            got: samples.len(),
            need: MIN_SAMPLES,
        });
    }
    let kept = trim_by_time(samples, TRIM_SECONDS, TRIM_SECONDS)?;
    if kept.is_empty() {
        return Err(ReportError::TooFewSamples {
            got: samples.len(),
            need: MIN_SAMPLES,
        });
    }
    Ok(SeriesSummary {
        retained: kept.len(),
        p95: p95(&kept).expect("non-empty"),
        mean: kept.iter().sum::<f64>() / kept.len() as f64,
        max: kept.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        peaks: count_peaks(&kept),
    })
}
