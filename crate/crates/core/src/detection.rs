//! Threshold tests over types and threshold calibration.

use crate::exponents::{delta0, ExponentError, JointDistribution};
use crate::typestat::{hellinger_diameter, MarginalVector, TypeError};
use serde::{Deserialize, Serialize};
use std::io;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("no samples to calibrate against")]
    NoSamples,
    #[error("target {target} must lie in (0, 1]")]
    InvalidTarget { target: f64 },
    #[error("target {target} is below the resolution 1/{samples} = {floor} of the sample set")]
    Unattainable { target: f64, samples: usize, floor: f64 },
    #[error("sample value is NaN")]
    NanSample,
    #[error("threshold must be non-negative, got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Exponent(#[from] ExponentError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hypothesis {
    H0,
    H1,
}

impl Hypothesis {
    /// `H1` iff `statistic >= threshold`.
    pub fn from_statistic(statistic: f64, threshold: f64) -> Self {
        if statistic >= threshold {
            Hypothesis::H1
        } else {
            Hypothesis::H0
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Hypothesis::H0 => 0,
            Hypothesis::H1 => 1,
        }
    }
}

fn check_threshold(threshold: f64) -> Result<(), DetectionError> {
    if threshold.is_nan() || threshold < 0.0 {
        Err(DetectionError::InvalidThreshold(threshold))
    } else {
        Ok(())
    }
}

/// Diameter test on `K` marginals.
pub fn diameter_decide(marginals: &MarginalVector, threshold: f64) -> Result<Hypothesis, DetectionError> {
    check_threshold(threshold)?;
    Ok(Hypothesis::from_statistic(hellinger_diameter(marginals)?, threshold))
}

/// Hoeffding test: `H1` iff the divergence of the joint type from the null
/// set `{d <= d0}` reaches the threshold.
pub fn hoeffding_decide(joint: &JointDistribution, threshold: f64, d0: f64) -> Result<Hypothesis, DetectionError> {
    check_threshold(threshold)?;
    Ok(Hypothesis::from_statistic(delta0(joint, d0)?, threshold))
}

/// Largest threshold for which at most a `target` fraction of the `H1`
/// samples falls below it.
///
/// With sorted samples `s_1 <= ... <= s_n` and `j = floor(target * n)`, the
/// answer is `s_{j+1}`; `target >= 1` admits every threshold and returns
/// `+inf`. Targets below `1/n` cannot be told apart from zero with `n`
/// samples and are rejected.
pub fn calibrate_threshold(samples: &[f64], target: f64) -> Result<f64, DetectionError> {
    if samples.is_empty() {
        return Err(DetectionError::NoSamples);
    }
    if samples.iter().any(|s| s.is_nan()) {
        return Err(DetectionError::NanSample);
    }
    if target.is_nan() || target <= 0.0 {
        return Err(DetectionError::InvalidTarget { target });
    }
    if target >= 1.0 {
        return Ok(f64::INFINITY);
    }
    let n = samples.len();
    let floor = 1.0 / n as f64;
    if target < floor {
        return Err(DetectionError::Unattainable { target, samples: n, floor });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let j = (target * n as f64).floor() as usize;
    Ok(sorted[j.min(n - 1)])
}

/// Worst case over configurations: the threshold that keeps every
/// configuration's miss rate within `target`.
pub fn calibrate_worst_case(per_config: &[Vec<f64>], target: f64) -> Result<f64, DetectionError> {
    if per_config.is_empty() {
        return Err(DetectionError::NoSamples);
    }
    per_config
        .iter()
        .map(|s| calibrate_threshold(s, target))
        .try_fold(f64::INFINITY, |acc, g| Ok(acc.min(g?)))
}

/// Fraction of samples at or above the threshold.
pub fn exceedance_rate(samples: &[f64], threshold: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|&&s| s >= threshold).count() as f64 / samples.len() as f64
}

/// Fraction of samples strictly below the threshold.
pub fn miss_rate(samples: &[f64], threshold: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|&&s| s < threshold).count() as f64 / samples.len() as f64
}

/// One row of the statistic CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticSample {
    pub config_id: usize,
    pub theta: u8,
    pub t: usize,
    pub statistic: f64,
}

pub fn write_samples_csv<W: io::Write>(writer: W, samples: &[StatisticSample]) -> Result<(), DetectionError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: io::Read>(reader: R) -> Result<Vec<StatisticSample>, DetectionError> {
    csv::Reader::from_reader(reader).deserialize().map(|r| r.map_err(DetectionError::from)).collect()
}
