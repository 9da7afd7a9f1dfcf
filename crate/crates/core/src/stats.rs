//! Paired bootstrap tests and percentile confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 5000;

/// Two measurements per id; `b - a` is the paired difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    ids: Vec<String>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl PairedSample {
    pub fn new(ids: Vec<String>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if ids.len() != a.len() || a.len() != b.len() {
            return Err(Error::shape(format!(
                "paired sample with {} ids, {} a-values, {} b-values",
                ids.len(),
                a.len(),
                b.len()
            )));
        }
        if ids.len() < 2 {
            return Err(Error::invalid("paired sample needs at least two pairs"));
        }
        let mut sorted: Vec<&String> = ids.iter().collect();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("paired sample ids must be unique"));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("paired sample values".into()));
        }
        Ok(Self { ids, a, b })
    }

    /// Pairs with generated ids `0..n`.
    pub fn from_values(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let ids = (0..a.len()).map(|i| i.to_string()).collect();
        Self::new(ids, a, b)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn differences(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| b - a).collect()
    }

    pub fn swapped(&self) -> Self {
        Self {
            ids: self.ids.clone(),
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean_diff: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
    pub seed: u64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Doubled smaller tail, clamped to `[2/(R+1), 1]`.
fn two_sided_p(resampled: &[f64]) -> f64 {
    let r = resampled.len() as f64;
    let below = resampled.iter().filter(|&&m| m <= 0.0).count() as f64 / r;
    let above = resampled.iter().filter(|&&m| m >= 0.0).count() as f64 / r;
    (2.0 * below.min(above)).clamp(2.0 / (r + 1.0), 1.0)
}

fn summarize(observed: f64, mut resampled: Vec<f64>, level: f64, seed: u64) -> BootstrapResult {
    let p_value = two_sided_p(&resampled);
    resampled.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    BootstrapResult {
        mean_diff: observed,
        p_value,
        ci_low: quantile_sorted(&resampled, alpha),
        ci_high: quantile_sorted(&resampled, 1.0 - alpha),
        resamples: resampled.len(),
        seed,
    }
}

fn resample_means(values: &[f64], resamples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect()
}

/// Resamples the paired differences with replacement.
pub fn paired_bootstrap(s: &PairedSample, resamples: usize, seed: u64) -> Result<BootstrapResult> {
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    let d = s.differences();
    Ok(summarize(
        mean(&d),
        resample_means(&d, resamples, seed),
        0.95,
        seed,
    ))
}

/// Enumerates all `n^n` equally likely resamples instead of drawing them.
pub fn paired_bootstrap_exhaustive(s: &PairedSample) -> Result<BootstrapResult> {
    let d = s.differences();
    let n = d.len();
    let total = (n as u32)
        .checked_pow(n as u32)
        .filter(|&t| t <= 1 << 24)
        .ok_or_else(|| Error::invalid(format!("{n}^{n} resamples is too many to enumerate")))?;
    let mut digits = vec![0usize; n];
    let mut means = Vec::with_capacity(total as usize);
    for _ in 0..total {
        means.push(digits.iter().map(|&i| d[i]).sum::<f64>() / n as f64);
        for digit in digits.iter_mut() {
            *digit += 1;
            if *digit < n {
                break;
            }
            *digit = 0;
        }
    }
    Ok(summarize(mean(&d), means, 0.95, 0))
}

/// `***` below 0.001, `**` below 0.01, `*` below 0.05.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Bootstrap percentile interval of the mean at `level` (e.g. 0.95).
pub fn mean_ci(values: &[f64], level: f64, resamples: usize, seed: u64) -> Result<(f64, f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid(
            "confidence interval needs at least two values",
        ));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    let r = summarize(
        mean(values),
        resample_means(values, resamples, seed),
        level,
        seed,
    );
    Ok((r.mean_diff, r.ci_low, r.ci_high))
}
