//! Analytical forward-pass cost: `c1·L + c2·L²` per pass.

use serde::{Deserialize, Serialize};

use crate::decoder::DecodeTrace;
use crate::error::{Error, Result};
use crate::model::DiffusionModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    /// FLOPs per token per pass.
    pub linear: u64,
    /// FLOPs per token pair per pass.
    pub quadratic: u64,
    pub params: u64,
}

impl CostModel {
    pub fn new(linear: u64, quadratic: u64, params: u64) -> Result<Self> {
        if linear == 0 {
            return Err(Error::invalid("linear cost coefficient must be positive"));
        }
        Ok(Self {
            linear,
            quadratic,
            params,
        })
    }

    /// `c1 = 2P` over the dense (non-embedding) parameters, `c2 = 4·layers·d_model`.
    pub fn from_model(model: &DiffusionModel) -> Self {
        let cfg = model.config();
        let params = model.dense_parameter_count() as u64;
        Self {
            linear: 2 * params,
            quadratic: 4 * (cfg.n_layers * cfg.d_model) as u64,
            params,
        }
    }

    /// An 8B-parameter, 32-layer, 4096-wide model.
    pub fn llada_8b() -> Self {
        Self {
            linear: 16_000_000_000,
            quadratic: 4 * 32 * 4096,
            params: 8_000_000_000,
        }
    }
}

pub fn step_flops(processed_len: usize, m: &CostModel) -> u64 {
    let l = processed_len as u64;
    m.linear
        .saturating_mul(l)
        .saturating_add(m.quadratic.saturating_mul(l).saturating_mul(l))
}

/// Cost of every charged pass in the trace, the cropping pass included.
pub fn trace_flops(trace: &DecodeTrace, m: &CostModel) -> u64 {
    trace.passes.iter().fold(0u64, |acc, s| {
        acc.saturating_add(step_flops(s.processed_len, m))
    })
}

/// Percentage of `fc` saved by spending `sc`.
pub fn savings(fc: u64, sc: u64) -> Result<f64> {
    if fc == 0 {
        return Err(Error::invalid("baseline FLOPs must be positive"));
    }
    Ok(100.0 * (1.0 - sc as f64 / fc as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub fc: u64,
    pub sc: u64,
    pub saved_fraction: f64,
}

impl FlopsReport {
    pub fn new(fc: u64, sc: u64) -> Result<Self> {
        Ok(Self {
            fc,
            sc,
            saved_fraction: savings(fc, sc)? / 100.0,
        })
    }
}

/// Savings over paired `(fc, sc)` costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavingsSummary {
    /// Mean of per-instance savings, in percent.
    pub mean_percent: f64,
    /// `100·(1 - ΣSC/ΣFC)`, for comparison.
    pub ratio_of_totals_percent: f64,
}

pub fn aggregate_savings(pairs: &[(u64, u64)]) -> Result<SavingsSummary> {
    if pairs.is_empty() {
        return Err(Error::invalid("no paired costs to aggregate"));
    }
    let per: Vec<f64> = pairs
        .iter()
        .map(|&(f, s)| savings(f, s))
        .collect::<Result<_>>()?;
    let fc: u128 = pairs.iter().map(|p| p.0 as u128).sum();
    let sc: u128 = pairs.iter().map(|p| p.1 as u128).sum();
    Ok(SavingsSummary {
        mean_percent: per.iter().sum::<f64>() / per.len() as f64,
        ratio_of_totals_percent: 100.0 * (1.0 - sc as f64 / fc as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{DecodeMode, ScheduleMode, StepRecord};
    use proptest::prelude::*;

    fn trace(passes: Vec<StepRecord>) -> DecodeTrace {
        DecodeTrace {
            mode: DecodeMode::FullContext,
            tau: None,
            schedule_mode: ScheduleMode::PreserveDensity,
            reuse_first_pass: false,
            prompt_len: 1,
            l_new: 1,
            steps: passes.len(),
            steps_after_crop: None,
            crop: None,
            target_len: None,
            passes,
            tokens: vec![],
        }
    }

    fn pass(len: usize) -> StepRecord {
        StepRecord {
            processed_len: len,
            unmasked: 1,
        }
    }

    #[test]
    fn step_examples() {
        assert_eq!(step_flops(7, &CostModel::new(10, 0, 5).unwrap()), 70);
        let quad = CostModel {
            linear: 0,
            quadratic: 1,
            params: 0,
        };
        assert_eq!(step_flops(3, &quad), 9);
        let m = CostModel::llada_8b();
        let linear = m.linear as f64 * 1367.0;
        assert!(linear / step_flops(1367, &m) as f64 > 0.95);
        assert!(CostModel::new(0, 1, 1).is_err());
    }

    #[test]
    fn trace_closed_forms() {
        let m = CostModel::new(13, 0, 0).unwrap();
        let fc = trace(vec![pass(50); 40]);
        assert_eq!(trace_flops(&fc, &m), 13 * 50 * 40);
        let mut sc_passes = vec![pass(50)];
        sc_passes.extend(vec![pass(12); 9]);
        assert_eq!(trace_flops(&trace(sc_passes), &m), 13 * (50 + 9 * 12));
        assert_eq!(trace_flops(&trace(vec![]), &m), 0);
    }

    #[test]
    fn savings_examples() {
        assert_eq!(savings(500, 500).unwrap(), 0.0);
        assert!((savings(100, 2).unwrap() - 98.0).abs() < 1e-12);
        assert!(savings(0, 1).is_err());
    }

    #[test]
    fn long_canvas_closed_form() {
        let m = CostModel::new(1, 0, 0).unwrap();
        let fc = 1367u64 * 1280;
        let sc = 1367 + 135 * 222;
        let s = savings(fc, sc).unwrap();
        assert!((s - 98.21).abs() < 0.01, "{s}");
        assert_eq!(step_flops(1367, &m), 1367);
    }

    #[test]
    fn aggregation_differs_from_ratio_of_totals() {
        let s = aggregate_savings(&[(100, 50), (300, 0)]).unwrap();
        assert!((s.mean_percent - 75.0).abs() < 1e-12);
        assert!((s.ratio_of_totals_percent - 87.5).abs() < 1e-12);
        assert!(aggregate_savings(&[]).is_err());
    }

    proptest! {
        #[test]
        fn matches_per_step_sum(
            lens in prop::collection::vec(1usize..2000, 0..60),
            c1 in 1u64..100_000,
            c2 in 0u64..1000,
        ) {
            let m = CostModel::new(c1, c2, 0).unwrap();
            let t = trace(lens.iter().map(|&l| pass(l)).collect());
            let mut brute = 0u64;
            for &l in &lens {
                let l = l as u64;
                brute += c1 * l + c2 * l * l;
            }
            prop_assert_eq!(trace_flops(&t, &m), brute);
        }

        #[test]
        fn savings_monotone_in_crop(lc in 50usize..400, t in 1usize..200, a in 1usize..50, b in 1usize..50) {
            let m = CostModel::new(7, 3, 0).unwrap();
            let lp = 4;
            let (short, long) = if a <= b { (a, b) } else { (b, a) };
            let fc = step_flops(lc, &m) * t as u64;
            let sc = |kept: usize| {
                let kept = kept.min(lc - lp);
                let steps = ScheduleMode::PreserveDensity.rescale(t, kept, lc - lp);
                step_flops(lc, &m) + steps as u64 * step_flops(lp + kept, &m)
            };
            prop_assert!(savings(fc, sc(short)).unwrap() >= savings(fc, sc(long)).unwrap());
        }
    }
}
