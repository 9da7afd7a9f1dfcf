use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step unmask counts for `T` denoising steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    counts: Vec<usize>,
}

impl Schedule {
    pub fn steps(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Steps with a nonzero count; zero-count steps are skipped at run time.
    pub fn active_steps(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Spreads `n_masked` unmasks over `steps` as evenly as possible, larger
/// counts first.
pub fn build_schedule(n_masked: usize, steps: usize) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if n_masked == 0 {
        return Err(Error::invalid(
            "schedule needs at least one masked position",
        ));
    }
    let (base, extra) = (n_masked / steps, n_masked % steps);
    let counts = (0..steps).map(|i| base + usize::from(i < extra)).collect();
    Ok(Schedule { counts })
}

/// How the step budget follows a crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// Rescale `T` so tokens per step stay roughly constant.
    PreserveDensity,
    /// Keep `T`; each step unmasks fewer tokens.
    PreserveSteps,
}

impl ScheduleMode {
    /// Step count after cropping `l_new` generation slots down to `kept`.
    pub fn rescale(self, steps: usize, kept: usize, l_new: usize) -> usize {
        match self {
            ScheduleMode::PreserveSteps => steps,
            ScheduleMode::PreserveDensity => {
                let exact = steps as f64 * kept as f64 / l_new as f64;
                ((exact + 0.5).floor() as usize).max(1)
            }
        }
    }
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "preserve-density" => Ok(Self::PreserveDensity),
            "preserve-steps" => Ok(Self::PreserveSteps),
            _ => Err(Error::invalid(format!(
                "unknown schedule mode {s:?} (expected preserve-density or preserve-steps)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_per_step() {
        let s = build_schedule(256, 256).unwrap();
        assert!(s.counts().iter().all(|&c| c == 1));
    }

    #[test]
    fn exact_division() {
        let s = build_schedule(512, 64).unwrap();
        assert_eq!(s.steps(), 64);
        assert!(s.counts().iter().all(|&c| c == 8));
    }

    #[test]
    fn remainder_goes_first() {
        assert_eq!(build_schedule(5, 2).unwrap().counts(), &[3, 2]);
        let s = build_schedule(3, 5).unwrap();
        assert_eq!(s.counts(), &[1, 1, 1, 0, 0]);
        assert_eq!(s.active_steps(), 3);
    }

    #[test]
    fn rescaling() {
        assert_eq!(ScheduleMode::PreserveDensity.rescale(1280, 135, 1280), 135);
        assert_eq!(ScheduleMode::PreserveDensity.rescale(8, 1, 64), 1);
        assert_eq!(ScheduleMode::PreserveSteps.rescale(8, 1, 64), 8);
        assert!(build_schedule(0, 3).is_err());
        assert!(build_schedule(3, 0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(n in 1usize..2000, t in 1usize..600) {
            let s = build_schedule(n, t).unwrap();
            prop_assert_eq!(s.steps(), t);
            prop_assert_eq!(s.total(), n);
            let lo = n / t;
            let hi = n.div_ceil(t);
            prop_assert!(s.counts().iter().all(|&c| c == lo || c == hi));
            prop_assert!(s.counts().windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
