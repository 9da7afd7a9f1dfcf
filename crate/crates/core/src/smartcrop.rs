//! Length prediction from first-pass EoS probabilities.
//!
//! `φ_i` is the probability of EoS at generation slot `i`. Treating each slot
//! as an independent chance to stop, the probability that the sequence has
//! ended by position `ℓ` is `1 - Π_{j ≤ ℓ} (1 - φ_j)`. The crop point is the
//! first position where that reaches the threshold `τ`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decoder::Canvas;
use crate::error::{Error, Result};
use crate::model::Vocabulary;
use crate::neural::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EosProbabilities {
    prompt_len: usize,
    values: Vec<f64>,
}

impl EosProbabilities {
    pub fn new(prompt_len: usize, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no generation slots"));
        }
        if let Some(p) = values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!(
                "EoS probability {p} outside [0, 1]"
            )));
        }
        Ok(Self { prompt_len, values })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// `φ` for slots `L_p+1 ..= L_c`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn canvas_len(&self) -> usize {
        self.prompt_len + self.values.len()
    }
}

/// Softmax EoS mass at every generation row; prompt rows are ignored.
pub fn eos_probabilities(
    logits: &Matrix,
    vocab: &Vocabulary,
    prompt_len: usize,
) -> Result<EosProbabilities> {
    if logits.rows() <= prompt_len {
        return Err(Error::invalid(format!(
            "canvas of {} rows has no generation slots after a {prompt_len}-token prompt",
            logits.rows()
        )));
    }
    if logits.cols() != vocab.size() {
        return Err(Error::shape(format!(
            "logits have {} columns for a vocabulary of {}",
            logits.cols(),
            vocab.size()
        )));
    }
    let eos = vocab.eos_id() as usize;
    let values = (prompt_len..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            if row.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite(format!("NaN logit in row {r}")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            Ok(((row[eos] - max).exp() / denom).clamp(0.0, 1.0))
        })
        .collect::<Result<Vec<_>>>()?;
    EosProbabilities::new(prompt_len, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    prompt_len: usize,
    cumulative: Vec<f64>,
}

impl SurvivalCurve {
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Entry `i` is `Pr(L* ≤ L_p + 1 + i)`.
    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn canvas_len(&self) -> usize {
        self.prompt_len + self.cumulative.len()
    }

    /// Value at 1-based total length `ell`.
    pub fn at(&self, ell: usize) -> Option<f64> {
        ell.checked_sub(self.prompt_len + 1)
            .and_then(|i| self.cumulative.get(i).copied())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["position", "cumulative_prob"])?;
        for (i, c) in self.cumulative.iter().enumerate() {
            w.write_record([(self.prompt_len + 1 + i).to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn survival_curve(p: &EosProbabilities) -> SurvivalCurve {
    let mut log_survival = 0.0f64;
    let cumulative = p
        .values
        .iter()
        .map(|&phi| {
            // ln(0) = -inf once some φ reaches 1; -expm1(-inf) = 1 from then on.
            log_survival += (-phi).ln_1p();
            (-log_survival.exp_m1()).clamp(0.0, 1.0)
        })
        .collect();
    SurvivalCurve {
        prompt_len: p.prompt_len,
        cumulative,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropDecision {
    pub tau: f64,
    pub predicted_total_length: usize,
    pub threshold_reached: bool,
    pub curve: SurvivalCurve,
}

impl CropDecision {
    pub fn predicted_new_tokens(&self) -> usize {
        self.predicted_total_length - self.curve.prompt_len
    }
}

pub fn predicted_length(curve: &SurvivalCurve, tau: f64) -> Result<CropDecision> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("threshold {tau} outside [0, 1]")));
    }
    let hit = curve.cumulative.iter().position(|&c| c >= tau);
    let predicted_total_length = match hit {
        Some(i) => curve.prompt_len + 1 + i,
        None => curve.canvas_len(),
    };
    Ok(CropDecision {
        tau,
        predicted_total_length,
        threshold_reached: hit.is_some(),
        curve: curve.clone(),
    })
}

/// Which length the deviation factor multiplies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationScope {
    /// The prompt-inclusive length `L̂`.
    #[default]
    Total,
    /// Only the predicted new tokens `L̂ - L_p`.
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub delta: f64,
    #[serde(default)]
    pub scope: PerturbationScope,
}

impl PerturbationSpec {
    pub fn new(delta: f64) -> Result<Self> {
        Self::with_scope(delta, PerturbationScope::Total)
    }

    pub fn with_scope(delta: f64, scope: PerturbationScope) -> Result<Self> {
        if !(-0.5..=0.5).contains(&delta) {
            return Err(Error::invalid(format!(
                "deviation {delta} outside [-0.5, 0.5]"
            )));
        }
        Ok(Self { delta, scope })
    }

    /// `δ ∈ {-0.5, -0.4, …, 0.5}`.
    pub fn sweep_grid() -> Vec<f64> {
        (0..=10).map(|i| (i as f64 - 5.0) / 10.0).collect()
    }
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Scaled crop length, clamped to `[L_p + 1, L_c]`.
pub fn perturb_length(
    l_hat: usize,
    spec: PerturbationSpec,
    prompt_len: usize,
    canvas_len: usize,
) -> usize {
    let scaled = match spec.scope {
        PerturbationScope::Total => round_half_up(l_hat as f64 * (1.0 + spec.delta)),
        PerturbationScope::Generated => {
            let new = l_hat.saturating_sub(prompt_len) as f64;
            prompt_len as f64 + round_half_up(new * (1.0 + spec.delta))
        }
    };
    let lo = prompt_len + 1;
    (scaled.max(0.0) as usize).clamp(lo, canvas_len.max(lo))
}

/// Drops trailing masked slots so the canvas has `target` positions.
pub fn crop_canvas(canvas: &Canvas, target: usize) -> Result<Canvas> {
    canvas.crop(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LogitOracle, ScriptedOracle};
    use proptest::prelude::*;

    fn probs(values: &[f64]) -> EosProbabilities {
        EosProbabilities::new(2, values.to_vec()).unwrap()
    }

    fn brute_force_length(phi: &[f64], prompt_len: usize, tau: f64) -> usize {
        for ell in 1..=phi.len() {
            let mut survive = 1.0;
            for p in &phi[..ell] {
                survive *= 1.0 - p;
            }
            if 1.0 - survive >= tau {
                return prompt_len + ell;
            }
        }
        prompt_len + phi.len()
    }

    #[test]
    fn dominant_eos_logit_gives_certainty() {
        let v = Vocabulary::synthetic();
        let mut logits = Matrix::zeros(3, v.size());
        logits.set(2, v.eos_id() as usize, 800.0);
        let p = eos_probabilities(&logits, &v, 2).unwrap();
        assert!((p.values()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_one_over_v() {
        let v = Vocabulary::synthetic();
        let p = eos_probabilities(&Matrix::zeros(6, 64), &v, 2).unwrap();
        assert_eq!(p.values().len(), 4);
        assert!(p.values().iter().all(|&x| (x - 1.0 / 64.0).abs() < 1e-15));
    }

    #[test]
    fn scripted_oracle_closure() {
        let v = Vocabulary::synthetic();
        let oracle = ScriptedOracle::new(v.clone(), vec![0.1, 0.2, 0.7], vec![20, 21]).unwrap();
        let canvas = Canvas::new(&[3, 20], 3, v.mask_id()).unwrap();
        let p = eos_probabilities(&oracle.logits(&canvas).unwrap(), &v, 2).unwrap();
        for (got, want) in p.values().iter().zip([0.1, 0.2, 0.7]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn no_generation_rows_rejected() {
        let v = Vocabulary::synthetic();
        assert!(eos_probabilities(&Matrix::zeros(2, 64), &v, 2).is_err());
    }

    #[test]
    fn curve_examples() {
        assert_eq!(survival_curve(&probs(&[0.0; 4])).cumulative(), &[0.0; 4]);
        let c = survival_curve(&probs(&[0.5, 0.5, 0.5]));
        for (got, want) in c.cumulative().iter().zip([0.5, 0.75, 0.875]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(
            survival_curve(&probs(&[1.0, 0.0])).cumulative(),
            &[1.0, 1.0]
        );
    }

    #[test]
    fn threshold_examples() {
        let c = survival_curve(&probs(&[0.5, 0.5, 0.5]));
        let d = predicted_length(&c, 0.8).unwrap();
        assert_eq!(d.predicted_total_length, 2 + 3);
        assert!(d.threshold_reached);
        assert_eq!(predicted_length(&c, 0.0).unwrap().predicted_total_length, 3);

        let flat = survival_curve(&probs(&[0.0; 5]));
        let d = predicted_length(&flat, 0.9).unwrap();
        assert!(!d.threshold_reached);
        assert_eq!(d.predicted_total_length, 7);
        assert!(predicted_length(&c, 1.2).is_err());
        assert!(predicted_length(&c, -0.1).is_err());
    }

    #[test]
    fn perturbation_examples() {
        let s = |d| PerturbationSpec::new(d).unwrap();
        assert_eq!(perturb_length(150, s(0.0), 87, 240), 150);
        assert_eq!(perturb_length(200, s(0.5), 87, 240), 240);
        assert_eq!(perturb_length(100, s(-0.5), 87, 240), 88);
        // 105 * 1.1 = 115.5 rounds up
        assert_eq!(perturb_length(105, s(0.1), 10, 240), 116);
        assert!(PerturbationSpec::new(0.6).is_err());
    }

    #[test]
    fn generated_scope_scales_new_tokens_only() {
        let spec = PerturbationSpec::with_scope(0.5, PerturbationScope::Generated).unwrap();
        assert_eq!(perturb_length(110, spec, 10, 400), 160);
        let spec = PerturbationSpec::with_scope(-0.5, PerturbationScope::Generated).unwrap();
        assert_eq!(perturb_length(11, spec, 10, 400), 11);
    }

    #[test]
    fn sweep_grid_is_exact() {
        let g = PerturbationSpec::sweep_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], -0.5);
        assert_eq!(g[5], 0.0);
        assert_eq!(g[7], 0.2);
        assert_eq!(g[10], 0.5);
    }

    #[test]
    fn crop_counts() {
        let c = Canvas::new(&[3, 4, 5], 10, 0).unwrap();
        let cropped = crop_canvas(&c, 7).unwrap();
        assert_eq!(cropped.len(), 7);
        assert_eq!(cropped.masked_count(), 4);
        assert_eq!(crop_canvas(&c, 13).unwrap(), c);
        assert!(crop_canvas(&c, 3).is_err());
    }

    #[test]
    fn underflow_robustness() {
        let n = 10_000;
        let c = survival_curve(&EosProbabilities::new(1, vec![1e-12; n]).unwrap());
        let cum = c.cumulative();
        assert!(cum.windows(2).all(|w| w[1] > w[0]));
        for (i, &got) in cum.iter().enumerate() {
            let analytic = -((i + 1) as f64 * (-1e-12f64).ln_1p()).exp_m1();
            assert!(((got - analytic) / analytic).abs() < 1e-9);
        }
        let naive_last = 1.0 - (1.0f64 - 1e-12).powi(n as i32);
        assert!(((cum[n - 1] - naive_last) / naive_last).abs() < 1e-3);
    }

    #[test]
    fn csv_export() {
        let c = survival_curve(&probs(&[0.5, 0.5]));
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "position,cumulative_prob\n3,0.5\n4,0.75\n");
        assert_eq!(c.at(4), Some(0.75));
        assert_eq!(c.at(2), None);
    }

    proptest! {
        #[test]
        fn curve_is_monotone(phi in prop::collection::vec(0.0f64..=1.0, 1..60)) {
            let c = survival_curve(&probs(&phi));
            prop_assert!(c.cumulative().windows(2).all(|w| w[1] >= w[0]));
            prop_assert!(c.cumulative().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn threshold_is_monotone(
            phi in prop::collection::vec(0.0f64..=1.0, 1..40),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c = survival_curve(&probs(&phi));
            let l1 = predicted_length(&c, lo).unwrap().predicted_total_length;
            let l2 = predicted_length(&c, hi).unwrap().predicted_total_length;
            prop_assert!(l1 <= l2);
        }

        #[test]
        fn matches_plain_product(
            phi in prop::collection::vec(0.0f64..=1.0, 1..=20),
            tau in 0.0f64..=1.0,
        ) {
            let c = survival_curve(&probs(&phi));
            for ell in 1..=phi.len() {
                let plain = 1.0 - phi[..ell].iter().map(|p| 1.0 - p).product::<f64>();
                prop_assert!((c.cumulative()[ell - 1] - plain).abs() <= 1e-12);
            }
            let got = predicted_length(&c, tau).unwrap().predicted_total_length;
            let want = brute_force_length(&phi, 2, tau);
            if got != want {
                // Only a cumulative value within rounding of τ may flip the decision.
                let ell = got.min(want) - 2;
                let plain = 1.0 - phi[..ell].iter().map(|p| 1.0 - p).product::<f64>();
                prop_assert!((plain - tau).abs() <= 1e-12);
            }
        }

        #[test]
        fn decision_invariants(
            phi in prop::collection::vec(0.0f64..=1.0, 1..40),
            tau in 0.0f64..=1.0,
        ) {
            let c = survival_curve(&probs(&phi));
            let d = predicted_length(&c, tau).unwrap();
            prop_assert!(d.predicted_total_length > 2 && d.predicted_total_length <= c.canvas_len());
            if d.threshold_reached {
                prop_assert!(c.at(d.predicted_total_length).unwrap() >= tau);
                if d.predicted_total_length > 3 {
                    prop_assert!(c.at(d.predicted_total_length - 1).unwrap() < tau);
                }
            }
        }

        #[test]
        fn crop_is_idempotent(l_new in 1usize..30, frac in 0.0f64..1.0) {
            let c = Canvas::new(&[3, 4], l_new, 0).unwrap();
            let target = 3 + ((l_new - 1) as f64 * frac) as usize;
            let once = crop_canvas(&c, target).unwrap();
            prop_assert_eq!(crop_canvas(&once, target).unwrap(), once);
        }

        #[test]
        fn perturbation_stays_in_bounds(
            lp in 1usize..50, extra in 1usize..300, frac in 0.0f64..=1.0, delta in -0.5f64..=0.5,
        ) {
            let lc = lp + extra;
            let l_hat = lp + 1 + ((extra - 1) as f64 * frac) as usize;
            for scope in [PerturbationScope::Total, PerturbationScope::Generated] {
                let spec = PerturbationSpec::with_scope(delta, scope).unwrap();
                let l = perturb_length(l_hat, spec, lp, lc);
                prop_assert!(l > lp && l <= lc);
            }
        }
    }
}
