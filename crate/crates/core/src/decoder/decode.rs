use serde::{Deserialize, Serialize};

use super::canvas::Canvas;
use super::schedule::{build_schedule, ScheduleMode};
use crate::error::{Error, Result};
use crate::model::{LogitOracle, TokenId, Vocabulary};
use crate::neural::Matrix;
use crate::smartcrop::{eos_probabilities, predicted_length, survival_curve, CropDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    FullContext,
    #[serde(rename = "smartcrop")]
    SmartCrop,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" | "full-context" => Ok(Self::FullContext),
            "sc" | "smartcrop" => Ok(Self::SmartCrop),
            _ => Err(Error::invalid(format!(
                "unknown decode mode {s:?} (expected full-context or smartcrop)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub tau: Option<f64>,
    pub schedule_mode: ScheduleMode,
    pub reuse_first_pass: bool,
    /// Crop to this total length instead of the τ-based prediction.
    pub forced_length: Option<usize>,
}

impl DecodeConfig {
    pub fn full_context(schedule_mode: ScheduleMode) -> Self {
        Self {
            mode: DecodeMode::FullContext,
            tau: None,
            schedule_mode,
            reuse_first_pass: true,
            forced_length: None,
        }
    }

    pub fn smartcrop(tau: f64, schedule_mode: ScheduleMode) -> Self {
        Self {
            mode: DecodeMode::SmartCrop,
            tau: Some(tau),
            schedule_mode,
            reuse_first_pass: true,
            forced_length: None,
        }
    }

    pub fn with_reuse(mut self, reuse_first_pass: bool) -> Self {
        self.reuse_first_pass = reuse_first_pass;
        self
    }

    pub fn with_forced_length(mut self, length: usize) -> Self {
        self.forced_length = Some(length);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.tau) {
            (DecodeMode::FullContext, Some(_)) => Err(Error::invalid(
                "a threshold only applies to smartcrop decoding",
            )),
            (DecodeMode::FullContext, None) if self.forced_length.is_some() => Err(Error::invalid(
                "forced length only applies to smartcrop decoding",
            )),
            (DecodeMode::SmartCrop, None) => {
                Err(Error::invalid("smartcrop decoding needs a threshold"))
            }
            (DecodeMode::SmartCrop, Some(t)) if !(0.0..=1.0).contains(&t) => {
                Err(Error::invalid(format!("threshold {t} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// One charged forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub processed_len: usize,
    pub unmasked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub mode: DecodeMode,
    pub tau: Option<f64>,
    pub schedule_mode: ScheduleMode,
    pub reuse_first_pass: bool,
    pub prompt_len: usize,
    pub l_new: usize,
    pub steps: usize,
    /// Step budget after cropping (smartcrop only).
    pub steps_after_crop: Option<usize>,
    pub crop: Option<CropDecision>,
    /// Total length actually decoded after the crop (smartcrop only).
    pub target_len: Option<usize>,
    /// Every forward pass in order, the cropping pass included.
    pub passes: Vec<StepRecord>,
    pub tokens: Vec<TokenId>,
}

impl DecodeTrace {
    pub fn processed_lengths(&self) -> Vec<usize> {
        self.passes.iter().map(|s| s.processed_len).collect()
    }

    pub fn total_unmasked(&self) -> usize {
        self.passes.iter().map(|s| s.unmasked).sum()
    }

    /// Mean processed length over the denoising passes.
    pub fn mean_processed_len(&self) -> f64 {
        if self.passes.is_empty() {
            return 0.0;
        }
        self.passes
            .iter()
            .map(|s| s.processed_len as f64)
            .sum::<f64>()
            / self.passes.len() as f64
    }

    pub fn generated(&self, eos_id: TokenId) -> Vec<TokenId> {
        eos_truncate(&self.tokens, self.prompt_len, eos_id)
    }

    pub fn record(&self, id: &str, vocab: &Vocabulary) -> TraceRecord {
        TraceRecord {
            id: id.to_string(),
            mode: self.mode,
            tau: self.tau,
            schedule_mode: self.schedule_mode,
            prompt_len: self.prompt_len,
            l_new: self.l_new,
            steps: self.steps,
            steps_after_crop: self.steps_after_crop,
            predicted_total_length: self.crop.as_ref().map(|c| c.predicted_total_length),
            threshold_reached: self.crop.as_ref().map(|c| c.threshold_reached),
            target_len: self.target_len,
            processed_lengths: self.processed_lengths(),
            generated_text: vocab.decode(&self.generated(vocab.eos_id())),
        }
    }
}

/// Flat per-decode export row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub mode: DecodeMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau: Option<f64>,
    pub schedule_mode: ScheduleMode,
    pub prompt_len: usize,
    pub l_new: usize,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub steps_after_crop: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub predicted_total_length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub threshold_reached: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_len: Option<usize>,
    pub processed_lengths: Vec<usize>,
    pub generated_text: String,
}

/// `prompt ++ [mask; l_new]`.
pub fn init_canvas(prompt: &[TokenId], l_new: usize, vocab: &Vocabulary) -> Result<Canvas> {
    Canvas::new(prompt, l_new, vocab.mask_id())
}

/// Best non-mask token in a row (lowest id on ties) and its softmax probability.
fn best_candidate(row: &[f64], mask_id: TokenId) -> (TokenId, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let mut best = None::<(usize, f64)>;
    for (id, &v) in row.iter().enumerate() {
        if id as TokenId == mask_id {
            continue;
        }
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((id, v));
        }
    }
    let (id, logit) = best.expect("vocabulary has a non-mask token");
    (id as TokenId, (logit - max).exp() / denom)
}

/// Unmasks the `k` most confident masked positions using precomputed logits.
///
/// Rows beyond the canvas are ignored, so logits from a longer canvas can be
/// applied to a cropped one.
pub fn commit_from_logits(logits: &Matrix, canvas: &mut Canvas, k: usize) -> Result<()> {
    let masked = canvas.masked_count();
    if k > masked {
        return Err(Error::invalid(format!(
            "cannot unmask {k} positions with {masked} masked"
        )));
    }
    if logits.rows() < canvas.len() {
        return Err(Error::shape(format!(
            "{} logit rows for a canvas of {}",
            logits.rows(),
            canvas.len()
        )));
    }
    if k == 0 {
        return Ok(());
    }
    let mask_id = canvas.mask_id();
    let mut candidates: Vec<(usize, TokenId, f64)> = canvas
        .masked_positions()
        .map(|pos| {
            let row = logits.row(pos);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("logit row {pos}")));
            }
            let (tok, conf) = best_candidate(row, mask_id);
            Ok((pos, tok, conf))
        })
        .collect::<Result<_>>()?;
    // Stable sort keeps ascending position order among equal confidences.
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
    for &(pos, tok, _) in &candidates[..k] {
        canvas.unmask(pos, tok);
    }
    Ok(())
}

/// One forward pass, then commits the `k` most confident masked positions.
pub fn denoise_step<O: LogitOracle + ?Sized>(
    oracle: &O,
    canvas: &mut Canvas,
    k: usize,
) -> Result<()> {
    let masked = canvas.masked_count();
    if k > masked {
        return Err(Error::invalid(format!(
            "cannot unmask {k} positions with {masked} masked"
        )));
    }
    let logits = checked_logits(oracle, canvas)?;
    commit_from_logits(&logits, canvas, k)
}

fn checked_logits<O: LogitOracle + ?Sized>(oracle: &O, canvas: &Canvas) -> Result<Matrix> {
    let logits = oracle.logits(canvas)?;
    if logits.shape() != (canvas.len(), oracle.vocab().size()) {
        return Err(Error::shape(format!(
            "oracle returned {:?} logits for a canvas of {} over {} tokens",
            logits.shape(),
            canvas.len(),
            oracle.vocab().size()
        )));
    }
    Ok(logits)
}

/// Runs the schedule for `steps` over the current canvas, appending passes.
fn run_schedule<O: LogitOracle + ?Sized>(
    oracle: &O,
    canvas: &mut Canvas,
    counts: &[usize],
    passes: &mut Vec<StepRecord>,
) -> Result<()> {
    for &k in counts.iter().filter(|&&k| k > 0) {
        let step = passes.len();
        denoise_step(oracle, canvas, k).map_err(|e| e.at_step(step))?;
        passes.push(StepRecord {
            processed_len: canvas.len(),
            unmasked: k,
        });
    }
    Ok(())
}

/// Decodes `l_new` tokens after `prompt` in `steps` denoising steps.
pub fn decode<O: LogitOracle + ?Sized>(
    oracle: &O,
    prompt: &[TokenId],
    l_new: usize,
    steps: usize,
    cfg: &DecodeConfig,
) -> Result<DecodeTrace> {
    cfg.validate()?;
    let vocab = oracle.vocab().clone();
    let mut canvas = init_canvas(prompt, l_new, &vocab)?;
    let prompt_len = canvas.prompt_len();
    let mut passes = Vec::new();
    let mut trace = DecodeTrace {
        mode: cfg.mode,
        tau: cfg.tau,
        schedule_mode: cfg.schedule_mode,
        reuse_first_pass: cfg.reuse_first_pass,
        prompt_len,
        l_new,
        steps,
        steps_after_crop: None,
        crop: None,
        target_len: None,
        passes: Vec::new(),
        tokens: Vec::new(),
    };

    match cfg.mode {
        DecodeMode::FullContext => {
            let schedule = build_schedule(l_new, steps)?;
            run_schedule(oracle, &mut canvas, schedule.counts(), &mut passes)?;
        }
        DecodeMode::SmartCrop => {
            let tau = cfg.tau.expect("validated");
            let first = checked_logits(oracle, &canvas).map_err(|e| e.at_step(0))?;
            let curve = survival_curve(&eos_probabilities(&first, &vocab, prompt_len)?);
            let decision = predicted_length(&curve, tau)?;
            let target = match cfg.forced_length {
                Some(len) => {
                    if len <= prompt_len || len > canvas.len() {
                        return Err(Error::invalid(format!(
                            "forced length {len} outside [{}, {}]",
                            prompt_len + 1,
                            canvas.len()
                        )));
                    }
                    len
                }
                None => decision.predicted_total_length,
            };
            let kept = target - prompt_len;
            let new_steps = cfg.schedule_mode.rescale(steps, kept, l_new);
            let schedule = build_schedule(kept, new_steps)?;
            canvas = canvas.crop(target)?;
            let counts = schedule.counts();
            if cfg.reuse_first_pass {
                commit_from_logits(&first, &mut canvas, counts[0]).map_err(|e| e.at_step(0))?;
                passes.push(StepRecord {
                    processed_len: prompt_len + l_new,
                    unmasked: counts[0],
                });
                run_schedule(oracle, &mut canvas, &counts[1..], &mut passes)?;
            } else {
                passes.push(StepRecord {
                    processed_len: prompt_len + l_new,
                    unmasked: 0,
                });
                run_schedule(oracle, &mut canvas, counts, &mut passes)?;
            }
            trace.steps_after_crop = Some(new_steps);
            trace.crop = Some(decision);
            trace.target_len = Some(target);
        }
    }

    if canvas.masked_count() != 0 {
        return Err(Error::Invariant(format!(
            "{} positions still masked after decoding",
            canvas.masked_count()
        )));
    }
    trace.passes = passes;
    trace.tokens = canvas.tokens().to_vec();
    Ok(trace)
}

/// Generated tokens up to, not including, the first EoS.
pub fn eos_truncate(tokens: &[TokenId], prompt_len: usize, eos_id: TokenId) -> Vec<TokenId> {
    let generated = tokens.get(prompt_len..).unwrap_or(&[]);
    let end = generated
        .iter()
        .position(|&t| t == eos_id)
        .unwrap_or(generated.len());
    generated[..end].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiffusionModel, ModelConfig, ScriptedOracle};
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::synthetic()
    }

    /// Oracle whose confidence at each masked position is scripted directly.
    struct ConfidenceOracle {
        vocab: Vocabulary,
        confidence: Vec<f64>,
    }

    impl LogitOracle for ConfidenceOracle {
        fn vocab(&self) -> &Vocabulary {
            &self.vocab
        }

        fn logits(&self, canvas: &Canvas) -> Result<Matrix> {
            let mut out = Matrix::zeros(canvas.len(), self.vocab.size());
            for pos in canvas.masked_positions() {
                out.set(pos, 20 + (pos % 5), self.confidence[pos]);
            }
            Ok(out)
        }
    }

    fn tiny_model() -> DiffusionModel {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_positions: 64,
            vocab: vocab(),
        };
        DiffusionModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn init_canvas_examples() {
        let v = vocab();
        let c = init_canvas(&[3, 20, 21], 5, &v).unwrap();
        assert_eq!(c.len(), 8);
        assert_eq!(
            c.masked_positions().collect::<Vec<_>>(),
            vec![3, 4, 5, 6, 7]
        );
        assert_eq!(&c.tokens()[..3], &[3, 20, 21]);
        assert_eq!(init_canvas(&[3], 1, &v).unwrap().generation_len(), 1);
        assert!(init_canvas(&[], 3, &v).is_err());
    }

    #[test]
    fn exhaustive_and_noop_steps() {
        let m = tiny_model();
        let mut c = init_canvas(&[3, 20], 6, m.vocab()).unwrap();
        let before = c.clone();
        denoise_step(&m, &mut c, 0).unwrap();
        assert_eq!(c, before);
        denoise_step(&m, &mut c, 6).unwrap();
        assert_eq!(c.masked_count(), 0);
        assert!(c.tokens().iter().all(|&t| t != m.vocab().mask_id()));
        assert!(denoise_step(&m, &mut c, 1).is_err());
    }

    #[test]
    fn top_k_matches_brute_force_sort() {
        let v = vocab();
        let confidence: Vec<f64> = (0..12).map(|i| ((i * 7) % 12) as f64).collect();
        let oracle = ConfidenceOracle {
            vocab: v.clone(),
            confidence: confidence.clone(),
        };
        let mut c = init_canvas(&[3, 20], 10, &v).unwrap();
        denoise_step(&oracle, &mut c, 4).unwrap();
        let mut order: Vec<usize> = (2..12).collect();
        order.sort_by(|&a, &b| {
            confidence[b]
                .partial_cmp(&confidence[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut want: Vec<usize> = order[..4].to_vec();
        want.sort_unstable();
        let got: Vec<usize> = (2..12).filter(|&p| !c.masked()[p]).collect();
        assert_eq!(got, want);
        for p in got {
            assert_eq!(c.tokens()[p], 20 + (p % 5) as u32);
        }
    }

    #[test]
    fn ties_break_by_position() {
        let v = vocab();
        let oracle = ConfidenceOracle {
            vocab: v.clone(),
            confidence: vec![1.0; 10],
        };
        let mut c = init_canvas(&[3], 8, &v).unwrap();
        denoise_step(&oracle, &mut c, 3).unwrap();
        assert_eq!(c.masked_positions().next(), Some(4));
    }

    #[test]
    fn mask_token_never_committed() {
        let v = vocab();
        let mut logits = Matrix::zeros(4, v.size());
        for r in 0..4 {
            logits.set(r, v.mask_id() as usize, 50.0);
        }
        let mut c = init_canvas(&[3, 20], 2, &v).unwrap();
        commit_from_logits(&logits, &mut c, 2).unwrap();
        assert!(c.tokens().iter().all(|&t| t != v.mask_id()));
    }

    #[test]
    fn eos_truncation() {
        assert_eq!(eos_truncate(&[5, 5, 20, 21, 1, 1], 2, 1), vec![20, 21]);
        assert_eq!(eos_truncate(&[5, 20, 21], 1, 1), vec![20, 21]);
        assert!(eos_truncate(&[5, 1, 20], 1, 1).is_empty());
    }

    #[test]
    fn config_validation() {
        let mut fc = DecodeConfig::full_context(ScheduleMode::PreserveDensity);
        assert!(fc.validate().is_ok());
        fc.tau = Some(0.9);
        assert!(fc.validate().is_err());
        assert!(DecodeConfig::smartcrop(1.5, ScheduleMode::PreserveDensity)
            .validate()
            .is_err());
        let mut sc = DecodeConfig::smartcrop(0.9, ScheduleMode::PreserveDensity);
        sc.tau = None;
        assert!(sc.validate().is_err());
    }

    #[test]
    fn fallback_without_reuse_is_fc_plus_one_pass() {
        let v = vocab();
        let oracle = ScriptedOracle::new(v.clone(), vec![], vec![20, 21, 22]).unwrap();
        let fc = decode(
            &oracle,
            &[3, 20],
            12,
            12,
            &DecodeConfig::full_context(ScheduleMode::PreserveDensity),
        )
        .unwrap();
        let cfg = DecodeConfig::smartcrop(0.9, ScheduleMode::PreserveDensity).with_reuse(false);
        let sc = decode(&oracle, &[3, 20], 12, 12, &cfg).unwrap();
        assert!(!sc.crop.as_ref().unwrap().threshold_reached);
        assert_eq!(
            sc.passes[0],
            StepRecord {
                processed_len: 14,
                unmasked: 0
            }
        );
        assert_eq!(&sc.passes[1..], &fc.passes[..]);
        assert_eq!(sc.tokens, fc.tokens);
    }

    #[test]
    fn forced_length_reproduces_tau_run() {
        let m = tiny_model();
        let cfg = DecodeConfig::smartcrop(0.5, ScheduleMode::PreserveDensity);
        let a = decode(&m, &[3, 20, 8], 20, 20, &cfg).unwrap();
        let forced = cfg
            .clone()
            .with_forced_length(a.crop.as_ref().unwrap().predicted_total_length);
        let b = decode(&m, &[3, 20, 8], 20, 20, &forced).unwrap();
        assert_eq!(a.passes, b.passes);
        assert_eq!(a.tokens, b.tokens);
        let bad = cfg.with_forced_length(3);
        assert!(decode(&m, &[3, 20, 8], 20, 20, &bad).is_err());
    }

    #[test]
    fn long_canvas_rescaling_example() {
        // 87-token prompt, 1280 slots, EoS certain at slot 135
        let v = vocab();
        let mut schedule = vec![0.0; 135];
        schedule[134] = 1.0;
        let oracle = ScriptedOracle::new(v, schedule, vec![20]).unwrap();
        let prompt = vec![20; 87];
        let cfg = DecodeConfig::smartcrop(0.9, ScheduleMode::PreserveDensity).with_reuse(false);
        let t = decode(&oracle, &prompt, 1280, 1280, &cfg).unwrap();
        assert_eq!(t.target_len, Some(222));
        assert_eq!(t.steps_after_crop, Some(135));
        assert_eq!(t.passes.len(), 136);
        assert_eq!(t.passes[0].processed_len, 1367);
        assert!(t.passes[1..]
            .iter()
            .all(|s| s.processed_len == 222 && s.unmasked == 1));
    }

    #[test]
    fn reuse_charges_first_pass_as_step_one() {
        let m = tiny_model();
        let cfg = DecodeConfig::smartcrop(0.0, ScheduleMode::PreserveSteps);
        let t = decode(&m, &[3, 20], 10, 4, &cfg).unwrap();
        assert_eq!(t.target_len, Some(3));
        assert_eq!(
            t.passes,
            vec![StepRecord {
                processed_len: 12,
                unmasked: 1
            }]
        );
        assert_eq!(t.total_unmasked(), 1);
    }

    #[test]
    fn oracle_failure_carries_step() {
        struct Failing(Vocabulary);
        impl LogitOracle for Failing {
            fn vocab(&self) -> &Vocabulary {
                &self.0
            }
            fn logits(&self, canvas: &Canvas) -> Result<Matrix> {
                if canvas.masked_count() < 3 {
                    Err(Error::invalid("boom"))
                } else {
                    Ok(Matrix::zeros(canvas.len(), self.0.size()))
                }
            }
        }
        let err = decode(
            &Failing(vocab()),
            &[3],
            5,
            5,
            &DecodeConfig::full_context(ScheduleMode::PreserveDensity),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Step { step: 3, .. }), "{err}");
    }

    #[test]
    fn record_omits_crop_fields_for_fc() {
        let m = tiny_model();
        let fc = decode(
            &m,
            &[3, 20],
            4,
            4,
            &DecodeConfig::full_context(ScheduleMode::PreserveDensity),
        )
        .unwrap();
        let json = serde_json::to_string(&fc.record("x", m.vocab())).unwrap();
        assert!(!json.contains("tau") && !json.contains("predicted_total_length"));
        let sc = decode(
            &m,
            &[3, 20],
            4,
            4,
            &DecodeConfig::smartcrop(0.5, ScheduleMode::PreserveDensity),
        )
        .unwrap();
        let json = serde_json::to_string(&sc.record("x", m.vocab())).unwrap();
        assert!(json.contains("\"tau\":0.5") && json.contains("predicted_total_length"));
    }

    fn never_overwrites(oracle: &dyn LogitOracle, prompt: &[TokenId], l_new: usize, steps: usize) {
        let mut canvas = init_canvas(prompt, l_new, oracle.vocab()).unwrap();
        let schedule = build_schedule(l_new, steps).unwrap();
        for &k in schedule.counts().iter().filter(|&&k| k > 0) {
            let before = canvas.clone();
            denoise_step(oracle, &mut canvas, k).unwrap();
            for p in 0..canvas.len() {
                if !before.masked()[p] {
                    assert_eq!(before.tokens()[p], canvas.tokens()[p]);
                    assert!(!canvas.masked()[p]);
                }
            }
            assert_eq!(before.masked_count() - canvas.masked_count(), k);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn smartcrop_equals_fc_on_precropped_canvas(
            l_new in 1usize..16,
            steps in 1usize..16,
            tau in 0.1f64..0.95,
            density in any::<bool>(),
        ) {
            let m = tiny_model();
            let mode = if density { ScheduleMode::PreserveDensity } else { ScheduleMode::PreserveSteps };
            let prompt = [3u32, 20, 9];
            let cfg = DecodeConfig::smartcrop(tau, mode).with_reuse(false);
            let sc = decode(&m, &prompt, l_new, steps, &cfg).unwrap();
            let kept = sc.target_len.unwrap() - prompt.len();
            let fc = decode(
                &m, &prompt, kept, sc.steps_after_crop.unwrap(),
                &DecodeConfig::full_context(mode),
            ).unwrap();
            prop_assert_eq!(&sc.passes[1..], &fc.passes[..]);
            prop_assert_eq!(&sc.tokens, &fc.tokens);
        }

        #[test]
        fn unmask_totals_and_determinism(
            l_new in 1usize..24,
            steps in 1usize..30,
            tau in 0.0f64..=1.0,
            reuse in any::<bool>(),
        ) {
            let m = tiny_model();
            let cfg = DecodeConfig::smartcrop(tau, ScheduleMode::PreserveDensity).with_reuse(reuse);
            let a = decode(&m, &[3, 20], l_new, steps, &cfg).unwrap();
            prop_assert_eq!(a.total_unmasked(), a.target_len.unwrap() - 2);
            let b = decode(&m, &[3, 20], l_new, steps, &cfg).unwrap();
            prop_assert_eq!(a, b);
            let fc = decode(&m, &[3, 20], l_new, steps, &DecodeConfig::full_context(ScheduleMode::PreserveDensity)).unwrap();
            prop_assert_eq!(fc.total_unmasked(), l_new);
            prop_assert!(fc.passes.iter().all(|s| s.processed_len == l_new + 2));
        }

        #[test]
        fn tokens_are_never_overwritten(l_new in 1usize..20, steps in 1usize..20) {
            never_overwrites(&tiny_model(), &[3, 20], l_new, steps);
        }
    }
}
