//! Benchmark protocols: FC against SmartCrop over a τ grid, the δ sweep,
//! the shuffled-length control, the L_new invariance study, and binned
//! per-instance deltas.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, DecodeConfig, DecodeMode, DecodeTrace, ScheduleMode};
use crate::error::{Error, Result};
use crate::flops::{aggregate_savings, savings, trace_flops, CostModel};
use crate::model::LogitOracle;
use crate::smartcrop::{perturb_length, PerturbationScope, PerturbationSpec};
use crate::stats::{
    mean_ci, paired_bootstrap, significance_stars, PairedSample, DEFAULT_RESAMPLES,
};
use crate::tasks::{Instance, TaskSpec};

pub const TAU_GRID: [f64; 5] = [0.5, 0.75, 0.9, 0.95, 0.99];
pub const FC_LABEL: &str = "FC";

pub fn sc_label(tau: f64) -> String {
    format!("SC-{tau}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub taus: Vec<f64>,
    pub schedule_mode: ScheduleMode,
    pub reuse_first_pass: bool,
    pub cost: CostModel,
    pub seed: u64,
    pub resamples: usize,
}

impl RunConfig {
    pub fn new(task: TaskSpec, cost: CostModel) -> Self {
        Self {
            schedule_mode: task.default_schedule_mode(),
            task,
            taus: TAU_GRID.to_vec(),
            reuse_first_pass: true,
            cost,
            seed: 0,
            resamples: DEFAULT_RESAMPLES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("τ grid values must lie in [0, 1]"));
        }
        if self.taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("τ grid must be strictly increasing"));
        }
        if self.resamples == 0 {
            return Err(Error::invalid("resample count must be positive"));
        }
        Ok(())
    }

    fn sc_config(&self, tau: f64) -> DecodeConfig {
        DecodeConfig::smartcrop(tau, self.schedule_mode).with_reuse(self.reuse_first_pass)
    }
}

/// Outcome of one decode of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub method: String,
    pub tau: Option<f64>,
    pub metric: f64,
    pub flops: u64,
    pub prompt_len: usize,
    pub true_len: Option<usize>,
    pub predicted_total_length: Option<usize>,
    pub target_len: Option<usize>,
    pub generated_len: usize,
    pub avg_processed_len: f64,
    /// τ was never reached and the full canvas was kept.
    pub no_crop_fallback: bool,
    pub generated: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub method: String,
    pub message: String,
}

fn make_record(
    inst: &Instance,
    method: &str,
    trace: &DecodeTrace,
    task: &TaskSpec,
    oracle: &dyn LogitOracle,
    cost: &CostModel,
) -> InstanceRecord {
    let vocab = oracle.vocab();
    let generated = trace.generated(vocab.eos_id());
    InstanceRecord {
        id: inst.id.clone(),
        method: method.to_string(),
        tau: trace.tau,
        metric: task.metric.score(&generated, &inst.reference),
        flops: trace_flops(trace, cost),
        prompt_len: trace.prompt_len,
        true_len: inst.true_len,
        predicted_total_length: trace.crop.as_ref().map(|c| c.predicted_total_length),
        target_len: trace.target_len,
        generated_len: generated.len(),
        avg_processed_len: trace.mean_processed_len(),
        no_crop_fallback: trace.crop.as_ref().is_some_and(|c| !c.threshold_reached),
        generated: vocab.decode(&generated),
    }
}

type Outcome = std::result::Result<InstanceRecord, Failure>;

fn run_one(
    oracle: &dyn LogitOracle,
    inst: &Instance,
    method: &str,
    task: &TaskSpec,
    dcfg: &DecodeConfig,
    cost: &CostModel,
) -> Outcome {
    decode(oracle, &inst.prompt, task.l_new, task.steps, dcfg)
        .map(|t| make_record(inst, method, &t, task, oracle, cost))
        .map_err(|e| Failure {
            id: inst.id.clone(),
            method: method.to_string(),
            message: e.to_string(),
        })
}

fn split(outcomes: Vec<Outcome>) -> (Vec<InstanceRecord>, Vec<Failure>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    (records, failures)
}

/// One row per method, aligned with the FC baseline by instance id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub task: String,
    pub method: String,
    pub tau: Option<f64>,
    pub n: usize,
    pub prompt_len: f64,
    pub avg_processed_len: f64,
    pub metric: f64,
    pub flops_saved_mean: Option<f64>,
    pub flops_saved_ratio: Option<f64>,
    pub perf_delta_pct: Option<f64>,
    pub p_value: Option<f64>,
    pub stars: String,
    pub no_crop_fallbacks: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub records: Vec<InstanceRecord>,
    pub failures: Vec<Failure>,
    pub summaries: Vec<MethodSummary>,
}

impl BenchmarkRun {
    pub fn method_records(&self, method: &str) -> Vec<&InstanceRecord> {
        self.records.iter().filter(|r| r.method == method).collect()
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// `(fc, other)` pairs for ids present in both methods, in FC order.
pub fn pair_records<'a>(
    records: &'a [InstanceRecord],
    baseline: &str,
    method: &str,
) -> Vec<(&'a InstanceRecord, &'a InstanceRecord)> {
    let other: HashMap<&str, &InstanceRecord> = records
        .iter()
        .filter(|r| r.method == method)
        .map(|r| (r.id.as_str(), r))
        .collect();
    records
        .iter()
        .filter(|r| r.method == baseline)
        .filter_map(|r| other.get(r.id.as_str()).map(|o| (r, *o)))
        .collect()
}

fn summarize_method(
    cfg: &RunConfig,
    run_records: &[InstanceRecord],
    failures: &[Failure],
    method: &str,
    tau: Option<f64>,
) -> Result<MethodSummary> {
    let own: Vec<&InstanceRecord> = run_records.iter().filter(|r| r.method == method).collect();
    let mut summary = MethodSummary {
        task: cfg.task.name.clone(),
        method: method.to_string(),
        tau,
        n: own.len(),
        prompt_len: mean(own.iter().map(|r| r.prompt_len as f64)),
        avg_processed_len: mean(own.iter().map(|r| r.avg_processed_len)),
        metric: mean(own.iter().map(|r| r.metric)),
        flops_saved_mean: None,
        flops_saved_ratio: None,
        perf_delta_pct: None,
        p_value: None,
        stars: String::new(),
        no_crop_fallbacks: own.iter().filter(|r| r.no_crop_fallback).count(),
        failures: failures.iter().filter(|f| f.method == method).count(),
    };
    if method == FC_LABEL {
        return Ok(summary);
    }
    let pairs = pair_records(run_records, FC_LABEL, method);
    if pairs.is_empty() {
        return Ok(summary);
    }
    let costs: Vec<(u64, u64)> = pairs.iter().map(|(f, s)| (f.flops, s.flops)).collect();
    let saved = aggregate_savings(&costs)?;
    summary.flops_saved_mean = Some(saved.mean_percent);
    summary.flops_saved_ratio = Some(saved.ratio_of_totals_percent);
    let fc_mean = mean(pairs.iter().map(|(f, _)| f.metric));
    let sc_mean = mean(pairs.iter().map(|(_, s)| s.metric));
    if fc_mean != 0.0 {
        summary.perf_delta_pct = Some(100.0 * (sc_mean - fc_mean) / fc_mean);
    }
    if pairs.len() >= 2 {
        let sample = PairedSample::new(
            pairs.iter().map(|(f, _)| f.id.clone()).collect(),
            pairs.iter().map(|(f, _)| f.metric).collect(),
            pairs.iter().map(|(_, s)| s.metric).collect(),
        )?;
        let boot = paired_bootstrap(&sample, cfg.resamples, cfg.seed)?;
        summary.p_value = Some(boot.p_value);
        summary.stars = significance_stars(boot.p_value).to_string();
    }
    Ok(summary)
}

/// Checks that every instance's `L̂` and the mean savings move the right way
/// along the τ grid.
fn check_monotonicity(cfg: &RunConfig, records: &[InstanceRecord]) -> Result<()> {
    let mut by_id: BTreeMap<&str, Vec<(f64, usize)>> = BTreeMap::new();
    for r in records {
        if let (Some(tau), Some(l)) = (r.tau, r.predicted_total_length) {
            by_id.entry(&r.id).or_default().push((tau, l));
        }
    }
    for (id, mut v) in by_id {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        if v.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(Error::Invariant(format!(
                "L̂ decreases with τ for instance {id}"
            )));
        }
    }
    // Savings are compared on ids that succeeded under every method.
    let labels: Vec<String> = cfg.taus.iter().map(|&t| sc_label(t)).collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(&r.id).or_default() += 1;
    }
    let full = labels.len() + 1;
    let fc: HashMap<&str, u64> = records
        .iter()
        .filter(|r| r.method == FC_LABEL && counts[r.id.as_str()] == full)
        .map(|r| (r.id.as_str(), r.flops))
        .collect();
    if fc.is_empty() {
        return Ok(());
    }
    let mut previous = f64::INFINITY;
    for label in &labels {
        let saved = mean(
            records
                .iter()
                .filter(|r| &r.method == label)
                .filter_map(|r| fc.get(r.id.as_str()).map(|&f| savings(f, r.flops)))
                .collect::<Result<Vec<_>>>()?,
        );
        if saved > previous + 1e-9 {
            return Err(Error::Invariant(format!(
                "mean FLOPs saved increases with τ at {label}: {saved} > {previous}"
            )));
        }
        previous = saved;
    }
    Ok(())
}

/// Decodes every instance under FC and SmartCrop at each τ.
pub fn run_benchmark<O: LogitOracle>(
    oracle: &O,
    instances: &[Instance],
    cfg: &RunConfig,
) -> Result<BenchmarkRun> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::invalid("no instances to run"));
    }
    let mut methods = vec![(
        FC_LABEL.to_string(),
        DecodeConfig::full_context(cfg.schedule_mode),
        None,
    )];
    for &tau in &cfg.taus {
        methods.push((sc_label(tau), cfg.sc_config(tau), Some(tau)));
    }
    let outcomes: Vec<Outcome> = instances
        .par_iter()
        .flat_map_iter(|inst| {
            methods.iter().map(move |(label, dcfg, _)| {
                run_one(oracle, inst, label, &cfg.task, dcfg, &cfg.cost)
            })
        })
        .collect();
    let (records, failures) = split(outcomes);
    check_monotonicity(cfg, &records)?;
    let summaries = methods
        .iter()
        .map(|(label, _, tau)| summarize_method(cfg, &records, &failures, label, *tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkRun {
        records,
        failures,
        summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub id: String,
    pub delta: f64,
    pub predicted_total_length: usize,
    pub forced_length: usize,
    pub prompt_len: usize,
    pub true_len: Option<usize>,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub control_mean: Option<f64>,
    pub fc_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub tau: f64,
    pub scope: PerturbationScope,
    pub records: Vec<SweepRecord>,
    pub failures: Vec<Failure>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Fills the reference columns of every row.
    pub fn with_baselines(mut self, control_mean: Option<f64>, fc_mean: Option<f64>) -> Self {
        for row in &mut self.rows {
            row.control_mean = control_mean;
            row.fc_mean = fc_mean;
        }
        self
    }
}

fn ci_or_point(values: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64, f64)> {
    match values.len() {
        0 => Ok((f64::NAN, f64::NAN, f64::NAN)),
        1 => Ok((values[0], values[0], values[0])),
        _ => mean_ci(values, 0.95, resamples, seed),
    }
}

/// Decodes every instance at `perturb_length(L̂, δ)` for each δ, where `L̂`
/// comes from one SmartCrop prediction at `tau` per instance.
pub fn sensitivity_sweep<O: LogitOracle>(
    oracle: &O,
    instances: &[Instance],
    cfg: &RunConfig,
    tau: f64,
    deltas: &[f64],
    scope: PerturbationScope,
) -> Result<SweepResult> {
    cfg.validate()?;
    let specs = deltas
        .iter()
        .map(|&d| PerturbationSpec::with_scope(d, scope))
        .collect::<Result<Vec<_>>>()?;
    if specs.is_empty() {
        return Err(Error::invalid("empty δ grid"));
    }
    let base = cfg.sc_config(tau);
    base.validate()?;
    let task = &cfg.task;
    let outcomes: Vec<std::result::Result<Vec<SweepRecord>, Failure>> = instances
        .par_iter()
        .map(|inst| {
            let fail = |e: Error| Failure {
                id: inst.id.clone(),
                method: format!("sweep-{tau}"),
                message: e.to_string(),
            };
            let plain =
                decode(oracle, &inst.prompt, task.l_new, task.steps, &base).map_err(fail)?;
            let l_hat = plain
                .crop
                .as_ref()
                .expect("smartcrop trace")
                .predicted_total_length;
            let canvas_len = plain.prompt_len + task.l_new;
            specs
                .iter()
                .map(|spec| {
                    let forced = perturb_length(l_hat, *spec, plain.prompt_len, canvas_len);
                    let trace = if forced == plain.target_len.expect("smartcrop trace") {
                        plain.clone()
                    } else {
                        let dcfg = base.clone().with_forced_length(forced);
                        decode(oracle, &inst.prompt, task.l_new, task.steps, &dcfg).map_err(fail)?
                    };
                    let generated = trace.generated(oracle.vocab().eos_id());
                    Ok(SweepRecord {
                        id: inst.id.clone(),
                        delta: spec.delta,
                        predicted_total_length: l_hat,
                        forced_length: forced,
                        prompt_len: plain.prompt_len,
                        true_len: inst.true_len,
                        metric: task.metric.score(&generated, &inst.reference),
                    })
                })
                .collect()
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.extend(r),
            Err(f) => failures.push(f),
        }
    }
    let rows = specs
        .iter()
        .map(|spec| {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.delta == spec.delta)
                .map(|r| r.metric)
                .collect();
            let (mean, ci_low, ci_high) = ci_or_point(&values, cfg.resamples, cfg.seed)?;
            Ok(SweepRow {
                delta: spec.delta,
                n: values.len(),
                mean,
                ci_low,
                ci_high,
                control_mean: None,
                fc_mean: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        tau,
        scope,
        records,
        failures,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlResult {
    pub repetitions: usize,
    pub seed: u64,
    pub donor_pool_size: usize,
    /// Per-instance metric averaged over repetitions.
    pub per_instance: Vec<(String, f64)>,
    pub failures: Vec<Failure>,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Decodes each instance at lengths drawn from other tasks' predictions.
///
/// `donor_new_tokens` holds predicted new-token counts `L̂ - L_p`; each
/// draw is rebased on the instance's prompt and clamped to its canvas.
pub fn shuffled_control<O: LogitOracle>(
    oracle: &O,
    instances: &[Instance],
    cfg: &RunConfig,
    donor_new_tokens: &[usize],
    repetitions: usize,
) -> Result<ControlResult> {
    cfg.validate()?;
    if donor_new_tokens.is_empty() {
        return Err(Error::invalid("donor length pool is empty"));
    }
    if repetitions == 0 {
        return Err(Error::invalid("control needs at least one repetition"));
    }
    let tau = cfg.taus.first().copied().unwrap_or(0.9);
    let base = cfg.sc_config(tau);
    let task = &cfg.task;
    let outcomes: Vec<std::result::Result<(String, f64), Failure>> =
        instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| {
                let mut total = 0.0;
                for rep in 0..repetitions {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream((rep * instances.len() + i) as u64);
                    let donor = donor_new_tokens[rng.gen_range(0..donor_new_tokens.len())];
                    let lp = inst.prompt.len();
                    let forced = (lp + donor).clamp(lp + 1, lp + task.l_new);
                    let dcfg = base.clone().with_forced_length(forced);
                    let trace = decode(oracle, &inst.prompt, task.l_new, task.steps, &dcfg)
                        .map_err(|e| Failure {
                            id: inst.id.clone(),
                            method: "control".into(),
                            message: e.to_string(),
                        })?;
                    let generated = trace.generated(oracle.vocab().eos_id());
                    total += task.metric.score(&generated, &inst.reference);
                }
                Ok((inst.id.clone(), total / repetitions as f64))
            })
            .collect();
    let mut per_instance = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(v) => per_instance.push(v),
            Err(f) => failures.push(f),
        }
    }
    let values: Vec<f64> = per_instance.iter().map(|v| v.1).collect();
    let (mean, ci_low, ci_high) = ci_or_point(&values, cfg.resamples, cfg.seed)?;
    Ok(ControlResult {
        repetitions,
        seed: cfg.seed,
        donor_pool_size: donor_new_tokens.len(),
        per_instance,
        failures,
        mean,
        ci_low,
        ci_high,
    })
}

/// First-pass predicted new-token counts `L̂ - L_p` for each instance.
pub fn predicted_new_tokens<O: LogitOracle>(
    oracle: &O,
    instances: &[Instance],
    l_new: usize,
    tau: f64,
) -> Result<Vec<usize>> {
    let result = invariance_study(oracle, instances, &[l_new], tau)?;
    Ok(result.records.into_iter().map(|r| r.delta_l_hat).collect())
}

/// Predicted new-token counts from SmartCrop records at `tau`.
pub fn donor_pool(records: &[InstanceRecord], tau: f64) -> Vec<usize> {
    records
        .iter()
        .filter(|r| r.tau == Some(tau))
        .filter_map(|r| r.predicted_total_length.map(|l| l - r.prompt_len))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRecord {
    pub id: String,
    pub l_new: usize,
    pub delta_l_hat: usize,
    /// Prediction sits at the canvas edge.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceSummary {
    pub l_new: usize,
    pub n: usize,
    pub min: usize,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: usize,
    pub mean: f64,
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceResult {
    pub tau: f64,
    pub records: Vec<InvarianceRecord>,
    pub summaries: Vec<InvarianceSummary>,
}

fn quantile(sorted: &[usize], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * (pos - lo as f64)
}

/// `L̂ - L_p` from the first pass for each prompt at each canvas size.
pub fn invariance_study<O: LogitOracle>(
    oracle: &O,
    instances: &[Instance],
    l_new_grid: &[usize],
    tau: f64,
) -> Result<InvarianceResult> {
    if l_new_grid.is_empty() || l_new_grid.contains(&0) {
        return Err(Error::invalid("L_new grid must be non-empty and positive"));
    }
    use crate::decoder::init_canvas;
    use crate::smartcrop::{eos_probabilities, predicted_length, survival_curve};
    let vocab = oracle.vocab();
    let per_size = l_new_grid
        .iter()
        .map(|&l_new| {
            instances
                .par_iter()
                .map(|inst| {
                    let canvas = init_canvas(&inst.prompt, l_new, vocab)?;
                    let logits = oracle.logits(&canvas)?;
                    let curve =
                        survival_curve(&eos_probabilities(&logits, vocab, canvas.prompt_len())?);
                    let d = predicted_length(&curve, tau)?;
                    let delta = d.predicted_new_tokens();
                    Ok(InvarianceRecord {
                        id: inst.id.clone(),
                        l_new,
                        delta_l_hat: delta,
                        truncated: delta == l_new,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries = per_size
        .iter()
        .zip(l_new_grid)
        .filter(|(recs, _)| !recs.is_empty())
        .map(|(recs, &l_new)| {
            let mut v: Vec<usize> = recs.iter().map(|r| r.delta_l_hat).collect();
            v.sort_unstable();
            InvarianceSummary {
                l_new,
                n: v.len(),
                min: v[0],
                q25: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q75: quantile(&v, 0.75),
                max: v[v.len() - 1],
                mean: v.iter().sum::<usize>() as f64 / v.len() as f64,
                truncated: recs.iter().filter(|r| r.truncated).count(),
            }
        })
        .collect();
    Ok(InvarianceResult {
        tau,
        records: per_size.into_iter().flatten().collect(),
        summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub bin_center: f64,
    pub mean_delta: f64,
    pub count: usize,
    pub low_confidence: bool,
}

pub const LOW_CONFIDENCE_COUNT: usize = 5;

/// Groups `(generated length, metric delta)` pairs into fixed-width bins.
pub fn correlation_bins(points: &[(usize, f64)], bin_width: usize) -> Result<Vec<Bin>> {
    if bin_width == 0 {
        return Err(Error::invalid("bin width must be positive"));
    }
    let mut bins: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(len, delta) in points {
        let e = bins.entry(len / bin_width).or_default();
        e.0 += delta;
        e.1 += 1;
    }
    Ok(bins
        .into_iter()
        .map(|(idx, (sum, count))| Bin {
            bin_center: (idx as f64 + 0.5) * bin_width as f64,
            mean_delta: sum / count as f64,
            count,
            low_confidence: count < LOW_CONFIDENCE_COUNT,
        })
        .collect())
}

/// SC generated length against SC - FC metric, paired by id.
pub fn paired_deltas(records: &[InstanceRecord], method: &str) -> Vec<(usize, f64)> {
    pair_records(records, FC_LABEL, method)
        .into_iter()
        .map(|(fc, sc)| (sc.generated_len, sc.metric - fc.metric))
        .collect()
}

pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Flattened invariance summary for CSV export.
pub fn write_invariance_csv<W: Write>(out: W, result: &InvarianceResult) -> Result<()> {
    write_csv(out, &result.summaries)
}

pub const REPORT_HEADER: [&str; 7] = [
    "Method",
    "L_p",
    "Avg. Processed Length",
    "Metric",
    "FLOPs Saved %",
    "Perf. Δ %",
    "stars",
];

fn fmt2(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite())
        .map(|x| format!("{x:.2}"))
        .unwrap_or_default()
}

/// Main-results table: one row per method, FC cells for savings and Δ empty.
pub fn write_report_csv<W: Write>(out: W, summaries: &[MethodSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for s in summaries {
        let method = if summaries.iter().any(|o| o.task != s.task) {
            format!("{} {}", s.task, s.method)
        } else {
            s.method.clone()
        };
        w.write_record([
            method,
            fmt2(Some(s.prompt_len)),
            fmt2(Some(s.avg_processed_len)),
            fmt2(Some(100.0 * s.metric)),
            fmt2(s.flops_saved_mean),
            fmt2(s.perf_delta_pct),
            s.stars.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Whether a run used FC or SmartCrop, for labels in outputs.
pub fn method_mode(label: &str) -> DecodeMode {
    if label == FC_LABEL {
        DecodeMode::FullContext
    } else {
        DecodeMode::SmartCrop
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScriptedOracle, Vocabulary};
    use crate::tasks::{copyk_instance, MetricKind};

    /// Emits EoS with certainty after `k` slots and the payload word before,
    /// reading `k` and the payload from a copy-k prompt.
    struct PerfectCopier {
        vocab: Vocabulary,
        bias: i64,
    }

    impl LogitOracle for PerfectCopier {
        fn vocab(&self) -> &Vocabulary {
            &self.vocab
        }

        fn logits(&self, canvas: &crate::decoder::Canvas) -> Result<crate::neural::Matrix> {
            let t = canvas.tokens();
            let digit = |x: u32| (x - crate::model::tokens::DIGIT_BASE) as i64;
            let k = (digit(t[2]) * 10 + digit(t[3]) + self.bias).max(0) as usize;
            let mut out = crate::neural::Matrix::filled(canvas.len(), self.vocab.size(), -30.0);
            for pos in canvas.masked_positions() {
                let slot = pos - canvas.prompt_len();
                let tok = if slot < k { t[1] } else { self.vocab.eos_id() };
                out.set(pos, tok as usize, 0.0);
            }
            Ok(out)
        }
    }

    fn copier(bias: i64) -> PerfectCopier {
        PerfectCopier {
            vocab: Vocabulary::synthetic(),
            bias,
        }
    }

    fn small_task() -> TaskSpec {
        TaskSpec {
            l_new: 24,
            steps: 24,
            ..TaskSpec::copyk_long()
        }
    }

    fn cfg() -> RunConfig {
        let mut c = RunConfig::new(small_task(), CostModel::new(100, 1, 50).unwrap());
        c.resamples = 200;
        c
    }

    fn instances() -> Vec<Instance> {
        (1..=12)
            .map(|k| copyk_instance(format!("i{k:02}"), k, k))
            .collect()
    }

    #[test]
    fn benchmark_summaries() {
        let run = run_benchmark(&copier(0), &instances(), &cfg()).unwrap();
        assert_eq!(run.records.len(), 12 * 6);
        assert!(run.failures.is_empty());
        let fc = &run.summaries[0];
        assert_eq!(fc.method, "FC");
        assert_eq!(fc.flops_saved_mean, None);
        assert_eq!(fc.perf_delta_pct, None);
        assert_eq!(fc.metric, 1.0);
        for s in &run.summaries[1..] {
            assert_eq!(s.metric, 1.0);
            assert!(s.flops_saved_mean.unwrap() > 0.0);
            assert_eq!(s.perf_delta_pct, Some(0.0));
        }
        let saved: Vec<f64> = run.summaries[1..]
            .iter()
            .map(|s| s.flops_saved_mean.unwrap())
            .collect();
        assert!(saved.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn tau_zero_crops_to_one_slot() {
        let mut c = cfg();
        c.taus = vec![0.0];
        let run = run_benchmark(&copier(0), &instances(), &c).unwrap();
        for r in run.method_records("SC-0") {
            assert_eq!(r.predicted_total_length, Some(r.prompt_len + 1));
        }
    }

    #[test]
    fn decode_failures_are_recorded() {
        let mut insts = instances();
        insts[3].prompt = vec![0, 0, 0, 0, 0]; // mask tokens in the prompt
        let run = run_benchmark(&copier(0), &insts[..6], &cfg()).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(run.failures.len(), 6);
        assert_eq!(run.summaries[1].n, 5);
        assert_eq!(run.summaries[1].failures, 1);
    }

    #[test]
    fn sweep_pigeonhole_and_identity() {
        let c = cfg();
        let insts = instances();
        let sweep = sensitivity_sweep(
            &copier(0),
            &insts,
            &c,
            0.9,
            &PerturbationSpec::sweep_grid(),
            PerturbationScope::Total,
        )
        .unwrap();
        assert_eq!(sweep.rows.len(), 11);
        assert!(sweep.rows.windows(2).all(|w| w[0].delta < w[1].delta));
        for r in &sweep.records {
            if r.forced_length - r.prompt_len < r.true_len.unwrap() {
                assert_eq!(r.metric, 0.0);
            }
        }
        let run = run_benchmark(&copier(0), &insts, &c).unwrap();
        let sc = run.summaries.iter().find(|s| s.method == "SC-0.9").unwrap();
        assert_eq!(sweep.rows[5].mean, sc.metric);
        assert!(sweep.rows[0].mean < sweep.rows[5].mean);
    }

    #[test]
    fn control_behaviour() {
        let c = cfg();
        let fixed: Vec<Instance> = (0..8)
            .map(|i| copyk_instance(format!("f{i}"), i, 6))
            .collect();
        let run = run_benchmark(&copier(0), &fixed, &c).unwrap();
        let pool = donor_pool(&run.records, 0.9);
        let ctl = shuffled_control(&copier(0), &fixed, &c, &pool, 5).unwrap();
        let sc = run.summaries.iter().find(|s| s.method == "SC-0.9").unwrap();
        assert_eq!(ctl.mean, sc.metric);
        assert_eq!(
            ctl,
            shuffled_control(&copier(0), &fixed, &c, &pool, 5).unwrap()
        );
        let short = shuffled_control(&copier(0), &instances()[4..], &c, &[1, 2, 3], 5).unwrap();
        assert_eq!(short.mean, 0.0);
        assert!(shuffled_control(&copier(0), &fixed, &c, &[], 5).is_err());
    }

    #[test]
    fn invariance_truncates_at_canvas() {
        let insts: Vec<Instance> = (0..10)
            .map(|i| copyk_instance(format!("v{i}"), i, 10 + 3 * i))
            .collect();
        let r = invariance_study(&copier(0), &insts, &[16, 64], 0.9).unwrap();
        let small = &r.summaries[0];
        assert_eq!(small.max, 16);
        assert!(small.truncated > 0);
        assert!(r
            .records
            .iter()
            .all(|x| x.delta_l_hat >= 1 && x.delta_l_hat <= x.l_new));
        assert_eq!(r.summaries[1].truncated, 0);
    }

    #[test]
    fn bins_by_hand() {
        assert!(correlation_bins(&[(3, 0.0), (40, 0.0)], 10)
            .unwrap()
            .iter()
            .all(|b| b.mean_delta == 0.0));
        let one = correlation_bins(&[(1, 1.0), (2, -1.0), (3, 3.0)], 100).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].mean_delta, 1.0);
        let pts = [
            (2, 1.0),
            (5, 0.0),
            (9, -1.0),
            (12, 1.0),
            (15, 1.0),
            (19, 0.5),
        ];
        let bins = correlation_bins(&pts, 10).unwrap();
        assert_eq!(bins.len(), 2);
        assert_eq!((bins[0].bin_center, bins[0].count), (5.0, 3));
        assert_eq!(bins[0].mean_delta, 0.0);
        assert_eq!(bins[1].bin_center, 15.0);
        assert!((bins[1].mean_delta - 2.5 / 3.0).abs() < 1e-15);
        assert!(bins.iter().all(|b| b.low_confidence));
    }

    #[test]
    fn report_layout() {
        let run = run_benchmark(&copier(0), &instances(), &cfg()).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &run.summaries).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("Method,L_p,Avg. Processed Length,Metric,FLOPs Saved %,Perf. Δ %,stars")
        );
        assert!(lines.next().unwrap().ends_with(",,,"));
    }

    #[test]
    fn runs_are_deterministic() {
        let a = run_benchmark(&copier(1), &instances(), &cfg()).unwrap();
        let b = run_benchmark(&copier(1), &instances(), &cfg()).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_jsonl(&mut x, &a.records).unwrap();
        write_jsonl(&mut y, &b.records).unwrap();
        assert_eq!(x, y);
        assert_eq!(a.summaries, b.summaries);
    }

    #[test]
    fn scripted_oracle_runs_end_to_end() {
        let v = Vocabulary::synthetic();
        let oracle = ScriptedOracle::new(v, vec![0.0, 0.3, 0.6, 0.9], vec![20]).unwrap();
        let task = TaskSpec {
            metric: MetricKind::Rouge1,
            ..small_task()
        };
        let run = run_benchmark(
            &oracle,
            &instances()[..3],
            &RunConfig {
                resamples: 50,
                ..RunConfig::new(task, CostModel::new(1, 0, 0).unwrap())
            },
        )
        .unwrap();
        assert_eq!(run.summaries.len(), 6);
    }
}
