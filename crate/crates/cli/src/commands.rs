use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use canvascrop::decoder::{
    build_schedule, decode as run_decode, DecodeConfig, DecodeMode, ScheduleMode,
};
use canvascrop::experiments::{
    correlation_bins, paired_deltas, predicted_new_tokens, run_benchmark, sc_label,
    sensitivity_sweep, shuffled_control, write_csv, write_jsonl, write_report_csv, Failure,
    MethodSummary, RunConfig, FC_LABEL,
};
use canvascrop::flops::{savings, step_flops, trace_flops, CostModel};
use canvascrop::model::{
    load_weights_for, save_weights, train_with_progress, DiffusionModel, Vocabulary,
};
use canvascrop::tasks::{Instance, Split, TaskSpec};
use serde::Serialize;

use crate::config::Config;
use crate::manifest::{sha256_file, RunManifest};
use crate::{CliError, Common, DecodeArgs, Status};

const P_VALUE_CONVENTION: &str =
    "two-sided: 2 * min(share of resampled means <= 0, share >= 0), clamped to [2/(R+1), 1]";

struct Run {
    cfg: Config,
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(common: &Common, subcommand: &str) -> Result<Self, CliError> {
        let mut cfg = match &common.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(out) = &common.output {
            cfg.output = out.clone();
        }
        if let Some(w) = &common.weights {
            cfg.weights = Some(w.clone());
        }
        if cfg.workers > 0 {
            // Fails only if a pool already exists, which is harmless here.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build_global();
        }
        let dir = cfg.output.join(subcommand);
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
        let manifest = RunManifest::new(subcommand, &cfg, common.timestamps);
        Ok(Self { cfg, dir, manifest })
    }

    fn load_model(&mut self) -> Result<DiffusionModel, CliError> {
        let path =
            self.cfg.weights.clone().ok_or_else(|| {
                CliError::usage("no weights given (set `weights` or pass --weights)")
            })?;
        let model = load_weights_for(&path, &Vocabulary::synthetic())
            .map_err(|e| CliError::usage(format!("cannot load weights {}: {e}", path.display())))?;
        self.manifest.weights_sha256 = Some(sha256_file(&path)?);
        Ok(model)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn write_jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(path)?);
        write_jsonl(&mut w, items)?;
        w.flush()?;
        Ok(())
    }

    fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let path = self.path(name);
        write_csv(BufWriter::new(File::create(path)?), rows)?;
        Ok(())
    }

    fn finish(self, failures: &[Failure], successes: usize) -> Result<Status, CliError> {
        self.manifest.write(&self.dir)?;
        if successes == 0 && !failures.is_empty() {
            return Err(CliError::failed(format!(
                "every instance failed; first error: {}",
                failures[0].message
            )));
        }
        Ok(if failures.is_empty() {
            Status::Ok
        } else {
            Status::Partial
        })
    }
}

fn instances(cfg: &Config, spec: &TaskSpec) -> Result<Vec<Instance>, CliError> {
    let out = spec.generate_split(cfg.task.seed, cfg.task.instances, cfg.task.split);
    if out.is_empty() {
        return Err(CliError::usage("task.instances must be positive"));
    }
    Ok(out)
}

fn check_fits(model: &DiffusionModel, insts: &[Instance], l_new: usize) -> Result<(), CliError> {
    let longest = insts.iter().map(|i| i.prompt.len()).max().unwrap_or(0) + l_new;
    let limit = model.config().max_positions;
    if longest > limit {
        return Err(CliError::usage(format!(
            "canvas of {longest} positions exceeds the model's max_positions {limit}"
        )));
    }
    Ok(())
}

pub fn train(common: &Common) -> Result<Status, CliError> {
    let mut run = Run::start(common, "train")?;
    let cfg = run.cfg.clone();
    let mut model =
        DiffusionModel::new(cfg.model_config(), cfg.model.seed).map_err(CliError::usage_from)?;
    let mut corpus = Vec::new();
    for (i, name) in cfg.train.tasks.iter().enumerate() {
        let spec = TaskSpec::preset(name).map_err(CliError::usage_from)?;
        let seed = cfg.train.seed.wrapping_add(i as u64);
        corpus.extend(
            spec.generate_split(seed, cfg.train.examples, Split::Train)
                .iter()
                .map(|inst| inst.training_item(spec.l_new)),
        );
    }
    let tc = cfg.training_config();
    let losses = train_with_progress(&mut model, &corpus, &tc, |step, loss| {
        if (step + 1) % 100 == 0 {
            eprintln!("step {:>6}  loss {loss:.5}", step + 1);
        }
    })
    .map_err(|e| match e {
        canvascrop::Error::InvalidInput(_) => CliError::usage_from(e),
        other => CliError::from(other),
    })?;

    let loss_path = run.path("loss.csv");
    let mut w = csv::Writer::from_path(&loss_path).map_err(|e| CliError::failed(e.to_string()))?;
    w.write_record(["step", "loss"])
        .map_err(|e| CliError::failed(e.to_string()))?;
    for (step, loss) in losses.iter().enumerate() {
        w.write_record([step.to_string(), loss.to_string()])
            .map_err(|e| CliError::failed(e.to_string()))?;
    }
    w.flush()?;

    let weights = run.path("weights.bin");
    save_weights(&model, &weights)?;
    run.manifest.weights_sha256 = Some(sha256_file(&weights)?);
    run.manifest
        .note("training_examples", corpus.len().to_string());
    run.manifest
        .note("optimizer_steps", losses.len().to_string());
    println!(
        "trained {} steps on {} examples; final loss {:.5}; weights at {}",
        losses.len(),
        corpus.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        weights.display()
    );
    run.finish(&[], 1)
}

#[derive(Serialize)]
struct DecodeOutput<'a> {
    #[serde(flatten)]
    record: canvascrop::decoder::TraceRecord,
    passes: &'a [canvascrop::decoder::StepRecord],
    flops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    fc_flops: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flops_saved_pct: Option<f64>,
}

pub fn decode(args: &DecodeArgs) -> Result<Status, CliError> {
    let mode: DecodeMode = args.mode.parse().map_err(CliError::usage_from)?;
    let schedule_mode: ScheduleMode = args.schedule_mode.parse().map_err(CliError::usage_from)?;
    let mut dcfg = match mode {
        DecodeMode::FullContext => {
            if args.tau.is_some() {
                return Err(CliError::usage("--tau only applies to --mode sc"));
            }
            if args.forced_length.is_some() {
                return Err(CliError::usage("--forced-length only applies to --mode sc"));
            }
            DecodeConfig::full_context(schedule_mode)
        }
        DecodeMode::SmartCrop => DecodeConfig::smartcrop(args.tau.unwrap_or(0.9), schedule_mode)
            .with_reuse(!args.no_reuse),
    };
    dcfg.forced_length = args.forced_length;
    dcfg.validate().map_err(CliError::usage_from)?;
    if args.l_new == 0 || args.steps == Some(0) {
        return Err(CliError::usage("--l-new and --steps must be positive"));
    }
    let steps = args.steps.unwrap_or(args.l_new);

    let mut run = Run::start(&args.common, "decode")?;
    let model = run.load_model()?;
    let vocab = model.vocab().clone();
    let prompt = vocab.encode(&args.prompt).map_err(CliError::usage_from)?;
    if prompt.len() + args.l_new > model.config().max_positions {
        return Err(CliError::usage(format!(
            "canvas of {} positions exceeds the model's max_positions {}",
            prompt.len() + args.l_new,
            model.config().max_positions
        )));
    }
    let cost = run.cfg.cost_model(&model)?;
    let trace = run_decode(&model, &prompt, args.l_new, steps, &dcfg)?;
    let flops = trace_flops(&trace, &cost);
    let (fc_flops, saved) = if mode == DecodeMode::SmartCrop {
        let fc = fc_equivalent(&cost, prompt.len() + args.l_new, args.l_new, steps)?;
        (Some(fc), Some(savings(fc, flops)?))
    } else {
        (None, None)
    };
    let out = DecodeOutput {
        record: trace.record("prompt", &vocab),
        passes: &trace.passes,
        flops,
        fc_flops,
        flops_saved_pct: saved,
    };
    let path = run.path("trace.json");
    let mut text = serde_json::to_string(&out).map_err(|e| CliError::failed(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;

    println!("{}", out.record.generated_text);
    if let (Some(crop), Some(fc), Some(saved)) = (&trace.crop, fc_flops, saved) {
        eprintln!(
            "predicted length {} (new tokens {}, threshold reached: {}), FLOPs {flops} vs FC {fc} ({saved:.2}% saved)",
            crop.predicted_total_length,
            crop.predicted_new_tokens(),
            crop.threshold_reached
        );
    }
    run.manifest.note("prompt", args.prompt.clone());
    run.manifest.note("mode", args.mode.clone());
    run.manifest.note(
        "decode_config",
        serde_json::to_string(&dcfg).unwrap_or_default(),
    );
    run.manifest.note("l_new", args.l_new.to_string());
    run.manifest.note("steps", steps.to_string());
    run.finish(&[], 1)
}

/// Cost of a full-context decode with the same shape.
fn fc_equivalent(
    cost: &CostModel,
    canvas_len: usize,
    l_new: usize,
    steps: usize,
) -> Result<u64, CliError> {
    let active = build_schedule(l_new, steps)?.active_steps() as u64;
    Ok(step_flops(canvas_len, cost).saturating_mul(active))
}

fn setup_benchmark(run: &mut Run) -> Result<(DiffusionModel, RunConfig, Vec<Instance>), CliError> {
    let model = run.load_model()?;
    let spec = run.cfg.task_spec()?;
    let cost = run.cfg.cost_model(&model)?;
    let rc = run.cfg.run_config(spec, cost)?;
    let insts = instances(&run.cfg, &rc.task)?;
    check_fits(&model, &insts, rc.task.l_new)?;
    run.manifest
        .note("schedule_mode", format!("{:?}", rc.schedule_mode));
    run.manifest.note("p_value_convention", P_VALUE_CONVENTION);
    Ok((model, rc, insts))
}

pub fn eval(common: &Common) -> Result<Status, CliError> {
    let mut run = Run::start(common, "eval")?;
    let (model, rc, insts) = setup_benchmark(&mut run)?;
    let result = run_benchmark(&model, &insts, &rc)?;
    run.write_jsonl("records.jsonl", &result.records)?;
    run.write_csv("summary.csv", &result.summaries)?;
    let bins_method = sc_label(run.cfg.bins.tau);
    let deltas = paired_deltas(&result.records, &bins_method);
    let bins = correlation_bins(&deltas, run.cfg.bins.width).map_err(CliError::usage_from)?;
    run.write_csv("bins.csv", &bins)?;
    run.write_jsonl("failures.jsonl", &result.failures)?;
    let report_path = run.path("report.csv");
    write_report_csv(
        BufWriter::new(File::create(report_path)?),
        &result.summaries,
    )?;
    for s in &result.summaries {
        println!(
            "{:<8} n={:<4} metric={:.4} processed={:.1} saved={} p={}",
            s.method,
            s.n,
            s.metric,
            s.avg_processed_len,
            s.flops_saved_mean
                .map(|v| format!("{v:.2}%"))
                .unwrap_or_else(|| "-".into()),
            s.p_value
                .map(|v| format!("{v:.4}{}", s.stars))
                .unwrap_or_else(|| "-".into()),
        );
    }
    run.finish(&result.failures, result.records.len())
}

/// First-pass predicted new-token counts pooled over the donor tasks.
fn donor_pool(run: &Run, model: &DiffusionModel) -> Result<Vec<usize>, CliError> {
    let c = &run.cfg.control;
    let mut pool = Vec::new();
    for name in &c.donor_tasks {
        let spec = TaskSpec::preset(name).map_err(CliError::usage_from)?;
        let insts = spec.generate_split(run.cfg.task.seed, c.donor_instances, Split::Eval);
        check_fits(model, &insts, spec.l_new)?;
        pool.extend(predicted_new_tokens(
            model,
            &insts,
            spec.l_new,
            c.donor_tau,
        )?);
    }
    if pool.is_empty() {
        return Err(CliError::usage(
            "control.donor_tasks yields an empty donor pool",
        ));
    }
    Ok(pool)
}

#[derive(Serialize)]
struct ControlRow {
    task: String,
    repetitions: usize,
    seed: u64,
    donor_pool_size: usize,
    mean: f64,
    ci_low: f64,
    ci_high: f64,
}

pub fn control(common: &Common) -> Result<Status, CliError> {
    let mut run = Run::start(common, "control")?;
    let (model, rc, insts) = setup_benchmark(&mut run)?;
    let pool = donor_pool(&run, &model)?;
    let result = shuffled_control(&model, &insts, &rc, &pool, run.cfg.control.repetitions)
        .map_err(CliError::usage_from)?;
    #[derive(Serialize)]
    struct PerInstance<'a> {
        id: &'a str,
        mean_metric: f64,
    }
    let per: Vec<PerInstance> = result
        .per_instance
        .iter()
        .map(|(id, m)| PerInstance {
            id,
            mean_metric: *m,
        })
        .collect();
    run.write_jsonl("control.jsonl", &per)?;
    run.write_csv(
        "control.csv",
        &[ControlRow {
            task: rc.task.name.clone(),
            repetitions: result.repetitions,
            seed: result.seed,
            donor_pool_size: result.donor_pool_size,
            mean: result.mean,
            ci_low: result.ci_low,
            ci_high: result.ci_high,
        }],
    )?;
    run.write_jsonl("failures.jsonl", &result.failures)?;
    run.manifest
        .note("control_repetitions", result.repetitions.to_string());
    run.manifest.note(
        "control_draws",
        "donor new-token counts, rebased on each prompt",
    );
    println!(
        "control mean {:.4} [{:.4}, {:.4}] over {} instances, pool of {}",
        result.mean,
        result.ci_low,
        result.ci_high,
        result.per_instance.len(),
        result.donor_pool_size
    );
    run.finish(&result.failures, result.per_instance.len())
}

pub fn sweep(common: &Common) -> Result<Status, CliError> {
    let mut run = Run::start(common, "sweep")?;
    let (model, rc, insts) = setup_benchmark(&mut run)?;
    let s = run.cfg.sweep.clone();
    let mut result = sensitivity_sweep(&model, &insts, &rc, s.tau, &s.deltas, s.scope)
        .map_err(CliError::usage_from)?;
    let mut failures = std::mem::take(&mut result.failures);
    let fc_mean = if s.include_fc {
        let fc_cfg = RunConfig {
            taus: vec![],
            ..rc.clone()
        };
        let fc = run_benchmark(&model, &insts, &fc_cfg)?;
        failures.extend(fc.failures);
        fc.summaries
            .iter()
            .find(|x| x.method == FC_LABEL)
            .map(|x| x.metric)
    } else {
        None
    };
    let control_mean = if s.include_control {
        let pool = donor_pool(&run, &model)?;
        let ctl_cfg = RunConfig {
            taus: vec![s.tau],
            ..rc.clone()
        };
        let ctl = shuffled_control(&model, &insts, &ctl_cfg, &pool, run.cfg.control.repetitions)
            .map_err(CliError::usage_from)?;
        failures.extend(ctl.failures);
        Some(ctl.mean)
    } else {
        None
    };
    let result = result.with_baselines(control_mean, fc_mean);

    let path = run.path("sweep.csv");
    write_sweep_csv(&path, &result.rows)?;
    run.write_jsonl("sweep_records.jsonl", &result.records)?;
    run.write_jsonl("failures.jsonl", &failures)?;
    run.manifest.note(
        "control_repetitions",
        run.cfg.control.repetitions.to_string(),
    );
    for row in &result.rows {
        println!(
            "δ={:+.1}  mean={:.4}  [{:.4}, {:.4}]",
            row.delta, row.mean, row.ci_low, row.ci_high
        );
    }
    let successes = result.records.len();
    run.finish(&failures, successes)
}

fn write_sweep_csv(
    path: &Path,
    rows: &[canvascrop::experiments::SweepRow],
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::failed(e.to_string()))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record([
        "delta",
        "mean",
        "ci_low",
        "ci_high",
        "control_mean",
        "fc_mean",
        "n",
    ])
    .map_err(|e| CliError::failed(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.delta.to_string(),
            r.mean.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            opt(r.control_mean),
            opt(r.fc_mean),
            r.n.to_string(),
        ])
        .map_err(|e| CliError::failed(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn invariance(common: &Common) -> Result<Status, CliError> {
    let mut run = Run::start(common, "invariance")?;
    let model = run.load_model()?;
    let spec = run.cfg.task_spec()?;
    let insts = instances(&run.cfg, &spec)?;
    let grid = run.cfg.invariance.l_new_grid.clone();
    for &l in &grid {
        check_fits(&model, &insts, l)?;
    }
    let result =
        canvascrop::experiments::invariance_study(&model, &insts, &grid, run.cfg.invariance.tau)
            .map_err(CliError::usage_from)?;
    run.write_csv("invariance.csv", &result.summaries)?;
    run.write_jsonl("invariance.jsonl", &result.records)?;
    for s in &result.summaries {
        println!(
            "L_new={:<5} median ΔL̂={:<6} q25={:<6} q75={:<6} max={:<5} truncated={}",
            s.l_new, s.median, s.q25, s.q75, s.max, s.truncated
        );
    }
    run.finish(&[], result.records.len())
}

pub fn report(common: &Common) -> Result<Status, CliError> {
    let mut run = Run::start(common, "report")?;
    if run.cfg.report.summaries.is_empty() {
        return Err(CliError::usage(
            "report.summaries lists no summary.csv files",
        ));
    }
    let mut rows: Vec<MethodSummary> = Vec::new();
    for path in run.cfg.report.summaries.clone() {
        let mut reader = csv::Reader::from_path(&path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        for row in reader.deserialize() {
            rows.push(row.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?);
        }
    }
    let path = run.path("report.csv");
    write_report_csv(BufWriter::new(File::create(&path)?), &rows)?;
    print!("{}", fs::read_to_string(&path)?);
    run.finish(&[], rows.len())
}
