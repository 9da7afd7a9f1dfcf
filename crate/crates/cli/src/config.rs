//! Run configuration, read from TOML or from a previous run's manifest.

use std::fs;
use std::path::{Path, PathBuf};

use canvascrop::decoder::ScheduleMode;
use canvascrop::experiments::{RunConfig, TAU_GRID};
use canvascrop::flops::CostModel;
use canvascrop::model::{DiffusionModel, ModelConfig, TrainingConfig, Vocabulary};
use canvascrop::neural::OptimizerConfig;
use canvascrop::smartcrop::{PerturbationScope, PerturbationSpec};
use canvascrop::tasks::{Split, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root directory; each subcommand writes to `<output>/<subcommand>/`.
    pub output: PathBuf,
    pub weights: Option<PathBuf>,
    /// Decode threads; 0 lets the runtime decide.
    pub workers: usize,
    pub model: ModelSection,
    pub train: TrainSection,
    pub task: TaskSection,
    pub decode: DecodeSection,
    pub cost: CostSection,
    pub stats: StatsSection,
    pub sweep: SweepSection,
    pub control: ControlSection,
    pub invariance: InvarianceSection,
    pub bins: BinsSection,
    pub report: ReportSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            output: PathBuf::from("out"),
            weights: None,
            workers: 0,
            model: ModelSection::default(),
            train: TrainSection::default(),
            task: TaskSection::default(),
            decode: DecodeSection::default(),
            cost: CostSection::default(),
            stats: StatsSection::default(),
            sweep: SweepSection::default(),
            control: ControlSection::default(),
            invariance: InvarianceSection::default(),
            bins: BinsSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_positions: m.max_positions,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub tasks: Vec<String>,
    /// Examples per task.
    pub examples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub variable_length: bool,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            tasks: vec!["copyk-long".into()],
            examples: 2000,
            epochs: 12,
            batch_size: t.batch_size,
            learning_rate: t.optimizer.learning_rate,
            grad_clip: t.grad_clip.unwrap_or(0.0),
            variable_length: t.variable_length,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub preset: String,
    pub instances: usize,
    pub seed: u64,
    pub split: Split,
    pub l_new: Option<usize>,
    pub steps: Option<usize>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            preset: "copyk-long".into(),
            instances: 100,
            seed: 1,
            split: Split::Eval,
            l_new: None,
            steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub taus: Vec<f64>,
    /// Unset follows the task's default.
    pub schedule_mode: Option<ScheduleMode>,
    pub reuse_first_pass: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            taus: TAU_GRID.to_vec(),
            schedule_mode: None,
            reuse_first_pass: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostPreset {
    /// Coefficients derived from the loaded model.
    Model,
    Llada8b,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub preset: CostPreset,
    pub linear: Option<u64>,
    pub quadratic: Option<u64>,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            preset: CostPreset::Model,
            linear: None,
            quadratic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsSection {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            resamples: canvascrop::stats::DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub tau: f64,
    pub deltas: Vec<f64>,
    pub scope: PerturbationScope,
    pub include_fc: bool,
    pub include_control: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            tau: 0.9,
            deltas: PerturbationSpec::sweep_grid(),
            scope: PerturbationScope::Total,
            include_fc: true,
            include_control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSection {
    pub donor_tasks: Vec<String>,
    pub donor_tau: f64,
    pub donor_instances: usize,
    pub repetitions: usize,
}

impl Default for ControlSection {
    fn default() -> Self {
        Self {
            donor_tasks: vec!["arith".into(), "verbose-qa".into()],
            donor_tau: 0.9,
            donor_instances: 100,
            repetitions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvarianceSection {
    pub l_new_grid: Vec<usize>,
    pub tau: f64,
}

impl Default for InvarianceSection {
    fn default() -> Self {
        Self {
            l_new_grid: vec![32, 64, 128, 256],
            tau: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinsSection {
    pub width: usize,
    pub tau: f64,
}

impl Default for BinsSection {
    fn default() -> Self {
        Self { width: 5, tau: 0.9 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// `summary.csv` files from eval runs.
    pub summaries: Vec<PathBuf>,
}

#[derive(Deserialize)]
struct ManifestConfig {
    config: Config,
}

impl Config {
    /// Reads TOML, or the `config` field of a `manifest.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str::<ManifestConfig>(&text)
                .map(|m| m.config)
                .map_err(|e| CliError::usage(format!("invalid manifest {}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            max_positions: self.model.max_positions,
            vocab: Vocabulary::synthetic(),
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            variable_length: self.train.variable_length,
            grad_clip: (self.train.grad_clip > 0.0).then_some(self.train.grad_clip),
            optimizer: OptimizerConfig {
                learning_rate: self.train.learning_rate,
                ..OptimizerConfig::default()
            },
            seed: self.train.seed,
        }
    }

    pub fn task_spec(&self) -> Result<TaskSpec, CliError> {
        let mut spec = TaskSpec::preset(&self.task.preset).map_err(CliError::usage_from)?;
        if let Some(l) = self.task.l_new {
            spec.l_new = l;
        }
        if let Some(s) = self.task.steps {
            spec.steps = s;
        }
        spec.validate().map_err(CliError::usage_from)?;
        Ok(spec)
    }

    pub fn cost_model(&self, model: &DiffusionModel) -> Result<CostModel, CliError> {
        match self.cost.preset {
            CostPreset::Model => Ok(CostModel::from_model(model)),
            CostPreset::Llada8b => Ok(CostModel::llada_8b()),
            CostPreset::Custom => {
                let linear = self
                    .cost
                    .linear
                    .ok_or_else(|| CliError::usage("cost.preset = \"custom\" needs cost.linear"))?;
                CostModel::new(linear, self.cost.quadratic.unwrap_or(0), 0)
                    .map_err(CliError::usage_from)
            }
        }
    }

    pub fn run_config(&self, task: TaskSpec, cost: CostModel) -> Result<RunConfig, CliError> {
        let mut run = RunConfig::new(task, cost);
        run.taus = self.decode.taus.clone();
        if let Some(mode) = self.decode.schedule_mode {
            run.schedule_mode = mode;
        }
        run.reuse_first_pass = self.decode.reuse_first_pass;
        run.seed = self.stats.seed;
        run.resamples = self.stats.resamples;
        run.validate().map_err(CliError::usage_from)?;
        Ok(run)
    }
}
