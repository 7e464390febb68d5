use std::path::{Path, PathBuf};

use clap::Args;
use difflora::adapters::AdapterPlacement;
use difflora::analysis::QueryRows;
use difflora::attention::LambdaMode;
use difflora::model::{LambdaConfig, ModelConfig, Variant};
use difflora::tasks::{IclSpec, NeedleSpec};
use difflora::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSpec {
    Needle(NeedleSpec),
    Icl(IclSpec),
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Needle(NeedleSpec::default())
    }
}

impl TaskSpec {
    pub fn seed(&self) -> u64 {
        match self {
            TaskSpec::Needle(s) => s.seed,
            TaskSpec::Icl(s) => s.seed,
        }
    }

    pub fn with_seed_and_count(&self, seed: u64, n: usize) -> TaskSpec {
        match self {
            TaskSpec::Needle(s) => TaskSpec::Needle(NeedleSpec { seed, n_examples: n, ..s.clone() }),
            TaskSpec::Icl(s) => TaskSpec::Icl(IclSpec { seed, n_examples: n, ..s.clone() }),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    /// Full checkpoint of a pretrained base; a seeded random base otherwise.
    pub base_checkpoint: Option<PathBuf>,
    /// Adapter checkpoint to evaluate or analyze.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Size of the held-out set written by gen-data; its seed is the task seed + 1.
    pub n_examples: usize,
    pub query_rows: QueryRows,
    /// Examples averaged by attn-report.
    pub n_probes: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { n_examples: 500, query_rows: QueryRows::Last, n_probes: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    pub seq_len: usize,
    pub seed: u64,
    /// Check only the configured model instead of the six-variant grid.
    pub configured_only: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, tolerance: 1e-4, seq_len: 8, seed: 0, configured_only: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Full-parameter training settings used by `pretrain`.
    pub pretrain: Option<TrainConfig>,
    pub task: TaskSpec,
    pub paths: Paths,
    pub eval: EvalOptions,
    pub grad_check: GradCheckOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        match &self.task {
            TaskSpec::Needle(s) => s.validate()?,
            TaskSpec::Icl(s) => s.validate()?,
        }
        let g = &self.grad_check;
        if !(g.eps > 0.0 && g.tolerance > 0.0) || g.seq_len == 0 {
            return Err(CliError::input("grad_check eps, tolerance and seq_len must be positive"));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        self.paths.out_dir.clone().ok_or_else(|| CliError::input("paths.out_dir is not set"))
    }

    pub fn require<'a>(&self, p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
        let path = p.as_deref().ok_or_else(|| CliError::input(format!("paths.{what} is not set")))?;
        if !path.exists() {
            return Err(CliError::input(format!("{what} {} does not exist", path.display())));
        }
        Ok(path)
    }
}

/// Flat command-line overrides applied on top of the JSON config.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// difflora-neg | difflora-both | full-lora | baseline
    #[arg(long)]
    pub variant: Option<String>,
    /// Adapter rank (per adapter; difflora-both uses it for both terms).
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// fixed:<value> or learnable:<init>
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub group_norm: Option<bool>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seeds the model, the task and the training order together.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_lambda(s: &str) -> Result<LambdaConfig, CliError> {
    let (mode, value) = s
        .split_once(':')
        .ok_or_else(|| CliError::input(format!("--lambda expects mode:value, got {s}")))?;
    let init: f64 = value
        .parse()
        .map_err(|_| CliError::input(format!("--lambda value {value} is not a number")))?;
    let mode = match mode {
        "fixed" => LambdaMode::Fixed,
        "learnable" => LambdaMode::Learnable,
        other => return Err(CliError::input(format!("unknown lambda mode {other}"))),
    };
    Ok(LambdaConfig { mode, init })
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        let current_rank = cfg.model.placement.map(|p| p.rank_negative).unwrap_or(8);
        let rank = self.rank.unwrap_or(current_rank);
        if let Some(v) = &self.variant {
            let (variant, placement) = match v.as_str() {
                "difflora-neg" => (Variant::DiffLora, Some(AdapterPlacement::negative_only(rank))),
                "difflora-both" => (Variant::DiffLora, Some(AdapterPlacement::both_terms(rank))),
                "full-lora" => (Variant::FullLora, cfg.model.placement.or(Some(AdapterPlacement::negative_only(rank)))),
                "baseline" => (Variant::Baseline, None),
                other => return Err(CliError::input(format!("unknown variant {other}"))),
            };
            cfg.model.variant = variant;
            cfg.model.placement = placement;
        } else if let (Some(r), Some(p)) = (self.rank, cfg.model.placement.as_mut()) {
            p.rank_negative = r;
            if p.rank_positive > 0 {
                p.rank_positive = r;
            }
        }
        if let Some(a) = self.alpha {
            cfg.model.lora_alpha = Some(a);
        }
        if let Some(l) = &self.lambda {
            cfg.model.lambda = parse_lambda(l)?;
        }
        if let Some(g) = self.group_norm {
            cfg.model.group_norm = g;
        }
        if let Some(s) = self.steps {
            cfg.train.steps = Some(s);
            cfg.train.epochs = None;
        }
        if let Some(lr) = self.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(seed) = self.seed {
            cfg.model.seed = seed;
            cfg.train.seed = seed;
            cfg.task = cfg.task.with_seed_and_count(seed, self.count(&cfg.task));
        }
        if let Some(out) = &self.out {
            cfg.paths.out_dir = Some(out.clone());
        }
        Ok(())
    }

    fn count(&self, task: &TaskSpec) -> usize {
        match task {
            TaskSpec::Needle(s) => s.n_examples,
            TaskSpec::Icl(s) => s.n_examples,
        }
    }
}
