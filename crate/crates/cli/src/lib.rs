//! Subcommands behind the `difflora` executable.

pub mod config;

use std::fmt;
use std::io::Write;
use std::path::Path;

use difflora::adapters::AdapterPlacement;
use difflora::analysis::{average_reports, compare_reports, probe_report, AttnMassReport, Component};
use difflora::attention::LambdaMode;
use difflora::model::{
    apply_adapter_checkpoint, build_base, inject_adapters, load_checkpoint, write_checkpoint, CheckpointKind,
    LambdaConfig, ModelConfig, ParamRole, ToyModel, Variant,
};
use difflora::tasks::{
    evaluate_accuracy, gen_icl_classification, gen_needle, parse_icl_answer, parse_needle_answer, read_jsonl,
    write_jsonl, LabeledExample, LookupOracle,
};
use difflora::training::{grad_check, GradCheckReport, MetricsHistory, Trainer};
use difflora::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use config::{Overrides, RunConfig, TaskSpec};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_VERIFICATION: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError { code: EXIT_INPUT, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => EXIT_DIVERGED,
            _ => EXIT_INPUT,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Writes the effective config next to the outputs so a run can be repeated.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(cfg).map_err(|e| CliError::input(e.to_string()))?;
    std::fs::write(dir.join("config.json"), text + "\n")?;
    Ok(())
}

fn generate(task: &TaskSpec) -> CliResult<Vec<LabeledExample>> {
    let data = match task {
        TaskSpec::Needle(s) => gen_needle(s)?,
        TaskSpec::Icl(s) => gen_icl_classification(s)?,
    };
    for (i, ex) in data.iter().enumerate() {
        ex.validate()?;
        let parsed = match task {
            TaskSpec::Needle(s) => parse_needle_answer(&ex.tokens, &s.partition, s.key_len)?,
            TaskSpec::Icl(s) => parse_icl_answer(&ex.tokens, &s.partition, s.pattern_len)?,
        };
        if parsed != ex.answer {
            return Err(CliError { code: EXIT_VERIFICATION, message: format!("example {i} fails its self-check") });
        }
    }
    Ok(data)
}

/// Writes the training set and, when configured, a held-out set.
pub fn cmd_gen_data(cfg: &RunConfig, out: &mut impl Write) -> CliResult<()> {
    cfg.validate()?;
    let path = cfg.paths.dataset.as_deref().ok_or_else(|| CliError::input("paths.dataset is not set"))?;
    let mut jobs = vec![(path, cfg.task.clone())];
    if let Some(eval) = cfg.paths.eval_dataset.as_deref() {
        jobs.push((eval, cfg.task.with_seed_and_count(cfg.task.seed() + 1, cfg.eval.n_examples)));
    }
    for (path, task) in jobs {
        let data = generate(&task)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        write_jsonl(path, &data)?;
        writeln!(out, "{}: {} examples, sha256 {}", path.display(), data.len(), sha256_file(path)?)?;
    }
    if let Some(dir) = &cfg.paths.out_dir {
        echo_config(cfg, dir)?;
    }
    Ok(())
}

fn load_base(cfg: &RunConfig) -> CliResult<ToyModel> {
    match &cfg.paths.base_checkpoint {
        Some(_) => {
            let path = cfg.require(&cfg.paths.base_checkpoint, "base_checkpoint")?;
            let base = load_checkpoint(path)?;
            if base.is_injected() {
                return Err(CliError::input("base_checkpoint holds an adapted model, not a base"));
            }
            Ok(base)
        }
        None => Ok(build_base(&cfg.model)?),
    }
}

/// The configured variant on top of the configured base, at adapter init.
pub fn build_model(cfg: &RunConfig) -> CliResult<ToyModel> {
    let base = load_base(cfg)?;
    match cfg.model.variant {
        Variant::Baseline => Ok(base),
        _ => Ok(inject_adapters(base, &cfg.model)?),
    }
}

/// The trained model: base plus the adapters in `paths.checkpoint`.
pub fn load_trained(cfg: &RunConfig) -> CliResult<ToyModel> {
    match &cfg.paths.checkpoint {
        Some(_) => {
            let path = cfg.require(&cfg.paths.checkpoint, "checkpoint")?;
            Ok(apply_adapter_checkpoint(load_base(cfg)?, path)?.0)
        }
        None => build_model(cfg),
    }
}

/// The per-parameter count table printed before training.
pub fn param_table(model: &ToyModel) -> String {
    let mut s = String::new();
    let mut trainable = 0;
    let mut frozen = 0;
    for (info, data) in model.params() {
        match info.role {
            ParamRole::Trainable => {
                trainable += data.len();
                s += &format!("  {:<32} {:>3}x{:<3} {:>7}\n", info.name, info.shape.0, info.shape.1, data.len());
            }
            ParamRole::Frozen => frozen += data.len(),
        }
    }
    let c = &model.config;
    let mode = match (c.variant, c.placement) {
        (Variant::DiffLora, Some(p)) => format!("difflora {:?} rank_negative {} rank_positive {}", p.mode, p.rank_negative, p.rank_positive),
        (Variant::FullLora, _) => format!("full-lora rank {}", c.full_lora_rank().unwrap_or(0)),
        _ => "baseline".to_string(),
    };
    let mut head = format!("variant: {mode}\ntrainable parameters: {trainable}\nfrozen parameters: {frozen}\n");
    if let (Variant::FullLora, Some(budget)) = (c.variant, c.diff_lora_adapter_budget()) {
        head += &format!("full-lora budget (matched DiffLoRA adapter count): {budget}\n");
    }
    head + &s
}

fn load_dataset(cfg: &RunConfig, which: &Option<std::path::PathBuf>, what: &str) -> CliResult<Vec<LabeledExample>> {
    let path = cfg.require(which, what)?;
    let data = read_jsonl(path)?;
    if data.is_empty() {
        return Err(CliError::input(format!("{what} {} is empty", path.display())));
    }
    Ok(data)
}

fn write_metrics(history: &MetricsHistory, path: &Path) -> CliResult<()> {
    history.write_jsonl(path)?;
    Ok(())
}

/// Trains the configured adapters; writes `adapters.ckpt`, `metrics.jsonl`
/// and `config.json` into the output directory.
pub fn cmd_train(cfg: &RunConfig, out: &mut impl Write) -> CliResult<()> {
    cfg.validate()?;
    let dir = cfg.out_dir()?;
    let train_set = load_dataset(cfg, &cfg.paths.dataset, "dataset")?;
    let eval_set = match &cfg.paths.eval_dataset {
        Some(_) => Some(load_dataset(cfg, &cfg.paths.eval_dataset, "eval_dataset")?),
        None => None,
    };
    let mut model = build_model(cfg)?;
    if model.trainable_count() == 0 {
        return Err(CliError::input("this variant has no trainable parameters; use pretrain for the base"));
    }
    write!(out, "{}", param_table(&model))?;
    echo_config(cfg, &dir)?;
    let frozen_before = model.frozen_digest();
    let mut trainer = Trainer::new(cfg.train.clone())?;
    let history = trainer.run(&mut model, &train_set, eval_set.as_deref(), |r| {
        if let Some(e) = &r.eval {
            let _ = writeln!(out, "step {} loss {:.4} eval accuracy {:.4} ({})", r.step + 1, r.loss, e.accuracy, e.evaluated);
        }
    });
    let history = history?;
    if model.frozen_digest() != frozen_before {
        return Err(CliError { code: EXIT_VERIFICATION, message: "frozen weights changed during training".into() });
    }
    write_checkpoint(&model, CheckpointKind::AdaptersOnly, Some(&trainer.extras()), dir.join("adapters.ckpt"))?;
    write_metrics(&history, &dir.join("metrics.jsonl"))?;
    if let Some(last) = history.records.last() {
        writeln!(out, "final step {} loss {:.4} lambda {:?}", last.step + 1, last.loss, last.lambda)?;
    }
    writeln!(out, "wrote {}", dir.join("adapters.ckpt").display())?;
    Ok(())
}

/// Full-parameter training of the base model itself; writes `base.ckpt`.
pub fn cmd_pretrain(cfg: &RunConfig, out: &mut impl Write) -> CliResult<()> {
    cfg.validate()?;
    let dir = cfg.out_dir()?;
    let train_set = load_dataset(cfg, &cfg.paths.dataset, "dataset")?;
    let eval_set = match &cfg.paths.eval_dataset {
        Some(_) => Some(load_dataset(cfg, &cfg.paths.eval_dataset, "eval_dataset")?),
        None => None,
    };
    let mut model = load_base(cfg)?;
    model.unfreeze_base()?;
    echo_config(cfg, &dir)?;
    let settings = cfg.pretrain.clone().unwrap_or_else(|| cfg.train.clone());
    let mut trainer = Trainer::new(settings)?;
    let history = trainer.run(&mut model, &train_set, eval_set.as_deref(), |r| {
        if let Some(e) = &r.eval {
            let _ = writeln!(out, "step {} loss {:.4} eval accuracy {:.4}", r.step + 1, r.loss, e.accuracy);
        }
    })?;
    model.freeze_base();
    write_checkpoint(&model, CheckpointKind::Full, None, dir.join("base.ckpt"))?;
    write_metrics(&history, &dir.join("pretrain_metrics.jsonl"))?;
    writeln!(out, "wrote {}", dir.join("base.ckpt").display())?;
    Ok(())
}

/// NegativeOnly and BothTerms, λ fixed and learnable, plus group norm on
/// the BothTerms cases.
pub fn variant_grid(model: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let rank = model.placement.map(|p| p.rank_negative).unwrap_or(8);
    let init = model.lambda.init;
    let mut grid = Vec::new();
    for (pname, placement, gn_options) in [
        ("neg", AdapterPlacement::negative_only(rank), &[false][..]),
        ("both", AdapterPlacement::both_terms((rank / 2).max(1)), &[false, true][..]),
    ] {
        for &gn in gn_options {
            for mode in [LambdaMode::Fixed, LambdaMode::Learnable] {
                let m = match mode {
                    LambdaMode::Fixed => "fixed",
                    LambdaMode::Learnable => "learnable",
                };
                let label = format!("{pname}/{m}{}", if gn { "/gn" } else { "" });
                let cfg = ModelConfig {
                    variant: Variant::DiffLora,
                    placement: Some(placement),
                    lambda: LambdaConfig { mode, init },
                    group_norm: gn,
                    ..model.clone()
                };
                grid.push((label, cfg));
            }
        }
    }
    grid
}

/// Random tokens and targets for a gradient check.
pub fn grad_probe(vocab: usize, seq_len: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..seq_len).map(|_| rng.random_range(0..vocab)).collect();
    let targets = (0..seq_len).map(|_| rng.random_range(0..vocab)).collect();
    (tokens, targets, vec![true; seq_len])
}

/// Runs the finite-difference comparison for every configured variant.
pub fn run_grad_checks(cfg: &RunConfig, corrupt: Option<&str>) -> CliResult<Vec<(String, GradCheckReport)>> {
    let g = &cfg.grad_check;
    let grid = if g.configured_only {
        vec![("configured".to_string(), cfg.model.clone())]
    } else {
        variant_grid(&cfg.model)
    };
    let (tokens, targets, mask) = grad_probe(cfg.model.vocab_size, g.seq_len, g.seed);
    let mut out = Vec::new();
    for (label, model_cfg) in grid {
        let mut model = ToyModel::new(&model_cfg)?;
        let hook = corrupt.map(|name| (name, 1e-3)).filter(|(n, _)| model.param_info(n).is_some());
        let report = grad_check(&mut model, &tokens, &targets, &mask, g.eps, g.tolerance, hook)?;
        out.push((label, report));
    }
    Ok(out)
}

/// Exit 0 iff every coordinate is within tolerance; otherwise exit 4 and
/// list the offending parameters.
pub fn cmd_grad_check(cfg: &RunConfig, corrupt: Option<&str>, out: &mut impl Write) -> CliResult<()> {
    cfg.validate()?;
    let reports = run_grad_checks(cfg, corrupt)?;
    let mut failures = Vec::new();
    for (label, report) in &reports {
        writeln!(out, "{label}: loss {:.6}", report.loss)?;
        for (group, worst) in report.by_group() {
            let status = if worst <= report.tolerance { "ok" } else { "FAIL" };
            writeln!(out, "  {group:<28} worst rel err {worst:.3e} {status}")?;
        }
        for e in report.entries.iter().filter(|e| e.max_rel_error > report.tolerance) {
            failures.push(format!(
                "{label} {} coord {}: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                e.name, e.worst_index, e.analytic, e.numeric, e.max_rel_error
            ));
        }
    }
    if failures.is_empty() {
        writeln!(out, "gradient check passed")?;
        Ok(())
    } else {
        Err(CliError { code: EXIT_VERIFICATION, message: format!("gradient check failed:\n{}", failures.join("\n")) })
    }
}

fn oracle_for(task: &TaskSpec) -> LookupOracle {
    match task {
        TaskSpec::Needle(s) => LookupOracle::Needle { partition: s.partition.clone(), key_len: s.key_len },
        TaskSpec::Icl(s) => LookupOracle::Icl { partition: s.partition.clone(), pattern_len: s.pattern_len },
    }
}

/// Accuracy on `paths.eval_dataset` of the trained model, or of the task's
/// lookup oracle when `oracle` is set.
pub fn cmd_eval(cfg: &RunConfig, oracle: bool, out: &mut impl Write) -> CliResult<f64> {
    cfg.validate()?;
    let data = load_dataset(cfg, &cfg.paths.eval_dataset, "eval_dataset")?;
    let (name, report) = if oracle {
        ("lookup-oracle".to_string(), evaluate_accuracy(&oracle_for(&cfg.task), &data)?)
    } else {
        let model = load_trained(cfg)?;
        ("model".to_string(), evaluate_accuracy(&model, &data)?)
    };
    let task = match &cfg.task {
        TaskSpec::Needle(s) => format!("needle/{:?}", s.mode),
        TaskSpec::Icl(s) => format!("icl/{}-class", s.n_classes),
    };
    writeln!(out, "{:<28} {:<14} {:>8} {:>8} {:>9} {:>8}", "task", "predictor", "examples", "correct", "accuracy", "skipped")?;
    writeln!(
        out,
        "{:<28} {:<14} {:>8} {:>8} {:>9.4} {:>8}",
        task, name, report.evaluated, report.correct, report.accuracy, report.skipped_empty
    )?;
    if let Some(dir) = &cfg.paths.out_dir {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::input(e.to_string()))?;
        std::fs::write(dir.join("eval.json"), json)?;
    }
    Ok(report.accuracy)
}

/// Attention-mass report averaged over the first `eval.n_probes` examples.
pub fn attn_report(cfg: &RunConfig, name: &str) -> CliResult<AttnMassReport> {
    let data = load_dataset(cfg, &cfg.paths.eval_dataset, "eval_dataset")?;
    let model = load_trained(cfg)?;
    let n = cfg.eval.n_probes.clamp(1, data.len());
    let reports = data[..n]
        .iter()
        .map(|ex| probe_report(&model, ex, cfg.eval.query_rows, name))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(average_reports(&reports)?.with_means())
}

/// Writes `<name>.csv` and `<name>.json` into the output directory.
pub fn cmd_attn_report(cfg: &RunConfig, name: &str, out: &mut impl Write) -> CliResult<()> {
    cfg.validate()?;
    let dir = cfg.out_dir()?;
    let report = attn_report(cfg, name)?;
    report.write(&dir, name)?;
    let err = report.conservation_error();
    writeln!(out, "{}: {} probes, conservation error {:.3e}", name, report.n_probes, err)?;
    for region in ["bos", "needle"] {
        for c in Component::ALL {
            if let Some(cell) = report.cell(None, None, region, c) {
                writeln!(out, "  mean {region:<7} {:<9} mass {:.6}", c.as_str(), cell.mass)?;
            }
        }
    }
    Ok(())
}

/// Compares two report sidecars; writes `comparison.json` next to `after`.
pub fn cmd_compare(before: &Path, after: &Path, out: &mut impl Write) -> CliResult<()> {
    let a = AttnMassReport::read_json(before)?;
    let b = AttnMassReport::read_json(after)?;
    let cmp = compare_reports(&a, &b)?;
    for c in Component::ALL {
        writeln!(
            out,
            "{:<9} bos delta {:+.6} needle delta {:+.6}",
            c.as_str(),
            cmp.bos_delta[&c],
            cmp.needle_delta[&c]
        )?;
    }
    let dir = after.parent().unwrap_or(Path::new("."));
    let json = serde_json::to_string_pretty(&cmp).map_err(|e| CliError::input(e.to_string()))?;
    std::fs::write(dir.join("comparison.json"), json)?;
    Ok(())
}
