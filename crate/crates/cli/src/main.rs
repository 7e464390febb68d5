use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use difflora_cli::{
    cmd_attn_report, cmd_compare, cmd_eval, cmd_gen_data, cmd_grad_check, cmd_pretrain, cmd_train, CliResult,
    Overrides, RunConfig,
};

#[derive(Parser)]
#[command(name = "difflora", version, about = "Differential attention through low-rank adapters, at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run config; omitted means all defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training set (and held-out set) as JSON lines.
    GenData(Common),
    /// Full-parameter training of a base model, saved as a base checkpoint.
    Pretrain(Common),
    /// Train adapters on a frozen base.
    Train(Common),
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Test hook: perturb this parameter's analytic gradient.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Accuracy on the held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score the task's lookup oracle instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Attention-mass report (CSV plus JSON sidecar).
    AttnReport {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Per-cell deltas between two attention-mass reports.
    Compare {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
    },
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    common.overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::GenData(c) => cmd_gen_data(&resolve(&c)?, &mut out),
        Command::Pretrain(c) => cmd_pretrain(&resolve(&c)?, &mut out),
        Command::Train(c) => cmd_train(&resolve(&c)?, &mut out),
        Command::GradCheck { common, corrupt } => cmd_grad_check(&resolve(&common)?, corrupt.as_deref(), &mut out),
        Command::Eval { common, oracle } => cmd_eval(&resolve(&common)?, oracle, &mut out).map(|_| ()),
        Command::AttnReport { common, name } => cmd_attn_report(&resolve(&common)?, &name, &mut out),
        Command::Compare { before, after } => cmd_compare(&before, &after, &mut out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
