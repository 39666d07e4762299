use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use latreg_cli::commands::{self, AblationMode, Overrides};
use latreg_cli::CliError;

#[derive(Debug, Parser)]
#[command(name = "latreg", version, about = "Synthetic registration experiments")]
struct Cli {
    /// Experiment config (JSON). Defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite an existing dataset.
    #[arg(long, global = true)]
    force: bool,
    /// Fine-tune from a fresh network instead of the warm-up checkpoint.
    #[arg(long, global = true)]
    no_warmup: bool,
    /// Use log-likelihood scale s = 1 instead of sqrt(N).
    #[arg(long, global = true)]
    ldvn_off: bool,
    /// Refinement steps T.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Trajectories per group J.
    #[arg(long, global = true)]
    trajs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset and its manifest.
    Generate,
    /// Unsupervised warm-up on the unlabeled split.
    Warmup,
    /// GRPO fine-tuning on the labeled split.
    Grpo,
    /// Multi-step inference on the test split.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-pair and aggregate test metrics.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trajectory/step grid or component ladder.
    Ablate {
        #[arg(long, value_enum, default_value_t = Mode::Grid)]
        mode: Mode,
    },
    /// Log-likelihood spread versus latent dimension.
    ProbeLdvn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Grid,
    Components,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out,
        no_warmup: cli.no_warmup,
        ldvn_off: cli.ldvn_off,
        steps: cli.steps,
        trajectories: cli.trajs,
    };
    let cfg = commands::resolve_config(cli.config.as_deref(), &ov)?;
    match cli.command {
        Command::Generate => json(&commands::generate(&cfg, cli.force)?.summary),
        Command::Warmup => json(&commands::warmup(&cfg)?),
        Command::Grpo => json(&commands::grpo(&cfg)?.test),
        Command::Infer { checkpoint } => json(&commands::infer(&cfg, checkpoint.as_deref())?),
        Command::Eval { checkpoint } => {
            let r = commands::eval(&cfg, checkpoint.as_deref())?;
            json(&(r.dice, r.njd))
        }
        Command::Ablate { mode } => {
            let mode = match mode {
                Mode::Grid => AblationMode::Grid,
                Mode::Components => AblationMode::Components,
            };
            json(&commands::ablate(&cfg, mode)?)
        }
        Command::ProbeLdvn => json(&commands::probe_ldvn(&cfg)?),
    }
    Ok(())
}

fn json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
