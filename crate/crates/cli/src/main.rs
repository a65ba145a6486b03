//! Command-line entry point: parses arguments and dispatches subcommands.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wpgd_cli::config::load_config;
use wpgd_cli::run::{cmd_compare, cmd_eval, cmd_gen_data, cmd_train};
use wpgd_cli::{CliError, ResolvedConfig};

/// Cost-sensitive adversarial training experiments.
#[derive(Debug, Parser)]
#[command(name = "wpgd", version)]
struct Cli {
    /// Worker threads; 1 is the bit-exact reference mode, 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long, short)]
    config: PathBuf,

    /// Override a config leaf, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,

    /// Read every attack epsilon (and explicit step size) in units of 1/255.
    #[arg(long = "eps-255")]
    eps_255: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<ResolvedConfig, CliError> {
        load_config(&self.config, &self.sets, self.eps_255)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoint, report and resolved config.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on clean and attacked inputs.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to the checkpoint `train` wrote for this config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Baseline checkpoint for accuracy gap, correlation and score deltas.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Compare two checkpoints; deltas are reported as B minus A.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        checkpoint_a: PathBuf,
        checkpoint_b: PathBuf,
    },
    /// Write the train and test splits as CSV.
    GenData(ConfigArgs),
    /// Resolve a config and print the snapshot and its hash.
    ValidateConfig(ConfigArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let out = cmd_train(&cfg)?;
            if let Some(last) = out.report.last() {
                eprintln!(
                    "trained {} epochs: loss {:.4}, natural error {:.2}%",
                    out.report.epochs.len(),
                    last.train_loss,
                    last.natural_error
                );
            }
            println!("{}", out.dir.display());
        }
        Command::Eval {
            config,
            checkpoint,
            reference,
        } => {
            let cfg = config.load()?;
            let out = cmd_eval(&cfg, checkpoint.as_deref(), reference.as_deref())?;
            let m = &out.report.model;
            eprintln!("natural error {:.2}%", m.natural.error_percent);
            for (i, a) in m.attacks.iter().enumerate() {
                eprintln!("attack {i}: adversarial error {:.2}%", a.adversarial.error_percent);
            }
            println!("{}", out.dir.display());
        }
        Command::Compare {
            config,
            checkpoint_a,
            checkpoint_b,
        } => {
            let cfg = config.load()?;
            let out = cmd_compare(&cfg, &checkpoint_a, &checkpoint_b)?;
            if let Some(rho) = out.report.gap.correlation {
                eprintln!("gap/cost correlation {rho:.4}");
            }
            println!("{}", out.dir.display());
        }
        Command::GenData(args) => {
            let cfg = args.load()?;
            for path in cmd_gen_data(&cfg)? {
                println!("{}", path.display());
            }
        }
        Command::ValidateConfig(args) => {
            let cfg = args.load()?;
            eprintln!("config hash {}", cfg.hash);
            print!("{}", cfg.snapshot_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
