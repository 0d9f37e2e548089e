//! `sphere-distill`: train, evaluate and diagnose self-distillation runs,
//! run the reference oracles, sweep grids and generate corpora.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 training
//! divergence.

mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "sphere-distill",
    version,
    about = "Self-distillation with hyperspherical energy diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the flat configuration comes from. Later sources win: preset,
/// file, trailing `--key value` overrides, then `SPHERE_DISTILL_SEED`.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// key=value (or flat JSON) configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration overrides such as `--objective byol --epochs 1`
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory
    Train {
        /// Run directory
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Resume from this checkpoint, or `latest` for the newest one in the run directory
        #[arg(long, value_name = "PATH|latest")]
        resume: Option<PathBuf>,
        /// Built-in configuration preset: byol-mhe or byol-mhe-strong
        #[arg(long)]
        preset: Option<String>,
        /// Stop after this many epochs, as if interrupted
        #[arg(long)]
        stop_after_epoch: Option<u64>,
        /// Print the resolved configuration and exit
        #[arg(long)]
        print_config: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Linear-probe or k-NN accuracy of a checkpoint, as JSON on stdout
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "linear")]
        mode: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Energy report and density curves of a checkpoint
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory, defaults to `diagnose/` next to the checkpoint directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render SVG plots from the curves
        #[arg(long)]
        svg: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run a reference oracle and print its result as JSON
    Oracle(commands::OracleArgs),
    /// Train every cell of a grid and write summary.csv
    Sweep {
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        /// Built-in grid: paper-lambda or paper-power
        #[arg(long)]
        preset: Option<String>,
        /// Grid axis `key=v1,v2` or `k1+k2=v1,v2`; repeatable
        #[arg(long)]
        grid: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a synthetic corpus as CSV plus a stats JSON
    GenData(commands::GenDataArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train {
            out,
            resume,
            preset,
            stop_after_epoch,
            print_config,
            config,
        } => commands::train(
            &config,
            preset.as_deref(),
            &out,
            resume,
            stop_after_epoch,
            print_config,
        ),
        Command::Eval {
            checkpoint,
            mode,
            config,
        } => commands::eval(&config, &checkpoint, &mode),
        Command::Diagnose {
            checkpoint,
            out,
            svg,
            config,
        } => commands::diagnose(&config, &checkpoint, out, svg),
        Command::Oracle(args) => commands::oracle(&args),
        Command::Sweep {
            out,
            preset,
            grid,
            config,
        } => commands::sweep(&config, &out, preset.as_deref(), &grid),
        Command::GenData(args) => commands::gen_data(&args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
