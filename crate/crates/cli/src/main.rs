//! `qbayes`: train, sample, evaluate and reproduce figure data for
//! generative quantile posterior samplers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, Figure, ReproduceArgs, SampleArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "qbayes", version, about = "Generative quantile posterior sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (with restarts) from a TOML experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory [default: config output_dir, else $QBAYES_OUT/<name>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Width 512, 150 epochs, 10 restarts.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Draw posterior samples, optionally with a tau credible set.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Config supplying the simulator and the observed data.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Observed data: every observation equal to this value.
        #[arg(long, allow_hyphen_values = true)]
        x: Option<f64>,
        /// Number of observations for --x.
        #[arg(long)]
        n: Option<usize>,
        /// Observed data: CSV with a header and one observation per row.
        #[arg(long)]
        x_file: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Credible level in (0, 1); writes the credible cloud and hull JSON.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the metrics listed in the config's evaluation block.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full pipeline and write the data behind a figure.
    Reproduce {
        #[arg(value_enum)]
        figure: Figure,
        /// Replace the built-in config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paper_scale: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            config,
            out,
            seed,
            paper_scale,
        } => commands::cmd_train(TrainArgs {
            config,
            out: out.as_deref(),
            seed: *seed,
            paper_scale: *paper_scale,
        }),
        Command::Sample {
            model,
            config,
            x,
            n,
            x_file,
            count,
            tau,
            seed,
            out,
        } => commands::cmd_sample(SampleArgs {
            model,
            config: config.as_deref(),
            x: *x,
            n: *n,
            x_file: x_file.as_deref(),
            count: *count,
            tau: *tau,
            seed: *seed,
            out: out.as_deref(),
        }),
        Command::Eval {
            model,
            config,
            seed,
            out,
        } => commands::cmd_eval(EvalArgs {
            model,
            config,
            seed: *seed,
            out: out.as_deref(),
        }),
        Command::Reproduce {
            figure,
            config,
            out,
            seed,
            paper_scale,
        } => commands::cmd_reproduce(ReproduceArgs {
            figure: *figure,
            config: config.as_deref(),
            out: out.as_deref(),
            seed: *seed,
            paper_scale: *paper_scale,
        }),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
