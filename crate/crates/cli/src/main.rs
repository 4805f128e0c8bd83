use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cellpoint::data::{DatasetConfig, Split};
use cellpoint::run::{self, EvalOptions};
use cellpoint::train::RunConfig;
use cellpoint::{Error, Result};

#[derive(Parser)]
#[command(name = "cellpoint", version, about = "Point-based cell detection and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set loss.q=0.4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the point model.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained point model on a dataset split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Skip the inference timing measurement.
        #[arg(long)]
        no_timing: bool,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict points on one PNG image.
    Infer {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per GCE exponent and tabulate F1 by q.
    SweepQ {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        q: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the density-map baseline.
    BaselineTrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a density baseline across peak-search minimum distances.
    BaselineSweep {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        min_distance: Vec<usize>,
        /// Point-model run evaluated on the same test split for contrast.
        #[arg(long)]
        point_run: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw class-colored dots from annotations or predictions onto an image.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        num_classes: usize,
        #[arg(long, default_value_t = 2.5)]
        dot_radius: f64,
    },
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let config: RunConfig = run::load_config(args.config.as_deref(), &args.overrides)?;
    config.validate()?;
    Ok(config)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, out } => {
            let c: DatasetConfig = run::load_config(config.config.as_deref(), &config.overrides)?;
            c.generator.validate()?;
            emit(&run::cmd_generate(&c, &out)?, None)
        }
        Command::Train { config, resume } => emit(&run::cmd_train(&run_config(&config)?, resume)?, None),
        Command::Eval {
            run,
            checkpoint,
            dataset,
            split,
            radius,
            threshold,
            no_timing,
            out,
        } => {
            let options = EvalOptions {
                checkpoint,
                dataset,
                split: Some(split),
                radius,
                threshold,
                timing: !no_timing,
            };
            emit(&run::cmd_eval(&run, &options)?, out.as_deref())
        }
        Command::Infer {
            run,
            image,
            threshold,
            out,
        } => emit(&run::cmd_infer(&run, &image, threshold)?, out.as_deref()),
        Command::SweepQ { config, q, out } => emit(&run::cmd_sweep_q(&run_config(&config)?, &q, &out)?, None),
        Command::BaselineTrain { config, resume } => {
            emit(&run::cmd_baseline_train(&run_config(&config)?, resume)?, None)
        }
        Command::BaselineSweep {
            run,
            min_distance,
            point_run,
            out,
        } => emit(&run::cmd_baseline_sweep(&run, &min_distance, point_run.as_deref(), &out)?, None),
        Command::Render {
            image,
            points,
            out,
            num_classes,
            dot_radius,
        } => run::cmd_render(&image, &points, &out, num_classes, dot_radius),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
