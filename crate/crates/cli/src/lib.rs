//! Command-line front end: dataset generation, training, evaluation,
//! molecular dynamics, trajectory analysis and checkpoint inspection.
//!
//! Every flag of every subcommand carries help text:
//!
//! ```
//! use clap::CommandFactory;
//! let cli = leignn_cli::Cli::command();
//! for sub in cli.get_subcommands() {
//!     let help = sub.clone().render_long_help().to_string();
//!     for arg in sub.get_arguments() {
//!         if let Some(long) = arg.get_long() {
//!             assert!(help.contains(&format!("--{long}")), "{} --{long}", sub.get_name());
//!             assert!(arg.get_help().is_some(), "{} --{long} lacks help", sub.get_name());
//!         }
//!     }
//! }
//! ```

pub mod config;
mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ConfigBuilder, ConfigError, RunConfig};

/// Process exit status.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const RUNTIME: i32 = 2;
}

#[derive(Debug, Parser)]
#[command(name = "leignn", version, about = "Equivariant graph network force field for molecular dynamics")]
pub struct Cli {
    /// Worker threads (default: all available cores)
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat JSON config file with dotted keys, e.g. {"model.F": 32}
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. --set md.temperature=150 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Root seed (same as --set seed=S)
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labeled frames with the analytic pair potential
    GenData {
        /// Run directory for dataset.extxyz, manifest.json and config.json
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of frames (same as --set data.n_samples=N)
        #[arg(long, value_name = "N")]
        samples: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model; writes checkpoint.leig, metrics.json and loss_curve.csv
    Train {
        /// Labeled extended XYZ dataset
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Dataset manifest whose train/validation split is used instead of a fresh split
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        /// Run directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of epochs (same as --set train.epochs=N)
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Report energy and force MAE of a checkpoint on a labeled dataset
    Eval {
        /// Checkpoint file
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Labeled extended XYZ dataset
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Also write metrics.json into this directory
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run Langevin or NVE dynamics; writes traj.extxyz and traj.json
    Md {
        /// Run directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Checkpoint used by the model provider
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Force provider: model, oracle or random (same as --set provider.kind=P)
        #[arg(long, value_name = "P")]
        provider: Option<String>,
        /// Initial structure; the last frame of this extended XYZ file (default: fcc crystal from data.*)
        #[arg(long, value_name = "FILE")]
        init: Option<PathBuf>,
        /// Number of steps (same as --set md.steps=N)
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
        /// Thermostat temperature in K (same as --set md.temperature=T)
        #[arg(long, value_name = "T")]
        temperature: Option<f64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// RDF, h(r), diffusivity and stability of a trajectory
    Analyze {
        /// Trajectory extended XYZ file; its sidecar is the same path with a .json extension
        #[arg(long, value_name = "FILE")]
        traj: PathBuf,
        /// Reference trajectory for RDF error, diffusivity comparison and stability
        #[arg(long, value_name = "FILE")]
        reference: Option<PathBuf>,
        /// Run directory for analysis.json, rdf.csv and hr.csv
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the manifest of a checkpoint
    Inspect {
        /// Checkpoint file
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<leignn::training::TrainError> for Failure {
    fn from(e: leignn::training::TrainError) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<leignn::analysis::AnalysisError> for Failure {
    fn from(e: leignn::analysis::AnalysisError) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit status.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be ≥ 1");
            return exit::USAGE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: {e}");
        }
    }
    match run::execute(cli.command) {
        Ok(()) => exit::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            exit::USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            exit::RUNTIME
        }
    }
}
