//! Command-line front end for additive functional regression on principal
//! component scores: fitting, prediction, prediction bands, Monte Carlo
//! studies and preparation of the bike-rental example.

pub mod bike;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Command;
use crate::config::{parse_overrides, Settings};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "affpc", version, about = "Function-on-function regression with additive spline surfaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,

    /// Key-value configuration file (`key = value` per line, `#` comments).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,

    /// Training CSV (or the hourly table for `prepare-bike`).
    #[arg(long, global = true)]
    pub input: Option<String>,

    /// Covariate CSV for prediction and bands.
    #[arg(long, global = true)]
    pub covariates: Option<String>,

    /// Fitted model document.
    #[arg(long, global = true)]
    pub model: Option<String>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<String>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
pub enum Sub {
    /// Fit a model to a training CSV.
    Fit,
    /// Predict response curves for new covariates.
    Predict,
    /// Pointwise prediction bands, optionally bootstrapped.
    Band,
    /// Monte Carlo comparison against the linear baseline.
    Simulate,
    /// Monte Carlo band coverage.
    Coverage,
    /// Turn an hourly bike-rental table into Saturday curves.
    PrepareBike,
    /// List configuration keys with their defaults.
    Keys,
}

impl Cli {
    /// Resolved settings: defaults, config file, `--set`, then the
    /// dedicated flags.
    pub fn settings(&self) -> Result<Settings, CliError> {
        let mut overrides = parse_overrides(&self.set)?;
        let flags = [
            ("input", self.input.clone()),
            ("covariates", self.covariates.clone()),
            ("model", self.model.clone()),
            ("out", self.out.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("workers", self.workers.map(|v| v.to_string())),
        ];
        overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        Settings::resolve(self.config.as_deref(), &overrides)
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let command = match cli.command {
        Sub::Fit => Command::Fit,
        Sub::Predict => Command::Predict,
        Sub::Band => Command::Band,
        Sub::Simulate => Command::Simulate,
        Sub::Coverage => Command::Coverage,
        Sub::PrepareBike => Command::PrepareBike,
        Sub::Keys => {
            for (k, d, doc) in config::KEYS {
                println!("{k:<20} {d:<22} {doc}");
            }
            return 0;
        }
    };
    match cli.settings().and_then(|s| commands::run(command, &s)) {
        Ok(summary) => {
            log::info!("wrote {} file(s)", summary.outputs.len() + 1);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
