//! Batch front end: reads matrices from CSV, runs one reconciliation and
//! writes the result plus a JSON diagnostics file.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod diagnostics;
pub mod io;
pub mod options;

pub use options::RunOptions;

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Io,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Numerical,
            message: message.into(),
        }
    }

    /// Library error with a context prefix.
    pub fn from_core(context: &str, e: coherent::Error) -> Self {
        let message = if context.is_empty() { e.to_string() } else { format!("{context}: {e}") };
        if e.is_numerical() {
            Self::numerical(message)
        } else {
            Self::validation(message)
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation | ErrorKind::Io => 2,
            ErrorKind::Numerical => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<coherent::Error> for CliError {
    fn from(e: coherent::Error) -> Self {
        Self::from_core("", e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FrameworkArg {
    Cs,
    Te,
    Ct,
}

impl From<FrameworkArg> for coherent::Framework {
    fn from(f: FrameworkArg) -> Self {
        match f {
            FrameworkArg::Cs => coherent::Framework::Cs,
            FrameworkArg::Te => coherent::Framework::Te,
            FrameworkArg::Ct => coherent::Framework::Ct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// Top-down
    Td,
    /// Bottom-up
    Bu,
    /// Middle-out
    Mo,
    /// Least-squares (optimal combination)
    Rec,
    /// Level conditional coherent combination
    Lcc,
    /// Gaussian forecast distribution
    Mvn,
    /// Sample-based forecast distribution
    Smp,
    /// Machine-learning bottom forecasts
    Rml,
    /// Two-step: temporal then cross-sectional
    Tcs,
    /// Two-step: cross-sectional then temporal
    Cst,
    /// Iterative two-step
    Iter,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Td => "td",
            Method::Bu => "bu",
            Method::Mo => "mo",
            Method::Rec => "rec",
            Method::Lcc => "lcc",
            Method::Mvn => "mvn",
            Method::Smp => "smp",
            Method::Rml => "rml",
            Method::Tcs => "tcs",
            Method::Cst => "cst",
            Method::Iter => "iter",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "coherent", version, about = "Coherent forecast reconciliation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reconcile base forecasts
    Reconcile {
        framework: FrameworkArg,
        method: Method,
        /// TOML file with option values; flags take precedence
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        options: RunOptions,
    },
    /// Fit machine-learning reconciliation models and save the bundle
    Fit {
        framework: FrameworkArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        options: RunOptions,
    },
    /// Estimate and write the covariance matrix selected by --comb
    Cov {
        framework: FrameworkArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        options: RunOptions,
    },
    /// Print a structure summary as JSON
    Describe {
        framework: FrameworkArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        options: RunOptions,
    },
    /// Recover the aggregation matrix from a zero-constraint matrix
    Lcmat {
        #[arg(long)]
        cons_mat: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a diagnostics file
    Info { diagnostics: PathBuf },
}

/// Sizes the global thread pool from `COHERENT_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("COHERENT_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::validation(format!("COHERENT_THREADS: `{v}` is not a thread count")))?;
        // a second initialisation in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Reconcile {
            framework,
            method,
            config,
            options,
        } => {
            let merged = options::merge(&options, config.as_deref())?;
            commands::reconcile(framework.into(), method, &merged, config.as_deref())
        }
        Command::Fit { framework, config, options } => {
            let merged = options::merge(&options, config.as_deref())?;
            commands::fit_models(framework.into(), &merged)
        }
        Command::Cov { framework, config, options } => {
            let merged = options::merge(&options, config.as_deref())?;
            commands::covariance(framework.into(), &merged)
        }
        Command::Describe { framework, config, options } => {
            let merged = options::merge(&options, config.as_deref())?;
            commands::describe(framework.into(), &merged)
        }
        Command::Lcmat { cons_mat, out } => commands::lcmat(&cons_mat, out.as_deref()),
        Command::Info { diagnostics } => {
            print!("{}", diagnostics::info(&diagnostics)?);
            Ok(())
        }
    }
}
