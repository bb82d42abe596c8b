//! Command-line driver for the fraction-adaptation experiment.
//!
//! Each subcommand is one pipeline stage; `run` chains them. Errors map to
//! exit codes 64 (configuration), 65 (input data) and 70 (runtime).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod config;
pub mod error;
pub mod figures;
pub mod pipeline;
pub mod records;
pub mod report;

use config::{ConfigFile, Overrides, Settings};
use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "fracadapt", version, about = "Per-fraction adaptation of a pelvic CT segmentation network")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; required here or in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of patients or a comma-separated list of patient ids.
    #[arg(long, global = true)]
    pub patients: Option<String>,
    /// Adaptation iteration counts, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub iterations: Option<Vec<u64>>,
    /// Pairing unit of the signed-rank tests: fraction or patient.
    #[arg(long, global = true)]
    pub pairing: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom cohorts.
    GenCohort {
        #[arg(long, default_value = "both")]
        institute: String,
    },
    /// Train the base models on cohort A.
    TrainBase,
    /// Adapt along every cohort-B series for each iteration count.
    Adapt,
    /// Segment with the base models, or one image with `--checkpoint`.
    Predict {
        #[arg(long, requires_all = ["image", "output"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        image: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        output: Option<PathBuf>,
    },
    /// Score all predictions and write metrics.csv.
    Evaluate,
    /// Tables, tests and figures from a metrics file.
    Report {
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Every stage in order.
    Run,
}

impl Cli {
    pub fn settings(&self) -> Result<Settings> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let over = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            patients: self.patients.clone(),
            iterations: self.iterations.clone(),
            pairing: self.pairing.clone(),
        };
        Settings::resolve(&file, &over)
    }

    pub fn execute(&self) -> Result<()> {
        if let Command::Predict { checkpoint: Some(ckpt), image: Some(image), output: Some(output) } = &self.command {
            let took = pipeline::predict_file(ckpt, image, output)?;
            eprintln!("[fracadapt] segmented {} in {took:.2?}", image.display());
            return Ok(());
        }
        let s = self.settings()?;
        match &self.command {
            Command::GenCohort { institute } => pipeline::gen_cohort(&s, pipeline::Institutes::parse(institute)?),
            Command::TrainBase => pipeline::train(&s),
            Command::Adapt => pipeline::adapt(&s),
            Command::Predict { .. } => pipeline::predict_base(&s),
            Command::Evaluate => pipeline::evaluate(&s).map(drop),
            Command::Report { metrics } => pipeline::report(&s, metrics.as_deref()).map(drop),
            Command::Run => pipeline::run(&s).map(drop),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { CliError::EXIT_CONFIG } else { 0 };
        }
    };
    match cli.execute() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fracadapt: {e}");
            e.exit_code()
        }
    }
}

