//! `fbp`: run the solver, the staged construction, or the denoising demo.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 numerical failure,
//! 4 I/O error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fbp_core::denoise::DenoiseParams;
use thiserror::Error;

use crate::config::{parse_case, ExperimentConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "fbp", version, about = "Forward-backward parabolic experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Evolve a datum with the (modified) flux and write snapshots.
    Solve(Common),
    /// Run the staged construction on a 1D datum.
    Pipeline(Common),
    /// Smooth an 8-bit binary PGM.
    Denoise(DenoiseArgs),
}

#[derive(Args)]
struct Common {
    /// INI file overlaid on the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// I or II; picks the matching preset when none is given.
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    stages: Option<usize>,
    /// heat, case1, case2 or rect2d.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct DenoiseArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    s0: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let case = c.case.as_deref().map(parse_case).transpose()?;
    let name = match (&c.preset, case) {
        (Some(p), _) => p.clone(),
        (None, Some(fbp_core::ModCase::CaseII)) => "case2".into(),
        (None, _) => "case1".into(),
    };
    let mut cfg = ExperimentConfig::preset(&name)?;
    if let Some(path) = &c.config {
        cfg.apply_file(path)?;
    }
    if case.is_some() {
        cfg.case = case;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.stages {
        cfg.stages = n;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Solve(c) => commands::solve(&load(&c)?, &c.out),
        Cmd::Pipeline(c) => commands::pipeline(&load(&c)?, &c.out),
        Cmd::Denoise(d) => {
            let mut p = DenoiseParams::default();
            if let Some(v) = d.steps {
                p.steps = v;
            }
            if let Some(v) = d.s0 {
                p.s0 = v;
            }
            if let Some(v) = d.dt {
                p.dt = v;
            }
            commands::denoise_image(&d.input, &d.output, &p)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fbp: {e}");
            ExitCode::from(e.code())
        }
    }
}
