mod commands;
mod config;
mod output;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fklab_core::extension::PsiStar;
use fklab_core::FkError;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use commands::Ctx;
use config::{Nonlinearity, RunConfig, ThetaSweep};
use output::OutDir;
use verify::{Check, VerifyOptions, SUITES};

#[derive(Debug, Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(#[from] FkError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0} verification checks failed")]
    VerifyFailed(usize),
}

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            AppError::VerifyFailed(_) => 1,
            AppError::Config(_) | AppError::Io(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "fklab",
    version,
    about = "Diffusion with fourth-type and dynamic boundary conditions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Discrete eigenvalues against the continuous oracle.
    Spectrum,
    /// Resolvent solves on a grid of sector points.
    Resolvent,
    /// Direct IMEX run of the coupled bulk/boundary system.
    Simulate,
    /// Picard iteration on the transformed system.
    Fixedpoint,
    /// Per-θ spectrum and resolvent summary.
    Sweep,
    /// Runs the invariant suites and reports pass/fail per check.
    Verify {
        /// Comma-separated suite names.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Negative control: use the non-flat transition profile.
        #[arg(long, hide = true)]
        fault_linear_psi: bool,
    },
}

/// Flags override values from `--config`.
#[derive(Args)]
struct Common {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// start:end:count
    #[arg(long, global = true)]
    theta_sweep: Option<ThetaSweep>,
    #[arg(long, global = true)]
    modes: Option<usize>,
    #[arg(long, global = true)]
    p: Option<f64>,
    #[arg(long, global = true)]
    q: Option<f64>,
    #[arg(long = "T", global = true)]
    horizon: Option<f64>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory; FKLAB_OUT takes precedence.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Constant filtration ratio instead of the σ-dependent profile.
    #[arg(long, global = true)]
    frozen_theta: Option<f64>,
    /// Switch off the reaction terms.
    #[arg(long, global = true)]
    linear: bool,
}

fn resolve_config(c: &Common) -> Result<RunConfig, AppError> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path).map_err(AppError::Config)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident => $target:ident),*) => {$(
            if let Some(v) = c.$field.clone() {
                cfg.$target = v;
            }
        )*};
    }
    set!(n => n, theta => theta, modes => modes, p => p, q => q, horizon => horizon, dt => dt,
         seed => seed, jobs => jobs, out => out);
    if c.theta_sweep.is_some() {
        cfg.theta_sweep = c.theta_sweep;
    }
    if c.frozen_theta.is_some() {
        cfg.frozen_theta = c.frozen_theta;
    }
    if c.linear {
        cfg.nonlinearity = Nonlinearity::Linear;
    }
    if let Some(dir) = std::env::var_os("FKLAB_OUT").filter(|d| !d.is_empty()) {
        cfg.out = PathBuf::from(dir);
    }
    cfg.validate().map_err(AppError::Config)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct VerifyResult<'a> {
    pass: bool,
    failed: usize,
    suites: Vec<&'a str>,
    checks: &'a [Check],
}

fn run_verify(ctx: &Ctx, only: &[String], fault_linear_psi: bool) -> Result<(), AppError> {
    let suites: Vec<&str> = if only.is_empty() {
        SUITES.to_vec()
    } else {
        let mut picked = Vec::new();
        for name in only {
            let s = SUITES
                .iter()
                .find(|s| **s == name.as_str())
                .ok_or_else(|| AppError::Config(format!("unknown suite `{name}`; known: {}", SUITES.join(", "))))?;
            if !picked.contains(s) {
                picked.push(*s);
            }
        }
        picked
    };
    let opts = VerifyOptions {
        seed: ctx.cfg.seed,
        psi: if fault_linear_psi {
            PsiStar::Linear
        } else {
            PsiStar::default()
        },
    };
    let checks: Vec<Check> = ctx
        .pool
        .install(|| {
            suites
                .par_iter()
                .map(|s| verify::run_suite(s, opts))
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
    let failed = checks.iter().filter(|c| c.counted && !c.pass).count();
    for c in &checks {
        let verdict = match (c.pass, c.counted) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (not counted)",
        };
        let rel = if c.lower_bound { ">=" } else { "<=" };
        println!(
            "{}/{}: {verdict} {:.3e} {rel} {:.3e}",
            c.suite, c.name, c.value, c.threshold
        );
    }
    let status = if failed == 0 { "ok" } else { "failed" };
    let summary = ctx.summary(
        "verify",
        status,
        VerifyResult {
            pass: failed == 0,
            failed,
            suites,
            checks: &checks,
        },
    );
    output::write_json(&ctx.out.file("verify.json"), &summary)?;
    if failed == 0 {
        Ok(())
    } else {
        Err(AppError::VerifyFailed(failed))
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let cfg = resolve_config(&cli.common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| AppError::Config(format!("worker pool: {e}")))?;
    let ctx = Ctx {
        cfg: &cfg,
        echo: cfg.echo(),
        out: OutDir::create(&cfg.out)?,
        pool,
    };
    match &cli.command {
        Command::Spectrum => commands::spectrum(&ctx),
        Command::Resolvent => commands::resolvent(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Fixedpoint => commands::fixedpoint(&ctx),
        Command::Sweep => commands::sweep(&ctx),
        Command::Verify { only, fault_linear_psi } => run_verify(&ctx, only, *fault_linear_psi),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fklab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
