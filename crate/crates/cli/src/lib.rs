//! Library side of the `ganuq` binary: configuration, subcommands, and the
//! run wrapper (lock file, resolved config, sidecar log).

pub mod commands;
pub mod config;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use ganuq_core::{Error, Result};

pub use config::RunConfig;

pub const LOCK_FILE: &str = ".ganuq.lock";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Parser)]
#[command(name = "ganuq", version, about = "Uncertainty estimation for conditional GAN surrogates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the dataset CSV.
    Generate(PathFlags),
    /// Train the ensemble or the dropout generator.
    Train(PathFlags),
    /// Fit the variance regressors and check them against Monte Carlo.
    Distill(PathFlags),
    /// Uniform-split efficiency reports.
    Evaluate(PathFlags),
    /// Extrapolation band reports.
    Scan(PathFlags),
}

impl Command {
    pub fn name_and_flags(&self) -> (&'static str, &PathFlags) {
        match self {
            Command::Generate(f) => ("generate", f),
            Command::Train(f) => ("train", f),
            Command::Distill(f) => ("distill", f),
            Command::Evaluate(f) => ("evaluate", f),
            Command::Scan(f) => ("scan", f),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Eq, clap::Args)]
pub struct PathFlags {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Global seed, overriding `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Exit status for an error: 2 config, 3 training, 4 ingestion, 1 other.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Training { .. } => 3,
        Error::Ingestion { .. } => 4,
        Error::Io(_) => 1,
        _ => 2,
    }
}

/// Exclusive claim on an output directory, released on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        let path = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another run (delete {} if that run is gone)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn append_log(out: &Path, name: &str, line: &str) -> Result<()> {
    let dir = out.join("logs");
    fs::create_dir_all(&dir)?;
    let mut f: File = OpenOptions::new().create(true).append(true).open(dir.join(format!("{name}.log")))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Resolves the config, claims the output directory and runs `name`.
pub fn run(name: &str, flags: &PathFlags) -> Result<()> {
    let cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    }
    .resolve(flags.out.clone(), flags.seed)?;
    let out = cfg.output_dir.clone();
    let _lock = Lock::acquire(&out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_json()? + "\n")?;
    let started = unix_seconds();
    append_log(&out, name, &format!("start {started:.3}"))?;
    let result = match name {
        "generate" => commands::generate(&cfg),
        "train" => commands::train(&cfg),
        "distill" => commands::distill_cmd(&cfg),
        "evaluate" => commands::evaluate(&cfg),
        "scan" => commands::scan(&cfg),
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    };
    let finished = unix_seconds();
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    append_log(&out, name, &format!("end {finished:.3} elapsed {:.3}s {status}", finished - started))?;
    result
}
