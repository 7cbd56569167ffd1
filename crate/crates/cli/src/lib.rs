//! `delayctl`: configuration-driven runner for the delay-control harnesses.
//!
//! Every subcommand writes `config.toml` (the fully resolved configuration),
//! `report.txt` (flat `key = value` lines), its CSV tables and a
//! `manifest.toml` with hashes of all of them. Exit codes:
//!
//! * 0: success, or a check whose verdict holds
//! * 1: a check ran and its verdict is false
//! * 2: invalid configuration or an I/O failure
//! * 3: a hypothesis gate refused the instance, or the numerics failed

pub mod config;
mod commands;
mod svg;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use delay_control::report::KeyValues;
use delay_control::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use commands::Outcome;

#[derive(Debug, Parser)]
#[command(name = "delayctl", version, about = "Stochastic recursive control with mixed delay: experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out/<subcommand>`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Override a configuration field, e.g. `--set numerics.dt=0.005`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate the controlled delay equation and dump trajectories.
    Simulate,
    /// Solve the backward equation by regression Monte Carlo.
    SolveBsde,
    /// Solve the HJB equation on the (t, x, x1) grid.
    SolveHjb,
    /// Coupled-path ordering of two instances.
    CheckComparison,
    /// Moment bound ratio for each order.
    CheckMoments,
    /// Sufficient maximum principle flags.
    CheckMp,
    /// Adjoint against the spatial super-differential of V.
    CheckDuality,
    /// Log-log slopes of the variational remainders.
    CheckScaling,
    /// Verification statistic and cost gap for a candidate control.
    Verify,
    /// Cost under the original and the drift-shifted measure.
    Girsanov,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolveBsde => "solve-bsde",
            Command::SolveHjb => "solve-hjb",
            Command::CheckComparison => "check-comparison",
            Command::CheckMoments => "check-moments",
            Command::CheckMp => "check-mp",
            Command::CheckDuality => "check-duality",
            Command::CheckScaling => "check-scaling",
            Command::Verify => "verify",
            Command::Girsanov => "girsanov",
        }
    }
}

/// Files produced by a run, keyed by name; written once at the end.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    /// Run a CSV writer into memory.
    pub fn csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) {
        let mut buf = Vec::new();
        f(&mut buf).expect("writing to memory");
        self.add(name, buf);
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    tool_version: &'static str,
    core_version: &'static str,
    subcommand: &'static str,
    seed: u64,
    exit_code: i32,
    status: &'a str,
    config_file: &'static str,
    config_sha256: String,
    rerun: String,
    files: BTreeMap<String, String>,
    config: &'a config::RunConfig,
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Exit code for a core error.
fn error_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidHistory(_) => 2,
        _ => 3,
    }
}

fn error_status(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::InvalidHistory(_) => "invalid",
        Error::Inapplicable(_) | Error::Hypothesis(_) => "inapplicable",
        _ => "failed",
    }
}

fn write_out(dir: &Path, files: &BTreeMap<String, Vec<u8>>) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        std::fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

/// Parse `args` (program name first), run the subcommand and return the exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    run_with(args, true)
}

/// [`run`] without the one-line status summary on stdout.
pub fn run_quiet<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    run_with(args, false)
}

fn run_with<I, A>(args: I, summary: bool) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut cfg = match config::load_file(cli.config.as_deref(), &cli.set) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid configuration\n{e}");
            return 2;
        }
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    let resolved = match cfg.resolve() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: invalid configuration\n{e}");
            return 2;
        }
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out").join(cli.cmd.name()));

    let mut art = Artifacts::default();
    let mut kv = KeyValues::new();
    kv.put("command", cli.cmd.name()).put("seed", resolved.seed);
    let mut exec = || commands::execute(cli.cmd, &cfg, &resolved, &mut art, &mut kv);
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(exec),
            Err(e) => {
                eprintln!("error: --threads {n}: {e}");
                return 2;
            }
        },
        None => exec(),
    };
    let (code, status) = match &result {
        Ok(Outcome::Done) => (0, "ok"),
        Ok(Outcome::Verdict(true)) => (0, "pass"),
        Ok(Outcome::Verdict(false)) => (1, "fail"),
        Err(e) => (error_code(e), error_status(e)),
    };
    kv.put("status", status);
    if let Err(e) = &result {
        kv.put("error", e);
        eprintln!("error: {e}");
    }

    let cfg_text = cfg.to_toml();
    art.add("config.toml", cfg_text.clone().into_bytes());
    art.add("report.txt", kv.to_text().into_bytes());
    let files = art.files.iter().map(|(k, v)| (k.clone(), sha256(v))).collect();
    let manifest = Manifest {
        tool: "delayctl",
        tool_version: env!("CARGO_PKG_VERSION"),
        core_version: delay_control::VERSION,
        subcommand: cli.cmd.name(),
        seed: resolved.seed,
        exit_code: code,
        status,
        config_file: "config.toml",
        config_sha256: sha256(cfg_text.as_bytes()),
        rerun: format!("delayctl {} --config config.toml", cli.cmd.name()),
        files,
        config: &cfg,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    art.add("manifest.toml", text.into_bytes());
    if let Err(e) = write_out(&out, &art.files) {
        eprintln!("error: writing {}: {e}", out.display());
        return 2;
    }
    if summary {
        println!("{}: {status} ({})", cli.cmd.name(), out.display());
    }
    code
}
