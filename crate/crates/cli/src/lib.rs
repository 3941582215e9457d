//! Scenario runner for the esp library: TOML scenario in, CSV series and a
//! JSON summary out.
//!
//! Exit codes: 0 ok, 2 parse error, 3 validation error, 4 non-convergence
//! (partial results written and flagged), 5 I/O error.

pub mod config;
pub mod error;
pub mod output;
pub mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use config::{Kind, SCHEMA_VERSION};
use error::CliError;

#[derive(Parser)]
#[command(name = "esp", about = "Electromagnetic signal-processing experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aperture and link degrees-of-freedom tables.
    DofTable(RunArgs),
    /// Communication modes, mode counts and capacities between two segments.
    Modes(RunArgs),
    /// Reactive-load synthesis for a dynamic scattering array precoder.
    DsaPrecoder(RunArgs),
    /// Train a stacked metasurface towards a target transfer matrix.
    SimTrain(RunArgs),
    /// Train a stacked metasurface as a 2D DFT and sweep DoA accuracy.
    SimDoa(RunArgs),
    /// Anomalous-reflection profiles and pattern peaks of a surface.
    RisPattern(RunArgs),
    /// Self-conjugating metasurface link campaigns.
    ScmLink(RunArgs),
}

#[derive(Args)]
pub struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Replace the scenario's seed list with this single seed.
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Worker threads for parallel trials.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory, overriding the scenario's `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn split(self) -> (Kind, RunArgs) {
        match self {
            Command::DofTable(a) => (Kind::DofTable, a),
            Command::Modes(a) => (Kind::Modes, a),
            Command::DsaPrecoder(a) => (Kind::DsaPrecoder, a),
            Command::SimTrain(a) => (Kind::SimTrain, a),
            Command::SimDoa(a) => (Kind::SimDoa, a),
            Command::RisPattern(a) => (Kind::RisPattern, a),
            Command::ScmLink(a) => (Kind::ScmLink, a),
        }
    }
}

pub fn execute(kind: Kind, args: RunArgs) -> Result<(), CliError> {
    let mut scenario = config::load(&args.config)?;
    if let Some(seed) = args.seed_override {
        scenario.seeds = vec![seed];
    }
    run::validate(&scenario, kind)?;
    if let Some(k) = args.workers {
        if k == 0 {
            return Err(CliError::invalid("--workers", "must be >= 1"));
        }
        // ignore the error if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    let dir = args.out.unwrap_or_else(|| scenario.output.clone());
    let results = run::run(&scenario)?;
    let files = results.emit(&scenario, &dir)?;
    for f in &files {
        log::info!("wrote {}", f.display());
    }
    if !results.converged {
        return Err(CliError::NotConverged(format!(
            "partial results written to {} (status \"partial\")",
            dir.display()
        )));
    }
    Ok(())
}

pub fn version() -> String {
    format!(
        "{} (library esp-core {}, schema {SCHEMA_VERSION})",
        env!("CARGO_PKG_VERSION"),
        esp_core::VERSION
    )
}

/// Parses `args` (program name first), runs the scenario and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = Cli::command()
        .version(version())
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (kind, args) = cli.command.split();
    match execute(kind, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("esp {}: {e}", kind.name());
            e.exit_code()
        }
    }
}
