//! `sfldp` — command-line driver for the slow-fast large-deviation toolkit.
//!
//! Every subcommand reads its parameters from one TOML config (see the
//! repository README for the schema), writes CSV/JSON artifacts plus a run
//! manifest into the out dir, and is byte-for-byte reproducible for a fixed
//! `(command, config, seed, version)`.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sfldp_core::Error as CoreError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Compute(CoreError),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Compute(e) => write!(f, "computation failed: {e}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Compute(e) => match e {
                CoreError::Config(_) | CoreError::UnknownBuiltin { .. } => 2,
                CoreError::Io(_) => 4,
                _ => 3,
            },
            CliError::Io(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "sfldp",
    version,
    about = "Hamiltonians, rate functions, action functionals and Monte Carlo \
             verifiers for slow-fast SDE large deviations"
)]
struct Cli {
    /// TOML run config (see README for the schema).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; combined with the config hash it pins every output byte.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,

    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Output directory (default: $SFLDP_OUT_DIR, else ./out).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Config overrides `key.path=value`; repeatable.
    #[arg(long = "override", global = true, value_name = "K=V")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Tabulate the Hamiltonian surface H(x', x, beta) over a beta box.
    Ham,
    /// Evaluate the (truncated) Legendre transform along an alpha sweep.
    Rate,
    /// Evaluate the action of a path file (plus optional discretized form).
    Action,
    /// Simulate coupled two-scale trajectories.
    Simulate,
    /// Check the block exponential moment against the spectral Hamiltonian.
    #[command(name = "verify-lemma5")]
    VerifyLemma5,
    /// Tube-probability sweep over decreasing epsilon.
    Ldp,
    /// Minimize the discretized action between fixed endpoints.
    Minpath,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ham => "ham",
            Command::Rate => "rate",
            Command::Action => "action",
            Command::Simulate => "simulate",
            Command::VerifyLemma5 => "verify-lemma5",
            Command::Ldp => "ldp",
            Command::Minpath => "minpath",
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot configure worker pool: {e}")))?;
    }

    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let raw = std::fs::read(config_path).map_err(CliError::Io)?;
    let cfg = config::load_config(config_path, &cli.overrides)?;
    let hash = manifest::config_hash(&raw, &cli.overrides, cli.seed);

    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("SFLDP_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir).map_err(CliError::Io)?;

    let spec = cfg.system.build().map_err(CliError::Compute)?;
    let name = cli.command.name();
    let missing =
        |sec: &str| CliError::Config(format!("config is missing the [{sec}] table"));

    let outputs = match cli.command {
        Command::Ham => {
            let s = cfg.ham.as_ref().ok_or_else(|| missing("ham"))?;
            commands::run_ham(&spec, s, &out_dir)?
        }
        Command::Rate => {
            let s = cfg.rate.as_ref().ok_or_else(|| missing("rate"))?;
            commands::run_rate(&spec, s, &out_dir)?
        }
        Command::Action => {
            let s = cfg.action.as_ref().ok_or_else(|| missing("action"))?;
            commands::run_action(&spec, s, &out_dir)?
        }
        Command::Simulate => {
            let s = cfg.simulate.as_ref().ok_or_else(|| missing("simulate"))?;
            commands::run_simulate(&spec, s, cli.seed, &out_dir)?
        }
        Command::VerifyLemma5 => {
            let s = cfg.lemma5.as_ref().ok_or_else(|| missing("lemma5"))?;
            commands::run_lemma5(&spec, s, cli.seed, &out_dir)?
        }
        Command::Ldp => {
            let s = cfg.ldp.as_ref().ok_or_else(|| missing("ldp"))?;
            commands::run_ldp(&spec, s, cli.seed, &hash, &out_dir)?
        }
        Command::Minpath => {
            let s = cfg.minpath.as_ref().ok_or_else(|| missing("minpath"))?;
            commands::run_minpath(&spec, s, &out_dir)?
        }
    };

    manifest::write_manifest(&out_dir, name, &hash, cli.seed, &outputs)?;
    for file in &outputs {
        println!("{}", out_dir.join(file).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sfldp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
