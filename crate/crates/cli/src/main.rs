use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod emit;
mod output;
mod rabi;
mod spectroscopy;
mod stability;
mod tomography;

use config::ExperimentConfig;
use output::Output;

const EXIT_CONFIG: u8 = 2;
const EXIT_WARNINGS: u8 = 3;

#[derive(Parser)]
#[command(name = "photonsource", version, about = "Waveguide single-photon source: simulate, measure, analyse")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides measurement.n_shots.
    #[arg(long, global = true)]
    shots: Option<usize>,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    parallel: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// π pulse through the cancellation path, with photon accounting.
    Emit,
    /// Moments, g2(0), density matrix and Wigner function of the emitted mode.
    Tomography,
    /// Reflection sweep, mismatch compensation and phase-curve fit.
    Spectroscopy,
    /// Interleaved long-run timeline of rates and frequency.
    Stability,
    /// Damped Rabi oscillations and the phase-sum relation.
    Rabi,
    /// Print the effective configuration as TOML.
    Config,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Emit => "emit",
            Command::Tomography => "tomography",
            Command::Spectroscopy => "spectroscopy",
            Command::Stability => "stability",
            Command::Rabi => "rabi",
            Command::Config => "config",
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.shots {
        cfg.measurement.n_shots = n;
    }
    cfg.measurement.seed = cfg.seed;
    cfg.stability.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(n) = cli.parallel {
        if n == 0 {
            eprintln!("config error: --parallel must be >= 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    if let Command::Config = cli.command {
        return match toml::to_string(&cfg) {
            Ok(s) => {
                print!("{s}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        };
    }

    match run(cli.command, &cfg, &cli.out) {
        Ok(warnings) if warnings.is_empty() => ExitCode::SUCCESS,
        Ok(warnings) => {
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            ExitCode::from(EXIT_WARNINGS)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let invalid = e
                .chain()
                .any(|c| matches!(c.downcast_ref(), Some(photonsource::Error::InvalidParam { .. })));
            if invalid {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command, cfg: &ExperimentConfig, out: &std::path::Path) -> anyhow::Result<Vec<String>> {
    let mut o = Output::create(out)?;
    let results = match command {
        Command::Emit => emit::run(cfg, &mut o)?,
        Command::Tomography => tomography::run(cfg, &mut o)?,
        Command::Spectroscopy => spectroscopy::run(cfg, &mut o)?,
        Command::Stability => stability::run(cfg, &mut o)?,
        Command::Rabi => rabi::run(cfg, &mut o)?,
        Command::Config => unreachable!("handled before dispatch"),
    };
    let report = o.finish(command.name(), cfg.seed, results)?;
    println!("{}", serde_json::to_string_pretty(&report.results)?);
    Ok(report.warnings)
}
