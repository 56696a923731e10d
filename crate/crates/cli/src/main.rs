use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hloc_core::config::{BackendKind, ConfigError};
use hloc_core::simulate::{Scenario, ScenarioParams};
use hloc_core::{CampaignConfig, Pipeline, PipelineError};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

/// Geolocate routers from location hints in their reverse-DNS names.
#[derive(Debug, Parser)]
#[command(name = "hloc", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Campaign configuration file.
    #[arg(long, global = true, default_value = "hloc.toml")]
    config: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// sim, file or remote.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    /// Minimum population for a location to be kept.
    #[arg(long, global = true)]
    threshold_pop: Option<u64>,
    /// Maximum probe-to-hint distance in km.
    #[arg(long, global = true)]
    x_km: Option<f64>,
    /// Latency buffer in ms.
    #[arg(long, global = true)]
    a_ms: Option<f64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true)]
    max_concurrency: Option<usize>,
    /// Stop measuring after this many pings; the campaign parks and can resume.
    #[arg(long, global = true)]
    budget: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut CampaignConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.backend {
            cfg.backend.kind = v;
        }
        if let Some(v) = self.threshold_pop {
            cfg.geo.population_threshold = v;
        }
        if let Some(v) = self.x_km {
            cfg.validation.x_km = v;
        }
        if let Some(v) = self.a_ms {
            cfg.validation.a_ms = v;
        }
        if let Some(v) = self.max_concurrency {
            cfg.max_concurrency = v;
        }
        if let Some(v) = self.budget {
            cfg.backend.measurement_budget = Some(v);
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse code files and merge them into locations.
    Codes,
    /// Validate the domain corpus and strip registrable domains.
    Preprocess,
    /// Find location hints in every domain.
    Search,
    /// Pre-scan, then verify or falsify hints with latency measurements.
    Measure {
        /// Continue a parked or interrupted campaign.
        #[arg(long)]
        resume: bool,
    },
    /// Compare verdicts with external geolocation answers.
    Evaluate,
    /// Summarize verdicts, sensitivity and threshold effects.
    Stats,
    /// Run every stage in order.
    Run {
        #[arg(long)]
        resume: bool,
    },
    /// Generate a synthetic scenario and run the whole pipeline on it.
    Simulate {
        /// Directory receiving the scenario inputs and outputs.
        #[arg(long, default_value = "sim")]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        routers: usize,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 150)]
        cities: usize,
    },
}

fn print<T: Serialize>(value: &T) {
    match serde_json::to_string(value) {
        Ok(s) => println!("{s}"),
        Err(e) => tracing::error!(error = %e, "cannot serialize summary"),
    }
}

fn pipeline(cfg_path: &std::path::Path, overrides: &Overrides) -> Result<Pipeline, PipelineError> {
    let mut cfg = CampaignConfig::load(cfg_path)?;
    overrides.apply(&mut cfg);
    Pipeline::new(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let o = &cli.overrides;
    match cli.command {
        Command::Simulate {
            out,
            routers,
            probes,
            cities,
        } => {
            let params = ScenarioParams {
                routers,
                probes,
                cities,
                ..ScenarioParams::desk(o.seed.unwrap_or(1))
            };
            if params.cities == 0 || params.routers == 0 || params.probes == 0 {
                return Err(ConfigError::Invalid("--cities, --routers and --probes must be positive".into()).into());
            }
            let scenario = Scenario::generate(params);
            let cfg_path = scenario
                .write_inputs(&out)
                .map_err(|source| PipelineError::Io { path: out.clone(), source })?;
            tracing::info!(dir = %out.display(), routers, "scenario written");
            let p = pipeline(&cfg_path, o)?;
            print(&p.run_all(false)?);
        }
        cmd => {
            let p = pipeline(&o.config, o)?;
            match cmd {
                Command::Codes => print(&p.codes()?),
                Command::Preprocess => print(&p.preprocess()?),
                Command::Search => print(&p.search()?),
                Command::Measure { resume } => print(&p.measure(resume)?),
                Command::Evaluate => print(&p.evaluate()?),
                Command::Stats => print(&p.stats()?),
                Command::Run { resume } => print(&p.run_all(resume)?),
                Command::Simulate { .. } => unreachable!("handled above"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(EnvFilter::try_from_env("HLOC_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, exit_code = e.exit_code(), "hloc failed");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
