use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rangesim::scenarios::{emit_report, emit_reports, run_scenario, sweep, with_worker_pool, ScenarioConfig};
use rangesim::Error;

#[derive(Parser, Debug)]
#[command(name = "rangesim", version, about = "Broadcast ranging scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its result files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed stored in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the scenario once per value of a numeric field.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `25e6,50e6,100e6`.
        #[arg(long)]
        values: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_values(list: &str) -> Result<Vec<f64>, Error> {
    let values: Result<Vec<f64>, _> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| format!("bad sweep value {s:?}: {e}")))
        .collect();
    match values {
        Ok(v) if v.is_empty() => Err(Error::InvalidConfig(vec!["--values is empty".into()])),
        Ok(v) => Ok(v),
        Err(e) => Err(Error::InvalidConfig(vec![e])),
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Error> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn checked(cfg: ScenarioConfig) -> Result<ScenarioConfig, Error> {
    let problems = cfg.validate();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::InvalidConfig(problems))
    }
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Validate { config } => {
            checked(load(&config, None)?)?;
            println!("{}: ok", config.display());
            Ok(())
        }
        Command::Run { config, seed, out } => {
            let cfg = checked(load(&config, seed)?)?;
            let report = with_worker_pool(|| run_scenario(&cfg))??;
            emit_report(&report, &out)?;
            let a = &report.aggregate;
            println!(
                "{} mae_m={} failure_rate={} -> {}",
                report.scenario_id,
                a.mae_m.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into()),
                a.failure_rate,
                out.display()
            );
            Ok(())
        }
        Command::Sweep {
            config,
            axis,
            values,
            seed,
            out,
        } => {
            let cfg = load(&config, seed)?;
            let values = parse_values(&values)?;
            let reports = with_worker_pool(|| sweep(&cfg, &axis, &values))??;
            emit_reports(&reports, &out)?;
            for r in &reports {
                let v = r.axis.as_ref().map(|(_, v)| *v).unwrap_or(f64::NAN);
                let mae = r.aggregate.mae_m.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into());
                println!("{axis}={v} mae_m={mae} failure_rate={}", r.aggregate.failure_rate);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::InvalidConfig(problems) => {
                    eprintln!("invalid configuration:");
                    for p in problems {
                        eprintln!("  - {p}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
