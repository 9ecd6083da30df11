use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tclvb::{Pipeline, ScenarioConfig, Stage, StageError};

#[derive(Parser)]
#[command(name = "tclvb", version, about = "Virtual battery identification for TCL ensembles")]
struct Cli {
    /// Scenario configuration (JSON). Defaults to the built-in profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Built-in profile used when no configuration file is given.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Test)]
    profile: Profile,
    /// Device population of the built-in profile.
    #[arg(long, global = true, value_enum, default_value_t = Population::Ac)]
    population: Population,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// 10 s steps.
    Test,
    /// 1 s steps.
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Population {
    Ac,
    Ewh,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the ensemble and compute its baseline.
    Baseline,
    /// Compute the power envelope.
    Envelope,
    /// Generate regulation signals and filter them by the envelope.
    Signals,
    /// Track accepted signals (all of them unless ids are given).
    Track {
        #[arg(long = "id")]
        ids: Vec<String>,
    },
    /// Fit the virtual battery with both initial conditions.
    Fit,
    /// Compare battery and analytic SOC traces.
    Validate,
    /// Run everything and write report.json.
    Report,
    /// Alias for `report`.
    All,
    /// Print the resolved configuration as JSON.
    Config,
}

fn load_config(cli: &Cli) -> anyhow::Result<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => {
            let base = match cli.population {
                Population::Ac => ScenarioConfig::ac_default(),
                Population::Ewh => ScenarioConfig::ewh_default(),
            };
            match cli.profile {
                Profile::Test => base,
                Profile::Full => base.full_resolution(),
            }
        }
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: ScenarioConfig) -> Result<(), StageError> {
    let mut p = Pipeline::new(cfg)?;
    match &cli.command {
        Command::Baseline => {
            let b = p.baseline()?;
            println!(
                "baseline mean {:.3} kW, analytic x0 {:.3} kWh, band energy {:.3} kWh",
                b.baseline.mean_kw(),
                b.x0_analytic_kwh,
                b.band_energy_kwh
            );
        }
        Command::Envelope => {
            let e = &p.envelope()?.envelope;
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" ");
            println!("P+ {}", fmt(&e.grid_plus));
            println!("P- {}", fmt(&e.grid_minus));
        }
        Command::Signals => {
            let s = p.signals()?;
            println!("{} of {} signals accepted", s.accepted.len(), s.signals.len());
        }
        Command::Track { ids } => {
            let records = if ids.is_empty() { p.tracks()?.to_vec() } else { p.track_ids(ids)? };
            for r in &records {
                let max = r.rel_err_pct.iter().copied().fold(0.0, f64::max);
                println!("{} f = {} s, max error {:.3}%", r.id, r.violation_time_s, max);
            }
        }
        Command::Fit => match p.fit()? {
            Some(f) => {
                for (label, r) in [("zero", &f.zero), ("analytic", &f.analytic)] {
                    println!(
                        "{label:>8}: a = {:.4} 1/h, C = {:.3} kWh, x0 = {:.3} kWh, cost {:.4}{}",
                        r.a_per_h,
                        r.c_kwh,
                        r.x0_kwh,
                        r.objective,
                        if r.saturated { " (saturated)" } else { "" }
                    );
                }
            }
            None => println!("no accepted signals, nothing to fit"),
        },
        Command::Validate => match p.validate()? {
            Some(v) => {
                for c in &v.comparisons {
                    println!("{} rms {:.4} kWh", c.id, c.rms_kwh);
                }
            }
            None => println!("no fit, nothing to validate"),
        },
        Command::Report | Command::All => {
            let r = p.report()?;
            println!("{}", serde_json::to_string_pretty(&r).map_err(|e| StageError { stage: Stage::Report, source: e.into() })?);
        }
        Command::Config => unreachable!("handled before the pipeline starts"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid configuration: {e:#}");
            return ExitCode::from(Stage::Config.exit_code() as u8);
        }
    };
    if let Command::Config = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return ExitCode::SUCCESS;
    }
    match run(&cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}
