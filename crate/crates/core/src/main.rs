use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdfl::acceptance::{run_acceptance, AcceptanceOptions};
use cdfl::harness::{compare_methods, run, SimulationPlan};
use cdfl::{Method, Result, ScenarioConfig};

#[derive(Parser)]
#[command(name = "cdfl", version, about = "Client-driven asynchronous federated learning simulator")]
struct Cli {
    /// Default parent directory for run output.
    #[arg(long, global = true, env = "CDFL_OUT_DIR", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method under one seed and write the run directory.
    Run {
        /// Scenario file (TOML). Built-in defaults when omitted.
        config: Option<PathBuf>,
        /// Overrides the method named in the scenario.
        #[arg(long)]
        method: Option<Method>,
        /// Overrides the seed named in the scenario.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every method under every seed and print a summary table.
    Compare {
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance suite on the default scenario.
    Accept {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a scenario file: the defaults, or a named estimation preset.
    Config {
        #[arg(long)]
        preset: Option<String>,
    },
}

fn load(config: Option<&Path>) -> Result<ScenarioConfig> {
    match config {
        Some(path) => ScenarioConfig::from_path(path),
        None => Ok(ScenarioConfig::default()),
    }
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, method, seed, out } => {
            let cfg = load(config.as_deref())?;
            let method = method.unwrap_or(cfg.simulation.method);
            let seed = seed.unwrap_or(cfg.seed);
            let report = run(&SimulationPlan::from_scenario(&cfg, method, seed), &cfg)?;
            let dir = out.unwrap_or_else(|| cli.out_root.join(format!("{method}-seed{seed}")));
            report.write_dir(&dir, &cfg)?;
            let (before, after) = report.tail_accuracy(5);
            println!(
                "{method} seed {seed}: {} syncs, mean accuracy before {:.4} after {:.4} (last 5 sessions {before:.4} / {after:.4})",
                report.totals.syncs,
                report.mean_acc_before(),
                report.mean_acc_after()
            );
            if let Some(kl) = report.mean_kl() {
                println!("mean KL {kl:.4}");
            }
            println!("wrote {}", dir.display());
            Ok(true)
        }
        Command::Compare { config, seeds, out } => {
            let cfg = load(config.as_deref())?;
            let summary = compare_methods(&cfg, &seeds)?;
            print!("{summary}");
            let dir = out.unwrap_or_else(|| cli.out_root.join("compare"));
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("summary.csv"), summary.to_csv())?;
            std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            for method in Method::ALL {
                for r in summary.runs_for(method) {
                    r.write_dir(&dir.join(format!("{method}-seed{}", r.seed)), &cfg)?;
                }
            }
            println!("wrote {}", dir.display());
            Ok(true)
        }
        Command::Accept { out } => {
            let dir = out.unwrap_or_else(|| cli.out_root.join("accept"));
            std::fs::create_dir_all(&dir)?;
            let opts = AcceptanceOptions { out_dir: Some(dir.clone()), ..AcceptanceOptions::default() };
            let report = run_acceptance(&opts, |o| println!("{o}"))?;
            std::fs::write(dir.join("acceptance.json"), serde_json::to_string_pretty(&report)?)?;
            let passed = report.outcomes.iter().filter(|o| o.passed).count();
            println!("{passed}/{} criteria passed", report.outcomes.len());
            Ok(report.all_passed())
        }
        Command::Config { preset } => {
            let mut cfg = ScenarioConfig::default();
            if let Some(name) = preset {
                cfg = cfg.with_preset(&name)?;
            }
            print!("{}", cfg.to_toml_string()?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
