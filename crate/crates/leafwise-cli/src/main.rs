use clap::{Parser, Subcommand};
use leafwise::scenario::{
    builtin_scenario, builtin_scenarios, load_scenario, parse_scenario, RunOptions, Scenario,
};
use leafwise::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "leafwise",
    version,
    about = "Integrates admissible curves on anchored bundles and estimates leafwise holonomy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario, by built-in name or path to a JSON file.
    Run {
        scenario: String,
        /// Override the integrator step.
        #[arg(long)]
        step: Option<f64>,
        /// Override the random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for CSV artifacts.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Omit the timestamp header line from artifacts.
        #[arg(long)]
        no_timestamp: bool,
        /// Multiply every scenario tolerance, for exploratory runs.
        #[arg(long, default_value_t = 1.0)]
        tol_scale: f64,
    },
    /// List the built-in scenarios.
    List,
}

fn resolve(name: &str) -> Result<Scenario> {
    let path = Path::new(name);
    if path.is_file() {
        return load_scenario(path);
    }
    match builtin_scenario(name) {
        Some(text) => parse_scenario(text),
        None => Err(Error::InvalidScenario(format!(
            "'{name}' is neither a file nor a built-in scenario; built-ins: {}",
            builtin_scenarios()
                .iter()
                .map(|(n, _)| *n)
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::List => {
            for (name, _) in builtin_scenarios() {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Command::Run {
            scenario,
            step,
            seed,
            out_dir,
            no_timestamp,
            tol_scale,
        } => {
            let opts = RunOptions {
                step,
                seed,
                out_dir,
                timestamp: !no_timestamp,
                tol_scale,
            };
            let report =
                resolve(&scenario).and_then(|sc| leafwise::scenario::run_scenario(&sc, &opts));
            match report {
                Ok(report) => {
                    print!("{}", report.render());
                    if report.passed() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
