use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use cachesniper::cache_model::CacheGeometry;
use cachesniper::cli::{emit_figure_data, run_scenario, validate_policies, FigureKind, ScenarioConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cachesniper", version, about = "Timed cache eviction attack simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its CSV and JSON outputs.
    Run { config: PathBuf },
    /// Write the data behind one figure: aes_last, wait_flush or flush_count_tot.
    Figures { which: FigureKind, config: PathBuf },
    /// Replay the replacement-policy checks and print a report.
    Validate,
}

fn load(path: &PathBuf) -> Result<ScenarioConfig, ExitCode> {
    ScenarioConfig::load(path).map_err(|e| {
        eprintln!("{e}");
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let code = match cli.command {
        Command::Run { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match run_scenario(&cfg) {
                Ok(s) => {
                    println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Figures { which, config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match emit_figure_data(which, &cfg) {
                Ok(path) => {
                    println!("{}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Validate => {
            let report = validate_policies(&CacheGeometry::default());
            for s in &report.suites {
                println!("{} {}: {}", if s.passed { "PASS" } else { "FAIL" }, s.name, s.detail);
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    };
    eprintln!("wall time {:.2?}", started.elapsed());
    code
}
