use clap::{Parser, Subcommand};
use lamp_core::sim::{Dataset, Scenario};
use std::path::PathBuf;
use std::process::ExitCode;

/// Simulated tunnel datasets.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scans, ground truth and labels from a scenario file.
    Generate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let Command::Generate { scenario, out } = Cli::parse().command;
    let scenario = match Scenario::load(&scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("lamp-sim: {}: {e}", scenario.display());
            return ExitCode::from(2);
        }
    };
    let result = Dataset::generate(&scenario).map_err(|e| e.to_string()).and_then(|d| d.write(&out).map(|()| d).map_err(|e| e.to_string()));
    match result {
        Ok(d) => {
            let scans: usize = d.robots.iter().map(|t| t.len()).sum();
            eprintln!("{}: {} robots, {scans} scans -> {}", d.name, d.robots.len(), out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lamp-sim: {e}");
            ExitCode::from(3)
        }
    }
}
