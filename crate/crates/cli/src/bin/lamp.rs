use clap::{Parser, Subcommand};
use lamp_cli::{emit_g2o, load_config, optimize_g2o, run, CliError, RunOptions};
use lamp_core::basestation::FleetConfig;
use lamp_core::optimizer::OptimizerParams;
use std::path::PathBuf;
use std::process::ExitCode;

/// Multi-robot lidar mapping from the command line.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Map a dataset directory and write metrics, graph, map and trajectories.
    Run {
        dataset: PathBuf,
        /// YAML run configuration; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        no_loop_closure: bool,
        #[arg(long)]
        no_icm: bool,
        #[arg(long, default_value = "lamp-out")]
        out: PathBuf,
    },
    /// Optimize a g2o pose graph.
    Optimize {
        graph: PathBuf,
        /// Keep every loop closure instead of re-checking them for consistency.
        #[arg(long)]
        no_icm: bool,
        /// Output file (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lamp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { dataset, config, no_loop_closure, no_icm, out } => {
            let config = match config {
                Some(path) => load_config(&path)?,
                None => FleetConfig::default(),
            };
            let metrics = run(&dataset, &RunOptions { config, no_loop_closure, no_icm, out: out.clone() })?;
            let b = &metrics.basestation;
            eprintln!("{} scans, {} keys -> {}", metrics.scans, metrics.keys, out.display());
            for r in &b.robots {
                if let Some(e) = r.end_to_end_error {
                    eprintln!("robot {}: end-to-end error {e:.3} m", r.robot);
                }
            }
            if let Some(e) = b.mean_artifact_error {
                eprintln!("mean artifact error {e:.3} m");
            }
            Ok(())
        }
        Command::Optimize { graph, no_icm, out } => {
            let text = std::fs::read_to_string(&graph).map_err(|e| CliError::Data(format!("{}: {e}", graph.display())))?;
            let (g, summary) = optimize_g2o(&text, !no_icm, &OptimizerParams::default())?;
            emit_g2o(&g, out.as_deref())?;
            if let Some(r) = &summary.report {
                eprintln!(
                    "{} loop closures, {} inactive; error {:.6e} -> {:.6e} in {} iterations ({:?})",
                    summary.loop_closures, summary.rejected, r.initial_error, r.final_error, r.iterations, r.termination
                );
            }
            Ok(())
        }
    }
}
