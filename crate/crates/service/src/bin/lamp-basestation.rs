use anyhow::Context;
use clap::Parser;
use lamp_core::basestation::Basestation;
use lamp_service::{router, ServiceConfig};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

/// Serve a LAMP base station over HTTP.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// YAML service configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `listen` from the config.
    #[arg(long)]
    listen: Option<String>,
    /// Resume from the state in the configured `persist_dir`.
    #[arg(long)]
    restore: bool,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut cfg = match &args.config {
        Some(path) => ServiceConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => ServiceConfig::default(),
    };
    if let Some(listen) = args.listen {
        cfg.listen = listen;
    }
    let base = match (&cfg.basestation.persist_dir, args.restore) {
        (Some(dir), true) => Basestation::restore(dir, cfg.basestation.clone()).with_context(|| format!("restoring from {}", dir.display()))?,
        (None, true) => anyhow::bail!("--restore needs basestation.persist_dir in the config"),
        _ => Basestation::new(cfg.basestation.clone()),
    };
    let state = Arc::new(Mutex::new(base));
    let listener = tokio::net::TcpListener::bind(&cfg.listen).await.with_context(|| format!("binding {}", cfg.listen))?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    let base = Arc::try_unwrap(state).map_err(|_| anyhow::anyhow!("base station still in use at shutdown"))?;
    base.into_inner().unwrap_or_else(|e| e.into_inner()).shutdown()?;
    Ok(())
}
