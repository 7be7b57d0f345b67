//! HTTP workbench over `efumi-core`: upload a cube, label bags, run eFUMI in
//! the background and query label influence. All state lives in a workspace
//! directory, so a restarted service picks up where the last one stopped.

pub mod api;
pub mod error;
pub mod jobs;
pub mod quicklook;
pub mod tasks;
pub mod workspace;

use std::net::SocketAddr;
use std::path::PathBuf;

pub use api::{router, AppState};
pub use error::{ApiError, ApiResult};
pub use jobs::{Job, JobKind, JobPool, JobState};
pub use workspace::Workspace;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub root: PathBuf,
    pub addr: SocketAddr,
    /// Jobs allowed to compute at once.
    pub workers: usize,
}

/// Opens the workspace and builds the router. Must be called inside a tokio
/// runtime, since jobs are spawned onto it.
pub fn app(root: impl Into<PathBuf>, workers: usize) -> std::io::Result<axum::Router> {
    let ws = Workspace::open(root)?;
    let pool = JobPool::new(ws.clone(), workers)?;
    Ok(router(AppState { ws, pool }))
}

/// Serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let app = app(&config.root, config.workers)?;
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    log::info!("listening on {} with workspace {}", listener.local_addr()?, config.root.display());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub fn run_blocking(config: ServiceConfig) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(config))
}
