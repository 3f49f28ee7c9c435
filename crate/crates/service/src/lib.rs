//! The training and classification HTTP services.

pub mod classify;
pub mod config;
pub mod datasets;
pub mod fetch;
pub mod http;
pub mod results;
pub mod train;

use std::path::Path;
use std::time::Duration;

pub use classify::ClassifyService;
pub use config::{ConfigError, ServiceConfig};
pub use train::TrainService;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceKind {
    Train,
    Classify,
}

impl ServiceKind {
    pub fn name(self) -> &'static str {
        match self {
            ServiceKind::Train => "train",
            ServiceKind::Classify => "classify",
        }
    }

    pub fn port(self, config: &ServiceConfig) -> u16 {
        match self {
            ServiceKind::Train => config.server.train_port,
            ServiceKind::Classify => config.server.classify_port,
        }
    }
}

/// Runs one service in the foreground until SIGTERM or SIGINT. The bound
/// port is written to `port_file` once the listener is up.
pub fn run(
    kind: ServiceKind,
    config: ServiceConfig,
    port_file: Option<&Path>,
) -> Result<(), String> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let shutdown = http::Shutdown::new();
        shutdown.listen_for_signals();
        let drain = Duration::from_secs(config.server.drain_timeout_s);
        let server = http::bind(&config.server.bind, kind.port(&config), port_file)
            .await
            .map_err(|e| format!("bind {}:{}: {e}", config.server.bind, kind.port(&config)))?;
        tracing::info!(service = kind.name(), addr = %server.addr, "listening");
        let clean = match kind {
            ServiceKind::Train => {
                let svc = tokio::task::spawn_blocking(move || TrainService::new(config))
                    .await
                    .map_err(|e| e.to_string())??;
                svc.spawn_scheduler(shutdown.clone());
                let clean = http::serve(server, svc.router(), shutdown, drain).await;
                svc.wait_idle(drain);
                clean
            }
            ServiceKind::Classify => {
                let svc = tokio::task::spawn_blocking(move || ClassifyService::new(config))
                    .await
                    .map_err(|e| e.to_string())??;
                let clean = http::serve(server, svc.router(), shutdown, drain).await;
                svc.flush();
                clean
            }
        }
        .map_err(|e| e.to_string())?;
        if !clean {
            tracing::warn!(service = kind.name(), "stopped before all requests drained");
        }
        Ok(())
    })
}
