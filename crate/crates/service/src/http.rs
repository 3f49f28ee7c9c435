//! Shared HTTP plumbing: JSON errors, listener setup and graceful shutdown.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::watch;

pub const API_PREFIX: &str = "/api/v1";

/// Large enough for artifacts and multi-megabyte log bundles.
pub const BODY_LIMIT: usize = 256 * 1024 * 1024;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "error": self.code, "message": self.message })),
        )
            .into_response()
    }
}

impl From<crate::datasets::StoreError> for ApiError {
    fn from(e: crate::datasets::StoreError) -> Self {
        use crate::datasets::StoreError::*;
        let msg = e.to_string();
        match e {
            UnknownDataset(_) => Self::not_found("UnknownDataset", msg),
            UnknownExample { .. } => Self::not_found("UnknownExample", msg),
            DatasetExists(_) => Self::conflict("DatasetExists", msg),
            UnknownLabel(_) => Self::bad_request("UnknownLabel", msg),
            Invalid(_) => Self::bad_request("InvalidRequest", msg),
            Io(_) | Corrupt { .. } => Self::internal(msg),
        }
    }
}

impl From<crate::results::ResultStoreError> for ApiError {
    fn from(e: crate::results::ResultStoreError) -> Self {
        match e {
            crate::results::ResultStoreError::Malformed { .. } => {
                Self::bad_request("PayloadMalformed", e.to_string())
            }
            other => Self::internal(other.to_string()),
        }
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body, mapping syntax errors to `PayloadMalformed`.
pub fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request("PayloadMalformed", e.to_string()))
}

/// Triggers shutdown from signals or programmatically.
#[derive(Clone)]
pub struct Shutdown {
    tx: watch::Sender<bool>,
}

impl Default for Shutdown {
    fn default() -> Self {
        Self::new()
    }
}

impl Shutdown {
    pub fn new() -> Self {
        Self {
            tx: watch::channel(false).0,
        }
    }

    pub fn trigger(&self) {
        self.tx.send_replace(true);
    }

    pub async fn wait(&self) {
        let mut rx = self.tx.subscribe();
        let _ = rx.wait_for(|v| *v).await;
    }

    /// Triggers on SIGTERM or SIGINT.
    pub fn listen_for_signals(&self) {
        let me = self.clone();
        tokio::spawn(async move {
            let ctrl_c = tokio::signal::ctrl_c();
            #[cfg(unix)]
            {
                let mut term =
                    tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
                        .expect("install SIGTERM handler");
                tokio::select! {
                    _ = ctrl_c => {}
                    _ = term.recv() => {}
                }
            }
            #[cfg(not(unix))]
            let _ = ctrl_c.await;
            tracing::info!("shutdown requested");
            me.trigger();
        });
    }
}

pub struct BoundServer {
    pub listener: TcpListener,
    pub addr: SocketAddr,
}

pub async fn bind(host: &str, port: u16, port_file: Option<&Path>) -> std::io::Result<BoundServer> {
    let listener = TcpListener::bind((host, port)).await?;
    let addr = listener.local_addr()?;
    if let Some(p) = port_file {
        write_atomic(p, format!("{}\n", addr.port()).as_bytes())?;
    }
    Ok(BoundServer { listener, addr })
}

/// Serves until shutdown, then drains in-flight requests for at most
/// `drain`. Returns false when the drain timed out.
pub async fn serve(
    server: BoundServer,
    app: Router,
    shutdown: Shutdown,
    drain: Duration,
) -> std::io::Result<bool> {
    let (done_tx, done_rx) = tokio::sync::oneshot::channel::<()>();
    let signal = shutdown.clone();
    let handle = tokio::spawn(async move {
        let r = axum::serve(server.listener, app)
            .with_graceful_shutdown(async move { signal.wait().await })
            .await;
        let _ = done_tx.send(());
        r
    });
    shutdown.wait().await;
    match tokio::time::timeout(drain, done_rx).await {
        Ok(_) => {
            handle.await.map_err(std::io::Error::other)??;
            Ok(true)
        }
        Err(_) => {
            tracing::warn!(?drain, "drain timed out; abandoning open connections");
            handle.abort();
            Ok(false)
        }
    }
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = PathBuf::from(path);
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    tmp.set_file_name(name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
