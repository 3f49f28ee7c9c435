//! Retrieval of log content referenced by URI: local paths, `file://`
//! URLs and HTTP(S), with a byte cap and a timeout.

use std::io::Read;
use std::path::Path;
use std::time::Duration;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum FetchError {
    #[error("fetch failed for {uri}: {reason}")]
    Failed { uri: String, reason: String },
    #[error("fetch failed for {uri}: exceeds {limit} bytes")]
    TooLarge { uri: String, limit: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct FetchLimits {
    pub max_bytes: u64,
    pub timeout: Duration,
}

impl Default for FetchLimits {
    fn default() -> Self {
        Self {
            max_bytes: 64 * 1024 * 1024,
            timeout: Duration::from_secs(30),
        }
    }
}

fn failed(uri: &str, reason: impl ToString) -> FetchError {
    FetchError::Failed {
        uri: uri.to_owned(),
        reason: reason.to_string(),
    }
}

/// Blocking fetch; call from a blocking context.
pub fn fetch_bytes(uri: &str, limits: FetchLimits) -> Result<Vec<u8>, FetchError> {
    if uri.starts_with("http://") || uri.starts_with("https://") {
        return fetch_http(uri, limits);
    }
    let path = uri.strip_prefix("file://").unwrap_or(uri);
    fetch_file(uri, Path::new(path), limits)
}

pub fn fetch_text(uri: &str, limits: FetchLimits) -> Result<String, FetchError> {
    fetch_bytes(uri, limits).map(|b| String::from_utf8_lossy(&b).into_owned())
}

fn fetch_file(uri: &str, path: &Path, limits: FetchLimits) -> Result<Vec<u8>, FetchError> {
    let file = std::fs::File::open(path).map_err(|e| failed(uri, e))?;
    let mut buf = Vec::new();
    file.take(limits.max_bytes + 1)
        .read_to_end(&mut buf)
        .map_err(|e| failed(uri, e))?;
    if buf.len() as u64 > limits.max_bytes {
        return Err(FetchError::TooLarge {
            uri: uri.to_owned(),
            limit: limits.max_bytes,
        });
    }
    Ok(buf)
}

fn fetch_http(uri: &str, limits: FetchLimits) -> Result<Vec<u8>, FetchError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(limits.timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let mut resp = agent.get(uri).call().map_err(|e| failed(uri, e))?;
    if !resp.status().is_success() {
        return Err(failed(uri, format!("HTTP {}", resp.status().as_u16())));
    }
    let buf = resp
        .body_mut()
        .with_config()
        .limit(limits.max_bytes + 1)
        .read_to_vec()
        .map_err(|e| failed(uri, e))?;
    if buf.len() as u64 > limits.max_bytes {
        return Err(FetchError::TooLarge {
            uri: uri.to_owned(),
            limit: limits.max_bytes,
        });
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_paths_and_caps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.log");
        std::fs::write(&p, "line one\nline two\n").unwrap();
        let uri = p.to_str().unwrap();
        assert_eq!(
            fetch_text(uri, FetchLimits::default()).unwrap(),
            "line one\nline two\n"
        );
        assert_eq!(
            fetch_text(&format!("file://{uri}"), FetchLimits::default()).unwrap(),
            "line one\nline two\n"
        );
        let tight = FetchLimits {
            max_bytes: 4,
            ..Default::default()
        };
        assert!(matches!(
            fetch_bytes(uri, tight),
            Err(FetchError::TooLarge { limit: 4, .. })
        ));
        assert!(matches!(
            fetch_bytes(
                dir.path().join("missing").to_str().unwrap(),
                FetchLimits::default()
            ),
            Err(FetchError::Failed { .. })
        ));
    }

    #[test]
    fn unreachable_host_fails() {
        let limits = FetchLimits {
            timeout: Duration::from_secs(2),
            ..Default::default()
        };
        // Port 9 on loopback is the discard service and is never bound here.
        assert!(matches!(
            fetch_bytes("http://127.0.0.1:9/x", limits),
            Err(FetchError::Failed { .. })
        ));
    }
}
