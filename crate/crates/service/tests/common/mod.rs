#![allow(dead_code)]

use std::time::Duration;

use axum::Router;
use serde_json::Value;
use taxon_core::synth::{self, CorpusSpec};
use taxon_core::LabeledExample;
use taxon_service::http::{self, Shutdown};
use taxon_service::ServiceConfig;

/// An in-process server on an ephemeral port, stopped on drop.
pub struct TestServer {
    pub base: String,
    shutdown: Shutdown,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl TestServer {
    pub fn url(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.base)
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.shutdown.trigger();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn spawn(app: Router) -> TestServer {
    let shutdown = Shutdown::new();
    let (tx, rx) = std::sync::mpsc::channel();
    let sd = shutdown.clone();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let server = http::bind("127.0.0.1", 0, None).await.unwrap();
            tx.send(server.addr).unwrap();
            http::serve(server, app, sd, Duration::from_secs(5))
                .await
                .unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    TestServer {
        base: format!("http://{addr}"),
        shutdown,
        thread: Some(thread),
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(60)))
        .build()
        .into()
}

pub struct Reply {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

fn reply(mut r: ureq::http::Response<ureq::Body>) -> Reply {
    let headers = r
        .headers()
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_str().unwrap_or_default().to_owned()))
        .collect();
    let status = r.status().as_u16();
    let body = r
        .body_mut()
        .with_config()
        .limit(512 * 1024 * 1024)
        .read_to_vec()
        .unwrap();
    Reply {
        status,
        headers,
        body,
    }
}

pub fn get(url: &str) -> Reply {
    reply(agent().get(url).call().unwrap())
}

pub fn delete(url: &str) -> Reply {
    reply(agent().delete(url).call().unwrap())
}

pub fn post_json(url: &str, body: &Value) -> Reply {
    post_raw(url, &serde_json::to_vec(body).unwrap())
}

pub fn post_raw(url: &str, body: &[u8]) -> Reply {
    reply(
        agent()
            .post(url)
            .header("content-type", "application/json")
            .send(body)
            .unwrap(),
    )
}

/// Defaults tuned for quick training, rooted in `dir`.
pub fn fast_config(dir: &std::path::Path) -> ServiceConfig {
    let mut c = ServiceConfig::default();
    c.server.data_dir = dir.display().to_string();
    c.training.algorithms = vec![taxon_core::Algorithm::Logistic];
    c.training.logistic_strength = vec![1.0];
    c.training.logistic_penalty = vec![taxon_core::models::Penalty::L2];
    c.training.max_iter = 200;
    c.training.cv_folds = 2;
    c.vectorizer.l2_normalize = true;
    c
}

pub fn corpus(docs_per_class: usize, seed: u64) -> Vec<LabeledExample> {
    synth::examples(&CorpusSpec {
        docs_per_class,
        seed,
        ..Default::default()
    })
}

pub fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = std::time::Instant::now() + timeout;
    while std::time::Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(25));
    }
    f()
}
