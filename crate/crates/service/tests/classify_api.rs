mod common;

use std::sync::Arc;

use common::*;
use serde_json::{json, Value};
use taxon_core::models::LogisticParams;
use taxon_core::pipeline::fit_pipeline;
use taxon_core::synth::{self, CorpusSpec};
use taxon_core::{serialize_pipeline, Dataset, ModelSpec, TokenizerConfig, VectorizerConfig};
use taxon_service::config::StoreBackend;
use taxon_service::results::{FileResultStore, ResultQuery, ResultStore};
use taxon_service::ClassifyService;

fn artifact_bytes(seed: u64, strength: f64) -> Vec<u8> {
    let train = Dataset::new(
        synth::examples(&CorpusSpec {
            docs_per_class: 20,
            seed,
            ..Default::default()
        }),
        None,
    )
    .unwrap();
    let vectorizer = VectorizerConfig {
        l2_normalize: true,
        ..Default::default()
    };
    let spec = ModelSpec::Logistic(LogisticParams {
        strength,
        max_iter: 200,
        ..Default::default()
    });
    let a = fit_pipeline(&train, &TokenizerConfig::default(), &vectorizer, &spec).unwrap();
    serialize_pipeline(&a).unwrap()
}

fn loaded(dir: &std::path::Path) -> (Arc<ClassifyService>, TestServer) {
    let svc = ClassifyService::new(fast_config(dir)).unwrap();
    svc.load_model(&artifact_bytes(1, 0.01)).unwrap();
    let srv = spawn(svc.router());
    (svc, srv)
}

fn log_lines(n: usize) -> String {
    synth::fault_log(n, 0..=n, 1, 3)
}

#[test]
fn no_model_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let svc = ClassifyService::new(fast_config(dir.path())).unwrap();
    let srv = spawn(svc.router());
    let r = post_json(&srv.url("/classify"), &json!({"log": "x"}));
    assert_eq!(r.status, 503);
    assert_eq!(r.json()["error"], "NoModelLoaded");
    assert_eq!(get(&srv.url("/model")).json()["error"], "NoModelLoaded");
    assert_eq!(get(&srv.url("/health")).json()["model_digest"], Value::Null);
}

#[test]
fn windows_cover_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let (_svc, srv) = loaded(dir.path());
    let r = post_json(
        &srv.url("/classify"),
        &json!({"log": log_lines(250), "window_lines": 100}),
    )
    .json();
    let recs = r["items"][0]["records"].as_array().unwrap();
    let spans: Vec<(u64, u64)> = recs
        .iter()
        .map(|x| {
            (
                x["window"]["start_line"].as_u64().unwrap(),
                x["window"]["end_line"].as_u64().unwrap(),
            )
        })
        .collect();
    assert_eq!(spans, [(0, 100), (100, 200), (200, 250)]);
    assert_eq!(r["items"][0]["lines"], 250);
    let agg = &r["items"][0]["aggregate"];
    let best = recs
        .iter()
        .max_by(|a, b| {
            a["confidence"]
                .as_f64()
                .partial_cmp(&b["confidence"].as_f64())
                .unwrap()
        })
        .unwrap();
    assert_eq!(agg["window"], best["window"]);

    let whole = post_json(&srv.url("/classify"), &json!({"log": log_lines(250)})).json();
    assert_eq!(whole["items"][0]["records"].as_array().unwrap().len(), 1);

    let both = post_json(&srv.url("/classify"), &json!({"log": "a", "uri": "/tmp/x"}));
    assert_eq!(both.status, 400);
    assert_eq!(post_json(&srv.url("/classify"), &json!({})).status, 400);
    assert_eq!(
        post_json(
            &srv.url("/classify"),
            &json!({"log": "a", "window_lines": 0})
        )
        .status,
        400
    );
    assert_eq!(
        post_json(
            &srv.url("/classify"),
            &json!({"log": "a", "store_threshold_override": 1.5})
        )
        .status,
        400
    );
    assert_eq!(
        post_raw(&srv.url("/classify"), b"{oops").json()["error"],
        "PayloadMalformed"
    );
}

#[test]
fn only_confident_records_are_stored() {
    let dir = tempfile::tempdir().unwrap();
    let (svc, srv) = loaded(dir.path());
    // Keyword windows are confident, filler windows are not.
    let log = synth::fault_log(400, 100..=199, 2, 8);
    let probe = post_json(
        &srv.url("/classify"),
        &json!({"log": log, "window_lines": 50, "store_threshold_override": 0.0}),
    )
    .json();
    let mut conf: Vec<f64> = probe["items"][0]["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["confidence"].as_f64().unwrap())
        .collect();
    conf.sort_by(f64::total_cmp);
    let threshold = (conf[3] + conf[4]) / 2.0;
    assert!(conf[3] < conf[4], "{conf:?}");
    let before = svc.store().len();

    let r = post_json(
        &srv.url("/classify"),
        &json!({"log": log, "window_lines": 50, "store_threshold_override": threshold}),
    )
    .json();
    let recs = r["items"][0]["records"].as_array().unwrap();
    assert_eq!(recs.len(), 8);
    let stored: Vec<&Value> = recs.iter().filter(|x| x["stored"] == true).collect();
    assert_eq!(stored.len(), 4);
    for x in recs {
        assert_eq!(
            x["stored"] == true,
            x["confidence"].as_f64().unwrap() >= threshold
        );
    }
    assert_eq!(r["stored"], 4);
    assert_eq!(svc.store().len(), before + 4);
    for x in &stored {
        let id = x["record_id"].as_str().unwrap();
        let rec = svc.store().get(id).unwrap().unwrap();
        assert!(rec.confidence >= threshold);
        assert_eq!(
            rec.input.as_deref().map(str::lines).map(Iterator::count),
            Some(50)
        );
    }
    for x in recs.iter().filter(|x| x["stored"] == false) {
        assert!(svc
            .store()
            .get(x["record_id"].as_str().unwrap())
            .unwrap()
            .is_none());
    }
}

#[test]
fn bundle_isolates_fetch_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (_svc, srv) = loaded(dir.path());
    let path = dir.path().join("ok.log");
    std::fs::write(&path, log_lines(20)).unwrap();
    let r = post_json(
        &srv.url("/classify"),
        &json!({"bundle": [
            {"name": "node-a", "uri": path.to_str().unwrap()},
            {"name": "node-b", "uri": format!("{}/missing.log", srv.base)},
            {"name": "inline", "log": "thermal sensor fault"},
        ]}),
    );
    assert_eq!(r.status, 200);
    let items = r.json()["items"].as_array().unwrap().clone();
    assert_eq!(items.len(), 3);
    assert_eq!(items[0]["source"], path.to_str().unwrap());
    assert_eq!(items[0]["records"].as_array().unwrap().len(), 1);
    assert_eq!(items[1]["error"]["error"], "FetchFailed");
    assert!(items[1]["error"]["message"]
        .as_str()
        .unwrap()
        .contains("404"));
    assert_eq!(items[2]["name"], "inline");
    assert!(items[2]["aggregate"]["label"].is_string());
}

#[test]
fn results_query_export_and_import() {
    let dir = tempfile::tempdir().unwrap();
    let (svc, srv) = loaded(dir.path());
    assert_eq!(get(&srv.url("/results")).json(), json!([]));
    for i in 0..3 {
        post_json(
            &srv.url("/classify"),
            &json!({"log": synth::fault_log(30, 0..=29, i, i as u64), "store_threshold_override": 0.0}),
        );
    }
    let all = get(&srv.url("/results")).json();
    let all = all.as_array().unwrap();
    assert_eq!(all.len(), 3);
    let ts: Vec<&str> = all
        .iter()
        .map(|r| r["timestamp"].as_str().unwrap())
        .collect();
    assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    let label = all[0]["label"].as_str().unwrap();
    let by_label = get(&srv.url(&format!("/results?label={label}"))).json();
    assert!(by_label
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["label"] == label));
    let digest = svc.active().unwrap().digest.clone();
    assert_eq!(
        get(&srv.url(&format!("/results?model={digest}")))
            .json()
            .as_array()
            .unwrap()
            .len(),
        3
    );
    assert_eq!(get(&srv.url("/results?model=other")).json(), json!([]));
    assert_eq!(
        get(&srv.url("/results?min_confidence=1.01")).json(),
        json!([])
    );

    let dump = get(&srv.url("/results/export"));
    assert_eq!(dump.header("content-type"), Some("application/x-ndjson"));
    let fresh_dir = tempfile::tempdir().unwrap();
    let fresh = ClassifyService::new(fast_config(fresh_dir.path())).unwrap();
    let fsrv = spawn(fresh.router());
    assert_eq!(
        post_raw(&fsrv.url("/results/import"), &dump.body).json()["imported"],
        3
    );
    assert_eq!(
        post_raw(&fsrv.url("/results/import"), &dump.body).json()["imported"],
        0
    );
    assert_eq!(
        get(&fsrv.url("/results")).json(),
        get(&srv.url("/results")).json()
    );
    assert_eq!(
        post_raw(&fsrv.url("/results/import"), b"not json\n").status,
        400
    );
    drop(fsrv);

    // The file backend persists.
    let reopened = FileResultStore::open(fresh_dir.path().join("results.jsonl")).unwrap();
    assert_eq!(reopened.query(&ResultQuery::default()).unwrap().len(), 3);
}

#[test]
fn reclassify_appends_with_current_model() {
    let dir = tempfile::tempdir().unwrap();
    let (svc, srv) = loaded(dir.path());
    let first = post_json(
        &srv.url("/classify"),
        &json!({"log": log_lines(120), "window_lines": 60, "store_threshold_override": 0.0}),
    )
    .json();
    let original = &first["items"][0]["records"][1];
    let id = original["record_id"].as_str().unwrap();

    let same = post_json(&srv.url("/reclassify"), &json!({"record_ids": [id]})).json();
    let r = &same["records"][0];
    assert_eq!(r["class_scores"], original["class_scores"]);
    assert_eq!(r["reclassified_from"], id);
    assert_eq!(r["window"], original["window"]);

    let new_bytes = artifact_bytes(2, 0.5);
    let swapped = post_raw(&srv.url("/model"), &new_bytes).json();
    let new_digest = swapped["digest"].as_str().unwrap().to_owned();
    assert_ne!(Some(new_digest.as_str()), original["model_digest"].as_str());
    let input_digest = first["items"][0]["input_digest"].as_str().unwrap();
    let again = post_json(
        &srv.url("/reclassify"),
        &json!({"input_digests": [input_digest]}),
    )
    .json();
    let recs = again["records"].as_array().unwrap();
    assert_eq!(recs.len(), 2);
    assert!(recs
        .iter()
        .all(|r| r["model_digest"] == new_digest.as_str()));
    // History is preserved.
    assert!(svc.store().get(id).unwrap().is_some());

    let unknown = post_json(&srv.url("/reclassify"), &json!({"record_ids": ["nope"]}));
    assert_eq!(unknown.status, 404);
    assert_eq!(unknown.json()["error"], "UnknownRecord");
}

#[test]
fn digest_only_store_refetches_or_refuses() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fast_config(dir.path());
    cfg.classify.retain_input = false;
    cfg.classify.store_threshold = 0.0;
    let svc = ClassifyService::new(cfg).unwrap();
    svc.load_model(&artifact_bytes(1, 0.01)).unwrap();
    let srv = spawn(svc.router());
    let path = dir.path().join("remote.log");
    std::fs::write(&path, log_lines(40)).unwrap();
    let by_uri = post_json(
        &srv.url("/classify"),
        &json!({"uri": path.to_str().unwrap(), "window_lines": 20}),
    )
    .json();
    let inline = post_json(&srv.url("/classify"), &json!({"log": log_lines(5)})).json();
    let uri_rec = &by_uri["items"][0]["records"][1];
    assert!(svc
        .store()
        .get(uri_rec["record_id"].as_str().unwrap())
        .unwrap()
        .unwrap()
        .input
        .is_none());

    let re = post_json(
        &srv.url("/reclassify"),
        &json!({"record_ids": [uri_rec["record_id"]]}),
    )
    .json();
    assert_eq!(re["records"][0]["class_scores"], uri_rec["class_scores"]);
    let refused = post_json(
        &srv.url("/reclassify"),
        &json!({"record_ids": [inline["items"][0]["records"][0]["record_id"]]}),
    );
    assert_eq!(refused.status, 422);
    assert_eq!(refused.json()["error"], "InputUnavailable");
}

#[test]
fn serving_metrics_track_requests() {
    let dir = tempfile::tempdir().unwrap();
    let (_svc, srv) = loaded(dir.path());
    let m = get(&srv.url("/metrics")).json();
    assert_eq!(m["requests"], 0);
    assert_eq!(m["latency"], Value::Null);
    assert_eq!(m["confidence_histogram"], json!(vec![0u64; 10]));

    let probes: Vec<String> = (0..10)
        .map(|i| synth::fault_log(10, 0..=9, i % 4, i as u64))
        .collect();
    let mut expected = std::collections::BTreeMap::<String, u64>::new();
    for p in &probes {
        let r = post_json(&srv.url("/classify"), &json!({"log": p})).json();
        *expected
            .entry(
                r["items"][0]["aggregate"]["label"]
                    .as_str()
                    .unwrap()
                    .to_owned(),
            )
            .or_default() += 1;
    }
    let m = get(&srv.url("/metrics")).json();
    assert_eq!(m["requests"], 10);
    assert_eq!(m["records"], 10);
    assert_eq!(m["per_label"], serde_json::to_value(&expected).unwrap());
    assert_eq!(
        m["confidence_histogram"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .sum::<u64>(),
        10
    );
    let lat = &m["latency"];
    assert!(lat["p50_s"].as_f64().unwrap() <= lat["p95_s"].as_f64().unwrap());
    assert!(lat["p95_s"].as_f64().unwrap() <= lat["p99_s"].as_f64().unwrap());
    assert!(m["model_digest"].is_string());
}

#[test]
fn corrupt_artifact_keeps_previous_model() {
    let dir = tempfile::tempdir().unwrap();
    let (svc, srv) = loaded(dir.path());
    let before = svc.active().unwrap().digest.clone();
    let mut bad = artifact_bytes(5, 0.1);
    let n = bad.len();
    bad[n - 10] ^= 0xff;
    let r = post_raw(&srv.url("/model"), &bad);
    assert_eq!(r.status, 422);
    assert_eq!(r.json()["error"], "DigestMismatch");
    assert_eq!(
        post_raw(&srv.url("/model"), b"garbage").json()["error"],
        "CorruptArtifact"
    );
    assert_eq!(svc.active().unwrap().digest, before);
    let c = post_json(&srv.url("/classify"), &json!({"log": "x"})).json();
    assert_eq!(c["model_digest"], before.as_str());
    assert_eq!(get(&srv.url("/model")).json()["digest"], before.as_str());
    drop(srv);

    // The active model is reloaded after a restart.
    let again = ClassifyService::new(fast_config(dir.path())).unwrap();
    assert_eq!(again.active().unwrap().digest, before);
}

#[test]
fn memory_backend_is_selectable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fast_config(dir.path());
    cfg.classify.store_backend = StoreBackend::Memory;
    let svc = ClassifyService::new(cfg).unwrap();
    svc.load_model(&artifact_bytes(1, 0.01)).unwrap();
    let srv = spawn(svc.router());
    post_json(
        &srv.url("/classify"),
        &json!({"log": "x", "store_threshold_override": 0.0}),
    );
    assert_eq!(get(&srv.url("/metrics")).json()["store_backend"], "memory");
    assert_eq!(svc.store().len(), 1);
    assert!(!dir.path().join("results.jsonl").exists());
}
