//! Offline training and classification without the services.

use std::io::Read;
use std::path::Path;
use std::time::Instant;

use serde_json::json;
use taxon_core::pipeline::{evaluate, grid_search};
use taxon_core::{deserialize_pipeline, serialize_pipeline, Dataset, LabelSet};
use taxon_service::classify::windows;
use taxon_service::ServiceConfig;

use crate::exit::{Exit, Failure};

pub fn train(
    cfg: &ServiceConfig,
    data: &Path,
    out: &Path,
    leaderboard: Option<&Path>,
) -> Result<(), Failure> {
    let started = Instant::now();
    let bytes =
        std::fs::read(data).map_err(|e| Failure::generic(format!("{}: {e}", data.display())))?;
    let pinned = (!cfg.training.labels.is_empty())
        .then(|| LabelSet::new(cfg.training.labels.clone()).map_err(Failure::generic))
        .transpose()?;
    let dataset = Dataset::from_json(&bytes, pinned).map_err(Failure::generic)?;
    let (train, test) = dataset
        .split_train_test(cfg.training.test_fraction, cfg.training.seed)
        .map_err(Failure::generic)?;
    let spec = cfg
        .grid_spec()
        .map_err(|e| Failure::new(Exit::Config, e.to_string()))?;
    let outcome = grid_search(&train, &spec).map_err(Failure::generic)?;
    let mut best = outcome.best.clone();
    let metrics = evaluate(&best, &test)
        .map_err(Failure::generic)?
        .with_training_time(started.elapsed());
    best.metrics = Some(metrics.clone());
    let artifact = serialize_pipeline(&best).map_err(Failure::generic)?;
    std::fs::write(out, &artifact)
        .map_err(|e| Failure::generic(format!("{}: {e}", out.display())))?;
    if let Some(p) = leaderboard {
        std::fs::write(p, outcome.leaderboard_json())
            .map_err(|e| Failure::generic(format!("{}: {e}", p.display())))?;
    }
    let entry = &outcome.leaderboard[outcome.best_index];
    let report = json!({
        "artifact": out.display().to_string(),
        "best": entry.description,
        "cv_score": entry.mean_score,
        "candidates": outcome.leaderboard.len(),
        "accuracy": metrics.accuracy,
        "macro_f1": metrics.macro_f1,
        "n_test": metrics.n_samples,
        "training_time_s": metrics.training_time_s,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}

pub fn classify(model: &Path, window_lines: usize, log: &Path) -> Result<(), Failure> {
    let bytes =
        std::fs::read(model).map_err(|e| Failure::generic(format!("{}: {e}", model.display())))?;
    let artifact = deserialize_pipeline(&bytes).map_err(Failure::generic)?;
    let mut text = String::new();
    if log == Path::new("-") {
        std::io::stdin()
            .read_to_string(&mut text)
            .map_err(Failure::generic)?;
    } else {
        text = String::from_utf8_lossy(
            &std::fs::read(log).map_err(|e| Failure::generic(format!("{}: {e}", log.display())))?,
        )
        .into_owned();
    }
    let mut records = Vec::new();
    for (span, chunk) in windows(&text, window_lines) {
        let p = artifact.classify(chunk).map_err(Failure::generic)?;
        records.push(json!({
            "window": span,
            "label": p.label,
            "confidence": p.confidence,
            "class_scores": p.class_scores,
        }));
    }
    let out = json!({ "model_digest": artifact.digest, "records": records });
    println!(
        "{}",
        serde_json::to_string_pretty(&out).expect("output serializes")
    );
    Ok(())
}
