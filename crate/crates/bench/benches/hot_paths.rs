use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use taxon_core::features::{build_vocabulary, compute_idf, vectorize};
use taxon_core::models::{LinearSvmParams, LogisticParams, RandomForestParams};
use taxon_core::pipeline::fit_pipeline;
use taxon_core::synth::{self, CorpusSpec};
use taxon_core::tokenize::tokenize;
use taxon_core::{
    deserialize_pipeline, serialize_pipeline, ModelSpec, TokenizerConfig, VectorizerConfig,
};

fn snippet() -> String {
    synth::fault_log(1000, 400..=450, 2, 9)
}

fn tokenizing(c: &mut Criterion) {
    let text = snippet();
    let mut g = c.benchmark_group("tokenize");
    g.throughput(Throughput::Bytes(text.len() as u64));
    for (name, cfg) in [
        ("unigrams", TokenizerConfig::words(1)),
        ("bigrams", TokenizerConfig::words(2)),
    ] {
        g.bench_function(name, |b| b.iter(|| tokenize(black_box(&text), &cfg)));
    }
    g.finish();
}

fn vectorizing(c: &mut Criterion) {
    let cfg = TokenizerConfig::words(1);
    let docs: Vec<Vec<String>> = synth::examples(&CorpusSpec::default())
        .iter()
        .map(|e| tokenize(&e.log, &cfg))
        .collect();
    let vcfg = VectorizerConfig::tfidf();
    let vocab = build_vocabulary(&docs, &vcfg).unwrap();
    let idf = compute_idf(&vocab, false);
    let probe = tokenize(&snippet(), &cfg);
    let mut g = c.benchmark_group("vectorize");
    g.bench_function("build_vocabulary_800_docs", |b| {
        b.iter(|| build_vocabulary(black_box(&docs), &vcfg).unwrap())
    });
    g.bench_function("tfidf_1000_lines", |b| {
        b.iter(|| vectorize(black_box(&probe), &vocab, Some(&idf), &vcfg).unwrap())
    });
    g.finish();
}

fn predicting(c: &mut Criterion) {
    let train = synth::corpus(&CorpusSpec::default());
    let window = synth::fault_log(100, 0..=50, 1, 3);
    let mut g = c.benchmark_group("predict");
    for spec in [
        ModelSpec::GaussianNb {
            var_smoothing: 1e-9,
        },
        ModelSpec::Logistic(LogisticParams::default()),
        ModelSpec::LinearSvm(LinearSvmParams::default()),
        ModelSpec::RandomForest(RandomForestParams::default()),
    ] {
        let a = fit_pipeline(
            &train,
            &TokenizerConfig::words(1),
            &VectorizerConfig::tfidf(),
            &spec,
        )
        .unwrap();
        g.bench_function(spec.algorithm().as_str(), |b| {
            b.iter(|| a.classify(black_box(&window)).unwrap())
        });
    }
    g.finish();
}

fn artifacts(c: &mut Criterion) {
    let train = synth::corpus(&CorpusSpec::default());
    let a = fit_pipeline(
        &train,
        &TokenizerConfig::words(1),
        &VectorizerConfig::tfidf(),
        &ModelSpec::Logistic(LogisticParams::default()),
    )
    .unwrap();
    let bytes = serialize_pipeline(&a).unwrap();
    let mut g = c.benchmark_group("artifact");
    g.bench_function("serialize", |b| {
        b.iter(|| serialize_pipeline(black_box(&a)).unwrap())
    });
    g.bench_function("deserialize", |b| {
        b.iter_batched(
            || bytes.clone(),
            |v| deserialize_pipeline(&v).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, tokenizing, vectorizing, predicting, artifacts);
criterion_main!(benches);
