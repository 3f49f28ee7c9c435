//! Seeded synthetic failure-log corpora for tests, benchmarks and demos.
//!
//! Each class owns a keyword pool no other class uses; every document
//! mixes those keywords with tokens drawn from a shared filler pool.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pipeline::{Dataset, LabeledExample};

pub const LABELS: [&str; 4] = ["oom", "overload", "network", "hardware"];

const KEYWORDS: [&[&str]; 4] = [
    &[
        "oom",
        "killer",
        "outofmemory",
        "heap",
        "malloc",
        "rss",
        "swap",
        "cgroup",
        "memlimit",
        "gcpressure",
        "alloc",
        "evicted",
    ],
    &[
        "overload",
        "backpressure",
        "throttled",
        "saturated",
        "queuefull",
        "ratelimit",
        "cpuhigh",
        "latencyspike",
        "loadavg",
        "busy",
        "shed",
        "starved",
    ],
    &[
        "unreachable",
        "refused",
        "dns",
        "socket",
        "tcp",
        "packetloss",
        "handshake",
        "resolver",
        "linkdown",
        "econnreset",
        "route",
        "nxdomain",
    ],
    &[
        "disk", "sector", "ecc", "firmware", "smart", "nvme", "raid", "fan", "thermal", "psu",
        "dimm", "pcie",
    ],
];

const FILLER: &[&str] = &[
    "info",
    "debug",
    "started",
    "stage",
    "build",
    "step",
    "worker",
    "node",
    "job",
    "pipeline",
    "test",
    "suite",
    "running",
    "finished",
    "checkout",
    "commit",
    "branch",
    "artifact",
    "upload",
    "download",
    "cache",
    "restore",
    "image",
    "container",
    "pod",
    "service",
    "request",
    "response",
    "handler",
    "config",
    "loaded",
    "version",
    "module",
    "thread",
    "pool",
    "task",
    "scheduler",
    "retry",
    "attempt",
    "status",
    "event",
    "trace",
    "span",
    "metric",
    "report",
    "result",
    "output",
    "input",
    "session",
    "client",
    "server",
    "path",
    "file",
    "opened",
    "closed",
    "elapsed",
    "ms",
    "ok",
    "done",
    "waiting",
];

/// Share of tokens drawn from the shared filler pool.
pub const FILLER_RATE: f64 = 0.7;

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub docs_per_class: usize,
    pub tokens_per_doc: usize,
    pub tokens_per_line: usize,
    pub filler_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            docs_per_class: 200,
            tokens_per_doc: 40,
            tokens_per_line: 8,
            filler_rate: FILLER_RATE,
            seed: 7,
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

fn line(rng: &mut ChaCha8Rng, n: usize, class: Option<usize>, filler_rate: f64) -> String {
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        match class {
            Some(c) if !rng.random_bool(filler_rate) => words.push(pick(rng, KEYWORDS[c])),
            _ => words.push(pick(rng, FILLER)),
        }
    }
    words.join(" ")
}

pub fn keywords(class: usize) -> &'static [&'static str] {
    KEYWORDS[class]
}

pub fn filler() -> &'static [&'static str] {
    FILLER
}

/// Examples interleaved by class: `0, 1, 2, 3, 0, 1, ...`.
pub fn examples(spec: &CorpusSpec) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.docs_per_class * LABELS.len());
    for i in 0..spec.docs_per_class {
        for (c, label) in LABELS.iter().enumerate() {
            let mut lines = Vec::new();
            let mut left = spec.tokens_per_doc;
            while left > 0 {
                let n = left.min(spec.tokens_per_line);
                lines.push(line(&mut rng, n, Some(c), spec.filler_rate));
                left -= n;
            }
            out.push(LabeledExample::new(
                format!("SYN-{}", i * LABELS.len() + c),
                "synthetic",
                *label,
                lines.join("\n"),
            ));
        }
    }
    out
}

pub fn corpus(spec: &CorpusSpec) -> Dataset {
    Dataset::new(examples(spec), None).expect("synthetic corpus is valid")
}

/// A long log that is pure filler except for lines `fault_lines`
/// (0-based, inclusive), which carry keywords of `class`.
pub fn fault_log(
    total_lines: usize,
    fault_lines: std::ops::RangeInclusive<usize>,
    class: usize,
    seed: u64,
) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(total_lines * 64);
    for i in 0..total_lines {
        let c = fault_lines.contains(&i).then_some(class);
        out.push_str(&format!(
            "2024-03-01T10:{:02}:{:02}Z ",
            (i / 60) % 60,
            i % 60
        ));
        out.push_str(&line(&mut rng, 8, c, FILLER_RATE));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_are_disjoint() {
        for a in 0..4 {
            for w in KEYWORDS[a] {
                assert!(!FILLER.contains(w), "{w}");
                for b in (a + 1)..4 {
                    assert!(!KEYWORDS[b].contains(w), "{w}");
                }
            }
        }
    }

    #[test]
    fn shape_and_determinism() {
        let spec = CorpusSpec {
            docs_per_class: 5,
            ..Default::default()
        };
        let a = examples(&spec);
        assert_eq!(a.len(), 20);
        assert_eq!(a, examples(&spec));
        assert_eq!(a[0].log.split_whitespace().count(), 40);
        let log = fault_log(100, 40..=50, 0, 1);
        assert_eq!(log.lines().count(), 100);
        assert!(log
            .lines()
            .nth(39)
            .unwrap()
            .split(' ')
            .skip(1)
            .all(|w| FILLER.contains(&w)));
    }
}
