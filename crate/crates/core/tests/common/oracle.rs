//! Reference implementations used to cross-check the library.
//! Each is written directly from the defining formula, with no shared code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tiny dense corpus for the naive Bayes oracle.
#[derive(Debug, Clone)]
pub struct TinyCorpus {
    pub docs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub var_smoothing: f64,
    pub probe: Vec<f64>,
}

/// Random corpus with at most 6 documents and at most 5 features. Every
/// class has at least one document.
pub fn tiny_corpus(rng: &mut ChaCha8Rng) -> TinyCorpus {
    let n_classes = rng.random_range(1..=3usize);
    let n_docs = rng.random_range(n_classes.max(2)..=6);
    let vocab = rng.random_range(1..=5usize);
    let mut labels: Vec<usize> = (0..n_docs)
        .map(|i| {
            if i < n_classes {
                i
            } else {
                rng.random_range(0..n_classes)
            }
        })
        .collect();
    // Shuffle so class ids are not positional.
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let docs = (0..n_docs)
        .map(|_| {
            (0..vocab)
                .map(|_| rng.random_range(0..=3u32) as f64)
                .collect()
        })
        .collect();
    let eps = [1e-9, 1e-6, 1e-2, 1.0][rng.random_range(0..4)];
    let probe = (0..vocab)
        .map(|_| rng.random_range(0..=4u32) as f64)
        .collect();
    TinyCorpus {
        docs,
        labels,
        n_classes,
        var_smoothing: eps,
        probe,
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Posterior `P(c | x)` by Bayes' rule over Gaussian class-conditionals.
///
/// The normalization is done pairwise, `1 / sum_c' exp(L_c' - L_c)`, so
/// it stays finite when every joint density underflows.
pub fn gaussian_nb_posterior(c: &TinyCorpus) -> Vec<f64> {
    let p = c.probe.len();
    let n = c.docs.len() as f64;
    let max_var = (0..p)
        .map(|j| pop_var(&c.docs.iter().map(|d| d[j]).collect::<Vec<_>>()))
        .fold(0.0, f64::max);
    let floor = c.var_smoothing * if max_var > 0.0 { max_var } else { 1.0 };
    let log_joint: Vec<f64> = (0..c.n_classes)
        .map(|k| {
            let members: Vec<&Vec<f64>> = c
                .docs
                .iter()
                .zip(&c.labels)
                .filter(|(_, &y)| y == k)
                .map(|(d, _)| d)
                .collect();
            let prior = members.len() as f64 / n;
            let mut l = prior.ln();
            for j in 0..p {
                let col: Vec<f64> = members.iter().map(|d| d[j]).collect();
                let mu = mean(&col);
                let var = pop_var(&col).max(floor);
                let z = c.probe[j] - mu;
                // ln of (2 pi var)^(-1/2) exp(-z^2 / (2 var))
                l += -0.5 * (2.0 * std::f64::consts::PI * var).ln() - z * z / (2.0 * var);
            }
            l
        })
        .collect();
    log_joint
        .iter()
        .map(|lc| 1.0 / log_joint.iter().map(|lo| (lo - lc).exp()).sum::<f64>())
        .collect()
}

/// `ln(N / (1 + df))` straight from the definition.
pub fn idf(n: usize, df: u64) -> f64 {
    (n as f64 / (1.0 + df as f64)).ln()
}
