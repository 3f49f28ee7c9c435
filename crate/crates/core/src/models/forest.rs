//! Random forest of CART classification trees with Gini splits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ModelError, TrainingSet};
use crate::encoding;
use crate::features::FeatureVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    /// `ceil(sqrt(P))` candidate features per node.
    #[default]
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(&self, p: usize) -> usize {
        match *self {
            MaxFeatures::Sqrt => ((p as f64).sqrt().ceil() as usize).max(1),
            MaxFeatures::All => p,
            MaxFeatures::Count(n) => n.clamp(1, p.max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for RandomForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_leaf: 1,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
            seed: 0,
        }
    }
}

const LEAF: u32 = u32::MAX;

/// A tree in struct-of-arrays form. Node 0 is the root; for leaves
/// `feature == u32::MAX` and `left` indexes the leaf histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub feature: Vec<u32>,
    #[serde(with = "encoding::f64_le")]
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    /// Normalized class histograms, `n_classes` values per leaf.
    #[serde(with = "encoding::f64_le")]
    pub leaf_values: Vec<f64>,
    pub seed: u64,
}

impl DecisionTree {
    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, n: usize) -> usize {
            if t.feature[n] == LEAF {
                0
            } else {
                1 + go(t, t.left[n] as usize).max(go(t, t.right[n] as usize))
            }
        }
        go(self, 0)
    }

    fn leaf<'a>(&'a self, x: &FeatureVector, n_classes: usize) -> &'a [f64] {
        let mut node = 0usize;
        loop {
            let f = self.feature[node];
            if f == LEAF {
                let off = self.left[node] as usize * n_classes;
                return &self.leaf_values[off..off + n_classes];
            }
            node = if x.get(f as usize) <= self.threshold[node] {
                self.left[node]
            } else {
                self.right[node]
            } as usize;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub n_classes: usize,
    pub dimension: usize,
    pub params: RandomForestParams,
}

/// Row-major dense copy of the training features.
struct Dense {
    values: Vec<f64>,
    cols: usize,
}

impl Dense {
    fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

struct Builder<'a> {
    data: &'a Dense,
    labels: &'a [usize],
    n_classes: usize,
    max_features: usize,
    max_depth: usize,
    min_leaf: usize,
    tree: DecisionTree,
    n_leaves: u32,
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

impl Builder<'_> {
    fn push_leaf(&mut self, samples: &[usize]) -> u32 {
        let mut hist = vec![0.0; self.n_classes];
        for &s in samples {
            hist[self.labels[s]] += 1.0;
        }
        let total = samples.len() as f64;
        self.tree.leaf_values.extend(hist.iter().map(|h| h / total));
        let id = self.tree.feature.len() as u32;
        self.tree.feature.push(LEAF);
        self.tree.threshold.push(0.0);
        self.tree.left.push(self.n_leaves);
        self.tree.right.push(LEAF);
        self.n_leaves += 1;
        id
    }

    /// Lowest weighted-Gini `(impurity, threshold)` split of `samples` on `feature`.
    fn best_split_on(&self, samples: &[usize], feature: usize) -> Option<(f64, f64)> {
        let mut vals: Vec<(f64, usize)> = samples
            .iter()
            .map(|&s| (self.data.get(s, feature), self.labels[s]))
            .collect();
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = vals.len();
        let mut left = vec![0usize; self.n_classes];
        let mut right = vec![0usize; self.n_classes];
        for &(_, y) in &vals {
            right[y] += 1;
        }
        let mut best: Option<(f64, f64)> = None;
        for i in 0..n - 1 {
            let y = vals[i].1;
            left[y] += 1;
            right[y] -= 1;
            let (nl, nr) = (i + 1, n - i - 1);
            if vals[i].0 == vals[i + 1].0 || nl < self.min_leaf || nr < self.min_leaf {
                continue;
            }
            let imp = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
            if best.is_none_or(|(b, _)| imp < b) {
                let mid = vals[i].0 + (vals[i + 1].0 - vals[i].0) / 2.0;
                best = Some((imp, mid));
            }
        }
        best
    }

    fn grow(&mut self, samples: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        let mut counts = vec![0usize; self.n_classes];
        for &s in samples.iter() {
            counts[self.labels[s]] += 1;
        }
        let pure = counts.iter().filter(|c| **c > 0).count() <= 1;
        if pure || depth >= self.max_depth || samples.len() < 2 * self.min_leaf {
            return self.push_leaf(samples);
        }

        // Visit features in random order until `max_features` non-constant
        // ones have been examined and some valid split was found.
        let mut features: Vec<usize> = (0..self.data.cols).collect();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut examined = 0;
        for i in 0..features.len() {
            let j = rng.random_range(i..features.len());
            features.swap(i, j);
            let f = features[i];
            if self.constant(samples, f) {
                continue;
            }
            examined += 1;
            if let Some((imp, thr)) = self.best_split_on(samples, f) {
                if best.is_none_or(|(b, _, _)| imp < b) {
                    best = Some((imp, f, thr));
                }
            }
            if examined >= self.max_features && best.is_some() {
                break;
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.push_leaf(samples);
        };

        let split = partition(samples, |s| self.data.get(s, feature) <= threshold);
        let id = self.tree.feature.len();
        self.tree.feature.push(feature as u32);
        self.tree.threshold.push(threshold);
        self.tree.left.push(0);
        self.tree.right.push(0);
        let (l, r) = samples.split_at_mut(split);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.tree.left[id] = left;
        self.tree.right[id] = right;
        id as u32
    }

    fn constant(&self, samples: &[usize], f: usize) -> bool {
        let first = self.data.get(samples[0], f);
        samples.iter().all(|&s| self.data.get(s, f) == first)
    }
}

/// Stable in-place partition; returns the number of elements satisfying
/// `pred`, which end up first.
fn partition(samples: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let (yes, no): (Vec<usize>, Vec<usize>) = samples.iter().partition(|&&s| pred(s));
    let n = yes.len();
    samples[..n].copy_from_slice(&yes);
    samples[n..].copy_from_slice(&no);
    n
}

/// SplitMix64 finalizer, used to derive independent per-tree seeds.
fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomForest {
    pub fn fit(set: &TrainingSet<'_>, params: &RandomForestParams) -> Result<Self, ModelError> {
        if params.n_trees == 0 {
            return Err(ModelError::InvalidHyperparameter(
                "n_trees must be >= 1".into(),
            ));
        }
        if params.min_leaf == 0 {
            return Err(ModelError::InvalidHyperparameter(
                "min_leaf must be >= 1".into(),
            ));
        }
        let p = set.dimension;
        let mut values = vec![0.0; set.len() * p];
        for (r, x) in set.features.iter().enumerate() {
            for &(j, v) in x.entries() {
                values[r * p + j] = v;
            }
        }
        let data = Dense { values, cols: p };
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let seed = mix_seed(params.seed, t as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = set.len();
                let mut samples: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    let mut all: Vec<usize> = (0..n).collect();
                    all.shuffle(&mut rng);
                    all
                };
                let mut b = Builder {
                    data: &data,
                    labels: set.labels,
                    n_classes: set.n_classes,
                    max_features: params.max_features.resolve(p),
                    max_depth: params.max_depth.unwrap_or(usize::MAX),
                    min_leaf: params.min_leaf,
                    tree: DecisionTree {
                        feature: Vec::new(),
                        threshold: Vec::new(),
                        left: Vec::new(),
                        right: Vec::new(),
                        leaf_values: Vec::new(),
                        seed,
                    },
                    n_leaves: 0,
                };
                b.grow(&mut samples, 0, &mut rng);
                b.tree
            })
            .collect();
        Ok(Self {
            trees,
            n_classes: set.n_classes,
            dimension: p,
            params: params.clone(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Mean of the leaf class-frequency histograms across trees.
    pub fn scores(&self, x: &FeatureVector) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_classes];
        for t in &self.trees {
            for (a, v) in acc.iter_mut().zip(t.leaf(x, self.n_classes)) {
                *a += v;
            }
        }
        let n = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}
