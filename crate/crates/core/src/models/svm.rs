//! One-vs-rest linear SVM trained by full-batch subgradient descent.
//!
//! Each class `k` minimizes `mean_n hinge(s_nk * (w_k . x_n + b_k)) +
//! ||w_k||^2 / (2C)` with `s_nk = +1` for members of `k` and `-1` otherwise.
//! The step size decays as `C / (t + 1)`; the iterate with the lowest
//! objective is kept. Class scores are a softmax over the per-class
//! decision values, which is a heuristic calibration rather than a
//! probability model.

use serde::{Deserialize, Serialize};

use super::{softmax, Matrix, ModelError, TrainingSet};
use crate::encoding;
use crate::features::FeatureVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvmParams {
    pub c: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for LinearSvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_iter: 500,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Matrix,
    #[serde(with = "encoding::f64_le")]
    pub bias: Vec<f64>,
    pub c: f64,
    /// Calibration applied to decision values; recorded for consumers.
    pub calibration: String,
}

pub const SOFTMAX_CALIBRATION: &str = "softmax_over_margins";

/// Summed one-vs-rest objective over a flat parameter vector laid out as
/// the `K x P` weights (row-major) followed by the `K` biases.
pub struct SvmObjective<'a> {
    set: TrainingSet<'a>,
    c: f64,
}

impl<'a> SvmObjective<'a> {
    pub fn new(set: TrainingSet<'a>, c: f64) -> Self {
        Self { set, c }
    }

    pub fn n_params(&self) -> usize {
        self.set.n_classes * (self.set.dimension + 1)
    }

    fn sign(&self, n: usize, k: usize) -> f64 {
        if self.set.labels[n] == k {
            1.0
        } else {
            -1.0
        }
    }

    /// `s_nk * (w_k . x_n + b_k)` for every sample and class.
    pub fn margins(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let (k, p) = (self.set.n_classes, self.set.dimension);
        self.set
            .features
            .iter()
            .enumerate()
            .map(|(n, x)| {
                (0..k)
                    .map(|c| {
                        self.sign(n, c) * (x.dot(&theta[c * p..(c + 1) * p]) + theta[k * p + c])
                    })
                    .collect()
            })
            .collect()
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let (k, p) = (self.set.n_classes, self.set.dimension);
        let margins = self.margins(theta);
        let hinge: f64 = margins
            .iter()
            .flat_map(|m| m.iter().map(|v| (1.0 - v).max(0.0)))
            .sum::<f64>()
            / self.set.len() as f64;
        let reg: f64 = theta[..k * p].iter().map(|w| w * w).sum::<f64>() / (2.0 * self.c);
        hinge + reg
    }

    /// A subgradient; exact wherever no margin equals 1.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let (k, p) = (self.set.n_classes, self.set.dimension);
        let n_inv = 1.0 / self.set.len() as f64;
        let margins = self.margins(theta);
        let mut g: Vec<f64> = theta
            .iter()
            .enumerate()
            .map(|(i, w)| if i < k * p { w / self.c } else { 0.0 })
            .collect();
        for (n, x) in self.set.features.iter().enumerate() {
            for c in 0..k {
                if margins[n][c] < 1.0 {
                    let s = self.sign(n, c);
                    for &(j, v) in x.entries() {
                        g[c * p + j] -= s * v * n_inv;
                    }
                    g[k * p + c] -= s * n_inv;
                }
            }
        }
        g
    }
}

impl LinearSvm {
    pub fn fit(set: &TrainingSet<'_>, params: &LinearSvmParams) -> Result<Self, ModelError> {
        if !(params.c > 0.0) || !params.c.is_finite() {
            return Err(ModelError::InvalidHyperparameter(format!(
                "C must be positive, got {}",
                params.c
            )));
        }
        let obj = SvmObjective::new(*set, params.c);
        let mut theta = vec![0.0; obj.n_params()];
        let mut best = theta.clone();
        let mut best_value = obj.value(&theta);
        if !best_value.is_finite() {
            return Err(ModelError::NonFinite { iteration: 0 });
        }
        for t in 0..params.max_iter {
            let g = obj.gradient(&theta);
            let step = params.c / (t as f64 + 1.0);
            let mut max_update: f64 = 0.0;
            for (w, gi) in theta.iter_mut().zip(&g) {
                let d = step * gi;
                *w -= d;
                max_update = max_update.max(d.abs());
            }
            let value = obj.value(&theta);
            if !value.is_finite() {
                return Err(ModelError::NonFinite { iteration: t + 1 });
            }
            if value < best_value {
                best_value = value;
                best.copy_from_slice(&theta);
            }
            if max_update < params.tol {
                break;
            }
        }
        let (k, p) = (set.n_classes, set.dimension);
        let bias = best.split_off(k * p);
        Ok(Self {
            weights: Matrix {
                rows: k,
                cols: p,
                data: best,
            },
            bias,
            c: params.c,
            calibration: SOFTMAX_CALIBRATION.to_owned(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.weights.cols
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn decision_values(&self, x: &FeatureVector) -> Vec<f64> {
        (0..self.n_classes())
            .map(|k| x.dot(self.weights.row(k)) + self.bias[k])
            .collect()
    }

    pub fn scores(&self, x: &FeatureVector) -> Vec<f64> {
        softmax(&self.decision_values(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{argmax, predict, LabelSet, ModelParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn separable(n: usize) -> (Vec<FeatureVector>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        (0..n)
            .map(|i| {
                let c = i % 2;
                let s = if c == 0 { 2.0 } else { -2.0 };
                (
                    FeatureVector::from_dense(&[
                        s + rng.random_range(-1.0..1.0),
                        s + rng.random_range(-1.0..1.0),
                    ]),
                    c,
                )
            })
            .unzip()
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let (x, y) = separable(20);
        let set = TrainingSet::new(&x, &y, 2).unwrap();
        let m = LinearSvm::fit(&set, &LinearSvmParams::default()).unwrap();
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(xi, &yi)| argmax(&m.scores(xi)) == yi)
            .count();
        assert_eq!(correct, 20);
        // A large-C fit drives the hinge part to zero.
        let m = LinearSvm::fit(
            &set,
            &LinearSvmParams {
                c: 100.0,
                max_iter: 2000,
                ..Default::default()
            },
        )
        .unwrap();
        let theta: Vec<f64> = m.weights.data.iter().chain(&m.bias).copied().collect();
        let margins = SvmObjective::new(set, 100.0).margins(&theta);
        assert!(
            margins.iter().flatten().all(|v| *v >= 1.0 - 1e-6),
            "{margins:?}"
        );
    }

    #[test]
    fn boundary_point_gives_uniform_scores() {
        let m = LinearSvm {
            weights: Matrix {
                rows: 2,
                cols: 2,
                data: vec![1.0, 1.0, -1.0, -1.0],
            },
            bias: vec![0.0, 0.0],
            c: 1.0,
            calibration: SOFTMAX_CALIBRATION.into(),
        };
        let labels = LabelSet::new(["a", "b"]).unwrap();
        let p = predict(
            &ModelParams::LinearSvm(m),
            &FeatureVector::from_dense(&[1.0, -1.0]),
            &labels,
        )
        .unwrap();
        assert_eq!(p.class_scores, vec![0.5, 0.5]);
        assert_eq!(p.class_id, 0);
    }

    #[test]
    fn subgradient_matches_finite_differences_off_the_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<FeatureVector> = (0..6)
            .map(|_| {
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                FeatureVector::from_dense(&v)
            })
            .collect();
        let y = [0, 1, 2, 0, 1, 2];
        let set = TrainingSet::new(&x, &y, 3).unwrap();
        let obj = SvmObjective::new(set, 2.0);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 5 {
            let theta: Vec<f64> = (0..obj.n_params())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            if obj
                .margins(&theta)
                .iter()
                .flatten()
                .any(|m| (m - 1.0).abs() < 1e-2)
            {
                continue;
            }
            checked += 1;
            let g = obj.gradient(&theta);
            for i in 0..theta.len() {
                let (mut up, mut dn) = (theta.clone(), theta.clone());
                up[i] += h;
                dn[i] -= h;
                let fd = (obj.value(&up) - obj.value(&dn)) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(rel < 1e-4, "param {i}: fd={fd} analytic={}", g[i]);
            }
        }
    }
}
