//! Multinomial logistic regression trained by proximal gradient descent.
//!
//! The smooth part of the objective is the mean cross-entropy; the L1 or L2
//! penalty on the weights (never the biases) is applied through its proximal
//! operator. A backtracking step-size search enforces the sufficient
//! decrease condition, so the objective never increases between iterations.

use serde::{Deserialize, Serialize};

use super::{softmax, Matrix, ModelError, TrainingSet};
use crate::encoding;
use crate::features::FeatureVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    None,
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub penalty: Penalty,
    pub strength: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            penalty: Penalty::L2,
            strength: 0.01,
            max_iter: 500,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Matrix,
    #[serde(with = "encoding::f64_le")]
    pub bias: Vec<f64>,
    pub penalty: Penalty,
    pub strength: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Objective values recorded after every accepted step (index 0 is the
/// zero-initialized start).
#[derive(Debug, Clone, Default)]
pub struct FitTrace {
    pub objective: Vec<f64>,
}

/// The training objective over a flat parameter vector laid out as the
/// `K x P` weight matrix (row-major) followed by the `K` biases.
pub struct LogisticObjective<'a> {
    set: TrainingSet<'a>,
    penalty: Penalty,
    strength: f64,
}

impl<'a> LogisticObjective<'a> {
    pub fn new(set: TrainingSet<'a>, penalty: Penalty, strength: f64) -> Self {
        Self {
            set,
            penalty,
            strength,
        }
    }

    pub fn n_params(&self) -> usize {
        self.set.n_classes * (self.set.dimension + 1)
    }

    fn split<'t>(&self, theta: &'t [f64]) -> (&'t [f64], &'t [f64]) {
        theta.split_at(self.set.n_classes * self.set.dimension)
    }

    fn logits(&self, w: &[f64], b: &[f64], x: &FeatureVector) -> Vec<f64> {
        let p = self.set.dimension;
        (0..self.set.n_classes)
            .map(|k| x.dot(&w[k * p..(k + 1) * p]) + b[k])
            .collect()
    }

    /// Mean cross-entropy without any penalty.
    pub fn cross_entropy(&self, theta: &[f64]) -> f64 {
        let (w, b) = self.split(theta);
        let total: f64 = self
            .set
            .features
            .iter()
            .zip(self.set.labels)
            .map(|(x, &y)| {
                let z = self.logits(w, b, x);
                log_sum_exp(&z) - z[y]
            })
            .sum();
        total / self.set.len() as f64
    }

    fn cross_entropy_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let p = self.set.dimension;
        let k = self.set.n_classes;
        let (w, b) = self.split(theta);
        let mut grad = vec![0.0; theta.len()];
        for (x, &y) in self.set.features.iter().zip(self.set.labels) {
            let probs = softmax(&self.logits(w, b, x));
            for c in 0..k {
                let coeff = probs[c] - if c == y { 1.0 } else { 0.0 };
                for &(j, v) in x.entries() {
                    grad[c * p + j] += coeff * v;
                }
                grad[k * p + c] += coeff;
            }
        }
        let n = self.set.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        grad
    }

    /// Penalty on the weight block only.
    pub fn penalty_value(&self, theta: &[f64]) -> f64 {
        let (w, _) = self.split(theta);
        match self.penalty {
            Penalty::None => 0.0,
            Penalty::L1 => self.strength * w.iter().map(|v| v.abs()).sum::<f64>(),
            Penalty::L2 => 0.5 * self.strength * w.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    /// Full objective: mean cross-entropy plus penalty.
    pub fn value(&self, theta: &[f64]) -> f64 {
        self.cross_entropy(theta) + self.penalty_value(theta)
    }

    /// Gradient of [`value`](Self::value); for L1 the subgradient `sign(w)`
    /// is used, which is exact wherever no weight is zero.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = self.cross_entropy_gradient(theta);
        let nw = self.set.n_classes * self.set.dimension;
        match self.penalty {
            Penalty::None => {}
            Penalty::L1 => {
                for i in 0..nw {
                    g[i] += self.strength * theta[i].signum() * (theta[i] != 0.0) as u8 as f64;
                }
            }
            Penalty::L2 => {
                for i in 0..nw {
                    g[i] += self.strength * theta[i];
                }
            }
        }
        g
    }

    fn prox(&self, theta: &mut [f64], step: f64) {
        let nw = self.set.n_classes * self.set.dimension;
        let w = &mut theta[..nw];
        match self.penalty {
            Penalty::None => {}
            Penalty::L1 => {
                let t = step * self.strength;
                for v in w {
                    *v = v.signum() * (v.abs() - t).max(0.0);
                }
            }
            Penalty::L2 => {
                let s = 1.0 / (1.0 + step * self.strength);
                for v in w {
                    *v *= s;
                }
            }
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl LogisticModel {
    pub fn fit(
        set: &TrainingSet<'_>,
        params: &LogisticParams,
    ) -> Result<(Self, FitTrace), ModelError> {
        if !(params.strength >= 0.0) || !params.strength.is_finite() {
            return Err(ModelError::InvalidHyperparameter(format!(
                "regularization strength must be >= 0, got {}",
                params.strength
            )));
        }
        let obj = LogisticObjective::new(*set, params.penalty, params.strength);
        let mut theta = vec![0.0; obj.n_params()];
        let mut smooth = obj.cross_entropy(&theta);
        if !smooth.is_finite() {
            return Err(ModelError::NonFinite { iteration: 0 });
        }
        let mut trace = FitTrace {
            objective: vec![smooth + obj.penalty_value(&theta)],
        };
        let mut step = 1.0;
        let mut iterations = 0;
        let mut converged = false;
        'outer: for it in 0..params.max_iter {
            iterations = it + 1;
            let grad = obj.cross_entropy_gradient(&theta);
            let (candidate, cand_smooth, max_update) = loop {
                let mut cand: Vec<f64> =
                    theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
                obj.prox(&mut cand, step);
                let value = obj.cross_entropy(&cand);
                let mut lin = 0.0;
                let mut sq = 0.0;
                let mut max_update: f64 = 0.0;
                for i in 0..cand.len() {
                    let d = cand[i] - theta[i];
                    lin += grad[i] * d;
                    sq += d * d;
                    max_update = max_update.max(d.abs());
                }
                if value.is_finite() && value <= smooth + lin + sq / (2.0 * step) {
                    break (cand, value, max_update);
                }
                step *= 0.5;
                if step < 1e-30 {
                    if !value.is_finite() {
                        return Err(ModelError::NonFinite {
                            iteration: iterations,
                        });
                    }
                    // No representable step makes progress.
                    converged = true;
                    break 'outer;
                }
            };
            theta = candidate;
            smooth = cand_smooth;
            let total = smooth + obj.penalty_value(&theta);
            if !total.is_finite() {
                return Err(ModelError::NonFinite {
                    iteration: iterations,
                });
            }
            trace.objective.push(total);
            if max_update < params.tol {
                converged = true;
                break;
            }
            step = (step * 2.0).min(1e6);
        }
        let (k, p) = (set.n_classes, set.dimension);
        let bias = theta.split_off(k * p);
        Ok((
            Self {
                weights: Matrix {
                    rows: k,
                    cols: p,
                    data: theta,
                },
                bias,
                penalty: params.penalty,
                strength: params.strength,
                iterations,
                converged,
            },
            trace,
        ))
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
