//! Gaussian naive Bayes over densified feature vectors.

use serde::{Deserialize, Serialize};

use super::{softmax, Matrix, ModelError, TrainingSet};
use crate::encoding;
use crate::features::FeatureVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNb {
    #[serde(with = "encoding::f64_le")]
    pub priors: Vec<f64>,
    pub means: Matrix,
    pub variances: Matrix,
    /// Relative smoothing factor the variance floor was derived from.
    pub var_smoothing: f64,
    /// Absolute variance floor actually applied.
    pub variance_floor: f64,
}

impl GaussianNb {
    /// Per-class means and population variances. Variances are floored at
    /// `var_smoothing` times the largest per-feature variance over the whole
    /// set (or times 1 when every feature is constant).
    pub fn fit(set: &TrainingSet<'_>, var_smoothing: f64) -> Result<Self, ModelError> {
        if !(var_smoothing > 0.0) || !var_smoothing.is_finite() {
            return Err(ModelError::InvalidHyperparameter(format!(
                "var_smoothing must be positive, got {var_smoothing}"
            )));
        }
        let k = set.n_classes;
        let p = set.dimension;
        let n = set.len();
        let counts = set.class_counts();

        let mut means = Matrix::zeros(k, p);
        let mut global_mean = vec![0.0; p];
        for (x, &y) in set.features.iter().zip(set.labels) {
            let row = means.row_mut(y);
            for &(j, v) in x.entries() {
                row[j] += v;
                global_mean[j] += v;
            }
        }
        for c in 0..k {
            let nc = counts[c] as f64;
            means.row_mut(c).iter_mut().for_each(|m| *m /= nc);
        }
        global_mean.iter_mut().for_each(|m| *m /= n as f64);

        // Second pass over densified rows; an implicit zero still deviates
        // from a non-zero mean.
        let mut variances = Matrix::zeros(k, p);
        let mut global_var = vec![0.0; p];
        for (x, &y) in set.features.iter().zip(set.labels) {
            let dense = x.to_dense();
            let (m, v) = (means.row(y).to_vec(), variances.row_mut(y));
            for j in 0..p {
                let d = dense[j] - m[j];
                v[j] += d * d;
                let g = dense[j] - global_mean[j];
                global_var[j] += g * g;
            }
        }
        for c in 0..k {
            let nc = counts[c] as f64;
            variances.row_mut(c).iter_mut().for_each(|v| *v /= nc);
        }
        let max_var = global_var.iter().map(|v| v / n as f64).fold(0.0, f64::max);
        let floor = var_smoothing * if max_var > 0.0 { max_var } else { 1.0 };
        variances.data.iter_mut().for_each(|v| *v = v.max(floor));

        let priors = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Ok(Self {
            priors,
            means,
            variances,
            var_smoothing,
            variance_floor: floor,
        })
    }

    pub fn dimension(&self) -> usize {
        self.means.cols
    }

    pub fn n_classes(&self) -> usize {
        self.priors.len()
    }

    /// Joint log-likelihood `ln P(c) + sum_j ln N(x_j; mean, var)` per class.
    pub fn joint_log_likelihood(&self, x: &FeatureVector) -> Vec<f64> {
        let dense = x.to_dense();
        (0..self.n_classes())
            .map(|c| {
                let m = self.means.row(c);
                let v = self.variances.row(c);
                let mut ll = self.priors[c].ln();
                for j in 0..dense.len() {
                    let d = dense[j] - m[j];
                    ll -= 0.5 * (2.0 * std::f64::consts::PI * v[j]).ln() + d * d / (2.0 * v[j]);
                }
                ll
            })
            .collect()
    }

    pub fn scores(&self, x: &FeatureVector) -> Vec<f64> {
        softmax(&self.joint_log_likelihood(x))
    }
}
