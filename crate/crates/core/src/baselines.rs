//! Post-hoc baselines: class-conditional Mahalanobis with a shared
//! covariance, and logit-based MSP, energy and KL-matching scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::{check_point, Scorer};
use crate::stats::{mean_and_covariance, regularize_and_factor, CholeskyFactor, FeatureMatrix, SquareMatrix};

/// Per-coordinate floor applied to KL-matching reference distributions.
pub const KL_REFERENCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiedMahalanobisModel {
    class_means: Vec<Vec<f64>>,
    class_counts: Vec<usize>,
    shared_covariance: SquareMatrix,
    shared_factor: CholeskyFactor,
    ridge: f64,
}

impl TiedMahalanobisModel {
    pub fn classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn shared_covariance(&self) -> &SquareMatrix {
        &self.shared_covariance
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }
}

impl Scorer for TiedMahalanobisModel {
    fn dim(&self) -> usize {
        self.shared_covariance.dim()
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        score_tied_mahalanobis(self, x)
    }
}

/// Per-class means and the pooled within-class covariance
/// `(1/N) Σ_c Σ_{i: y_i = c} (f_i − μ_c)(f_i − μ_c)ᵀ`, plus ridge.
pub fn fit_tied_mahalanobis(features: &FeatureMatrix, reg: f64) -> Result<TiedMahalanobisModel> {
    let labels = features
        .labels()
        .ok_or_else(|| Error::invalid("tied Mahalanobis needs class labels"))?;
    if !(reg > 0.0) {
        return Err(Error::invalid(format!("ridge must be positive, got {reg}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let d = features.ncols();
    let n = features.nrows() as f64;

    let mut class_means = Vec::with_capacity(classes);
    let mut class_counts = Vec::with_capacity(classes);
    let mut pooled = SquareMatrix::zeros(d);
    for c in 0..classes {
        let rows = features
            .iter_rows()
            .zip(labels)
            .filter(move |(_, &l)| l == c)
            .map(|(r, _)| r);
        let (mean, cov, count) = mean_and_covariance(rows, d);
        if count == 0 {
            return Err(Error::invalid(format!("class {c} has no samples")));
        }
        // cov is divided by N_c; reweight to the pooled 1/N normalization
        let w = count as f64 / n;
        for i in 0..d {
            for j in 0..d {
                pooled.set(i, j, pooled.get(i, j) + w * cov.get(i, j));
            }
        }
        class_means.push(mean);
        class_counts.push(count);
    }

    let (shared_covariance, shared_factor, ridge, _) = regularize_and_factor(&pooled, reg)?;
    Ok(TiedMahalanobisModel {
        class_means,
        class_counts,
        shared_covariance,
        shared_factor,
        ridge,
    })
}

/// `−min_c (x − μ_c)ᵀ Σ⁻¹ (x − μ_c)` with the shared Σ.
pub fn score_tied_mahalanobis(model: &TiedMahalanobisModel, x: &[f64]) -> Result<f64> {
    check_point(model.dim(), x)?;
    let mut scratch = vec![0.0; x.len()];
    let min = model
        .class_means
        .iter()
        .map(|m| model.shared_factor.mahalanobis_sq_with(x, m, &mut scratch))
        .fold(f64::INFINITY, f64::min);
    Ok(-min)
}

/// Classifier logits, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix(FeatureMatrix);

impl LogitMatrix {
    pub fn new(rows: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        FeatureMatrix::new(rows, classes, data).map(Self)
    }

    pub fn from_features(features: FeatureMatrix) -> Self {
        Self(features.without_labels())
    }

    pub fn classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_features(&self) -> &FeatureMatrix {
        &self.0
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.0.iter_rows()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::invalid("logit vector is empty"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits must be finite"));
    }
    Ok(())
}

/// Maximum softmax probability.
pub fn score_msp(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((max - log_sum_exp(logits)).exp())
}

/// Negative free energy `T · logsumexp(z / T)`.
pub fn score_energy(logits: &[f64], temperature: f64) -> Result<f64> {
    check_logits(logits)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    Ok(temperature * log_sum_exp(&scaled))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlMatchingModel {
    /// One reference distribution per class.
    references: Vec<Vec<f64>>,
    /// Classes no validation row predicted; their reference is uniform.
    uniform_classes: Vec<usize>,
}

impl KlMatchingModel {
    pub fn references(&self) -> &[Vec<f64>] {
        &self.references
    }

    pub fn uniform_classes(&self) -> &[usize] {
        &self.uniform_classes
    }
}

impl Scorer for KlMatchingModel {
    fn dim(&self) -> usize {
        self.references.len()
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        score_kl_matching(self, x)
    }
}

/// Mean softmax vector of the validation rows predicted as each class.
pub fn fit_kl_matching(val_logits: &LogitMatrix) -> Result<KlMatchingModel> {
    let c = val_logits.classes();
    if val_logits.nrows() == 0 {
        return Err(Error::invalid("validation logits are empty"));
    }
    let mut sums = vec![vec![0.0; c]; c];
    let mut counts = vec![0usize; c];
    for row in val_logits.iter_rows() {
        let p = softmax(row);
        let mut pred = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[pred] {
                pred = j;
            }
        }
        counts[pred] += 1;
        for (s, v) in sums[pred].iter_mut().zip(&p) {
            *s += v;
        }
    }
    let mut uniform_classes = Vec::new();
    let references = sums
        .into_iter()
        .zip(&counts)
        .enumerate()
        .map(|(j, (s, &n))| {
            if n == 0 {
                uniform_classes.push(j);
                vec![1.0 / c as f64; c]
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect();
    Ok(KlMatchingModel {
        references,
        uniform_classes,
    })
}

/// `KL(p ‖ q)` with `0·ln 0 = 0` and `q` floored per coordinate.
fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(KL_REFERENCE_FLOOR).ln()))
        .sum();
    kl.max(0.0)
}

/// `−min_c KL(softmax(z) ‖ d_c)`.
pub fn score_kl_matching(model: &KlMatchingModel, logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    check_point(model.references.len(), logits)?;
    let p = softmax(logits);
    let min = model
        .references
        .iter()
        .map(|d| kl_divergence(&p, d))
        .fold(f64::INFINITY, f64::min);
    Ok(-min)
}
