//! TAP-MOS baseline: a linear group-softmax classifier over GMM clusters.
//!
//! Group `k` has two categories, "cluster k" and "others". A training row
//! assigned to cluster `c` is "cluster k" in group `c` and "others" in every
//! other group. The loss is the per-group cross-entropy summed over groups
//! and averaged over rows; the score is the negated smallest "others"
//! probability across groups.
//!
//! Inputs are standardized per dimension with the training mean and standard
//! deviation before the linear layer; the statistics live in the model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{assign, fit_gmm, responsibilities, FitConfig};
use crate::scorer::{check_point, Scorer};
use crate::stats::FeatureMatrix;
use crate::tapmb::fill_empty_clusters;

const CLUSTER: usize = 0;
const OTHERS: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial step size, decayed to zero on a cosine schedule.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid(
                "epochs, batch_size and learning_rate must be positive",
            ));
        }
        Ok(())
    }
}

/// Parameters of the K two-way linear heads.
///
/// Layout per group: `[w_cluster (D), b_cluster, w_others (D), b_others]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupHeads {
    k: usize,
    dim: usize,
    params: Vec<f64>,
}

impl GroupHeads {
    pub fn zeros(k: usize, dim: usize) -> Self {
        Self {
            k,
            dim,
            params: vec![0.0; k * 2 * (dim + 1)],
        }
    }

    pub fn from_params(k: usize, dim: usize, params: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 || params.len() != k * 2 * (dim + 1) {
            return Err(Error::invalid(format!(
                "expected {} parameters for k={k}, dim={dim}, got {}",
                k * 2 * (dim + 1),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(Self { k, dim, params })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    #[inline]
    fn offset(&self, group: usize, category: usize) -> usize {
        (group * 2 + category) * (self.dim + 1)
    }

    #[inline]
    fn logit(&self, group: usize, category: usize, x: &[f64]) -> f64 {
        let o = self.offset(group, category);
        let w = &self.params[o..o + self.dim];
        w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.params[o + self.dim]
    }

    fn group_log_softmax(&self, group: usize, x: &[f64]) -> [f64; 2] {
        let a = self.logit(group, CLUSTER, x);
        let b = self.logit(group, OTHERS, x);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        [a - lse, b - lse]
    }

    /// `[p_cluster, p_others]` for one group.
    pub fn group_softmax(&self, group: usize, x: &[f64]) -> [f64; 2] {
        let [a, b] = self.group_log_softmax(group, x);
        [a.exp(), b.exp()]
    }

    /// Summed group cross-entropy averaged over rows, and its gradient.
    /// `targets[i]` is the cluster of row `i`.
    pub fn loss_and_gradient(&self, rows: &[&[f64]], targets: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let inv_n = 1.0 / rows.len() as f64;
        for (x, &t) in rows.iter().zip(targets) {
            for g in 0..self.k {
                let logp = self.group_log_softmax(g, x);
                let p = [logp[0].exp(), logp[1].exp()];
                let y = if g == t { CLUSTER } else { OTHERS };
                loss -= logp[y];
                for c in [CLUSTER, OTHERS] {
                    let err = (p[c] - if c == y { 1.0 } else { 0.0 }) * inv_n;
                    let o = self.offset(g, c);
                    for (gw, xi) in grad[o..o + self.dim].iter_mut().zip(x.iter()) {
                        *gw += err * xi;
                    }
                    grad[o + self.dim] += err;
                }
            }
        }
        (loss * inv_n, grad)
    }

    /// `−min_k p_others^k(x)`.
    pub fn min_others_score(&self, x: &[f64]) -> f64 {
        let min = (0..self.k)
            .map(|g| self.group_softmax(g, x)[OTHERS])
            .fold(f64::INFINITY, f64::min);
        -min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapMosModel {
    heads: GroupHeads,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    cluster_counts: Vec<usize>,
    trained_epochs: usize,
    initial_loss: f64,
    final_loss: f64,
    /// Full-data loss after each epoch.
    loss_trace: Vec<f64>,
    fit_config: FitConfig,
    train_config: TrainConfig,
}

impl TapMosModel {
    /// Wraps heads that operate directly on raw features.
    pub fn from_heads(heads: GroupHeads) -> Self {
        let d = heads.dim;
        Self {
            heads,
            input_mean: vec![0.0; d],
            input_scale: vec![1.0; d],
            cluster_counts: Vec::new(),
            trained_epochs: 0,
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
            loss_trace: Vec::new(),
            fit_config: FitConfig::default(),
            train_config: TrainConfig::default(),
        }
    }

    pub fn k(&self) -> usize {
        self.heads.k
    }

    pub fn heads(&self) -> &GroupHeads {
        &self.heads
    }

    pub fn cluster_counts(&self) -> &[usize] {
        &self.cluster_counts
    }

    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    pub fn initial_loss(&self) -> f64 {
        self.initial_loss
    }

    pub fn final_loss(&self) -> f64 {
        self.final_loss
    }

    pub fn loss_trace(&self) -> &[f64] {
        &self.loss_trace
    }

    pub fn fit_config(&self) -> &FitConfig {
        &self.fit_config
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train_config
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// `[p_cluster, p_others]` of every group for a raw feature vector.
    pub fn group_probabilities(&self, x: &[f64]) -> Result<Vec<[f64; 2]>> {
        check_point(self.heads.dim, x)?;
        let z = self.standardize(x);
        Ok((0..self.heads.k).map(|g| self.heads.group_softmax(g, &z)).collect())
    }
}

impl Scorer for TapMosModel {
    fn dim(&self) -> usize {
        self.heads.dim
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        score_tapmos(self, x)
    }
}

fn input_standardization(features: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let d = features.ncols();
    let n = features.nrows() as f64;
    let mut mean = vec![0.0; d];
    for r in features.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in features.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Clusters the features and trains the group heads by mini-batch SGD.
pub fn fit_tapmos(
    features: &FeatureMatrix,
    k: usize,
    fit: &FitConfig,
    train: &TrainConfig,
) -> Result<TapMosModel> {
    train.validate()?;
    let gmm = fit_gmm(features, k, fit)?;
    let mut targets = assign(&gmm, features)?;
    fill_empty_clusters(&mut targets, k, || responsibilities(&gmm, features))?;
    let mut cluster_counts = vec![0usize; k];
    for &t in &targets {
        cluster_counts[t] += 1;
    }

    let (input_mean, input_scale) = input_standardization(features);
    let standardized: Vec<Vec<f64>> = features
        .iter_rows()
        .map(|r| {
            r.iter()
                .zip(&input_mean)
                .zip(&input_scale)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect();
    let all_rows: Vec<&[f64]> = standardized.iter().map(Vec::as_slice).collect();

    let mut heads = GroupHeads::zeros(k, features.ncols());
    let (initial_loss, _) = heads.loss_and_gradient(&all_rows, &targets);

    let n = features.nrows();
    let steps_per_epoch = n.div_ceil(train.batch_size);
    let total_steps = (steps_per_epoch * train.epochs) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_trace = Vec::with_capacity(train.epochs);
    let mut step = 0usize;
    let mut batch_rows: Vec<&[f64]> = Vec::with_capacity(train.batch_size);
    let mut batch_targets: Vec<usize> = Vec::with_capacity(train.batch_size);

    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            batch_rows.clear();
            batch_targets.clear();
            for &i in chunk {
                batch_rows.push(all_rows[i]);
                batch_targets.push(targets[i]);
            }
            let (_, grad) = heads.loss_and_gradient(&batch_rows, &batch_targets);
            let lr = train.learning_rate
                * 0.5
                * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            for (p, g) in heads.params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            step += 1;
        }
        let (loss, _) = heads.loss_and_gradient(&all_rows, &targets);
        if !loss.is_finite() || heads.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "TAP-MOS training diverged after {} epochs",
                loss_trace.len() + 1
            )));
        }
        loss_trace.push(loss);
    }

    Ok(TapMosModel {
        heads,
        input_mean,
        input_scale,
        cluster_counts,
        trained_epochs: train.epochs,
        initial_loss,
        final_loss: *loss_trace.last().expect("epochs >= 1"),
        loss_trace,
        fit_config: fit.clone(),
        train_config: train.clone(),
    })
}

/// `−min_k p_others^k(x)`, in `[−1, 0]`.
pub fn score_tapmos(model: &TapMosModel, x: &[f64]) -> Result<f64> {
    check_point(model.heads.dim, x)?;
    Ok(model.heads.min_others_score(&model.standardize(x)))
}
