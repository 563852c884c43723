//! TAP-Mahalanobis: cluster the in-distribution features with a GMM, take the
//! empirical mean and covariance of each hard-assigned cluster, and score a
//! point by the negated minimum squared Mahalanobis distance to the clusters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{assign, fit_gmm, responsibilities, FitConfig};
use crate::scorer::{check_point, Scorer};
use crate::stats::{empirical_stats, ClusterStats, FeatureMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapFitMeta {
    pub config: FitConfig,
    pub assignment_counts: Vec<usize>,
    pub gmm_converged: bool,
    pub gmm_n_iter: usize,
    pub gmm_avg_loglik: f64,
    /// Rows moved into clusters that argmax assignment left empty.
    pub rows_moved: usize,
    /// Clusters whose covariance needed eigenvalue clipping.
    pub repaired_clusters: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapMahalanobisModel {
    k: usize,
    dim: usize,
    clusters: Vec<ClusterStats>,
    fit_meta: Option<TapFitMeta>,
}

impl TapMahalanobisModel {
    /// Wraps precomputed clusters (no fitting metadata).
    pub fn from_clusters(clusters: Vec<ClusterStats>) -> Result<Self> {
        let dim = clusters
            .first()
            .map(ClusterStats::dim)
            .ok_or_else(|| Error::invalid("at least one cluster is required"))?;
        if clusters.iter().any(|c| c.dim() != dim) {
            return Err(Error::invalid("clusters differ in dimension"));
        }
        Ok(Self {
            k: clusters.len(),
            dim,
            clusters,
            fit_meta: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn clusters(&self) -> &[ClusterStats] {
        &self.clusters
    }

    pub fn fit_meta(&self) -> Option<&TapFitMeta> {
        self.fit_meta.as_ref()
    }

    /// Smallest squared Mahalanobis distance to any cluster. No input checks.
    pub(crate) fn min_distance_sq(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        self.clusters
            .iter()
            .map(|c| c.mahalanobis_sq_with(x, scratch))
            .fold(f64::INFINITY, f64::min)
    }
}

impl Scorer for TapMahalanobisModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        score_tapmb(self, x)
    }
}

/// Fits the detector for one cluster count.
pub fn fit_tapmb(features: &FeatureMatrix, k: usize, config: &FitConfig) -> Result<TapMahalanobisModel> {
    let gmm = fit_gmm(features, k, config)?;
    let mut labels = assign(&gmm, features)?;
    let rows_moved = fill_empty_clusters(&mut labels, k, || responsibilities(&gmm, features))?;

    let clusters = (0..k)
        .map(|c| empirical_stats(features, &labels, c, config.reg_covar))
        .collect::<Result<Vec<_>>>()?;
    let assignment_counts = clusters.iter().map(ClusterStats::count).collect();
    let repaired_clusters = clusters
        .iter()
        .enumerate()
        .filter(|(_, c)| c.repaired())
        .map(|(i, _)| i)
        .collect();

    Ok(TapMahalanobisModel {
        k,
        dim: features.ncols(),
        clusters,
        fit_meta: Some(TapFitMeta {
            config: config.clone(),
            assignment_counts,
            gmm_converged: gmm.converged(),
            gmm_n_iter: gmm.n_iter(),
            gmm_avg_loglik: gmm.final_avg_loglik(),
            rows_moved,
            repaired_clusters,
        }),
    })
}

/// A mixture component can keep nonzero weight yet win no row under argmax.
/// Each such cluster takes the row with the highest responsibility for it
/// among clusters that can spare one. Returns the number of rows moved.
pub(crate) fn fill_empty_clusters<F>(labels: &mut [usize], k: usize, resp: F) -> Result<usize>
where
    F: FnOnce() -> Result<Vec<f64>>,
{
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    if counts.iter().all(|&c| c > 0) {
        return Ok(0);
    }
    let resp = resp()?;
    let mut moved = 0;
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut best: Option<usize> = None;
        for (i, &l) in labels.iter().enumerate() {
            if counts[l] < 2 {
                continue;
            }
            if best.is_none_or(|b| resp[i * k + c] > resp[b * k + c]) {
                best = Some(i);
            }
        }
        let i = best.ok_or(Error::EmptyCluster(c))?;
        counts[labels[i]] -= 1;
        labels[i] = c;
        counts[c] = 1;
        moved += 1;
    }
    Ok(moved)
}

/// `−min_c (x − μ_c)ᵀ Σ_c⁻¹ (x − μ_c)`.
pub fn score_tapmb(model: &TapMahalanobisModel, x: &[f64]) -> Result<f64> {
    check_point(model.dim, x)?;
    let mut scratch = vec![0.0; model.dim];
    Ok(-model.min_distance_sq(x, &mut scratch))
}

pub fn score_tapmb_batch(model: &TapMahalanobisModel, features: &FeatureMatrix) -> Result<Vec<f64>> {
    model.score_batch(features)
}
