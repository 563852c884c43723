//! Gaussian mixture fitting with full covariances, and a plain K-means
//! backend.
//!
//! EM starts from a K-means++ seeded Lloyd run (hard responsibilities), then
//! alternates log-sum-exp stabilized E-steps with weighted M-steps until the
//! mean log-likelihood stops moving by more than `tol` (relative). Several
//! restarts share one ChaCha8 stream seeded from `FitConfig::seed`; the
//! restart with the highest final log-likelihood wins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{
    mean_and_covariance, regularize_and_factor, CholeskyFactor, ClusterStats, FeatureMatrix,
    SquareMatrix,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Name of the RNG used for seeding and restarts, recorded in provenance.
pub const RNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.9), seed_from_u64";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Relative change in mean log-likelihood that counts as converged.
    pub tol: f64,
    pub reg_covar: f64,
    pub n_init: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-4,
            reg_covar: 1e-6,
            n_init: 3,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if !(self.reg_covar > 0.0) {
            return Err(Error::invalid("reg_covar must be positive"));
        }
        if self.n_init < 1 {
            return Err(Error::invalid("n_init must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    k: usize,
    weights: Vec<f64>,
    components: Vec<ClusterStats>,
    converged: bool,
    final_avg_loglik: f64,
    n_iter: usize,
    /// Mean log-likelihood after each E-step of the winning restart.
    loglik_trace: Vec<f64>,
}

impl GmmModel {
    /// Assembles a model from explicit parameters (no fitting).
    pub fn from_components(weights: Vec<f64>, components: Vec<ClusterStats>) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::invalid("components differ in dimension"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("weights must be nonnegative and sum to 1"));
        }
        Ok(Self {
            k: components.len(),
            weights,
            components,
            converged: true,
            final_avg_loglik: f64::NAN,
            n_iter: 0,
            loglik_trace: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[ClusterStats] {
        &self.components
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn final_avg_loglik(&self) -> f64 {
        self.final_avg_loglik
    }

    pub fn n_iter(&self) -> usize {
        self.n_iter
    }

    pub fn loglik_trace(&self) -> &[f64] {
        &self.loglik_trace
    }

    fn log_norms(&self) -> Vec<f64> {
        log_norms(&self.weights, &self.components)
    }

    fn check_dim(&self, features: &FeatureMatrix) -> Result<()> {
        if features.ncols() != self.dim() {
            return Err(Error::invalid(format!(
                "features have dimension {}, model {}",
                features.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }
}

fn log_norms(weights: &[f64], components: &[ClusterStats]) -> Vec<f64> {
    weights
        .iter()
        .zip(components)
        .map(|(w, c)| {
            w.ln() - 0.5 * (c.dim() as f64 * LN_2PI + c.factor().log_det())
        })
        .collect()
}

/// Fills `out` (N×K) with `ln w_k + ln N(x_i | μ_k, Σ_k)`.
fn weighted_log_prob(
    features: &FeatureMatrix,
    components: &[ClusterStats],
    log_norms: &[f64],
    out: &mut [f64],
) {
    let k = components.len();
    let mut scratch = vec![0.0; features.ncols()];
    for (row, lp) in features.iter_rows().zip(out.chunks_exact_mut(k)) {
        for ((c, norm), slot) in components.iter().zip(log_norms).zip(lp.iter_mut()) {
            *slot = norm - 0.5 * c.mahalanobis_sq_with(row, &mut scratch);
        }
    }
}

/// Turns each row of log-probabilities into responsibilities in place and
/// returns the per-row log-likelihoods.
fn normalize_rows(log_prob: &mut [f64], k: usize) -> Vec<f64> {
    log_prob
        .chunks_exact_mut(k)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
            lse
        })
        .collect()
}

/// Posterior component probabilities, N×K row-major.
pub fn responsibilities(model: &GmmModel, features: &FeatureMatrix) -> Result<Vec<f64>> {
    model.check_dim(features)?;
    let mut lp = vec![0.0; features.nrows() * model.k];
    weighted_log_prob(features, &model.components, &model.log_norms(), &mut lp);
    normalize_rows(&mut lp, model.k);
    Ok(lp)
}

/// Mean per-sample log-likelihood of `features` under the mixture.
pub fn mean_log_likelihood(model: &GmmModel, features: &FeatureMatrix) -> Result<f64> {
    model.check_dim(features)?;
    let mut lp = vec![0.0; features.nrows() * model.k];
    weighted_log_prob(features, &model.components, &model.log_norms(), &mut lp);
    let ll = normalize_rows(&mut lp, model.k);
    Ok(ll.iter().sum::<f64>() / features.nrows() as f64)
}

/// Hard assignment to the most responsible component; ties go to the lowest
/// index.
pub fn assign(model: &GmmModel, features: &FeatureMatrix) -> Result<Vec<usize>> {
    model.check_dim(features)?;
    let k = model.k;
    let mut lp = vec![0.0; features.nrows() * k];
    weighted_log_prob(features, &model.components, &model.log_norms(), &mut lp);
    Ok(lp.chunks_exact(k).map(argmax_first).collect())
}

fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn validate_inputs(features: &FeatureMatrix, k: usize, config: &FitConfig) -> Result<()> {
    config.validate()?;
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > features.nrows() {
        return Err(Error::invalid(format!(
            "k={k} exceeds the number of rows ({})",
            features.nrows()
        )));
    }
    Ok(())
}

/// Fits a full-covariance Gaussian mixture with `k` components.
pub fn fit_gmm(features: &FeatureMatrix, k: usize, config: &FitConfig) -> Result<GmmModel> {
    validate_inputs(features, k, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<GmmModel> = None;
    let mut last_err = None;
    for _ in 0..config.n_init {
        match fit_single(features, k, config, &mut rng) {
            Ok(m) => {
                if best
                    .as_ref()
                    .is_none_or(|b| m.final_avg_loglik > b.final_avg_loglik)
                {
                    best = Some(m);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        Error::NumericalFailure(format!(
            "all {} restarts failed: {}",
            config.n_init,
            last_err.map_or_else(String::new, |e| e.to_string())
        ))
    })
}

fn fit_single(
    features: &FeatureMatrix,
    k: usize,
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GmmModel> {
    let n = features.nrows();
    let d = features.ncols();
    let (_, global_cov, _) = mean_and_covariance(features.iter_rows(), d);

    let labels = if k == 1 {
        vec![0; n]
    } else {
        let seeds = kmeans_plus_plus(features, k, rng);
        lloyd(features, seeds, config.max_iter).labels
    };
    let mut resp = vec![0.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        resp[i * k + l] = 1.0;
    }
    // Row log-likelihoods are unknown before the first E-step; with hard
    // initial responsibilities no component can be empty except through
    // Lloyd's empty-cluster case, where any deterministic choice will do.
    let mut row_ll = vec![0.0; n];
    let (mut weights, mut components) =
        m_step(features, &resp, k, config.reg_covar, &row_ll, &global_cov)?;

    let mut trace = Vec::new();
    let mut converged = false;
    let mut n_iter = 0;
    let mut prev = f64::NAN;
    for iter in 0..=config.max_iter {
        let norms = log_norms(&weights, &components);
        weighted_log_prob(features, &components, &norms, &mut resp);
        row_ll = normalize_rows(&mut resp, k);
        let ll = row_ll.iter().sum::<f64>() / n as f64;
        if !ll.is_finite() {
            return Err(Error::NumericalFailure("log-likelihood is not finite".into()));
        }
        trace.push(ll);
        if iter > 0 && (ll - prev).abs() < config.tol * ll.abs() {
            converged = true;
            break;
        }
        if iter == config.max_iter {
            break;
        }
        prev = ll;
        let (w, c) = m_step(features, &resp, k, config.reg_covar, &row_ll, &global_cov)?;
        weights = w;
        components = c;
        n_iter = iter + 1;
    }

    Ok(GmmModel {
        k,
        weights,
        components,
        converged,
        final_avg_loglik: *trace.last().expect("at least one E-step"),
        n_iter,
        loglik_trace: trace,
    })
}

/// Weighted means and covariances from responsibilities. A component whose
/// total responsibility has collapsed is re-seeded at the worst-explained
/// unused point with the global covariance.
fn m_step(
    features: &FeatureMatrix,
    resp: &[f64],
    k: usize,
    reg_covar: f64,
    row_ll: &[f64],
    global_cov: &SquareMatrix,
) -> Result<(Vec<f64>, Vec<ClusterStats>)> {
    let n = features.nrows();
    let d = features.ncols();
    let mut nk = vec![0.0; k];
    let mut means = vec![vec![0.0; d]; k];
    for (row, r) in features.iter_rows().zip(resp.chunks_exact(k)) {
        for j in 0..k {
            nk[j] += r[j];
            for (m, v) in means[j].iter_mut().zip(row) {
                *m += r[j] * v;
            }
        }
    }

    let empty_floor = 10.0 * f64::EPSILON * n as f64;
    let mut reseeded: Vec<usize> = Vec::new();
    let mut covs = Vec::with_capacity(k);
    let mut delta = vec![0.0; d];
    for j in 0..k {
        if nk[j] < empty_floor {
            let idx = worst_explained(row_ll, &reseeded);
            reseeded.push(idx);
            means[j] = features.row(idx).to_vec();
            nk[j] = 1.0;
            covs.push(global_cov.clone());
            continue;
        }
        let inv = 1.0 / nk[j];
        means[j].iter_mut().for_each(|m| *m *= inv);
        let mut cov = SquareMatrix::zeros(d);
        for (row, r) in features.iter_rows().zip(resp.chunks_exact(k)) {
            let w = r[j];
            if w == 0.0 {
                continue;
            }
            for ((dl, v), m) in delta.iter_mut().zip(row).zip(&means[j]) {
                *dl = v - m;
            }
            for a in 0..d {
                let wa = w * delta[a];
                for b in 0..=a {
                    cov.set(a, b, cov.get(a, b) + wa * delta[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..=a {
                let v = cov.get(a, b) * inv;
                cov.set(a, b, v);
                cov.set(b, a, v);
            }
        }
        covs.push(cov);
    }

    let total: f64 = nk.iter().sum();
    let weights: Vec<f64> = nk.iter().map(|v| v / total).collect();
    let components = means
        .into_iter()
        .zip(covs)
        .zip(&nk)
        .map(|((mean, cov), &count)| gmm_component(mean, cov, count, reg_covar))
        .collect::<Result<Vec<_>>>()?;
    Ok((weights, components))
}

fn worst_explained(row_ll: &[f64], taken: &[usize]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in row_ll.iter().enumerate() {
        if taken.contains(&i) {
            continue;
        }
        if best.is_none_or(|b| v < row_ll[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(0)
}

/// `cov + reg_covar·I`, falling back to the repairing path when the plain
/// factorization fails.
fn gmm_component(
    mean: Vec<f64>,
    mut cov: SquareMatrix,
    count: f64,
    reg_covar: f64,
) -> Result<ClusterStats> {
    let raw = cov.clone();
    cov.add_diagonal(reg_covar);
    let count = count.round() as usize;
    match CholeskyFactor::new(&cov) {
        Some(factor) => Ok(ClusterStats::from_parts(mean, cov, factor, count, reg_covar, false)),
        None => {
            let (cov, factor, ridge, repaired) = regularize_and_factor(&raw, reg_covar)?;
            Ok(ClusterStats::from_parts(mean, cov, factor, count, ridge, repaired))
        }
    }
}

/// Result of [`fit_kmeans`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub n_iter: usize,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
}

/// Lloyd's algorithm from K-means++ seeds; best of `n_init` by inertia.
pub fn fit_kmeans(features: &FeatureMatrix, k: usize, config: &FitConfig) -> Result<KMeansResult> {
    validate_inputs(features, k, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..config.n_init {
        let seeds = kmeans_plus_plus(features, k, &mut rng);
        let run = lloyd(features, seeds, config.max_iter);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_plus_plus(features: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = features.nrows();
    let first = rng.random_range(0..n);
    let mut centers = vec![features.row(first).to_vec()];
    let mut d2: Vec<f64> = features
        .iter_rows()
        .map(|r| sq_dist(r, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, v) in d2.iter().enumerate() {
                acc += v;
                if acc > target && *v > 0.0 {
                    pick = i;
                    break;
                }
            }
            // rounding can leave the target past the final sum
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|v| *v > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = features.row(idx).to_vec();
        for (slot, r) in d2.iter_mut().zip(features.iter_rows()) {
            *slot = slot.min(sq_dist(r, &c));
        }
        centers.push(c);
    }
    centers
}

fn nearest(features: &FeatureMatrix, centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = features
        .iter_rows()
        .map(|r| {
            let mut best = 0;
            let mut best_d = sq_dist(r, &centroids[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(r, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            inertia += best_d;
            best
        })
        .collect();
    (labels, inertia)
}

fn lloyd(features: &FeatureMatrix, mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeansResult {
    let k = centroids.len();
    let d = features.ncols();
    let (mut labels, mut inertia) = nearest(features, &centroids);
    let mut trace = vec![inertia];
    let mut n_iter = 0;
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (r, &l) in features.iter_rows().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(r) {
                *s += v;
            }
        }
        for j in 0..k {
            // empty clusters keep their previous centroid
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s * inv).collect();
            }
        }
        n_iter += 1;
        let (new_labels, new_inertia) = nearest(features, &centroids);
        trace.push(new_inertia);
        inertia = new_inertia;
        if new_labels == labels {
            break;
        }
        labels = new_labels;
    }
    KMeansResult {
        labels,
        centroids,
        inertia,
        n_iter,
        inertia_trace: trace,
    }
}
