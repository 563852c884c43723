//! Seeded two-dimensional Gaussian-mixture data sets and OOD probe sets.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::RNG_NAME;
use crate::stats::{psd_repair_report, CholeskyFactor, FeatureMatrix, SquareMatrix, DEFAULT_REPAIR_FLOOR};

/// Probes are kept only where the generating mixture density is below this.
pub const FAR_OOD_DENSITY: f64 = 1e-8;
pub const DEFAULT_NEAR_COUNT: usize = 50;
pub const DEFAULT_FAR_COUNT: usize = 1000;
const MAX_DRAWS_PER_PROBE: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Binary,
    Multiclass,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Multiclass => "multiclass",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "multiclass" => Ok(Task::Multiclass),
            other => Err(Error::invalid(format!(
                "unknown task '{other}' (expected binary or multiclass)"
            ))),
        }
    }
}

/// One generating Gaussian. `covariance` is row-major and may be asymmetric
/// or indefinite; it is repaired before sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: Task,
    pub clusters: Vec<ClusterSpec>,
    pub seed: u64,
}

fn cluster(mean: [f64; 2], cov: [f64; 4], count: usize) -> ClusterSpec {
    ClusterSpec {
        mean: mean.to_vec(),
        covariance: cov.to_vec(),
        count,
    }
}

impl SyntheticSpec {
    /// Two clusters of 3000 points with opposite correlation.
    pub fn binary(seed: u64) -> Self {
        Self {
            task: Task::Binary,
            clusters: vec![
                cluster([5.0, 8.0], [1.0, -0.8, -0.8, 1.0], 3000),
                cluster([14.0, 8.0], [1.0, 0.8, 0.8, 1.0], 3000),
            ],
            seed,
        }
    }

    /// Eight clusters of 500 points. Three of the covariances as given are
    /// not positive semi-definite and get repaired.
    pub fn multiclass(seed: u64) -> Self {
        Self {
            task: Task::Multiclass,
            clusters: vec![
                cluster([1.5, -1.0], [0.2, -0.3, -0.2, 0.2], 500),
                cluster([1.5, 3.0], [0.1, 0.0, 0.0, 0.1], 500),
                cluster([5.0, 5.0], [0.4, 0.0, 0.0, 0.4], 500),
                cluster([-2.5, -1.0], [0.1, 0.2, 0.2, 0.1], 500),
                cluster([4.0, 1.0], [0.4, 0.0, 0.0, 0.01], 500),
                cluster([-1.0, 4.3], [0.02, 0.0, 0.0, 0.7], 500),
                cluster([5.0, -3.0], [0.5, 0.4, 0.3, 0.1], 500),
                cluster([-1.0, -4.0], [0.1, 0.0, 0.0, 0.1], 500),
            ],
            seed,
        }
    }

    pub fn for_task(task: Task, seed: u64) -> Self {
        match task {
            Task::Binary => Self::binary(seed),
            Task::Multiclass => Self::multiclass(seed),
        }
    }

    /// Overrides every cluster's sample count.
    pub fn with_count(mut self, count: usize) -> Self {
        for c in &mut self.clusters {
            c.count = count;
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.mean.len())
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::invalid("spec needs at least one cluster of positive dimension"));
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if c.mean.len() != dim || c.covariance.len() != dim * dim {
                return Err(Error::invalid(format!("cluster {i} has inconsistent dimensions")));
            }
            if c.count == 0 {
                return Err(Error::invalid(format!("cluster {i} has zero samples")));
            }
            if c.mean.iter().chain(&c.covariance).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("cluster {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    /// Covariances actually used for sampling, with repair records.
    pub fn repaired_covariances(&self) -> Result<(Vec<SquareMatrix>, Vec<RepairEvent>)> {
        self.validate()?;
        let dim = self.dim();
        let mut covs = Vec::with_capacity(self.clusters.len());
        let mut events = Vec::new();
        for (i, c) in self.clusters.iter().enumerate() {
            let raw = SquareMatrix::from_row_major(dim, c.covariance.clone())?;
            let (fixed, clipped) = psd_repair_report(&raw, DEFAULT_REPAIR_FLOOR);
            let symmetrized = !raw.is_symmetric();
            if clipped || symmetrized {
                events.push(RepairEvent {
                    cluster: i,
                    symmetrized,
                    eigenvalues_clipped: clipped,
                    raw: c.covariance.clone(),
                    repaired: fixed.data().to_vec(),
                });
            }
            covs.push(fixed);
        }
        Ok((covs, events))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairEvent {
    pub cluster: usize,
    pub symmetrized: bool,
    pub eigenvalues_clipped: bool,
    pub raw: Vec<f64>,
    pub repaired: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProvenance {
    pub spec: SyntheticSpec,
    pub repair_floor: f64,
    pub repairs: Vec<RepairEvent>,
    pub rng: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    /// Rows grouped by cluster, labels are cluster indices.
    pub features: FeatureMatrix,
    pub provenance: SyntheticProvenance,
}

fn factor(cov: &SquareMatrix, cluster: usize) -> Result<CholeskyFactor> {
    CholeskyFactor::new(cov)
        .ok_or_else(|| Error::NumericalFailure(format!("repaired covariance of cluster {cluster} is singular")))
}

/// Draws each cluster's samples as `μ + L z` with `L Lᵀ` the repaired
/// covariance and `z` standard normal, clusters in order from one stream.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let (covs, repairs) = spec.repaired_covariances()?;
    let dim = spec.dim();
    let total: usize = spec.clusters.iter().map(|c| c.count).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    let mut z = vec![0.0; dim];

    for (ci, (c, cov)) in spec.clusters.iter().zip(&covs).enumerate() {
        let l = factor(cov, ci)?;
        let lower = l.lower();
        for _ in 0..c.count {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            for i in 0..dim {
                let mut x = c.mean[i];
                for j in 0..=i {
                    x += lower[i * dim + j] * z[j];
                }
                data.push(x);
            }
            labels.push(ci);
        }
    }

    let features = FeatureMatrix::new(total, dim, data)?.with_labels(labels)?;
    Ok(SyntheticData {
        features,
        provenance: SyntheticProvenance {
            spec: spec.clone(),
            repair_floor: DEFAULT_REPAIR_FLOOR,
            repairs,
            rng: RNG_NAME.to_string(),
        },
    })
}

/// Exact density of the generating mixture (weights proportional to the
/// cluster counts, repaired covariances).
#[derive(Clone, Debug)]
pub struct MixtureDensity {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    factors: Vec<CholeskyFactor>,
    log_norms: Vec<f64>,
}

impl MixtureDensity {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        let (covs, _) = spec.repaired_covariances()?;
        let dim = spec.dim() as f64;
        let total: usize = spec.clusters.iter().map(|c| c.count).sum();
        let factors = covs
            .iter()
            .enumerate()
            .map(|(i, c)| factor(c, i))
            .collect::<Result<Vec<_>>>()?;
        let log_norms = factors
            .iter()
            .map(|f| -0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + f.log_det()))
            .collect();
        Ok(Self {
            weights: spec.clusters.iter().map(|c| c.count as f64 / total as f64).collect(),
            means: spec.clusters.iter().map(|c| c.mean.clone()).collect(),
            factors,
            log_norms,
        })
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(self.factors.iter().zip(&self.log_norms))
            .map(|((w, m), (f, ln))| w * (ln - 0.5 * f.mahalanobis_sq(x, m)).exp())
            .sum()
    }
}

/// Per-axis box covering every cluster mean ± 3 standard deviations, then
/// doubled in width about its center.
pub fn probe_box(spec: &SyntheticSpec) -> Result<Vec<(f64, f64)>> {
    let (covs, _) = spec.repaired_covariances()?;
    let dim = spec.dim();
    (0..dim)
        .map(|d| {
            let (lo, hi) = spec.clusters.iter().zip(&covs).fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), (c, cov)| {
                    let s = 3.0 * cov.get(d, d).sqrt();
                    (lo.min(c.mean[d] - s), hi.max(c.mean[d] + s))
                },
            );
            let (center, half) = (0.5 * (lo + hi), hi - lo);
            Ok((center - half, center + half))
        })
        .collect()
}

/// Uniform draws over [`probe_box`] kept only where the generating density is
/// below [`FAR_OOD_DENSITY`].
pub fn far_ood_probes(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<FeatureMatrix> {
    if count == 0 {
        return Err(Error::invalid("probe count must be positive"));
    }
    let density = MixtureDensity::new(spec)?;
    let bounds = probe_box(spec)?;
    let axes = bounds
        .iter()
        .map(|&(lo, hi)| Uniform::new(lo, hi).map_err(|e| Error::invalid(format!("probe box: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(count * axes.len());
    let mut point = vec![0.0; axes.len()];
    let mut accepted = 0;
    let mut draws = 0;
    while accepted < count {
        if draws >= count * MAX_DRAWS_PER_PROBE {
            return Err(Error::NumericalFailure(
                "probe box is almost entirely inside the mixture".into(),
            ));
        }
        draws += 1;
        for (p, a) in point.iter_mut().zip(&axes) {
            *p = a.sample(&mut rng);
        }
        if density.density(&point) < FAR_OOD_DENSITY {
            data.extend_from_slice(&point);
            accepted += 1;
        }
    }
    FeatureMatrix::new(count, axes.len(), data)
}

/// Evenly spaced points strictly between the two cluster means.
pub fn near_ood_probes(spec: &SyntheticSpec, count: usize) -> Result<FeatureMatrix> {
    spec.validate()?;
    if spec.clusters.len() != 2 {
        return Err(Error::invalid(format!(
            "near-OOD probes need exactly two clusters, spec has {}",
            spec.clusters.len()
        )));
    }
    if count == 0 {
        return Err(Error::invalid("probe count must be positive"));
    }
    let (a, b) = (&spec.clusters[0].mean, &spec.clusters[1].mean);
    let mut data = Vec::with_capacity(count * a.len());
    for i in 1..=count {
        let t = i as f64 / (count + 1) as f64;
        data.extend(a.iter().zip(b).map(|(x, y)| x + t * (y - x)));
    }
    FeatureMatrix::new(count, a.len(), data)
}

/// Seeded shuffle then split; the test part gets `round(fraction · n)` rows
/// (at least one, and at least one row left for training).
pub fn train_test_split(
    features: &FeatureMatrix,
    test_fraction: f64,
    seed: u64,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let n = features.nrows();
    if !(test_fraction > 0.0 && test_fraction < 1.0) || n < 2 {
        return Err(Error::invalid(
            "test fraction must lie in (0, 1) and the matrix needs two rows",
        ));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, train) = order.split_at(n_test);
    Ok((features.select_rows(train)?, features.select_rows(test)?))
}
