//! TAPUDD: TAP-Mahalanobis detectors fitted for several cluster counts,
//! with their scores combined by one of five aggregation strategies.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::FitConfig;
use crate::scorer::{check_point, Scorer};
use crate::stats::FeatureMatrix;
use crate::tapmb::{fit_tapmb, TapMahalanobisModel};

/// Cluster counts used when none are given.
pub const DEFAULT_K_LIST: [usize; 12] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 16, 32];
pub const DEFAULT_N_E: usize = 8;
pub const DEFAULT_TRIM: usize = 2;

/// How seesaw decides between its top and bottom rule.
pub const SEESAW_RULE: &str =
    "top n_e if median(scores) > (min+max)/2, otherwise bottom n_e (ties go to bottom)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Average,
    TrimmedAverage,
    Seesaw,
    Top,
    Bottom,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Average,
        Strategy::TrimmedAverage,
        Strategy::Seesaw,
        Strategy::Top,
        Strategy::Bottom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Average => "average",
            Strategy::TrimmedAverage => "trimmed_average",
            Strategy::Seesaw => "seesaw",
            Strategy::Top => "top",
            Strategy::Bottom => "bottom",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "average" | "avg" => Ok(Strategy::Average),
            "trimmed_average" | "trimmed" => Ok(Strategy::TrimmedAverage),
            "seesaw" => Ok(Strategy::Seesaw),
            "top" => Ok(Strategy::Top),
            "bottom" => Ok(Strategy::Bottom),
            other => Err(Error::invalid(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    k_list: Vec<usize>,
    strategy: Strategy,
    n_e: usize,
    m: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            k_list: DEFAULT_K_LIST.to_vec(),
            strategy: Strategy::Average,
            n_e: DEFAULT_N_E,
            m: DEFAULT_TRIM,
        }
    }
}

impl EnsembleConfig {
    pub fn new(k_list: Vec<usize>, strategy: Strategy, n_e: usize, m: usize) -> Result<Self> {
        let cfg = Self {
            k_list,
            strategy,
            n_e,
            m,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same members, different strategy. Constraints are unaffected.
    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        Self {
            strategy,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.k_list.len();
        if n == 0 {
            return Err(Error::invalid("k_list must not be empty"));
        }
        if self.k_list.contains(&0) {
            return Err(Error::invalid("k_list entries must be positive"));
        }
        for (i, k) in self.k_list.iter().enumerate() {
            if self.k_list[..i].contains(k) {
                return Err(Error::invalid(format!("duplicate K={k} in k_list")));
            }
        }
        if 2 * self.n_e <= n {
            return Err(Error::invalid(format!(
                "n_e > K/2 violated: n_e={} with {n} members",
                self.n_e
            )));
        }
        if self.n_e > n {
            return Err(Error::invalid(format!(
                "n_e <= K violated: n_e={} with {n} members",
                self.n_e
            )));
        }
        if 2 * self.m >= n {
            return Err(Error::invalid(format!(
                "2m < K violated: m={} with {n} members",
                self.m
            )));
        }
        Ok(())
    }

    pub fn k_list(&self) -> &[usize] {
        &self.k_list
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn n_e(&self) -> usize {
        self.n_e
    }

    pub fn m(&self) -> usize {
        self.m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapuddModel {
    dim: usize,
    config: EnsembleConfig,
    /// In `config.k_list` order.
    members: Vec<TapMahalanobisModel>,
}

impl TapuddModel {
    pub fn from_members(config: EnsembleConfig, members: Vec<TapMahalanobisModel>) -> Result<Self> {
        config.validate()?;
        if members.len() != config.k_list.len() {
            return Err(Error::invalid(format!(
                "{} members for a k_list of {}",
                members.len(),
                config.k_list.len()
            )));
        }
        let dim = members[0].dim();
        for (m, &k) in members.iter().zip(&config.k_list) {
            if m.k() != k {
                return Err(Error::invalid(format!("member has K={}, expected {k}", m.k())));
            }
            if m.dim() != dim {
                return Err(Error::invalid("members differ in dimension"));
            }
        }
        Ok(Self {
            dim,
            config,
            members,
        })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn members(&self) -> &[TapMahalanobisModel] {
        &self.members
    }

    pub fn member(&self, k: usize) -> Option<&TapMahalanobisModel> {
        self.members.iter().find(|m| m.k() == k)
    }

    /// Same fitted members aggregated with another strategy.
    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        Self {
            config: self.config.with_strategy(strategy),
            ..self.clone()
        }
    }
}

impl Scorer for TapuddModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        score_tapudd(self, x)
    }
}

/// Seed for the member with cluster count `k`.
pub fn member_seed(base: u64, k: usize) -> u64 {
    base ^ k as u64
}

fn fit_member(features: &FeatureMatrix, k: usize, fit: &FitConfig) -> Result<TapMahalanobisModel> {
    let cfg = FitConfig {
        seed: member_seed(fit.seed, k),
        ..fit.clone()
    };
    fit_tapmb(features, k, &cfg).map_err(|e| Error::Member {
        k,
        source: Box::new(e),
    })
}

fn check_fit_inputs(features: &FeatureMatrix, config: &EnsembleConfig) -> Result<()> {
    config.validate()?;
    let max_k = *config.k_list.iter().max().expect("validated non-empty");
    if max_k > features.nrows() {
        return Err(Error::invalid(format!(
            "largest K={max_k} exceeds the number of rows ({})",
            features.nrows()
        )));
    }
    Ok(())
}

/// Fits every member sequentially.
pub fn fit_tapudd(features: &FeatureMatrix, config: &EnsembleConfig, fit: &FitConfig) -> Result<TapuddModel> {
    check_fit_inputs(features, config)?;
    let members = config
        .k_list
        .iter()
        .map(|&k| fit_member(features, k, fit))
        .collect::<Result<Vec<_>>>()?;
    TapuddModel::from_members(config.clone(), members)
}

/// Fits members on up to `threads` workers. Members are seeded per K, so the
/// result does not depend on the worker count.
pub fn fit_tapudd_parallel(
    features: &FeatureMatrix,
    config: &EnsembleConfig,
    fit: &FitConfig,
    threads: usize,
) -> Result<TapuddModel> {
    if threads <= 1 {
        return fit_tapudd(features, config, fit);
    }
    check_fit_inputs(features, config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let members = pool.install(|| {
        config
            .k_list
            .par_iter()
            .map(|&k| fit_member(features, k, fit))
            .collect::<Result<Vec<_>>>()
    })?;
    TapuddModel::from_members(config.clone(), members)
}

/// Mean of `values` computed as `shift + mean(v − shift)`, so a constant
/// vector comes back exactly.
fn shifted_mean(values: &[f64], shift: f64) -> f64 {
    let s: f64 = values.iter().map(|v| v - shift).sum();
    shift + s / values.len() as f64
}

/// Combines member scores with the configured strategy.
pub fn aggregate(scores: &[f64], config: &EnsembleConfig) -> Result<f64> {
    if scores.len() != config.k_list.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} members",
            scores.len(),
            config.k_list.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("member scores must be finite"));
    }
    Ok(aggregate_unchecked(scores, config.strategy, config.n_e, config.m))
}

fn aggregate_unchecked(scores: &[f64], strategy: Strategy, n_e: usize, m: usize) -> f64 {
    let n = scores.len();
    let mut desc = scores.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let (max, min) = (desc[0], desc[n - 1]);

    let top = shifted_mean(&desc[..n_e], min);
    let bottom = shifted_mean(&desc[n - n_e..], min);
    let value = match strategy {
        Strategy::Top => return top.clamp(min, max),
        Strategy::Bottom => return bottom.clamp(min, max),
        Strategy::Average => shifted_mean(&desc, min),
        Strategy::TrimmedAverage => shifted_mean(&desc[m..n - m], min),
        Strategy::Seesaw => {
            let median = if n % 2 == 1 {
                desc[n / 2]
            } else {
                0.5 * desc[n / 2 - 1] + 0.5 * desc[n / 2]
            };
            let midpoint = 0.5 * min + 0.5 * max;
            if median > midpoint {
                top
            } else {
                bottom
            }
        }
    };
    // rounding can push a mean one ulp past the top/bottom means
    value.clamp(bottom, top).clamp(min, max)
}

/// Member scores in `k_list` order.
pub fn member_scores(model: &TapuddModel, x: &[f64]) -> Result<Vec<f64>> {
    check_point(model.dim, x)?;
    let mut scratch = vec![0.0; model.dim];
    Ok(model
        .members
        .iter()
        .map(|m| -m.min_distance_sq(x, &mut scratch))
        .collect())
}

pub fn score_tapudd(model: &TapuddModel, x: &[f64]) -> Result<f64> {
    let s = member_scores(model, x)?;
    aggregate(&s, &model.config)
}

pub fn score_tapudd_batch(model: &TapuddModel, features: &FeatureMatrix) -> Result<Vec<f64>> {
    model.score_batch(features)
}
