use crate::error::{Error, Result};
use crate::stats::FeatureMatrix;

/// Anything that maps a feature vector to an in-distribution score
/// (higher = more in-distribution).
pub trait Scorer {
    fn dim(&self) -> usize;

    fn score(&self, x: &[f64]) -> Result<f64>;

    fn score_batch(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        check_dim(self.dim(), features.ncols())?;
        features.iter_rows().map(|r| self.score(r)).collect()
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::invalid(format!(
            "input has dimension {got}, model expects {expected}"
        )));
    }
    Ok(())
}

pub(crate) fn check_point(expected: usize, x: &[f64]) -> Result<()> {
    check_dim(expected, x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("input contains non-finite values"));
    }
    Ok(())
}
