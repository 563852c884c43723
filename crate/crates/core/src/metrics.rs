//! OOD evaluation metrics. In-distribution samples are the positive class and
//! higher scores mean more in-distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    pub threshold_at_tpr95: f64,
    pub n_id: usize,
    pub n_ood: usize,
    /// Which set AUPR treats as positive; always `"id"`.
    pub aupr_positive: String,
}

fn check_sets(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::invalid(format!(
            "both score sets must be non-empty (id: {}, ood: {})",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(Error::invalid("scores must not be NaN"));
    }
    Ok(())
}

fn sorted_asc(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Mann–Whitney AUROC: the fraction of (ID, OOD) pairs ranked correctly,
/// ties counting one half.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sets(id, ood)?;
    let ood = sorted_asc(ood);
    // twice the number of wins, so ties stay integral
    let mut twice_wins: u128 = 0;
    for &s in id {
        let below = ood.partition_point(|&o| o < s) as u128;
        let at_or_below = ood.partition_point(|&o| o <= s) as u128;
        twice_wins += 2 * below + (at_or_below - below);
    }
    Ok(twice_wins as f64 / (2 * id.len() as u128 * ood.len() as u128) as f64)
}

/// ROC points `(fpr, tpr)` from the strictest threshold down, starting at
/// `(0, 0)`. Tied scores form a single step.
pub fn roc_curve(id: &[f64], ood: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_sets(id, ood)?;
    let (n_id, n_ood) = (id.len() as f64, ood.len() as f64);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = vec![(0.0, 0.0)];
    for group in ranked_groups(id, ood) {
        tp += group.0;
        fp += group.1;
        points.push((fp as f64 / n_ood, tp as f64 / n_id));
    }
    Ok(points)
}

/// Trapezoidal area under [`roc_curve`].
pub fn auroc_trapezoid(id: &[f64], ood: &[f64]) -> Result<f64> {
    let pts = roc_curve(id, ood)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum())
}

/// Distinct scores from high to low, each with the (ID, OOD) counts at that
/// score.
fn ranked_groups(id: &[f64], ood: &[f64]) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for (s, is_id) in all {
        if prev != Some(s) {
            groups.push((0, 0));
            prev = Some(s);
        }
        let g = groups.last_mut().expect("pushed above");
        if is_id {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Average precision with ID as the positive class: `Σ ΔRecall · Precision`
/// over distinct thresholds, without interpolation.
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sets(id, ood)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut weighted = 0.0;
    for (gi, go) in ranked_groups(id, ood) {
        tp += gi;
        fp += go;
        if gi > 0 {
            weighted += gi as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    // precision never exceeds one; keep rounding from pushing the sum past it
    Ok((weighted / id.len() as f64).min(1.0))
}

/// False-positive rate at the threshold admitting at least `tpr` of the ID
/// scores: `t` is the `⌈tpr·n_id⌉`-th largest ID score and the FPR is the
/// fraction of OOD scores `≥ t`.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr: f64) -> Result<(f64, f64)> {
    check_sets(id, ood)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::invalid(format!("tpr must lie in (0, 1], got {tpr}")));
    }
    let n = id.len();
    // guard against tpr·n landing a hair above an integer
    let rank = ((tpr * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut desc = id.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let threshold = desc[rank - 1];
    let false_pos = ood.iter().filter(|&&o| o >= threshold).count();
    Ok((false_pos as f64 / ood.len() as f64, threshold))
}

pub fn evaluate(id: &[f64], ood: &[f64]) -> Result<EvalReport> {
    let (fpr95, threshold) = fpr_at_tpr(id, ood, 0.95)?;
    Ok(EvalReport {
        auroc: auroc(id, ood)?,
        aupr: aupr(id, ood)?,
        fpr95,
        threshold_at_tpr95: threshold,
        n_id: id.len(),
        n_ood: ood.len(),
        aupr_positive: "id".to_string(),
    })
}
