//! Score landscapes of two-dimensional detectors for external plotting.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{write_matrix, Encoding, FileKind};
use crate::scorer::Scorer;
use crate::stats::FeatureMatrix;

/// Scores at the centers of a `res_x × res_y` grid of cells over the given
/// ranges. Rows are `(x, y, score)`, `y` outer and `x` inner.
pub fn landscape_grid(
    scorer: &dyn Scorer,
    x_range: (f64, f64),
    y_range: (f64, f64),
    res_x: usize,
    res_y: usize,
) -> Result<FeatureMatrix> {
    if scorer.dim() != 2 {
        return Err(Error::invalid(format!(
            "landscapes need a 2-D model, this one has dimension {}",
            scorer.dim()
        )));
    }
    if res_x < 2 || res_y < 2 {
        return Err(Error::invalid("resolution must be at least 2 per axis"));
    }
    for (name, (lo, hi)) in [("x", x_range), ("y", y_range)] {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("{name} range must satisfy min < max, got [{lo}, {hi}]")));
        }
    }
    let centers = |(lo, hi): (f64, f64), n: usize| -> Vec<f64> {
        let step = (hi - lo) / n as f64;
        (0..n).map(|i| lo + (i as f64 + 0.5) * step).collect()
    };
    let (xs, ys) = (centers(x_range, res_x), centers(y_range, res_y));
    let mut data = Vec::with_capacity(res_x * res_y * 3);
    for &y in &ys {
        for &x in &xs {
            data.extend_from_slice(&[x, y, scorer.score(&[x, y])?]);
        }
    }
    FeatureMatrix::new(res_x * res_y, 3, data)
}

/// Encoding follows the file extension.
pub fn write_landscape(grid: &FeatureMatrix, path: &Path) -> Result<()> {
    if grid.ncols() != 3 {
        return Err(Error::invalid("a landscape grid has three columns"));
    }
    write_matrix(grid, FileKind::Landscape, path, Encoding::for_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::FitConfig;
    use crate::io::read_matrix;
    use crate::stats::{ClusterStats, SquareMatrix};
    use crate::tapmb::{fit_tapmb, score_tapmb, TapMahalanobisModel};

    struct Constant(usize);

    impl Scorer for Constant {
        fn dim(&self) -> usize {
            self.0
        }

        fn score(&self, _: &[f64]) -> Result<f64> {
            Ok(-3.5)
        }
    }

    fn blob() -> TapMahalanobisModel {
        let cov = SquareMatrix::from_row_major(2, vec![1.0, 0.2, 0.2, 0.5]).unwrap();
        TapMahalanobisModel::from_clusters(vec![ClusterStats::from_moments(vec![0.3, -0.2], &cov, 10, 1e-9).unwrap()])
            .unwrap()
    }

    #[test]
    fn constant_scorer_is_flat() {
        let g = landscape_grid(&Constant(2), (0.0, 1.0), (0.0, 2.0), 4, 3).unwrap();
        assert_eq!(g.nrows(), 12);
        assert!(g.iter_rows().all(|r| r[2] == -3.5));
    }

    #[test]
    fn cell_centers_and_order() {
        let g = landscape_grid(&Constant(2), (0.0, 4.0), (10.0, 12.0), 4, 2).unwrap();
        assert_eq!(g.row(0)[..2], [0.5, 10.5]);
        assert_eq!(g.row(1)[..2], [1.5, 10.5]);
        assert_eq!(g.row(4)[..2], [0.5, 11.5]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(landscape_grid(&Constant(3), (0.0, 1.0), (0.0, 1.0), 4, 4).is_err());
        assert!(landscape_grid(&Constant(2), (0.0, 1.0), (0.0, 1.0), 1, 4).is_err());
        assert!(landscape_grid(&Constant(2), (1.0, 0.0), (0.0, 1.0), 4, 4).is_err());
    }

    #[test]
    fn single_blob_peaks_next_to_mean() {
        let m = blob();
        let (res, lo, hi) = (21, -3.0, 3.0);
        let g = landscape_grid(&m, (lo, hi), (lo, hi), res, res).unwrap();
        let best = g
            .iter_rows()
            .max_by(|a, b| a[2].total_cmp(&b[2]))
            .unwrap();
        let half_cell = (hi - lo) / res as f64 / 2.0;
        assert!((best[0] - 0.3).abs() <= half_cell + 1e-12);
        assert!((best[1] + 0.2).abs() <= half_cell + 1e-12);
        let top = g.iter_rows().filter(|r| r[2] == best[2]).count();
        assert_eq!(top, 1);
    }

    #[test]
    fn grid_values_equal_direct_scores() {
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 7) as f64, (i % 5) as f64 * 0.7]).collect();
        let m = fit_tapmb(&FeatureMatrix::from_rows(&rows).unwrap(), 2, &FitConfig::with_seed(1)).unwrap();
        let g = landscape_grid(&m, (-2.0, 8.0), (-1.0, 4.0), 9, 6).unwrap();
        for r in g.iter_rows() {
            assert_eq!(r[2], score_tapmb(&m, &r[..2]).unwrap());
        }
    }

    #[test]
    fn written_with_landscape_kind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.txt");
        let g = landscape_grid(&blob(), (-1.0, 1.0), (-1.0, 1.0), 3, 3).unwrap();
        write_landscape(&g, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# kind=landscape dim=3 n=9\n"));
        assert_eq!(read_matrix(&path).unwrap(), (FileKind::Landscape, g));
    }
}
