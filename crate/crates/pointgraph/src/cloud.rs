//! Point clouds: storage, centering/scale normalization and CSV io.

use ndarray::{Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("point cloud is empty")]
    Empty,
    #[error("all points are identical, cannot normalize scale")]
    DegenerateScale,
    #[error("extra features have {rows} rows but cloud has {points} points")]
    FeatureRowMismatch { rows: usize, points: usize },
    #[error("line {line}: expected 3 comma-separated coordinates, found {found}")]
    BadCsvRow { line: usize, found: usize },
    #[error("line {line}: bad coordinate {token:?}: {source}")]
    BadCsvNumber {
        line: usize,
        token: String,
        source: std::num::ParseFloatError,
    },
}

/// A set of 3D points with an optional label and optional per-point extra
/// input features (columns appended to xyz when building model inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    /// N x 3, row per point.
    pub points: Array2<f64>,
    /// N x d_extra when present.
    pub extra_features: Option<Array2<f64>>,
    pub label: Option<usize>,
}

impl PointCloud {
    /// Panics if `extra_features` row count disagrees with `points`; use
    /// [`PointCloud::try_new`] for fallible construction.
    pub fn new(points: Array2<f64>, extra_features: Option<Array2<f64>>, label: Option<usize>) -> Self {
        Self::try_new(points, extra_features, label).expect("feature rows must match point count")
    }

    pub fn try_new(
        points: Array2<f64>,
        extra_features: Option<Array2<f64>>,
        label: Option<usize>,
    ) -> Result<Self, CloudError> {
        if let Some(f) = &extra_features {
            if f.nrows() != points.nrows() {
                return Err(CloudError::FeatureRowMismatch {
                    rows: f.nrows(),
                    points: points.nrows(),
                });
            }
        }
        Ok(PointCloud { points, extra_features, label })
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    /// Width of the model input row: 3 for bare xyz plus any extra columns.
    pub fn input_dim(&self) -> usize {
        3 + self.extra_features.as_ref().map_or(0, |f| f.ncols())
    }

    /// N x input_dim matrix of per-point model inputs, xyz first.
    pub fn input_matrix(&self) -> Array2<f64> {
        match &self.extra_features {
            None => self.points.clone(),
            Some(extra) => {
                let mut out = Array2::zeros((self.n_points(), self.input_dim()));
                out.slice_mut(ndarray::s![.., 0..3]).assign(&self.points);
                out.slice_mut(ndarray::s![.., 3..]).assign(extra);
                out
            }
        }
    }

    /// Center on the centroid and scale so the farthest point sits at
    /// distance 1 from the origin. Extra features are untouched.
    pub fn normalize(&mut self) -> Result<(), CloudError> {
        if self.n_points() == 0 {
            return Err(CloudError::Empty);
        }
        let centroid = self.points.mean_axis(Axis(0)).expect("nonempty");
        self.points -= &centroid;
        let max_norm = self
            .points
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0f64, f64::max);
        if max_norm.is_nan() || max_norm <= 0.0 {
            return Err(CloudError::DegenerateScale);
        }
        self.points /= max_norm;
        Ok(())
    }

    /// CSV with one `x,y,z` row per point, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.points.rows() {
            out.push_str(&format!("{},{},{}\n", row[0], row[1], row[2]));
        }
        out
    }

    /// Parse `x,y,z` rows; a leading literal `x,y,z` header line is allowed.
    pub fn from_csv(text: &str) -> Result<PointCloud, CloudError> {
        let mut rows = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if idx == 0 && line.eq_ignore_ascii_case("x,y,z") {
                continue;
            }
            let toks: Vec<&str> = line.split(',').map(str::trim).collect();
            if toks.len() != 3 {
                return Err(CloudError::BadCsvRow { line: idx + 1, found: toks.len() });
            }
            let mut row = [0.0; 3];
            for (slot, tok) in row.iter_mut().zip(&toks) {
                *slot = tok.parse().map_err(|source| CloudError::BadCsvNumber {
                    line: idx + 1,
                    token: tok.to_string(),
                    source,
                })?;
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(CloudError::Empty);
        }
        let mut points = Array2::zeros((rows.len(), 3));
        for (i, row) in rows.iter().enumerate() {
            for d in 0..3 {
                points[[i, d]] = row[d];
            }
        }
        Ok(PointCloud::new(points, None, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn normalize_centers_and_scales() {
        let mut cloud = PointCloud::new(
            array![[1.0, 1.0, 1.0], [3.0, 1.0, 1.0], [2.0, 4.0, 1.0]],
            None,
            None,
        );
        cloud.normalize().unwrap();
        let centroid = cloud.points.mean_axis(Axis(0)).unwrap();
        for d in 0..3 {
            assert_abs_diff_eq!(centroid[d], 0.0, epsilon = 1e-12);
        }
        let max_norm = cloud
            .points
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0f64, f64::max);
        assert_abs_diff_eq!(max_norm, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut cloud = PointCloud::new(
            array![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 2.0, 7.0]],
            None,
            None,
        );
        cloud.normalize().unwrap();
        let once = cloud.points.clone();
        cloud.normalize().unwrap();
        for (a, b) in once.iter().zip(cloud.points.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_identical_points() {
        let mut cloud = PointCloud::new(array![[2.0, 2.0, 2.0], [2.0, 2.0, 2.0]], None, None);
        assert!(matches!(cloud.normalize(), Err(CloudError::DegenerateScale)));
    }

    #[test]
    fn input_matrix_appends_extra_columns() {
        let cloud = PointCloud::new(
            array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
            Some(array![[0.5], [0.25]]),
            Some(1),
        );
        assert_eq!(cloud.input_dim(), 4);
        let m = cloud.input_matrix();
        assert_eq!(m, array![[1.0, 2.0, 3.0, 0.5], [4.0, 5.0, 6.0, 0.25]]);
    }

    #[test]
    fn rejects_mismatched_extra_features() {
        let r = PointCloud::try_new(
            array![[0.0, 0.0, 0.0]],
            Some(array![[1.0], [2.0]]),
            None,
        );
        assert!(matches!(r, Err(CloudError::FeatureRowMismatch { rows: 2, points: 1 })));
    }

    #[test]
    fn csv_round_trip() {
        let cloud = PointCloud::new(
            array![[0.125, -3.5, 0.00725], [1.0 / 3.0, 0.0, -42.0]],
            None,
            None,
        );
        let back = PointCloud::from_csv(&cloud.to_csv()).unwrap();
        assert_eq!(cloud.points, back.points);
    }

    #[test]
    fn csv_accepts_header_and_blank_lines() {
        let cloud = PointCloud::from_csv("x,y,z\n1,2,3\n\n4,5,6\n").unwrap();
        assert_eq!(cloud.points, array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn csv_reports_bad_rows() {
        assert!(matches!(
            PointCloud::from_csv("1,2\n"),
            Err(CloudError::BadCsvRow { line: 1, found: 2 })
        ));
        assert!(matches!(
            PointCloud::from_csv("1,2,zebra\n"),
            Err(CloudError::BadCsvNumber { line: 1, .. })
        ));
    }
}
