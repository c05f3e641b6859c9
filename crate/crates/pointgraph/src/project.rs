//! 2-D chart of the mapped feature space through the plane spanned by three
//! anchor images, for inspecting what the learned mapping does to a cloud.
//!
//! Anchors are the coordinate extremes of the ORIGINAL cloud: A/B are the
//! argmax/argmin of x, C/D of y, E/F of z (first occurrence on ties). The
//! chart plane is spanned by the images of A, B and F, with A at the origin.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("cloud is empty")]
    Empty,
    #[error("original points must have 3 columns, found {0}")]
    NotXyz(usize),
    #[error("mapped features must have at least 3 columns for a plane chart, found {0}")]
    TooFewDims(usize),
    #[error("point counts disagree: {original} original vs {mapped} mapped")]
    CountMismatch { original: usize, mapped: usize },
    #[error("degenerate basis: mapped anchors {0} are colinear")]
    DegenerateBasis(String),
}

/// Anchor letters in output order; index 2i is the argmax of axis i, 2i+1 the
/// argmin.
pub const ANCHOR_LETTERS: [char; 6] = ['A', 'B', 'C', 'D', 'E', 'F'];

/// One charted point: its 2-D coordinates and any anchor letters it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoint {
    /// Anchor letters attached to this point, empty for ordinary points.
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// One row per input point, in input order.
    pub points: Vec<ProjectedPoint>,
    /// Node index of each anchor A..F.
    pub anchors: [usize; 6],
}

/// First-occurrence argmax/argmin per axis of the original cloud.
pub fn anchor_indices(points: &Array2<f64>) -> Result<[usize; 6], ProjectError> {
    if points.nrows() == 0 {
        return Err(ProjectError::Empty);
    }
    if points.ncols() != 3 {
        return Err(ProjectError::NotXyz(points.ncols()));
    }
    let mut anchors = [0usize; 6];
    for axis in 0..3 {
        let (mut hi, mut lo) = (0usize, 0usize);
        for i in 1..points.nrows() {
            if points[[i, axis]] > points[[hi, axis]] {
                hi = i;
            }
            if points[[i, axis]] < points[[lo, axis]] {
                lo = i;
            }
        }
        anchors[2 * axis] = hi;
        anchors[2 * axis + 1] = lo;
    }
    Ok(anchors)
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Chart every mapped point onto the plane through the images of anchors A,
/// B and F. A maps to the origin, the A->B direction is the first axis.
pub fn project(points: &Array2<f64>, mapped: &Array2<f64>) -> Result<Projection, ProjectError> {
    if mapped.nrows() != points.nrows() {
        return Err(ProjectError::CountMismatch {
            original: points.nrows(),
            mapped: mapped.nrows(),
        });
    }
    if mapped.ncols() < 3 {
        return Err(ProjectError::TooFewDims(mapped.ncols()));
    }
    let anchors = anchor_indices(points)?;
    let a = mapped.row(anchors[0]).to_owned();
    let b = mapped.row(anchors[1]).to_owned();
    let f = mapped.row(anchors[5]).to_owned();

    let ab = &b - &a;
    let ab_norm = norm(&ab);
    if ab_norm < 1e-12 {
        return Err(ProjectError::DegenerateBasis(
            "A and B coincide in the mapped space".into(),
        ));
    }
    let u = &ab / ab_norm;
    let af = &f - &a;
    let residual = &af - &(&u * af.dot(&u));
    let residual_norm = norm(&residual);
    if residual_norm < 1e-12 {
        return Err(ProjectError::DegenerateBasis(
            "A, B and F lie on one mapped line".into(),
        ));
    }
    let w = &residual / residual_norm;

    let mut labels = vec![String::new(); points.nrows()];
    for (slot, &idx) in anchors.iter().enumerate() {
        labels[idx].push(ANCHOR_LETTERS[slot]);
    }
    let charted = (0..points.nrows())
        .map(|i| {
            let pa = &mapped.row(i).to_owned() - &a;
            ProjectedPoint { label: labels[i].clone(), x: pa.dot(&u), y: pa.dot(&w) }
        })
        .collect();
    Ok(Projection { points: charted, anchors })
}

impl Projection {
    /// CSV rows `label,x,y`, one per input point in input order; anchor
    /// points carry their letters in the label column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,x,y\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.label, p.x, p.y));
        }
        out
    }
}
