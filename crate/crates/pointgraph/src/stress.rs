//! Kruskal stress between an input pointcloud and its mapped image, the
//! squared-stress gradient with respect to the mapped coordinates, and the
//! combined task-plus-stress objective.
//!
//! Stress over pairwise distances `d` (input space) and `d_hat` (mapped):
//! `S = sqrt( Σ_{i<j} (d_ij - d̂_ij)² / Σ_{i<j} d_ij² )`. Training minimizes
//! `L_task + γ·S²`.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StressError {
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("distance vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate cloud: all input pairwise distances are zero")]
    DegenerateCloud,
    #[error("point counts differ: {0} input vs {1} mapped")]
    PointCountMismatch(usize, usize),
    #[error("stress weight must be nonnegative, got {0}")]
    NegativeGamma(f64),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
}

/// Kruskal stress and its square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StressValue {
    pub s: f64,
    pub s_squared: f64,
}

/// Squared stress together with its gradient w.r.t. the mapped rows.
#[derive(Debug, Clone)]
pub struct StressGrad {
    pub s_squared: f64,
    pub d_mapped: Array2<f64>,
}

/// Euclidean distances over all pairs `i < j` in lexicographic order.
pub fn pairwise_distances(points: &Array2<f64>) -> Result<Vec<f64>, StressError> {
    let n = points.nrows();
    if n < 2 {
        return Err(StressError::TooFewPoints(n));
    }
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let ri = points.row(i);
        for j in i + 1..n {
            let rj = points.row(j);
            let mut d2 = 0.0;
            for (a, b) in ri.iter().zip(rj.iter()) {
                let diff = a - b;
                d2 += diff * diff;
            }
            out.push(d2.sqrt());
        }
    }
    Ok(out)
}

/// Kruskal stress of `d_hat` against reference distances `d`.
pub fn stress(d: &[f64], d_hat: &[f64]) -> Result<StressValue, StressError> {
    if d.len() != d_hat.len() {
        return Err(StressError::LengthMismatch(d.len(), d_hat.len()));
    }
    let denom: f64 = d.iter().map(|v| v * v).sum();
    if denom <= 0.0 {
        return Err(StressError::DegenerateCloud);
    }
    let num: f64 = d
        .iter()
        .zip(d_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let s_squared = num / denom;
    Ok(StressValue {
        s: s_squared.sqrt(),
        s_squared,
    })
}

/// Squared stress of the mapped rows against the input rows, with the exact
/// gradient `∂S²/∂mapped`.
///
/// Pairs with `d̂_ij = 0` contribute the subgradient 0.
pub fn stress_squared_grad(
    points_in: &Array2<f64>,
    mapped: &Array2<f64>,
) -> Result<StressGrad, StressError> {
    let n = points_in.nrows();
    if n < 2 {
        return Err(StressError::TooFewPoints(n));
    }
    if mapped.nrows() != n {
        return Err(StressError::PointCountMismatch(n, mapped.nrows()));
    }
    if points_in.iter().any(|v| !v.is_finite()) {
        return Err(StressError::NonFinite("input points"));
    }
    if mapped.iter().any(|v| !v.is_finite()) {
        return Err(StressError::NonFinite("mapped points"));
    }

    let d = pairwise_distances(points_in)?;
    let denom: f64 = d.iter().map(|v| v * v).sum();
    if denom <= 0.0 {
        return Err(StressError::DegenerateCloud);
    }

    let dim = mapped.ncols();
    let mut grad = Array2::zeros((n, dim));
    let mut num = 0.0;
    let mut pair = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let mut d2 = 0.0;
            for c in 0..dim {
                let diff = mapped[[i, c]] - mapped[[j, c]];
                d2 += diff * diff;
            }
            let d_hat = d2.sqrt();
            let resid = d_hat - d[pair];
            num += resid * resid;
            if d_hat > 0.0 {
                // ∂S²/∂m_i += (2/Σd²)·(d̂ - d)·(m_i - m_j)/d̂
                let coef = 2.0 * resid / (denom * d_hat);
                for c in 0..dim {
                    let diff = mapped[[i, c]] - mapped[[j, c]];
                    grad[[i, c]] += coef * diff;
                    grad[[j, c]] -= coef * diff;
                }
            }
            pair += 1;
        }
    }
    Ok(StressGrad {
        s_squared: num / denom,
        d_mapped: grad,
    })
}

/// Combined objective `L = task_loss + γ·s²`.
///
/// For a batch, `s_squared` is the mean of per-cloud squared stresses so the
/// meaning of `γ` does not depend on batch size.
pub fn combined_loss(task_loss: f64, s_squared: f64, gamma: f64) -> Result<f64, StressError> {
    if gamma < 0.0 {
        return Err(StressError::NegativeGamma(gamma));
    }
    if !task_loss.is_finite() {
        return Err(StressError::NonFinite("task loss"));
    }
    if !s_squared.is_finite() {
        return Err(StressError::NonFinite("squared stress"));
    }
    Ok(task_loss + gamma * s_squared)
}
