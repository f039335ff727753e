//! Hard-margin separator through the origin, for small problems:
//! `min ½‖w‖²  s.t.  yᵢ⟨w, xᵢ⟩ ≥ 1`.
//!
//! Two independent solvers: coordinate ascent on the dual
//! `max Σαᵢ - ½‖Σαᵢyᵢxᵢ‖², α ≥ 0`, and exhaustive enumeration of support
//! sets for tiny `n`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use ndarray_linalg::Solve;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_POINTS: usize = 64;
const MAX_ENUMERATION_POINTS: usize = 16;
const FEASIBILITY_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardMarginSolution {
    /// The max-margin weight vector (unit functional margin on support points).
    pub weights: Array1<f64>,
    /// `weights / ‖weights‖`.
    pub direction: Array1<f64>,
    /// Geometric margin `1 / ‖weights‖`.
    pub margin: f64,
    pub support: Vec<usize>,
}

fn signed_rows(features: ArrayView2<'_, f64>, labels: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::Empty("points"));
    }
    if n > MAX_POINTS {
        return Err(Error::InvalidArgument(format!(
            "at most {MAX_POINTS} points supported, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
            context: "labels vs points",
        });
    }
    if labels.iter().any(|y| y.abs() != 1.0) || features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("labels must be +-1 and features finite".into()));
    }
    let mut z = features.to_owned();
    for (mut row, y) in z.rows_mut().into_iter().zip(labels) {
        row *= *y;
    }
    Ok(z)
}

fn finish(weights: Array1<f64>, z: &Array2<f64>) -> Result<HardMarginSolution> {
    let margins = z.dot(&weights);
    if margins.iter().any(|m| *m < 1.0 - 1e-6) {
        return Err(Error::NonSeparable);
    }
    let norm = weights.dot(&weights).sqrt();
    let support = margins
        .iter()
        .enumerate()
        .filter_map(|(i, m)| (*m < 1.0 + 1e-6).then_some(i))
        .collect();
    Ok(HardMarginSolution {
        direction: &weights / norm,
        margin: 1.0 / norm,
        weights,
        support,
    })
}

/// Max-margin direction by dual coordinate ascent (each step maximizes the
/// dual exactly in one `αᵢ` and clips at zero). Non-separable inputs make
/// the dual unbounded and are rejected.
pub fn max_margin_direction(features: ArrayView2<'_, f64>, labels: ArrayView1<'_, f64>) -> Result<HardMarginSolution> {
    let z = signed_rows(features, labels)?;
    let n = z.nrows();
    let gram = z.dot(&z.t());
    if (0..n).any(|i| gram[[i, i]] == 0.0) {
        return Err(Error::NonSeparable);
    }
    let mut alpha = Array1::<f64>::zeros(n);
    // margins[i] = yᵢ⟨w, xᵢ⟩ with w = Σ αⱼ zⱼ
    let mut margins = Array1::<f64>::zeros(n);
    for _sweep in 0..1_000_000 {
        let mut violation = 0.0f64;
        for i in 0..n {
            let kkt = if alpha[i] > 0.0 {
                (1.0 - margins[i]).abs()
            } else {
                (1.0 - margins[i]).max(0.0)
            };
            violation = violation.max(kkt);
            let updated = (alpha[i] + (1.0 - margins[i]) / gram[[i, i]]).max(0.0);
            let delta = updated - alpha[i];
            if delta != 0.0 {
                alpha[i] = updated;
                margins.scaled_add(delta, &gram.row(i));
            }
        }
        if alpha.sum() > 1e12 {
            return Err(Error::NonSeparable);
        }
        if violation < 1e-12 {
            break;
        }
    }
    finish(z.t().dot(&alpha), &z)
}

/// Max-margin direction by enumerating support sets `S` (up to 16 points):
/// for each `S`, solve `Z_S Z_Sᵀ a = 1`, keep candidates with `a ≥ 0` that
/// satisfy every margin constraint, and return the one of least norm.
pub fn max_margin_by_enumeration(
    features: ArrayView2<'_, f64>,
    labels: ArrayView1<'_, f64>,
) -> Result<HardMarginSolution> {
    let z = signed_rows(features, labels)?;
    let n = z.nrows();
    if n > MAX_ENUMERATION_POINTS {
        return Err(Error::InvalidArgument(format!(
            "enumeration supports at most {MAX_ENUMERATION_POINTS} points, got {n}"
        )));
    }
    let max_size = n.min(z.ncols());
    let mut best: Option<(f64, Array1<f64>)> = None;
    for mask in 1u32..(1u32 << n) {
        if mask.count_ones() as usize > max_size {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let zs = z.select(ndarray::Axis(0), &idx);
        let gram = zs.dot(&zs.t());
        let Ok(a) = gram.solve_into(Array1::ones(idx.len())) else {
            continue;
        };
        if a.iter().any(|v| !v.is_finite() || *v < -FEASIBILITY_TOL) {
            continue;
        }
        let w = zs.t().dot(&a);
        if z.dot(&w).iter().any(|m| *m < 1.0 - FEASIBILITY_TOL) {
            continue;
        }
        let norm2 = w.dot(&w);
        if best.as_ref().is_none_or(|(b, _)| norm2 < *b) {
            best = Some((norm2, w));
        }
    }
    let (_, w) = best.ok_or(Error::NonSeparable)?;
    finish(w, &z)
}
