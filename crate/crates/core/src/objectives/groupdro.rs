//! Online GroupDRO: exponentiated-gradient ascent on environment weights.

use super::validate_risks;
use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

pub fn validate_simplex(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Empty("weights"));
    }
    let sum: f64 = weights.iter().sum();
    let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
    if !sum.is_finite() || (sum - 1.0).abs() > SIMPLEX_TOL || min < 0.0 {
        return Err(Error::NotOnSimplex { sum, min });
    }
    Ok(())
}

/// `q'_e ∝ q_e exp(step · R_e)`, normalized in log space.
pub fn groupdro_step(weights: &[f64], risks: &[f64], step: f64) -> Result<Vec<f64>> {
    validate_simplex(weights)?;
    validate_risks(risks)?;
    if weights.len() != risks.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            got: risks.len(),
            context: "risks vs weights",
        });
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    let logs: Vec<f64> = weights
        .iter()
        .zip(risks)
        .map(|(q, r)| if *q > 0.0 { q.ln() + step * r } else { f64::NEG_INFINITY })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|u| u / z).collect())
}
