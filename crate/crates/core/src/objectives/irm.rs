//! IRMv1 with a scalar dummy classifier: `Σ_e [R_e + λ g_e²]`, where
//! `g_e = (1/n_e) Σᵢ (σ(φᵢ) - y01ᵢ) φᵢ` is the derivative of `R_e` with respect
//! to a multiplicative scale on the logits, taken at scale 1.

use ndarray::{Array1, ArrayView1};

use super::{gradient_from_coeffs, pooled_logits, residuals_and_risks, EnvLayout, Evaluation};
use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{sigmoid, BlockedLinearModel};

fn residual01(phi: f64, y01: f64) -> f64 {
    if y01 >= 0.5 {
        -sigmoid(-phi)
    } else {
        sigmoid(phi)
    }
}

/// Per-sample factor `α(φ) = 1 + 2λφ[σ(φ) + φσ(φ)(1 - σ(φ)) - y]` by which
/// the IRMv1 gradient of a single-sample environment rescales the ERM
/// gradient. Negative values mean the sample is pushed away from its label.
///
/// `σ(φ) - y` is evaluated as `-σ(-φ)` for `y = 1`, which makes the identity
/// `α(φ, 1) = α(-φ, 0)` hold bit for bit.
pub fn irm_coefficient(phi: f64, y01: f64, lambda: f64) -> f64 {
    let r = residual01(phi, y01);
    let dr = sigmoid(phi) * sigmoid(-phi);
    1.0 + 2.0 * lambda * phi * (r + phi * dr)
}

/// Sign changes of `α(·, y01, λ)` on `[lo, hi]`, located by a scan with
/// `scan_steps` cells followed by bisection to `tol`.
pub fn irm_sign_changes(y01: f64, lambda: f64, lo: f64, hi: f64, scan_steps: usize, tol: f64) -> Vec<f64> {
    let f = |phi: f64| irm_coefficient(phi, y01, lambda);
    let h = (hi - lo) / scan_steps as f64;
    let mut roots = Vec::new();
    let mut a = lo;
    let mut fa = f(a);
    for k in 1..=scan_steps {
        let b = lo + h * k as f64;
        let fb = f(b);
        if (fa < 0.0) != (fb < 0.0) {
            let (mut l, mut r, fl) = (a, b, fa);
            while r - l > tol {
                let m = 0.5 * (l + r);
                if (f(m) < 0.0) == (fl < 0.0) {
                    l = m;
                } else {
                    r = m;
                }
            }
            roots.push(0.5 * (l + r));
        }
        a = b;
        fa = fb;
    }
    roots
}

/// Smallest positive logit at which `α` turns negative, if any within `(0, hi]`.
pub fn irm_negative_onset(y01: f64, lambda: f64, hi: f64) -> Option<f64> {
    irm_sign_changes(y01, lambda, 0.0, hi, 100_000, 1e-12)
        .into_iter()
        .find(|&root| irm_coefficient(root + 1e-9, y01, lambda) < 0.0)
}

pub fn irm_evaluate(
    logits: ArrayView1<'_, f64>,
    labels: ArrayView1<'_, f64>,
    layout: &EnvLayout,
    lambda: f64,
) -> Result<Evaluation> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let (residuals, env_risks) = residuals_and_risks(logits, labels, layout)?;
    let mut coeffs = Array1::zeros(residuals.len());
    let mut value = 0.0;
    for (range, risk) in layout.ranges().iter().zip(&env_risks) {
        let n_e = range.len() as f64;
        let g: f64 = range.clone().map(|i| residuals[i] * logits[i]).sum::<f64>() / n_e;
        value += risk + lambda * g * g;
        for i in range.clone() {
            let (phi, r) = (logits[i], residuals[i]);
            let dr = sigmoid(phi) * sigmoid(-phi);
            coeffs[i] = (r + 2.0 * lambda * g * (dr * phi + r)) / n_e;
        }
    }
    Ok(Evaluation {
        value,
        coeffs,
        env_risks,
    })
}

pub fn irmv1_objective_and_gradient(
    model: &BlockedLinearModel,
    envs: &[LabeledDataset],
    lambda: f64,
) -> Result<(f64, Array1<f64>)> {
    let (logits, labels, layout) = pooled_logits(model, envs)?;
    let eval = irm_evaluate(logits.view(), labels.view(), &layout, lambda)?;
    Ok((eval.value, gradient_from_coeffs(envs, &eval.coeffs, &layout)))
}
