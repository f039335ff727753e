//! Mixup over the pooled training set: sample `i` is mixed with a random
//! partner `j` as `x̃ = t xᵢ + (1 - t) xⱼ` and scored with
//! `t ℓ(f(x̃), yᵢ) + (1 - t) ℓ(f(x̃), yⱼ)`, `t ~ Beta(α, α)`.
//!
//! For a linear model `f(x̃) = t φᵢ + (1 - t) φⱼ`, so the loss and its
//! gradient are computed from the pooled logits without materializing `x̃`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use super::{residuals_and_risks, EnvLayout, Evaluation};
use crate::error::{Error, Result};
use crate::model::{logit_residual, sample_loss};

#[derive(Debug, Clone, PartialEq)]
pub struct MixupBatch {
    /// Partner index `j` of each sample `i`.
    pub partner: Vec<usize>,
    /// Mixing weight `t` placed on sample `i`.
    pub t: Vec<f64>,
}

pub(crate) fn draw_pairs<R: Rng>(n: usize, alpha: f64, rng: &mut R) -> Result<MixupBatch> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "mixup needs at least 2 samples, got {n}"
        )));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(format!("mixup alpha {alpha}: {e}")))?;
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    let t = (0..n).map(|_| beta.sample(rng)).collect();
    Ok(MixupBatch { partner, t })
}

/// Random pairing of `n` samples with per-pair weights, deterministic in `seed`.
pub fn mixup_pairs(n: usize, alpha: f64, seed: u64) -> Result<MixupBatch> {
    draw_pairs(n, alpha, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The mixed inputs `t xᵢ + (1 - t) x_partner(i)`, one row per sample.
pub fn mixed_features(batch: &MixupBatch, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if batch.partner.len() != features.nrows() {
        return Err(Error::DimensionMismatch {
            expected: features.nrows(),
            got: batch.partner.len(),
            context: "mixup batch vs features",
        });
    }
    let mut out = Array2::zeros(features.raw_dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let (j, t) = (batch.partner[i], batch.t[i]);
        row.assign(&(&features.row(i) * t + &features.row(j) * (1.0 - t)));
    }
    Ok(out)
}

/// Interpolated loss of one mixed sample given its mixed logit.
pub fn mixup_sample_loss(mixed_logit: f64, y_i: f64, y_j: f64, t: f64) -> f64 {
    t * sample_loss(mixed_logit, y_i) + (1.0 - t) * sample_loss(mixed_logit, y_j)
}

pub fn mixup_evaluate(
    logits: ArrayView1<'_, f64>,
    labels: ArrayView1<'_, f64>,
    layout: &EnvLayout,
    batch: &MixupBatch,
) -> Result<Evaluation> {
    let (_, env_risks) = residuals_and_risks(logits, labels, layout)?;
    let n = logits.len();
    if batch.partner.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: batch.partner.len(),
            context: "mixup batch vs logits",
        });
    }
    let inv_n = 1.0 / n as f64;
    let mut coeffs = Array1::zeros(n);
    let mut total = 0.0;
    for i in 0..n {
        let (j, t) = (batch.partner[i], batch.t[i]);
        let phi = t * logits[i] + (1.0 - t) * logits[j];
        total += mixup_sample_loss(phi, labels[i], labels[j], t);
        let rho = t * logit_residual(phi, labels[i]) + (1.0 - t) * logit_residual(phi, labels[j]);
        coeffs[i] += t * rho * inv_n;
        coeffs[j] += (1.0 - t) * rho * inv_n;
    }
    Ok(Evaluation {
        value: total * inv_n,
        coeffs,
        env_risks,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::model::{logistic_loss, predict_logits};
    use crate::objectives::{gradient_from_coeffs, objective_and_gradient, pooled_logits, ObjectiveConfig};

    #[test]
    fn endpoint_t_one_is_plain_loss() {
        let e = envs(1, &[10], 0.0);
        let model = random_model(2);
        let (logits, labels, layout) = pooled_logits(&model, &e).unwrap();
        let batch = MixupBatch {
            partner: (0..10).rev().collect(),
            t: vec![1.0; 10],
        };
        let mixed = mixed_features(&batch, e[0].features.view()).unwrap();
        assert_eq!(mixed, e[0].features);
        let eval = mixup_evaluate(logits.view(), labels.view(), &layout, &batch).unwrap();
        let plain = logistic_loss(logits.view(), labels.view()).unwrap();
        assert!((eval.value - plain).abs() < 1e-14);
    }

    #[test]
    fn equal_labels_collapse() {
        for &t in &[0.0, 0.13, 0.5, 0.9] {
            for &phi in &[-3.0, 0.2, 4.0] {
                assert!((mixup_sample_loss(phi, 1.0, 1.0, t) - sample_loss(phi, 1.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mean_mixing_weight_is_half() {
        let b = mixup_pairs(100_000, 0.2, 4).unwrap();
        let mean = b.t.iter().sum::<f64>() / b.t.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn deterministic_and_rejects_tiny_batches() {
        assert_eq!(mixup_pairs(50, 0.4, 9).unwrap(), mixup_pairs(50, 0.4, 9).unwrap());
        assert!(mixup_pairs(1, 0.4, 0).is_err());
        assert!(mixup_pairs(5, 0.0, 0).is_err());
    }

    #[test]
    fn logit_space_matches_explicit_mixing() {
        let e = envs(3, &[12, 9], 0.3);
        let model = random_model(4);
        let (logits, labels, layout) = pooled_logits(&model, &e).unwrap();
        let batch = mixup_pairs(layout.total(), 0.4, 11).unwrap();
        let eval = mixup_evaluate(logits.view(), labels.view(), &layout, &batch).unwrap();

        let x = ndarray::concatenate(ndarray::Axis(0), &[e[0].features.view(), e[1].features.view()]).unwrap();
        let mixed = mixed_features(&batch, x.view()).unwrap();
        let phi = predict_logits(&model, mixed.view()).unwrap();
        let explicit: f64 = (0..phi.len())
            .map(|i| mixup_sample_loss(phi[i], labels[i], labels[batch.partner[i]], batch.t[i]))
            .sum::<f64>()
            / phi.len() as f64;
        assert!((eval.value - explicit).abs() < 1e-12);

        let mut want = Array1::zeros(model.spec().dim());
        for i in 0..phi.len() {
            let j = batch.partner[i];
            let rho =
                batch.t[i] * logit_residual(phi[i], labels[i]) + (1.0 - batch.t[i]) * logit_residual(phi[i], labels[j]);
            want += &(&mixed.row(i) * (rho / phi.len() as f64));
        }
        let grad = gradient_from_coeffs(&e, &eval.coeffs, &layout);
        assert!((&grad - &want).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = ObjectiveConfig::mixup(0.3);
        for seed in 0..10 {
            let e = envs(seed, &[14, 10], 0.2);
            check_gradient(&random_model(seed), seed, |m| {
                objective_and_gradient(m, &e, &cfg, seed).unwrap()
            });
        }
    }
}
