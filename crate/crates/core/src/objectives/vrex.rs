//! V-REx: mean environment risk plus `λ` times their population variance.

use ndarray::{Array1, ArrayView1};

use super::{
    gradient_from_coeffs, pooled_logits, residuals_and_risks, validate_risks, weighted_risk_evaluate, EnvLayout,
    Evaluation,
};
use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::BlockedLinearModel;

fn centered(risks: &[f64]) -> Vec<f64> {
    let m = risks.len() as f64;
    let mean = risks.iter().sum::<f64>() / m;
    let dev: Vec<f64> = risks.iter().map(|r| r - mean).collect();
    // second pass removes the rounding residue of the first mean
    let drift = dev.iter().sum::<f64>() / m;
    dev.into_iter().map(|d| d - drift).collect()
}

/// Weights `cᵉ = (1/m)[2λ(R_e - R̄) + 1]` with which each environment's risk
/// gradient enters the V-REx gradient. They sum to one; environments whose
/// risk is below `R̄ - 1/(2λ)` get a negative weight (gradient ascent).
pub fn vrex_env_coefficients(risks: &[f64], lambda: f64) -> Result<Vec<f64>> {
    validate_risks(risks)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let m = risks.len() as f64;
    Ok(centered(risks)
        .into_iter()
        .map(|d| (2.0 * lambda * d + 1.0) / m)
        .collect())
}

pub(crate) fn vrex_value(risks: &[f64], lambda: f64) -> f64 {
    let m = risks.len() as f64;
    let mean = risks.iter().sum::<f64>() / m;
    let var = centered(risks).iter().map(|d| d * d).sum::<f64>() / m;
    mean + lambda * var
}

pub fn vrex_evaluate(
    logits: ArrayView1<'_, f64>,
    labels: ArrayView1<'_, f64>,
    layout: &EnvLayout,
    lambda: f64,
) -> Result<Evaluation> {
    let (residuals, env_risks) = residuals_and_risks(logits, labels, layout)?;
    let weights = vrex_env_coefficients(&env_risks, lambda)?;
    let value = vrex_value(&env_risks, lambda);
    let mut eval = weighted_risk_evaluate(residuals, env_risks, layout, &weights);
    eval.value = value;
    Ok(eval)
}

pub fn vrex_objective_and_gradient(
    model: &BlockedLinearModel,
    envs: &[LabeledDataset],
    lambda: f64,
) -> Result<(f64, Array1<f64>)> {
    let (logits, labels, layout) = pooled_logits(model, envs)?;
    let eval = vrex_evaluate(logits.view(), labels.view(), &layout, lambda)?;
    Ok((eval.value, gradient_from_coeffs(envs, &eval.coeffs, &layout)))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::objectives::erm_objective_and_gradient;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_two_environment_case() {
        let c = vrex_env_coefficients(&[0.5, 0.3], 100.0).unwrap();
        assert!((c[0] - 10.5).abs() < 1e-12 && (c[1] + 9.5).abs() < 1e-12, "{c:?}");
    }

    #[test]
    fn equal_risks_give_uniform_weights() {
        let c = vrex_env_coefficients(&[0.7; 4], 50.0).unwrap();
        assert!(c.iter().all(|v| (*v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn coefficients_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let m = rng.random_range(1..10);
            let risks: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
            let lambda = rng.random_range(0.0..1000.0);
            let s: f64 = vrex_env_coefficients(&risks, lambda).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn lambda_zero_is_environment_average() {
        let e = envs(2, &[20, 30], 0.1);
        let model = random_model(1);
        let (v, g) = vrex_objective_and_gradient(&model, &e, 0.0).unwrap();
        let (ve, ge) = erm_objective_and_gradient(&model, &e).unwrap();
        assert!((v - ve / 2.0).abs() < 1e-12);
        assert!((&g - &(ge / 2.0)).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn identical_environments_have_no_variance() {
        let e = envs(3, &[25], 0.2);
        let both = vec![e[0].clone(), e[0].clone()];
        let model = random_model(2);
        let (v, g) = vrex_objective_and_gradient(&model, &both, 100.0).unwrap();
        let (ve, ge) = erm_objective_and_gradient(&model, &e).unwrap();
        assert!((v - ve).abs() < 1e-12);
        assert!((&g - &ge).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let e = envs(seed, &[15, 20, 12], 0.2);
            let model = random_model(seed + 50);
            check_gradient(&model, seed, |m| vrex_objective_and_gradient(m, &e, 10.0).unwrap());
        }
    }

    #[test]
    fn rejects_empty_environment_list() {
        assert!(vrex_objective_and_gradient(&random_model(0), &[], 1.0).is_err());
        assert!(vrex_env_coefficients(&[], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn negative_weight_iff_far_below_mean(
            risks in proptest::collection::vec(0f64..2.0, 2..8),
            lambda in 0.1f64..100.0,
        ) {
            let c = vrex_env_coefficients(&risks, lambda).unwrap();
            let mean = risks.iter().sum::<f64>() / risks.len() as f64;
            for (r, ce) in risks.iter().zip(&c) {
                let margin = r - (mean - 1.0 / (2.0 * lambda));
                if margin.abs() > 1e-9 {
                    prop_assert_eq!(*ce < 0.0, margin < 0.0);
                }
            }
        }
    }
}
