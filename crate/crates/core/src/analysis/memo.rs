//! Empirical per-sample memorization cost of the nuisance block.
//!
//! For each `k`, `k` points are drawn from the nuisance distribution alone
//! and given uniformly random labels; a nuisance-only logistic model is fitted
//! by gradient descent and rescaled to unit minimum margin. The cost of
//! memorizing `k` points is the squared norm of that rescaled weight vector,
//! and `C` is the least-squares slope of the cost against `k`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, FeatureSpec};
use crate::error::{Error, Result};
use crate::objectives::{EnvLayout, ObjectiveConfig};
use crate::trainer::{gradient_descent, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoCostEstimate {
    /// Fitted slope: squared-norm cost per memorized sample.
    pub slope: f64,
    pub intercept: f64,
    pub k_values: Vec<usize>,
    /// Mean unit-margin squared norm at each `k`, over trials.
    pub mean_cost: Vec<f64>,
}

fn memorize_once(spec: &FeatureSpec, k: usize, config: &TrainConfig, seed: u64) -> Result<f64> {
    let mut rng = crate::datagen::stream_rng(seed, 0);
    let sd = spec.nuisance_std();
    let x = Array2::from_shape_simple_fn((k, spec.d_nui), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        sd * z
    });
    let y: Array1<f64> = (0..k).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let layout = EnvLayout::from_sizes(&[k])?;
    let erm = ObjectiveConfig {
        pooled_erm: true,
        ..ObjectiveConfig::erm()
    };
    let w = gradient_descent(x.view(), y.view(), &layout, &erm, config, |_| {})?;
    let min_margin = (&x.dot(&w) * &y).fold(f64::INFINITY, |a, b| a.min(*b));
    if min_margin.is_nan() || min_margin <= 0.0 {
        return Err(Error::NonSeparable);
    }
    Ok(w.dot(&w) / (min_margin * min_margin))
}

/// Least-squares line through `(k, cost)`; returns `(slope, intercept)`.
fn fit_line(ks: &[usize], costs: &[f64]) -> (f64, f64) {
    let n = ks.len() as f64;
    let mx = ks.iter().map(|&k| k as f64).sum::<f64>() / n;
    let my = costs.iter().sum::<f64>() / n;
    let sxy: f64 = ks.iter().zip(costs).map(|(&k, c)| (k as f64 - mx) * (c - my)).sum();
    let sxx: f64 = ks.iter().map(|&k| (k as f64 - mx).powi(2)).sum();
    if sxx == 0.0 {
        // a single k: the line through the origin
        return (my / mx, 0.0);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Estimates the memorization cost `C` of the nuisance block of `spec`.
///
/// The block mask of `config` is ignored: the fit only ever sees nuisance
/// features. Trials run in parallel and are reduced in a fixed order.
pub fn estimate_memorization_cost(
    spec: &FeatureSpec,
    k_values: &[usize],
    trials: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<MemoCostEstimate> {
    spec.validate()?;
    if k_values.is_empty() {
        return Err(Error::Empty("k values"));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    for &k in k_values {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if k > spec.d_nui {
            return Err(Error::NonSeparable.at(format!("k = {k} exceeds d_nui = {}", spec.d_nui)));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..k_values.len())
        .flat_map(|ki| (0..trials).map(move |t| (ki, t)))
        .collect();
    let costs: Vec<f64> = jobs
        .par_iter()
        .map(|&(ki, t)| {
            let k = k_values[ki];
            memorize_once(spec, k, config, derive_seed(seed, (k as u64) << 32 | t as u64))
                .map_err(|e| e.at(format!("memorization fit k = {k}, trial {t}")))
        })
        .collect::<Result<_>>()?;
    let mean_cost: Vec<f64> = costs
        .chunks(trials)
        .map(|c| c.iter().sum::<f64>() / trials as f64)
        .collect();
    let (slope, intercept) = fit_line(k_values, &mean_cost);
    Ok(MemoCostEstimate {
        slope,
        intercept,
        k_values: k_values.to_vec(),
        mean_cost,
    })
}
