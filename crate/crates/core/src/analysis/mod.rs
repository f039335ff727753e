//! Theory-side quantities: block norms, memorization counts and cost, the
//! norm-gap condition between restricted classifiers, closed-form risks,
//! group errors and a hard-margin oracle.

mod margin;
mod memo;

pub use margin::{max_margin_by_enumeration, max_margin_direction, HardMarginSolution};
pub use memo::{estimate_memorization_cost, MemoCostEstimate};

use serde::{Deserialize, Serialize};

use crate::datagen::{Group, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{is_mistake, predict_logits, BlockedLinearModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormDecomposition {
    pub norm_inv: f64,
    pub norm_spu: f64,
    pub norm_nui: f64,
    pub norm_total: f64,
}

pub fn norm_decomposition(model: &BlockedLinearModel) -> NormDecomposition {
    let sq = |v: ndarray::ArrayView1<'_, f64>| v.dot(&v);
    let (i, s, n) = (sq(model.w_inv()), sq(model.w_spu()), sq(model.w_nui()));
    NormDecomposition {
        norm_inv: i.sqrt(),
        norm_spu: s.sqrt(),
        norm_nui: n.sqrt(),
        norm_total: model.weights().dot(model.weights()).sqrt(),
    }
}

fn check_unit(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(v >= lo && v <= hi) {
        return Err(Error::InvalidArgument(format!(
            "{name} must lie in [{lo}, {hi}], got {v}"
        )));
    }
    Ok(())
}

/// Expected number of training points each restricted classifier has to
/// memorize with nuisance features: `(ñ_inv, ñ_spu) = (nη, n(1 - γ + (2γ - 1)η))`.
pub fn memorization_counts(n: usize, gamma: f64, eta: f64) -> Result<(f64, f64)> {
    check_unit("gamma", gamma, 0.0, 1.0)?;
    check_unit("eta", eta, 0.0, 0.5)?;
    let n = n as f64;
    Ok((n * eta, n * (1.0 - gamma + (2.0 * gamma - 1.0) * eta)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpuriousRisk {
    /// Noisy 0-1 risk of the classifier that predicts the spurious attribute.
    pub risk_spu: f64,
    /// Noisy 0-1 risk of the Bayes classifier, which equals `η`.
    pub risk_bayes: f64,
    pub bayes_leq_spu: bool,
}

/// `R(f^γ) = (1 - γ)(1 - η) + γη = 1 - γ + (2γ - 1)η` against the Bayes risk `η`.
pub fn spurious_risk(gamma: f64, eta: f64) -> Result<SpuriousRisk> {
    check_unit("gamma", gamma, 0.0, 1.0)?;
    if !(0.0..0.5).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta must lie in [0, 0.5), got {eta}")));
    }
    let risk_spu = (1.0 - gamma) * (1.0 - eta) + gamma * eta;
    Ok(SpuriousRisk {
        risk_spu,
        risk_bayes: eta,
        bayes_leq_spu: eta <= risk_spu,
    })
}

/// Coefficients of `∇h₁` and `∇h₀` in the expected cross-entropy gradient at
/// a point with predicted class-1 probability `p1` under symmetric noise `η`:
/// `(p1 - (1 - η), (1 - η) - p1)`. Both vanish exactly when `p1 = 1 - η`.
pub fn expected_gradient_coeffs(p1: f64, eta: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&p1) {
        return Err(Error::InvalidArgument(format!("p1 must lie in [0, 1], got {p1}")));
    }
    if !(0.0..0.5).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta must lie in [0, 0.5), got {eta}")));
    }
    let target = 1.0 - eta;
    Ok((p1 - target, target - p1))
}

/// Fraction of label-flipped points that the model predicts as their noisy label.
pub fn memorization_accuracy(model: &BlockedLinearModel, dataset: &LabeledDataset) -> Result<f64> {
    let flipped = dataset.flipped_indices();
    if flipped.is_empty() {
        return Err(Error::NoFlippedPoints);
    }
    let logits = predict_logits(model, dataset.features.view())?;
    let fit = flipped
        .iter()
        .filter(|&&i| !is_mistake(logits[i], dataset.labels[i]))
        .count();
    Ok(fit as f64 / flipped.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupErrors {
    /// Error of each group `g1..g4`; `None` for groups with no samples.
    pub errors: [Option<f64>; 4],
    pub worst: f64,
    pub worst_group: Group,
    /// Groups left out because they are empty.
    pub excluded: Vec<Group>,
}

impl GroupErrors {
    pub fn get(&self, g: Group) -> Option<f64> {
        self.errors[g.index()]
    }

    /// Largest error over the majority groups `g1`, `g4`.
    pub fn majority(&self) -> f64 {
        [Group::G1, Group::G4]
            .iter()
            .filter_map(|g| self.get(*g))
            .fold(f64::NAN, f64::max)
    }

    /// Largest error over the minority groups `g2`, `g3`.
    pub fn minority(&self) -> f64 {
        [Group::G2, Group::G3]
            .iter()
            .filter_map(|g| self.get(*g))
            .fold(f64::NAN, f64::max)
    }
}

/// Per-group error against the observed labels, and the worst group.
pub fn group_errors(model: &BlockedLinearModel, dataset: &LabeledDataset) -> Result<GroupErrors> {
    let logits = predict_logits(model, dataset.features.view())?;
    let mut wrong = [0usize; 4];
    let mut count = [0usize; 4];
    for (i, g) in dataset.group_ids.iter().enumerate() {
        count[g.index()] += 1;
        wrong[g.index()] += is_mistake(logits[i], dataset.labels[i]) as usize;
    }
    let mut errors = [None; 4];
    let mut excluded = Vec::new();
    let mut worst: Option<(f64, Group)> = None;
    for g in Group::ALL {
        let k = g.index();
        if count[k] == 0 {
            excluded.push(g);
            continue;
        }
        let e = wrong[k] as f64 / count[k] as f64;
        errors[k] = Some(e);
        if worst.is_none_or(|(w, _)| e > w) {
            worst = Some((e, g));
        }
    }
    let (worst, worst_group) = worst.ok_or(Error::Empty("dataset"))?;
    Ok(GroupErrors {
        errors,
        worst,
        worst_group,
        excluded,
    })
}

/// The norm-gap condition between the restricted classifiers `w^(inv)` and
/// `w^(spu)`: `‖w^(inv)_inv‖² - ‖w^(spu)_spu‖² ≥ n(1 - γ)(1 - 2η) C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub lhs: f64,
    pub rhs: f64,
    pub memo_cost_c: f64,
    pub condition_holds: bool,
    pub n_tilde_inv: f64,
    pub n_tilde_spu: f64,
    pub norm_w_inv: f64,
    pub norm_w_spu: f64,
    /// Whether `‖w^(inv)‖₂ ≥ ‖w^(spu)‖₂` held for the fitted models.
    pub full_norm_order_holds: bool,
}

pub fn gap_rhs(n: usize, gamma: f64, eta: f64, memo_cost_c: f64) -> f64 {
    n as f64 * (1.0 - gamma) * (1.0 - 2.0 * eta) * memo_cost_c
}

pub fn theorem_gap_check(
    w_inv_model: &BlockedLinearModel,
    w_spu_model: &BlockedLinearModel,
    n: usize,
    gamma: f64,
    eta: f64,
    memo_cost_c: f64,
) -> Result<GapReport> {
    if w_inv_model.w_spu().iter().any(|v| *v != 0.0) {
        return Err(Error::MaskMismatch(
            "invariant-restricted model has nonzero spurious weights".into(),
        ));
    }
    if w_spu_model.w_inv().iter().any(|v| *v != 0.0) {
        return Err(Error::MaskMismatch(
            "spurious-restricted model has nonzero invariant weights".into(),
        ));
    }
    if w_inv_model.spec() != w_spu_model.spec() {
        return Err(Error::MaskMismatch(
            "restricted models have different feature specs".into(),
        ));
    }
    if !(memo_cost_c.is_finite() && memo_cost_c >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "memorization cost must be >= 0, got {memo_cost_c}"
        )));
    }
    let (n_tilde_inv, n_tilde_spu) = memorization_counts(n, gamma, eta)?;
    let inv = norm_decomposition(w_inv_model);
    let spu = norm_decomposition(w_spu_model);
    let lhs = inv.norm_inv.powi(2) - spu.norm_spu.powi(2);
    let rhs = gap_rhs(n, gamma, eta, memo_cost_c);
    Ok(GapReport {
        lhs,
        rhs,
        memo_cost_c,
        condition_holds: lhs >= rhs,
        n_tilde_inv,
        n_tilde_spu,
        norm_w_inv: inv.norm_total,
        norm_w_spu: spu.norm_total,
        full_norm_order_holds: inv.norm_total >= spu.norm_total,
    })
}
