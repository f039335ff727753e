//! Training objectives over environment-structured data.
//!
//! Every objective here is a function of the logits only, so it is evaluated
//! in logit space: [`Objective::evaluate`] returns the objective value and the
//! per-sample coefficients `cᵢ = ∂L/∂φᵢ`. The weight gradient is then
//! `Σᵢ cᵢ xᵢ`, which the trainer computes with a single matrix-vector product.
//!
//! Labels are `±1` throughout; the `{0, 1}` form appears only inside the
//! closed-form coefficient [`irm_coefficient`], via `y01 = (y + 1) / 2`.

mod groupdro;
mod irm;
mod mixup;
mod vrex;

pub use groupdro::{groupdro_step, validate_simplex};
pub use irm::{irm_coefficient, irm_evaluate, irm_negative_onset, irm_sign_changes, irmv1_objective_and_gradient};
pub use mixup::{mixed_features, mixup_evaluate, mixup_pairs, MixupBatch};
pub use vrex::{vrex_env_coefficients, vrex_evaluate, vrex_objective_and_gradient};

use std::ops::Range;

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{logit_residual, predict_logits, sample_loss, BlockedLinearModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Erm,
    #[serde(alias = "irm")]
    IrmV1,
    VRex,
    GroupDro,
    Mixup,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Erm => "erm",
            ObjectiveKind::IrmV1 => "irmv1",
            ObjectiveKind::VRex => "vrex",
            ObjectiveKind::GroupDro => "groupdro",
            ObjectiveKind::Mixup => "mixup",
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Penalty weight λ for IRMv1 and V-REx.
    pub penalty_lambda: f64,
    /// Exponentiated-gradient step η_q for the GroupDRO environment weights.
    pub dro_step: f64,
    /// Beta(α, α) parameter for Mixup.
    pub mixup_alpha: f64,
    /// ERM only: average over all pooled samples instead of summing
    /// per-environment mean risks.
    pub pooled_erm: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Erm,
            penalty_lambda: 0.0,
            dro_step: 0.01,
            mixup_alpha: 0.2,
            pooled_erm: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn erm() -> Self {
        Self::default()
    }

    pub fn irmv1(lambda: f64) -> Self {
        Self {
            kind: ObjectiveKind::IrmV1,
            penalty_lambda: lambda,
            ..Self::default()
        }
    }

    pub fn vrex(lambda: f64) -> Self {
        Self {
            kind: ObjectiveKind::VRex,
            penalty_lambda: lambda,
            ..Self::default()
        }
    }

    pub fn groupdro(step: f64) -> Self {
        Self {
            kind: ObjectiveKind::GroupDro,
            dro_step: step,
            ..Self::default()
        }
    }

    pub fn mixup(alpha: f64) -> Self {
        Self {
            kind: ObjectiveKind::Mixup,
            mixup_alpha: alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ObjectiveKind::IrmV1 | ObjectiveKind::VRex => {
                if !(self.penalty_lambda.is_finite() && self.penalty_lambda >= 0.0) {
                    return Err(Error::Config(format!(
                        "penalty_lambda must be finite and >= 0, got {}",
                        self.penalty_lambda
                    )));
                }
            }
            ObjectiveKind::GroupDro => {
                if !(self.dro_step.is_finite() && self.dro_step > 0.0) {
                    return Err(Error::Config(format!("dro_step must be > 0, got {}", self.dro_step)));
                }
            }
            ObjectiveKind::Mixup => {
                if !(self.mixup_alpha.is_finite() && self.mixup_alpha > 0.0) {
                    return Err(Error::Config(format!(
                        "mixup_alpha must be > 0, got {}",
                        self.mixup_alpha
                    )));
                }
            }
            ObjectiveKind::Erm => {}
        }
        Ok(())
    }

    /// Short label such as `irmv1(lambda=10)` used in output rows.
    pub fn label(&self) -> String {
        match self.kind {
            ObjectiveKind::Erm if self.pooled_erm => "erm_pooled".into(),
            ObjectiveKind::Erm => "erm".into(),
            ObjectiveKind::IrmV1 | ObjectiveKind::VRex => format!("{}(lambda={})", self.kind, self.penalty_lambda),
            ObjectiveKind::GroupDro => format!("groupdro(step={})", self.dro_step),
            ObjectiveKind::Mixup => format!("mixup(alpha={})", self.mixup_alpha),
        }
    }
}

/// Per-environment mean logistic risks, aligned with environment ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvRiskVector {
    pub risks: Vec<f64>,
    pub env_ids: Vec<String>,
}

impl EnvRiskVector {
    pub fn new(risks: Vec<f64>, env_ids: Vec<String>) -> Result<Self> {
        if risks.len() != env_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: env_ids.len(),
                got: risks.len(),
                context: "risks vs env ids",
            });
        }
        validate_risks(&risks)?;
        Ok(Self { risks, env_ids })
    }

    pub fn from_risks(risks: Vec<f64>) -> Result<Self> {
        let ids = (0..risks.len()).map(|e| format!("env_{e}")).collect();
        Self::new(risks, ids)
    }

    pub fn len(&self) -> usize {
        self.risks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.risks.is_empty()
    }
}

pub(crate) fn validate_risks(risks: &[f64]) -> Result<()> {
    if risks.is_empty() {
        return Err(Error::Empty("environment risks"));
    }
    if risks.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::NonFinite("environment risks"));
    }
    Ok(())
}

/// Contiguous row ranges of each environment inside a pooled sample vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvLayout {
    ranges: Vec<Range<usize>>,
}

impl EnvLayout {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Empty("environment list"));
        }
        let mut start = 0;
        let mut ranges = Vec::with_capacity(sizes.len());
        for &n in sizes {
            if n == 0 {
                return Err(Error::Empty("environment"));
            }
            ranges.push(start..start + n);
            start += n;
        }
        Ok(Self { ranges })
    }

    pub fn from_envs(envs: &[LabeledDataset]) -> Result<Self> {
        Self::from_sizes(&envs.iter().map(|e| e.n()).collect::<Vec<_>>())
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn n_envs(&self) -> usize {
        self.ranges.len()
    }

    pub fn total(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }
}

/// Objective value and its derivative with respect to each pooled logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub coeffs: Array1<f64>,
    /// Plain mean logistic risk of each environment at the evaluated logits.
    pub env_risks: Vec<f64>,
}

/// Logit residuals `σ(φᵢ) - y01ᵢ` and per-environment risks.
pub(crate) fn residuals_and_risks(
    logits: ArrayView1<'_, f64>,
    labels: ArrayView1<'_, f64>,
    layout: &EnvLayout,
) -> Result<(Array1<f64>, Vec<f64>)> {
    if logits.len() != labels.len() || logits.len() != layout.total() {
        return Err(Error::DimensionMismatch {
            expected: layout.total(),
            got: logits.len().min(labels.len()),
            context: "pooled logits/labels vs environment layout",
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let residuals: Array1<f64> = logits.iter().zip(labels).map(|(p, y)| logit_residual(*p, *y)).collect();
    let risks = layout
        .ranges()
        .iter()
        .map(|r| {
            let s: f64 = r.clone().map(|i| sample_loss(logits[i], labels[i])).sum();
            s / r.len() as f64
        })
        .collect();
    Ok((residuals, risks))
}

/// Environment-balanced ERM: `Σ_e R_e`, or the pooled mean when `pooled` is set.
pub fn erm_evaluate(
    logits: ArrayView1<'_, f64>,
    labels: ArrayView1<'_, f64>,
    layout: &EnvLayout,
    pooled: bool,
) -> Result<Evaluation> {
    let (mut coeffs, env_risks) = residuals_and_risks(logits, labels, layout)?;
    let value = if pooled {
        let n = layout.total() as f64;
        coeffs /= n;
        env_risks
            .iter()
            .zip(layout.ranges())
            .map(|(r, range)| r * range.len() as f64)
            .sum::<f64>()
            / n
    } else {
        for range in layout.ranges() {
            let n_e = range.len() as f64;
            coeffs.slice_mut(ndarray::s![range.clone()]).mapv_inplace(|c| c / n_e);
        }
        env_risks.iter().sum()
    };
    Ok(Evaluation {
        value,
        coeffs,
        env_risks,
    })
}

/// Weighted sum of environment risks `Σ_e w_e R_e` and its logit coefficients.
pub(crate) fn weighted_risk_evaluate(
    residuals: Array1<f64>,
    env_risks: Vec<f64>,
    layout: &EnvLayout,
    weights: &[f64],
) -> Evaluation {
    let mut coeffs = residuals;
    for (range, w) in layout.ranges().iter().zip(weights) {
        let scale = w / range.len() as f64;
        coeffs.slice_mut(ndarray::s![range.clone()]).mapv_inplace(|c| c * scale);
    }
    let value = env_risks.iter().zip(weights).map(|(r, w)| r * w).sum();
    Evaluation {
        value,
        coeffs,
        env_risks,
    }
}

/// An objective together with its per-run state (GroupDRO weights, Mixup RNG).
#[derive(Debug, Clone)]
pub struct Objective {
    config: ObjectiveConfig,
    dro_weights: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Objective {
    pub fn new(config: ObjectiveConfig, n_envs: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_envs == 0 {
            return Err(Error::Empty("environment list"));
        }
        Ok(Self {
            config,
            dro_weights: vec![1.0 / n_envs as f64; n_envs],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.config
    }

    pub fn dro_weights(&self) -> &[f64] {
        &self.dro_weights
    }

    /// Evaluates at the given pooled logits. GroupDRO first updates its
    /// environment weights from the current risks; Mixup draws fresh pairs.
    pub fn evaluate(
        &mut self,
        logits: ArrayView1<'_, f64>,
        labels: ArrayView1<'_, f64>,
        layout: &EnvLayout,
    ) -> Result<Evaluation> {
        if layout.n_envs() != self.dro_weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.dro_weights.len(),
                got: layout.n_envs(),
                context: "environment count",
            });
        }
        let c = &self.config;
        match c.kind {
            ObjectiveKind::Erm => erm_evaluate(logits, labels, layout, c.pooled_erm),
            ObjectiveKind::IrmV1 => irm_evaluate(logits, labels, layout, c.penalty_lambda),
            ObjectiveKind::VRex => vrex_evaluate(logits, labels, layout, c.penalty_lambda),
            ObjectiveKind::GroupDro => {
                let (residuals, risks) = residuals_and_risks(logits, labels, layout)?;
                self.dro_weights = groupdro_step(&self.dro_weights, &risks, c.dro_step)?;
                Ok(weighted_risk_evaluate(residuals, risks, layout, &self.dro_weights))
            }
            ObjectiveKind::Mixup => {
                let batch = mixup::draw_pairs(layout.total(), c.mixup_alpha, &mut self.rng)?;
                mixup_evaluate(logits, labels, layout, &batch)
            }
        }
    }
}

/// Pooled logits and labels of a list of environments.
pub(crate) fn pooled_logits(
    model: &BlockedLinearModel,
    envs: &[LabeledDataset],
) -> Result<(Array1<f64>, Array1<f64>, EnvLayout)> {
    let layout = EnvLayout::from_envs(envs)?;
    let mut logits = Vec::with_capacity(layout.total());
    let mut labels = Vec::with_capacity(layout.total());
    for env in envs {
        logits.extend(predict_logits(model, env.features.view())?);
        labels.extend(env.labels.iter().copied());
    }
    Ok((Array1::from(logits), Array1::from(labels), layout))
}

/// `Σᵢ cᵢ xᵢ` over the pooled environments.
pub(crate) fn gradient_from_coeffs(envs: &[LabeledDataset], coeffs: &Array1<f64>, layout: &EnvLayout) -> Array1<f64> {
    let d = envs[0].dim();
    let mut grad = Array1::zeros(d);
    for (env, range) in envs.iter().zip(layout.ranges()) {
        let c = coeffs.slice(ndarray::s![range.clone()]);
        grad += &env.features.t().dot(&c);
    }
    grad
}

/// Value and weight gradient of a freshly initialized objective.
///
/// Stateful objectives start from their initial state: GroupDRO takes one
/// weight step from uniform, Mixup draws pairs from `seed`.
pub fn objective_and_gradient(
    model: &BlockedLinearModel,
    envs: &[LabeledDataset],
    config: &ObjectiveConfig,
    seed: u64,
) -> Result<(f64, Array1<f64>)> {
    let (logits, labels, layout) = pooled_logits(model, envs)?;
    let mut objective = Objective::new(*config, layout.n_envs(), seed)?;
    let eval = objective.evaluate(logits.view(), labels.view(), &layout)?;
    Ok((eval.value, gradient_from_coeffs(envs, &eval.coeffs, &layout)))
}

/// Environment-balanced ERM value and gradient.
pub fn erm_objective_and_gradient(model: &BlockedLinearModel, envs: &[LabeledDataset]) -> Result<(f64, Array1<f64>)> {
    objective_and_gradient(model, envs, &ObjectiveConfig::erm(), 0)
}
