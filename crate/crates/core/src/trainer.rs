//! Full-batch gradient descent from zero initialization.
//!
//! Masked blocks are never materialized: the design matrix is restricted to
//! the enabled columns before training, so disabled weights are exactly zero
//! by construction and the ℓ2 penalty only sees enabled blocks.

use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::{FeatureSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{is_mistake, BlockMask, BlockedLinearModel};
use crate::objectives::{EnvLayout, Evaluation, Objective, ObjectiveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Coefficient of `(l2_reg / 2) ‖w‖²` added to the objective.
    pub l2_reg: f64,
    pub block_mask: BlockMask,
    /// Seeds stochastic objectives (Mixup pairing).
    pub seed: u64,
    /// History stride; step 0 and the final step are always recorded.
    pub record_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            steps: 2000,
            l2_reg: 1e-4,
            block_mask: BlockMask::ALL,
            seed: 0,
            record_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.l2_reg.is_finite() && self.l2_reg >= 0.0) {
            return Err(Error::Config(format!("l2_reg must be >= 0, got {}", self.l2_reg)));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be >= 1".into()));
        }
        self.block_mask.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub objective: f64,
    pub env_risks: Vec<f64>,
    pub norm_inv: f64,
    pub norm_spu: f64,
    pub norm_nui: f64,
    pub train_err: f64,
    /// Fraction of flipped points predicted as their noisy label; NaN when
    /// the training data has no flipped points.
    pub memo_acc: f64,
    /// Worst error over the non-empty training groups, against observed labels.
    pub wg_train_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub env_ids: Vec<String>,
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "objective".to_string()];
        header.extend(self.env_ids.iter().map(|id| format!("risk_env_{id}")));
        header.extend(
            [
                "norm_inv",
                "norm_spu",
                "norm_nui",
                "train_err",
                "memo_acc",
                "wg_train_err",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.step.to_string(), r.objective.to_string()];
            row.extend(r.env_risks.iter().map(|v| v.to_string()));
            row.extend(
                [
                    r.norm_inv,
                    r.norm_spu,
                    r.norm_nui,
                    r.train_err,
                    r.memo_acc,
                    r.wg_train_err,
                ]
                .iter()
                .map(|v| v.to_string()),
            );
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// State handed to the recording callback of [`gradient_descent`].
pub struct StepView<'a> {
    pub step: usize,
    pub weights: &'a Array1<f64>,
    pub logits: &'a Array1<f64>,
    pub eval: &'a Evaluation,
    /// Objective plus the ℓ2 term.
    pub value: f64,
}

/// Gradient descent on a raw design matrix with pooled environment layout.
///
/// `record` is called at step 0, every `record_every` steps and at the final
/// step. Returns the final weights (one per column of `features`).
pub fn gradient_descent<F>(
    features: ArrayView2<'_, f64>,
    labels: ArrayView1<'_, f64>,
    layout: &EnvLayout,
    objective: &ObjectiveConfig,
    config: &TrainConfig,
    mut record: F,
) -> Result<Array1<f64>>
where
    F: FnMut(StepView<'_>),
{
    config.validate()?;
    if features.nrows() != layout.total() || labels.len() != layout.total() {
        return Err(Error::DimensionMismatch {
            expected: layout.total(),
            got: features.nrows(),
            context: "training rows vs environment layout",
        });
    }
    let mut state = Objective::new(*objective, layout.n_envs(), config.seed)?;
    let mut w = Array1::<f64>::zeros(features.ncols());
    let (lr, l2) = (config.learning_rate, config.l2_reg);
    for step in 0..=config.steps {
        let logits = features.dot(&w);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step,
                value: f64::INFINITY,
            });
        }
        let eval = state.evaluate(logits.view(), labels, layout)?;
        let value = eval.value + 0.5 * l2 * w.dot(&w);
        if !value.is_finite() {
            return Err(Error::Diverged { step, value });
        }
        if step % config.record_every == 0 || step == config.steps {
            record(StepView {
                step,
                weights: &w,
                logits: &logits,
                eval: &eval,
                value,
            });
        }
        if step == config.steps {
            break;
        }
        let mut grad = features.t().dot(&eval.coeffs);
        if l2 > 0.0 {
            grad.scaled_add(l2, &w);
        }
        w.scaled_add(-lr, &grad);
    }
    Ok(w)
}

fn check_envs(envs: &[LabeledDataset], mask: &BlockMask) -> Result<FeatureSpec> {
    let first = envs.first().ok_or(Error::Empty("environment list"))?;
    let spec = first.spec;
    for env in envs {
        if env.spec != spec {
            return Err(Error::InvalidArgument(format!(
                "environment {} has a different feature spec",
                env.env_id
            )));
        }
        if env.dim() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                got: env.dim(),
                context: "environment features",
            });
        }
        if env.n() == 0 {
            return Err(Error::Empty("environment"));
        }
        if !mask.is_full() && env.is_projected() {
            return Err(Error::ProjectedDataset);
        }
    }
    Ok(spec)
}

/// Pooled rows of all environments restricted to the enabled column blocks.
fn masked_design(envs: &[LabeledDataset], spec: &FeatureSpec, mask: &BlockMask) -> Array2<f64> {
    let ranges = mask.active_ranges(spec);
    let blocks: Vec<Array2<f64>> = envs
        .iter()
        .map(|env| {
            if mask.is_full() {
                env.features.clone()
            } else {
                let views: Vec<_> = ranges.iter().map(|r| env.features.slice(s![.., r.clone()])).collect();
                concatenate(Axis(1), &views).expect("blocks share row count")
            }
        })
        .collect();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    concatenate(Axis(0), &views).expect("environments share column count")
}

/// Scatters restricted weights back into a full-length vector.
fn expand_weights(spec: &FeatureSpec, mask: &BlockMask, used: &Array1<f64>) -> Array1<f64> {
    let mut full = Array1::zeros(spec.dim());
    let mut offset = 0;
    for r in mask.active_ranges(spec) {
        let len = r.len();
        full.slice_mut(s![r]).assign(&used.slice(s![offset..offset + len]));
        offset += len;
    }
    full
}

/// Norms of the inv/spu/nui blocks of a restricted weight vector.
fn block_norms(spec: &FeatureSpec, mask: &BlockMask, used: &Array1<f64>) -> [f64; 3] {
    let mut norms = [0.0; 3];
    let mut offset = 0;
    for (k, (on, len)) in [
        (mask.use_inv, spec.d_inv),
        (mask.use_spu, spec.d_spu),
        (mask.use_nui, spec.d_nui),
    ]
    .into_iter()
    .enumerate()
    {
        if on {
            let b = used.slice(s![offset..offset + len]);
            norms[k] = b.dot(&b).sqrt();
            offset += len;
        }
    }
    norms
}

struct TrainingMeta {
    flipped: Vec<usize>,
    groups: [Vec<usize>; 4],
}

impl TrainingMeta {
    fn new(envs: &[LabeledDataset]) -> Self {
        let mut flipped = Vec::new();
        let mut groups: [Vec<usize>; 4] = Default::default();
        let mut offset = 0;
        for env in envs {
            for i in 0..env.n() {
                if env.noise_mask[i] {
                    flipped.push(offset + i);
                }
                groups[env.group_ids[i].index()].push(offset + i);
            }
            offset += env.n();
        }
        Self { flipped, groups }
    }
}

fn error_on(logits: &Array1<f64>, labels: &Array1<f64>, idx: &[usize]) -> f64 {
    idx.iter().filter(|&&i| is_mistake(logits[i], labels[i])).count() as f64 / idx.len() as f64
}

/// Trains a model on the pooled environments under `objective`.
pub fn train(
    envs: &[LabeledDataset],
    objective: &ObjectiveConfig,
    config: &TrainConfig,
) -> Result<(BlockedLinearModel, TrainHistory)> {
    config.validate()?;
    let mask = config.block_mask;
    let spec = check_envs(envs, &mask)?;
    let layout = EnvLayout::from_envs(envs)?;
    let x = masked_design(envs, &spec, &mask);
    let labels: Array1<f64> = envs.iter().flat_map(|e| e.labels.iter().copied()).collect();
    let meta = TrainingMeta::new(envs);
    let all: Vec<usize> = (0..layout.total()).collect();

    let mut history = TrainHistory {
        env_ids: envs.iter().map(|e| e.env_id.clone()).collect(),
        records: Vec::new(),
    };
    let used = gradient_descent(x.view(), labels.view(), &layout, objective, config, |v| {
        let [norm_inv, norm_spu, norm_nui] = block_norms(&spec, &mask, v.weights);
        let memo_acc = if meta.flipped.is_empty() {
            f64::NAN
        } else {
            1.0 - error_on(v.logits, &labels, &meta.flipped)
        };
        let wg_train_err = meta
            .groups
            .iter()
            .filter(|g| !g.is_empty())
            .map(|g| error_on(v.logits, &labels, g))
            .fold(0.0, f64::max);
        history.records.push(HistoryRecord {
            step: v.step,
            objective: v.value,
            env_risks: v.eval.env_risks.clone(),
            norm_inv,
            norm_spu,
            norm_nui,
            train_err: error_on(v.logits, &labels, &all),
            memo_acc,
            wg_train_err,
        });
    })?;
    let model = BlockedLinearModel::from_weights(&spec, expand_weights(&spec, &mask, &used))?;
    Ok((model, history))
}

/// ERM restricted to the blocks of `mask`, which must drop the invariant or
/// the spurious block: [`BlockMask::INVARIANT`] gives `w^(inv)`,
/// [`BlockMask::SPURIOUS`] gives `w^(spu)`.
pub fn fit_restricted(dataset: &LabeledDataset, mask: BlockMask, config: &TrainConfig) -> Result<BlockedLinearModel> {
    if mask.use_inv && mask.use_spu {
        return Err(Error::InvalidArgument(
            "restricted fit must exclude the invariant or the spurious block".into(),
        ));
    }
    let config = TrainConfig {
        block_mask: mask,
        ..*config
    };
    let (model, _) = train(std::slice::from_ref(dataset), &ObjectiveConfig::erm(), &config)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_environment, EnvironmentSpec};
    use crate::model::zero_one_error;

    fn spec(d_nui: usize) -> FeatureSpec {
        FeatureSpec {
            d_nui,
            ..FeatureSpec::default()
        }
    }

    fn env(n: usize, gamma: f64, eta: f64, d_nui: usize, seed: u64) -> LabeledDataset {
        sample_environment(&spec(d_nui), &EnvironmentSpec::new(n, gamma, eta, "train"), seed).unwrap()
    }

    #[test]
    fn one_step_from_zero_matches_manual_update() {
        let ds = env(40, 0.9, 0.1, 10, 0);
        let cfg = TrainConfig {
            steps: 1,
            learning_rate: 0.3,
            ..TrainConfig::default()
        };
        let (model, history) = train(std::slice::from_ref(&ds), &ObjectiveConfig::erm(), &cfg).unwrap();
        // at w = 0 every residual is σ(0) - y01 = -y/2
        let want = ds.features.t().dot(&(&ds.labels * (0.5 / 40.0))) * 0.3;
        assert!((model.weights() - &want).iter().all(|v| v.abs() < 1e-14));
        assert_eq!(history.records.len(), 2);
        assert_eq!(history.records[0].train_err, 1.0);
        assert!((history.records[0].objective - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn masked_blocks_stay_zero() {
        let ds = env(60, 0.9, 0.2, 30, 1);
        let cfg = TrainConfig {
            steps: 50,
            record_every: 5,
            block_mask: BlockMask::SPURIOUS,
            ..TrainConfig::default()
        };
        for kind in [ObjectiveConfig::erm(), ObjectiveConfig::irmv1(1.0)] {
            let (model, history) = train(std::slice::from_ref(&ds), &kind, &cfg).unwrap();
            assert!(model.w_inv().iter().all(|v| *v == 0.0));
            assert!(history.records.iter().all(|r| r.norm_inv == 0.0));
            assert!(model.w_spu().iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn history_steps_increase_and_include_final() {
        let ds = env(30, 0.9, 0.2, 10, 2);
        let cfg = TrainConfig {
            steps: 25,
            record_every: 10,
            ..TrainConfig::default()
        };
        let (_, h) = train(std::slice::from_ref(&ds), &ObjectiveConfig::erm(), &cfg).unwrap();
        let steps: Vec<usize> = h.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, [0, 10, 20, 25]);
        for r in &h.records {
            assert!((0.0..=1.0).contains(&r.memo_acc));
        }
    }

    #[test]
    fn erm_objective_non_increasing_at_small_step() {
        let ds = env(80, 0.9, 0.2, 40, 3);
        let cfg = TrainConfig {
            steps: 300,
            learning_rate: 1e-2,
            record_every: 1,
            ..TrainConfig::default()
        };
        let (_, h) = train(std::slice::from_ref(&ds), &ObjectiveConfig::erm(), &cfg).unwrap();
        for pair in h.records.windows(2) {
            assert!(pair[1].objective <= pair[0].objective + 1e-9);
        }
    }

    #[test]
    fn deterministic_for_all_objectives() {
        let envs = vec![env(40, 0.9, 0.2, 20, 4), env(40, 0.8, 0.2, 20, 5)];
        let cfg = TrainConfig {
            steps: 40,
            ..TrainConfig::default()
        };
        for obj in [
            ObjectiveConfig::erm(),
            ObjectiveConfig::irmv1(2.0),
            ObjectiveConfig::vrex(5.0),
            ObjectiveConfig::groupdro(0.1),
            ObjectiveConfig::mixup(0.4),
        ] {
            let a = train(&envs, &obj, &cfg).unwrap();
            let b = train(&envs, &obj, &cfg).unwrap();
            assert_eq!(a, b, "{:?}", obj.kind);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let envs = vec![env(40, 0.9, 0.2, 20, 6), env(40, 0.8, 0.2, 20, 7)];
        let cfg = TrainConfig {
            steps: 500,
            learning_rate: 1e6,
            ..TrainConfig::default()
        };
        let err = train(&envs, &ObjectiveConfig::irmv1(1e4), &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert!(err.is_numerical());
    }

    #[test]
    fn history_csv_header() {
        let envs = vec![env(20, 0.9, 0.0, 5, 8), env(20, 0.8, 0.0, 5, 9)];
        let cfg = TrainConfig {
            steps: 3,
            ..TrainConfig::default()
        };
        let (_, h) = train(&envs, &ObjectiveConfig::erm(), &cfg).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "step,objective,risk_env_train,risk_env_train,norm_inv,norm_spu,norm_nui,train_err,memo_acc,wg_train_err"
        );
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().contains("NaN"));
    }

    #[test]
    fn restricted_fits_separate_clean_data() {
        let ds = env(1000, 0.99, 0.0, 3000, 10);
        let cfg = TrainConfig {
            steps: 5000,
            learning_rate: 1.0,
            l2_reg: 1e-6,
            ..TrainConfig::default()
        };
        let inv = fit_restricted(&ds, BlockMask::INVARIANT, &cfg).unwrap();
        assert!(zero_one_error(&inv, &ds, None).unwrap() < 0.01);
        assert!(inv.w_spu().iter().all(|v| *v == 0.0));
        let spu = fit_restricted(&ds, BlockMask::SPURIOUS, &cfg).unwrap();
        let e = zero_one_error(&spu, &ds, None).unwrap();
        assert!(e < 0.01, "{e}");
        assert!(spu.w_inv().iter().all(|v| *v == 0.0));
        assert!(fit_restricted(&ds, BlockMask::ALL, &cfg).is_err());
    }

    #[test]
    fn rejects_mixed_specs_and_bad_config() {
        let a = env(20, 0.9, 0.0, 5, 0);
        let b = env(20, 0.9, 0.0, 6, 0);
        assert!(train(&[a.clone(), b], &ObjectiveConfig::erm(), &TrainConfig::default()).is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(std::slice::from_ref(&a), &ObjectiveConfig::erm(), &bad).is_err());
        assert!(train(&[], &ObjectiveConfig::erm(), &TrainConfig::default()).is_err());
    }
}
