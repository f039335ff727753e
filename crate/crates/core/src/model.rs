//! Bias-free blocked linear classifier `f(x) = wᵀx` with logistic loss.

use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::{FeatureSpec, LabeledDataset};
use crate::error::{Error, Result};

/// Which weight blocks are trainable. Masked blocks stay exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    pub use_inv: bool,
    pub use_spu: bool,
    pub use_nui: bool,
}

impl Default for BlockMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl BlockMask {
    pub const ALL: BlockMask = BlockMask {
        use_inv: true,
        use_spu: true,
        use_nui: true,
    };
    /// Invariant plus nuisance: the `w^(inv)` restriction.
    pub const INVARIANT: BlockMask = BlockMask {
        use_inv: true,
        use_spu: false,
        use_nui: true,
    };
    /// Spurious plus nuisance: the `w^(spu)` restriction.
    pub const SPURIOUS: BlockMask = BlockMask {
        use_inv: false,
        use_spu: true,
        use_nui: true,
    };
    pub const NUISANCE: BlockMask = BlockMask {
        use_inv: false,
        use_spu: false,
        use_nui: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.use_inv || self.use_spu || self.use_nui) {
            return Err(Error::InvalidArgument("block mask disables every block".into()));
        }
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        *self == Self::ALL
    }

    /// Column ranges of the enabled blocks, in column order.
    pub fn active_ranges(&self, spec: &FeatureSpec) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(3);
        if self.use_inv {
            out.push(spec.inv_range());
        }
        if self.use_spu {
            out.push(spec.spu_range());
        }
        if self.use_nui {
            out.push(spec.nui_range());
        }
        out
    }

    /// Zeroes the disabled blocks of a full-length vector.
    pub fn apply(&self, spec: &FeatureSpec, v: &mut Array1<f64>) {
        for (on, range) in [
            (self.use_inv, spec.inv_range()),
            (self.use_spu, spec.spu_range()),
            (self.use_nui, spec.nui_range()),
        ] {
            if !on {
                v.slice_mut(ndarray::s![range]).fill(0.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockedLinearModel {
    spec: FeatureSpec,
    weights: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    w_inv: Vec<f64>,
    w_spu: Vec<f64>,
    w_nui: Vec<f64>,
    spec: FeatureSpec,
    fingerprint: String,
}

impl BlockedLinearModel {
    pub fn zeros(spec: &FeatureSpec) -> Self {
        Self {
            spec: *spec,
            weights: Array1::zeros(spec.dim()),
        }
    }

    pub fn from_weights(spec: &FeatureSpec, weights: Array1<f64>) -> Result<Self> {
        if weights.len() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                got: weights.len(),
                context: "model weights",
            });
        }
        Ok(Self { spec: *spec, weights })
    }

    pub fn from_blocks(spec: &FeatureSpec, w_inv: &[f64], w_spu: &[f64], w_nui: &[f64]) -> Result<Self> {
        for (len, want, what) in [
            (w_inv.len(), spec.d_inv, "w_inv"),
            (w_spu.len(), spec.d_spu, "w_spu"),
            (w_nui.len(), spec.d_nui, "w_nui"),
        ] {
            if len != want {
                return Err(Error::DimensionMismatch {
                    expected: want,
                    got: len,
                    context: what,
                });
            }
        }
        let weights = w_inv.iter().chain(w_spu).chain(w_nui).copied().collect();
        Ok(Self { spec: *spec, weights })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Array1<f64> {
        &mut self.weights
    }

    pub fn into_weights(self) -> Array1<f64> {
        self.weights
    }

    pub fn w_inv(&self) -> ArrayView1<'_, f64> {
        self.weights.slice(ndarray::s![self.spec.inv_range()])
    }

    pub fn w_spu(&self) -> ArrayView1<'_, f64> {
        self.weights.slice(ndarray::s![self.spec.spu_range()])
    }

    pub fn w_nui(&self) -> ArrayView1<'_, f64> {
        self.weights.slice(ndarray::s![self.spec.nui_range()])
    }

    pub fn negated(&self) -> Self {
        Self {
            spec: self.spec,
            weights: -&self.weights,
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            w_inv: self.w_inv().to_vec(),
            w_spu: self.w_spu().to_vec(),
            w_nui: self.w_nui().to_vec(),
            spec: self.spec,
            fingerprint: self.spec.fingerprint(),
        };
        fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.fingerprint != file.spec.fingerprint() {
            return Err(Error::InvalidArgument(format!(
                "model fingerprint {} does not match its spec ({})",
                file.fingerprint,
                file.spec.fingerprint()
            )));
        }
        Self::from_blocks(&file.spec, &file.w_inv, &file.w_spu, &file.w_nui)
    }
}

/// Logistic sigmoid, evaluated without overflow for any finite input.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Per-sample logistic loss `log(1 + exp(-yφ))` for `y ∈ {-1, +1}`.
pub fn sample_loss(phi: f64, y: f64) -> f64 {
    softplus(-y * phi)
}

/// `σ(φ) - y01`, the derivative of the per-sample loss with respect to the logit.
/// For `y = +1` this is evaluated as `-σ(-φ)` to avoid cancellation.
pub fn logit_residual(phi: f64, y: f64) -> f64 {
    if y > 0.0 {
        -sigmoid(-phi)
    } else {
        sigmoid(phi)
    }
}

fn check_features(weights_len: usize, features: &ArrayView2<'_, f64>) -> Result<()> {
    if features.ncols() != weights_len {
        return Err(Error::DimensionMismatch {
            expected: weights_len,
            got: features.ncols(),
            context: "feature columns vs model dimension",
        });
    }
    Ok(())
}

pub fn predict_logits(model: &BlockedLinearModel, features: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check_features(model.weights.len(), &features)?;
    Ok(features.dot(&model.weights))
}

fn check_labels(logits: &ArrayView1<'_, f64>, labels: &ArrayView1<'_, f64>) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: logits.len(),
            got: labels.len(),
            context: "labels vs logits",
        });
    }
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(())
}

/// Mean logistic loss over `±1` labels.
pub fn logistic_loss(logits: ArrayView1<'_, f64>, labels: ArrayView1<'_, f64>) -> Result<f64> {
    check_labels(&logits, &labels)?;
    let total: f64 = logits.iter().zip(labels).map(|(p, y)| sample_loss(*p, *y)).sum();
    Ok(total / logits.len() as f64)
}

/// Gradient of the mean logistic loss, `(1/n) Σ (σ(φᵢ) - y01ᵢ) xᵢ`.
pub fn loss_gradient(
    model: &BlockedLinearModel,
    features: ArrayView2<'_, f64>,
    labels: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    let logits = predict_logits(model, features)?;
    check_labels(&logits.view(), &labels)?;
    let n = logits.len() as f64;
    let coeffs: Array1<f64> = logits
        .iter()
        .zip(labels)
        .map(|(p, y)| logit_residual(*p, *y) / n)
        .collect();
    Ok(features.t().dot(&coeffs))
}

/// Misclassification rate against the observed labels; a zero logit counts as an error.
pub fn zero_one_error(model: &BlockedLinearModel, dataset: &LabeledDataset, subset: Option<&[usize]>) -> Result<f64> {
    let logits = predict_logits(model, dataset.features.view())?;
    error_rate(&logits, &dataset.labels, subset)
}

pub(crate) fn is_mistake(phi: f64, y: f64) -> bool {
    phi * y <= 0.0
}

pub(crate) fn error_rate(logits: &Array1<f64>, labels: &Array1<f64>, subset: Option<&[usize]>) -> Result<f64> {
    match subset {
        Some(idx) => {
            if idx.is_empty() {
                return Err(Error::Empty("evaluation subset"));
            }
            let mut wrong = 0usize;
            for &i in idx {
                if i >= logits.len() {
                    return Err(Error::InvalidArgument(format!(
                        "subset index {i} out of range for {} samples",
                        logits.len()
                    )));
                }
                wrong += is_mistake(logits[i], labels[i]) as usize;
            }
            Ok(wrong as f64 / idx.len() as f64)
        }
        None => {
            if logits.is_empty() {
                return Err(Error::Empty("dataset"));
            }
            let wrong = logits.iter().zip(labels).filter(|(p, y)| is_mistake(**p, **y)).count();
            Ok(wrong as f64 / logits.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{random_orthogonal, sample_environment, EnvironmentSpec};
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> FeatureSpec {
        FeatureSpec {
            d_inv: 2,
            d_spu: 2,
            d_nui: 4,
            ..FeatureSpec::default()
        }
    }

    fn random_problem(seed: u64, n: usize) -> (BlockedLinearModel, Array2<f64>, Array1<f64>) {
        let spec = tiny_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Array1<f64> = (0..spec.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Array2::from_shape_fn((n, spec.dim()), |_| rng.random_range(-2.0..2.0));
        let y: Array1<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        (BlockedLinearModel::from_weights(&spec, w).unwrap(), x, y)
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let spec = tiny_spec();
        let x = Array2::from_elem((3, spec.dim()), 1.5);
        let phi = predict_logits(&BlockedLinearModel::zeros(&spec), x.view()).unwrap();
        assert!(phi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_basis_logit() {
        let spec = tiny_spec();
        let mut w = Array1::zeros(spec.dim());
        w[0] = 1.0;
        let model = BlockedLinearModel::from_weights(&spec, w).unwrap();
        let mut x = Array2::zeros((1, spec.dim()));
        x[[0, 0]] = 3.0;
        assert_eq!(predict_logits(&model, x.view()).unwrap()[0], 3.0);
    }

    #[test]
    fn logits_match_naive_dot() {
        let (model, x, _) = random_problem(1, 17);
        let phi = predict_logits(&model, x.view()).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let naive: f64 = row.iter().zip(model.weights()).map(|(a, b)| a * b).sum();
            assert!((phi[i] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let spec = tiny_spec();
        let x = Array2::zeros((2, spec.dim() + 1));
        assert!(predict_logits(&BlockedLinearModel::zeros(&spec), x.view()).is_err());
        assert!(BlockedLinearModel::from_weights(&spec, Array1::zeros(3)).is_err());
    }

    #[test]
    fn loss_reference_values() {
        let l = |p: f64, y: f64| logistic_loss(array![p].view(), array![y].view()).unwrap();
        assert!((l(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(l(50.0, 1.0) < 1e-20);
        assert!((l(-50.0, 1.0) - 50.0).abs() < 1e-12);
        assert!((l(1.0, 1.0) - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((l(1.0, 1.0) - 0.3133).abs() < 1e-4);
        assert!(l(-1000.0, 1.0).is_finite());
        assert!(logistic_loss(array![f64::NAN].view(), array![1.0].view()).is_err());
    }

    #[test]
    fn balanced_pair_gradient_vanishes() {
        let spec = tiny_spec();
        let row: Array1<f64> = (0..spec.dim()).map(|i| i as f64 - 3.0).collect();
        let x = ndarray::stack![ndarray::Axis(0), row, row];
        let g = loss_gradient(&BlockedLinearModel::zeros(&spec), x.view(), array![1.0, -1.0].view()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn saturated_gradient_vanishes() {
        let spec = tiny_spec();
        let mut w = Array1::zeros(spec.dim());
        w[0] = 100.0;
        let model = BlockedLinearModel::from_weights(&spec, w).unwrap();
        let mut x = Array2::zeros((1, spec.dim()));
        x[[0, 0]] = 1.0;
        let g = loss_gradient(&model, x.view(), array![1.0].view()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-40));
    }

    fn finite_difference_check(seed: u64, n: usize) {
        let (model, x, y) = random_problem(seed, n);
        let g = loss_gradient(&model, x.view(), y.view()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let dir: Array1<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-5;
        let at = |t: f64| {
            let m = BlockedLinearModel::from_weights(model.spec(), model.weights() + &(&dir * t)).unwrap();
            logistic_loss(predict_logits(&m, x.view()).unwrap().view(), y.view()).unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let analytic = g.dot(&dir);
        assert!(
            (fd - analytic).abs() <= 1e-5 * analytic.abs().max(1e-3),
            "{fd} vs {analytic}"
        );
    }

    #[test]
    fn single_sample_finite_difference() {
        finite_difference_check(3, 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            finite_difference_check(seed, 12);
        }
    }

    #[test]
    fn loss_convex_along_segments() {
        for seed in 0..10 {
            let (m0, x, y) = random_problem(seed, 15);
            let (m1, _, _) = random_problem(seed + 100, 15);
            let vals: Vec<f64> = (0..=10)
                .map(|k| {
                    let t = k as f64 / 10.0;
                    let w = m0.weights() * (1.0 - t) + m1.weights() * t;
                    let m = BlockedLinearModel::from_weights(m0.spec(), w).unwrap();
                    logistic_loss(predict_logits(&m, x.view()).unwrap().view(), y.view()).unwrap()
                })
                .collect();
            for k in 1..10 {
                assert!(vals[k] <= 0.5 * (vals[k - 1] + vals[k + 1]) + 1e-10);
            }
        }
    }

    #[test]
    fn loss_rotation_invariant() {
        let (model, x, y) = random_problem(5, 20);
        let m = random_orthogonal(model.spec().dim(), 9).unwrap().matrix;
        let rotated = BlockedLinearModel::from_weights(model.spec(), m.t().dot(model.weights())).unwrap();
        let xm = x.dot(&m);
        let a = logistic_loss(predict_logits(&model, x.view()).unwrap().view(), y.view()).unwrap();
        let b = logistic_loss(predict_logits(&rotated, xm.view()).unwrap().view(), y.view()).unwrap();
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn zero_one_conventions() {
        let spec = FeatureSpec {
            d_nui: 10,
            ..FeatureSpec::default()
        };
        let ds = sample_environment(&spec, &EnvironmentSpec::new(200, 0.85, 0.0, "e"), 3).unwrap();
        let zero = BlockedLinearModel::zeros(&spec);
        assert_eq!(zero_one_error(&zero, &ds, None).unwrap(), 1.0);

        let mut w = Array1::zeros(spec.dim());
        w.slice_mut(ndarray::s![spec.spu_range()]).fill(1.0);
        let spu = BlockedLinearModel::from_weights(&spec, w).unwrap();
        let err = zero_one_error(&spu, &ds, None).unwrap();
        assert!((err - 0.15).abs() < 0.05, "{err}");
        let neg = zero_one_error(&spu.negated(), &ds, None).unwrap();
        assert!((err + neg - 1.0).abs() < 1e-12);

        let mut w = Array1::zeros(spec.dim());
        w.slice_mut(ndarray::s![spec.inv_range()]).fill(1.0);
        let inv = BlockedLinearModel::from_weights(&spec, w).unwrap();
        assert!(zero_one_error(&inv, &ds, None).unwrap() < 0.01);
        assert!(zero_one_error(&inv, &ds, Some(&[])).is_err());
        assert!(zero_one_error(&inv, &ds, Some(&[10_000])).is_err());
    }

    #[test]
    fn mask_zeroes_blocks() {
        let spec = tiny_spec();
        let mut v = Array1::ones(spec.dim());
        BlockMask::SPURIOUS.apply(&spec, &mut v);
        assert!(v.slice(ndarray::s![spec.inv_range()]).iter().all(|x| *x == 0.0));
        assert!(v.slice(ndarray::s![spec.spu_range()]).iter().all(|x| *x == 1.0));
        let none = BlockMask {
            use_inv: false,
            use_spu: false,
            use_nui: false,
        };
        assert!(none.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let (model, _, _) = random_problem(8, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save_json(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"w_inv\"") && text.contains("\"w_spu\"") && text.contains("\"w_nui\""));
        assert_eq!(BlockedLinearModel::load_json(&path).unwrap(), model);
    }

    proptest! {
        #[test]
        fn loss_finite_and_nonnegative(phi in -1e6f64..1e6, pos in any::<bool>()) {
            let y = if pos { 1.0 } else { -1.0 };
            let l = sample_loss(phi, y);
            prop_assert!(l.is_finite() && l >= 0.0);
        }

        #[test]
        fn residual_matches_sigmoid(phi in -30f64..30.0, pos in any::<bool>()) {
            let y = if pos { 1.0 } else { -1.0 };
            let y01 = (y + 1.0) / 2.0;
            prop_assert!((logit_residual(phi, y) - (sigmoid(phi) - y01)).abs() < 1e-15);
        }
    }
}
