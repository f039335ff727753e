//! Synthetic blocked-feature data with spurious correlation and label noise.
//!
//! Every sample is `x = [x_inv | x_spu | x_nui]` with
//!
//! ```text
//! x_inv ~ N(y·1, σ²_inv I)      (label-aligned, invariant)
//! x_spu ~ N(a·1, σ²_spu I)      (attribute-aligned, spurious)
//! x_nui ~ N(0, σ²_nui I / d_nui) (or σ²_nui I when unscaled)
//! ```
//!
//! where `y` is the clean label and `a` the spurious attribute, both in
//! `{-1, +1}`. The four `(y, a)` cells are the groups `g1..g4`; group sizes
//! are allocated deterministically by [`group_counts`]. Labels are then
//! flipped independently with probability `η`.
//!
//! Randomness is split into independent ChaCha streams keyed by the seed, so
//! datasets that differ only in `η` share their features and have nested
//! flip sets.

mod io;
mod projection;

pub use io::{export_dataset, import_dataset, DatasetMeta, COLUMN_ORDER};
pub use projection::{apply_random_projection, project_with, random_orthogonal, ProjectionMatrix};

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FEATURE_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
pub(crate) const PROJECTION_STREAM: u64 = 2;

/// Dimensions and variances of the three feature blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub d_inv: usize,
    pub d_spu: usize,
    pub d_nui: usize,
    pub var_inv: f64,
    pub var_spu: f64,
    pub var_nui: f64,
    /// Per-dimension nuisance variance is `var_nui / d_nui` when set, `var_nui` otherwise.
    #[serde(default = "default_true")]
    pub nuisance_scaled: bool,
}

fn default_true() -> bool {
    true
}

impl Default for FeatureSpec {
    /// The reference configuration: 5 invariant and 5 spurious dimensions with
    /// variance 0.25, and 3000 nuisance dimensions of unit total variance.
    fn default() -> Self {
        Self {
            d_inv: 5,
            d_spu: 5,
            d_nui: 3000,
            var_inv: 0.25,
            var_spu: 0.25,
            var_nui: 1.0,
            nuisance_scaled: true,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_inv == 0 || self.d_spu == 0 || self.d_nui == 0 {
            return Err(Error::InvalidSpec(format!(
                "all block dimensions must be >= 1 (got {}, {}, {})",
                self.d_inv, self.d_spu, self.d_nui
            )));
        }
        for (name, v) in [
            ("var_inv", self.var_inv),
            ("var_spu", self.var_spu),
            ("var_nui", self.var_nui),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidSpec(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.d_inv + self.d_spu + self.d_nui
    }

    pub fn inv_range(&self) -> std::ops::Range<usize> {
        0..self.d_inv
    }

    pub fn spu_range(&self) -> std::ops::Range<usize> {
        self.d_inv..self.d_inv + self.d_spu
    }

    pub fn nui_range(&self) -> std::ops::Range<usize> {
        self.d_inv + self.d_spu..self.dim()
    }

    /// Standard deviation of a single nuisance coordinate.
    pub fn nuisance_std(&self) -> f64 {
        if self.nuisance_scaled {
            (self.var_nui / self.d_nui as f64).sqrt()
        } else {
            self.var_nui.sqrt()
        }
    }

    /// Short identity string stored alongside saved models.
    pub fn fingerprint(&self) -> String {
        format!(
            "inv{}:spu{}:nui{}:v{}/{}/{}:{}",
            self.d_inv,
            self.d_spu,
            self.d_nui,
            self.var_inv,
            self.var_spu,
            self.var_nui,
            if self.nuisance_scaled { "scaled" } else { "unscaled" }
        )
    }
}

/// One training environment: sample size, spurious correlation and noise rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub n: usize,
    pub gamma: f64,
    pub eta: f64,
    pub env_id: String,
}

impl EnvironmentSpec {
    pub fn new(n: usize, gamma: f64, eta: f64, env_id: impl Into<String>) -> Self {
        Self {
            n,
            gamma,
            eta,
            env_id: env_id.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::InvalidEnvironment(format!(
                "n = {} cannot populate four groups (need n >= 4)",
                self.n
            )));
        }
        validate_train_gamma(self.gamma)?;
        validate_eta(self.eta)
    }
}

pub(crate) fn validate_train_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.5 && gamma <= 1.0) {
        return Err(Error::InvalidEnvironment(format!(
            "gamma must lie in (0.5, 1], got {gamma}"
        )));
    }
    Ok(())
}

pub(crate) fn validate_eta(eta: f64) -> Result<()> {
    if !(0.0..0.5).contains(&eta) {
        return Err(Error::InvalidEnvironment(format!(
            "eta must lie in [0, 0.5), got {eta}"
        )));
    }
    Ok(())
}

/// A `(clean label, spurious attribute)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// y = -1, a = -1
    G1,
    /// y = -1, a = +1
    G2,
    /// y = +1, a = -1
    G3,
    /// y = +1, a = +1
    G4,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::G1, Group::G2, Group::G3, Group::G4];

    pub fn from_label_attr(label: f64, attr: f64) -> Group {
        match (label > 0.0, attr > 0.0) {
            (false, false) => Group::G1,
            (false, true) => Group::G2,
            (true, false) => Group::G3,
            (true, true) => Group::G4,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> f64 {
        match self {
            Group::G1 | Group::G2 => -1.0,
            Group::G3 | Group::G4 => 1.0,
        }
    }

    pub fn attribute(self) -> f64 {
        match self {
            Group::G1 | Group::G3 => -1.0,
            Group::G2 | Group::G4 => 1.0,
        }
    }

    /// Attribute disagrees with the label.
    pub fn is_minority(self) -> bool {
        matches!(self, Group::G2 | Group::G3)
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::G1 => "g1",
            Group::G2 => "g2",
            Group::G3 => "g3",
            Group::G4 => "g4",
        }
    }
}

/// Round half to even, treating values within 1e-9 of a half as exact ties
/// so that e.g. `0.9 * 10 / 2` resolves as the tie it represents.
fn round_half_even(x: f64) -> f64 {
    let floor = x.floor();
    if (x - floor - 0.5).abs() < 1e-9 {
        if floor.rem_euclid(2.0) == 0.0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        x.round()
    }
}

/// Group sizes `(g1, g2, g3, g4)` for `n` samples at correlation `gamma`.
///
/// `g1 = g4 = round(γn/2)` with ties to even (capped at `n/2`); the remainder
/// is split between `g2` and `g3`, an odd leftover unit going to `g2`.
pub fn group_counts(n: usize, gamma: f64) -> Result<[usize; 4]> {
    if n < 4 {
        return Err(Error::InvalidEnvironment(format!("n = {n} < 4")));
    }
    validate_train_gamma(gamma)?;
    Ok(allocate_groups(n, gamma))
}

/// Allocation without the training-range check on `gamma`; test sets use
/// `gamma <= 0.5` (balanced or reversed correlation).
pub(crate) fn allocate_groups(n: usize, gamma: f64) -> [usize; 4] {
    let majority = (round_half_even(gamma * n as f64 / 2.0).max(0.0) as usize).min(n / 2);
    let rest = n - 2 * majority;
    let g3 = rest / 2;
    let g2 = rest - g3;
    [majority, g2, g3, majority]
}

/// Blocked feature matrix with clean and noisy labels and group metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `n × d`, columns ordered `[inv | spu | nui]` (unless projected).
    pub features: Array2<f64>,
    pub clean_labels: Array1<f64>,
    /// Observed labels after noise injection.
    pub labels: Array1<f64>,
    pub noise_mask: Vec<bool>,
    pub group_ids: Vec<Group>,
    pub env_id: String,
    pub spec: FeatureSpec,
    pub gamma: f64,
    pub eta: f64,
    pub seed: u64,
    /// Seed of the orthogonal projection applied to the features, if any.
    pub projection_seed: Option<u64>,
}

impl LabeledDataset {
    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_projected(&self) -> bool {
        self.projection_seed.is_some()
    }

    pub fn group_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for g in &self.group_ids {
            counts[g.index()] += 1;
        }
        counts
    }

    pub fn group_indices(&self, group: Group) -> Vec<usize> {
        self.group_ids
            .iter()
            .enumerate()
            .filter_map(|(i, g)| (*g == group).then_some(i))
            .collect()
    }

    pub fn flipped_indices(&self) -> Vec<usize> {
        self.noise_mask
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.then_some(i))
            .collect()
    }

    /// Rows `idx` as a new dataset with the same metadata.
    pub fn select(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select(ndarray::Axis(0), idx),
            clean_labels: self.clean_labels.select(ndarray::Axis(0), idx),
            labels: self.labels.select(ndarray::Axis(0), idx),
            noise_mask: idx.iter().map(|&i| self.noise_mask[i]).collect(),
            group_ids: idx.iter().map(|&i| self.group_ids[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> LabeledDataset {
        LabeledDataset {
            features: Array2::zeros((0, 0)),
            clean_labels: Array1::zeros(0),
            labels: Array1::zeros(0),
            noise_mask: Vec::new(),
            group_ids: Vec::new(),
            env_id: self.env_id.clone(),
            spec: self.spec,
            gamma: self.gamma,
            eta: self.eta,
            seed: self.seed,
            projection_seed: self.projection_seed,
        }
    }

    pub fn noise_fraction(&self) -> f64 {
        self.noise_mask.iter().filter(|f| **f).count() as f64 / self.n() as f64
    }

    /// Checks the structural invariants tying labels, mask and groups together.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        for (len, what) in [
            (self.clean_labels.len(), "clean_labels"),
            (self.labels.len(), "labels"),
            (self.noise_mask.len(), "noise_mask"),
            (self.group_ids.len(), "group_ids"),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: len,
                    context: what,
                });
            }
        }
        if self.dim() != self.spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.dim(),
                got: self.dim(),
                context: "feature columns",
            });
        }
        for i in 0..n {
            let (c, y) = (self.clean_labels[i], self.labels[i]);
            if c.abs() != 1.0 || y.abs() != 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "labels must be +-1 (row {i}: clean {c}, observed {y})"
                )));
            }
            if self.noise_mask[i] != (c != y) {
                return Err(Error::InvalidArgument(format!(
                    "noise mask disagrees with labels at row {i}"
                )));
            }
            if self.group_ids[i].label() != c {
                return Err(Error::InvalidArgument(format!(
                    "group {} inconsistent with clean label {c} at row {i}",
                    self.group_ids[i].name()
                )));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(())
    }
}

/// Mixes a base seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Flips each label independently with probability `eta`.
///
/// Returns the noisy labels and the flip mask. The uniform draw for sample
/// `i` does not depend on `eta`, so for a fixed seed the flip sets are nested
/// in `eta`.
pub fn inject_label_noise(labels: &Array1<f64>, eta: f64, seed: u64) -> Result<(Array1<f64>, Vec<bool>)> {
    validate_eta(eta)?;
    let mut rng = stream_rng(seed, NOISE_STREAM);
    let mut noisy = labels.clone();
    let mut mask = vec![false; labels.len()];
    for (i, y) in noisy.iter_mut().enumerate() {
        let u: f64 = rng.random();
        if u < eta {
            *y = -*y;
            mask[i] = true;
        }
    }
    Ok((noisy, mask))
}

/// Samples one training environment (noise included).
pub fn sample_environment(spec: &FeatureSpec, env: &EnvironmentSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    env.validate()?;
    sample_with_allocation(spec, env.n, env.gamma, env.eta, &env.env_id, seed)
}

/// Samples a noise-free evaluation set. Unlike training environments, any
/// `gamma` in `[0, 1]` is allowed: `0.5` gives a group-balanced set, values
/// below `0.5` reverse the spurious correlation.
pub fn sample_test_environment(
    spec: &FeatureSpec,
    n: usize,
    gamma: f64,
    env_id: &str,
    seed: u64,
) -> Result<LabeledDataset> {
    spec.validate()?;
    if n < 4 {
        return Err(Error::InvalidEnvironment(format!("n = {n} < 4")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidEnvironment(format!(
            "test gamma must lie in [0, 1], got {gamma}"
        )));
    }
    sample_with_allocation(spec, n, gamma, 0.0, env_id, seed)
}

fn sample_with_allocation(
    spec: &FeatureSpec,
    n: usize,
    gamma: f64,
    eta: f64,
    env_id: &str,
    seed: u64,
) -> Result<LabeledDataset> {
    let counts = allocate_groups(n, gamma);
    let group_ids: Vec<Group> = Group::ALL
        .iter()
        .zip(counts)
        .flat_map(|(g, c)| std::iter::repeat_n(*g, c))
        .collect();
    let clean_labels: Array1<f64> = group_ids.iter().map(|g| g.label()).collect();

    let d = spec.dim();
    let (sd_inv, sd_spu, sd_nui) = (spec.var_inv.sqrt(), spec.var_spu.sqrt(), spec.nuisance_std());
    let mut rng = stream_rng(seed, FEATURE_STREAM);
    let mut features = Array2::<f64>::zeros((n, d));
    for (i, g) in group_ids.iter().enumerate() {
        let (y, a) = (g.label(), g.attribute());
        let mut row = features.row_mut(i);
        for v in row.slice_mut(s![spec.inv_range()]).iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = y + sd_inv * z;
        }
        for v in row.slice_mut(s![spec.spu_range()]).iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = a + sd_spu * z;
        }
        for v in row.slice_mut(s![spec.nui_range()]).iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = sd_nui * z;
        }
    }

    let (labels, noise_mask) = inject_label_noise(&clean_labels, eta, seed)?;
    Ok(LabeledDataset {
        features,
        clean_labels,
        labels,
        noise_mask,
        group_ids,
        env_id: env_id.to_string(),
        spec: *spec,
        gamma,
        eta,
        seed,
        projection_seed: None,
    })
}

/// Tabular stand-in for the two-color digit benchmark: one noisy training
/// environment per entry of `gammas` plus a noise-free test environment at
/// `gamma_test` (which may reverse the correlation).
///
/// Environment ids are `train_0, train_1, ...` and `test`; the test set is
/// last in the returned list.
pub fn make_cmnist_analogue(
    spec: &FeatureSpec,
    n_per_env: usize,
    gammas: &[f64],
    gamma_test: f64,
    eta: f64,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    if gammas.is_empty() {
        return Err(Error::Empty("training environment gammas"));
    }
    let mut out = Vec::with_capacity(gammas.len() + 1);
    for (k, &gamma) in gammas.iter().enumerate() {
        let env = EnvironmentSpec::new(n_per_env, gamma, eta, format!("train_{k}"));
        out.push(sample_environment(spec, &env, derive_seed(seed, k as u64))?);
    }
    out.push(sample_test_environment(
        spec,
        n_per_env,
        gamma_test,
        "test",
        derive_seed(seed, 1_000),
    )?);
    Ok(out)
}
