use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{validate_eta, validate_train_gamma, FeatureSpec};
use crate::error::{Error, Result};
use crate::model::BlockMask;
use crate::objectives::ObjectiveConfig;
use crate::trainer::TrainConfig;

/// Recorded in every manifest.
pub const TEST_SET_CONVENTION: &str = "test sets are noise-free; subpopulation sweeps use a group-balanced \
test set (gamma_test = 0.5), the two-environment analogue uses the reversed-correlation test environment";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    NoiseSweep,
    NdataSweep,
    NormSweep,
    BoundaryExport,
    CoefficientCurves,
    CmnistAnalogue,
    ProjectionCheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::NoiseSweep => "noise_sweep",
            ExperimentKind::NdataSweep => "ndata_sweep",
            ExperimentKind::NormSweep => "norm_sweep",
            ExperimentKind::BoundaryExport => "boundary_export",
            ExperimentKind::CoefficientCurves => "coefficient_curves",
            ExperimentKind::CmnistAnalogue => "cmnist_analogue",
            ExperimentKind::ProjectionCheck => "projection_check",
        }
    }

    /// Name of the swept parameter.
    pub fn grid_param(self) -> &'static str {
        match self {
            ExperimentKind::NdataSweep => "n",
            ExperimentKind::CoefficientCurves => "lambda",
            _ => "eta",
        }
    }
}

/// Memorization-cost estimation used by the norm sweep and `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoSettings {
    pub k_values: Vec<usize>,
    pub trials: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for MemoSettings {
    fn default() -> Self {
        Self {
            k_values: vec![5, 10, 20, 40],
            trials: 10,
            train: TrainConfig {
                learning_rate: 1.0,
                steps: 500,
                l2_reg: 0.0,
                block_mask: BlockMask::NUISANCE,
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

/// Two (or more) training environments and a shifted test environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmnistSettings {
    pub env_gammas: Vec<f64>,
    pub gamma_test: f64,
    pub n_per_env: usize,
}

impl Default for CmnistSettings {
    fn default() -> Self {
        Self {
            env_gammas: vec![0.9, 0.8],
            gamma_test: 0.1,
            n_per_env: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundarySettings {
    /// Points per axis of the `(x_inv, x_spu)` grid.
    pub grid_size: usize,
    pub range: [f64; 2],
}

impl Default for BoundarySettings {
    fn default() -> Self {
        Self {
            grid_size: 61,
            range: [-3.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSettings {
    pub phi_min: f64,
    pub phi_max: f64,
    pub points: usize,
}

impl Default for CurveSettings {
    fn default() -> Self {
        Self {
            phi_min: 0.0,
            phi_max: 8.0,
            points: 801,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub spec: FeatureSpec,
    /// Spurious correlation of the (single) training environment.
    pub gamma: f64,
    /// Training-set size where `n` is not swept.
    pub n: usize,
    /// Noise rate where `eta` is not swept.
    pub eta: f64,
    pub eta_grid: Vec<f64>,
    pub n_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    pub objectives: Vec<ObjectiveConfig>,
    pub train: TrainConfig,
    /// Training of the restricted classifiers in the norm sweep.
    pub restricted_train: TrainConfig,
    pub memo: MemoSettings,
    pub seeds: Vec<u64>,
    pub n_test: usize,
    pub gamma_test: f64,
    pub cmnist: CmnistSettings,
    pub boundary: BoundarySettings,
    pub curves: CurveSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::NoiseSweep,
            spec: FeatureSpec::default(),
            gamma: 0.99,
            n: 1000,
            eta: 0.0,
            eta_grid: vec![0.0, 0.1, 0.2, 0.3],
            n_grid: vec![500, 1000, 2000, 4000],
            lambda_grid: vec![1.0, 10.0, 100.0, 1000.0],
            objectives: vec![ObjectiveConfig::erm()],
            train: TrainConfig::default(),
            restricted_train: TrainConfig {
                learning_rate: 1.0,
                steps: 5000,
                l2_reg: 1e-6,
                ..TrainConfig::default()
            },
            memo: MemoSettings::default(),
            seeds: vec![0, 1, 2, 3, 4],
            n_test: 2000,
            gamma_test: 0.5,
            cmnist: CmnistSettings::default(),
            boundary: BoundarySettings::default(),
            curves: CurveSettings::default(),
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        for s in &mut self.seeds {
            *s = s.wrapping_add(offset);
        }
        self.memo.seed = self.memo.seed.wrapping_add(offset);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_inner().map_err(config_err)
    }

    fn validate_inner(&self) -> Result<()> {
        self.spec.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        let distinct: HashSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.objectives.is_empty() {
            return Err(Error::Config("objectives must be nonempty".into()));
        }
        for o in &self.objectives {
            o.validate()?;
        }
        if self.n_test < 4 {
            return Err(Error::Config("n_test must be >= 4".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma_test) {
            return Err(Error::Config(format!(
                "gamma_test must lie in [0, 1], got {}",
                self.gamma_test
            )));
        }
        match self.kind {
            ExperimentKind::NoiseSweep | ExperimentKind::ProjectionCheck | ExperimentKind::NormSweep => {
                self.check_eta_grid()?;
                validate_train_gamma(self.gamma)?;
                if self.n < 4 {
                    return Err(Error::Config("n must be >= 4".into()));
                }
                if self.kind == ExperimentKind::NormSweep {
                    self.restricted_train.validate()?;
                    self.memo.train.validate()?;
                    if self.memo.k_values.is_empty() || self.memo.trials == 0 {
                        return Err(Error::Config("memo k_values and trials must be nonempty".into()));
                    }
                }
            }
            ExperimentKind::NdataSweep => {
                if self.n_grid.is_empty() {
                    return Err(Error::Config("n_grid must be nonempty".into()));
                }
                if self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("n_grid must be strictly ascending".into()));
                }
                if self.n_grid[0] < 4 {
                    return Err(Error::Config("n_grid values must be >= 4".into()));
                }
                validate_train_gamma(self.gamma)?;
                validate_eta(self.eta)?;
            }
            ExperimentKind::BoundaryExport => {
                self.check_eta_grid()?;
                if self.spec.d_inv != 1 || self.spec.d_spu != 1 {
                    return Err(Error::Config(format!(
                        "boundary export needs d_inv = d_spu = 1, got {} and {}",
                        self.spec.d_inv, self.spec.d_spu
                    )));
                }
                // gamma = 0.5 (no spurious correlation) is a meaningful boundary setting
                if !(self.gamma >= 0.5 && self.gamma <= 1.0) {
                    return Err(Error::Config(format!("gamma must lie in [0.5, 1], got {}", self.gamma)));
                }
                if self.boundary.grid_size < 2 || self.boundary.range[0] >= self.boundary.range[1] {
                    return Err(Error::Config(
                        "boundary grid needs >= 2 points and an increasing range".into(),
                    ));
                }
            }
            ExperimentKind::CoefficientCurves => {
                if self.lambda_grid.is_empty() {
                    return Err(Error::Config("lambda_grid must be nonempty".into()));
                }
                if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                    return Err(Error::Config("lambda values must be finite and >= 0".into()));
                }
                let c = &self.curves;
                if c.points < 2 || c.phi_min >= c.phi_max {
                    return Err(Error::Config("curve range must be increasing with >= 2 points".into()));
                }
            }
            ExperimentKind::CmnistAnalogue => {
                self.check_eta_grid()?;
                let c = &self.cmnist;
                if c.env_gammas.is_empty() {
                    return Err(Error::Config("cmnist env_gammas must be nonempty".into()));
                }
                for g in &c.env_gammas {
                    validate_train_gamma(*g)?;
                }
                if !(0.0..=1.0).contains(&c.gamma_test) {
                    return Err(Error::Config(format!(
                        "cmnist gamma_test must lie in [0, 1], got {}",
                        c.gamma_test
                    )));
                }
                if c.n_per_env < 4 {
                    return Err(Error::Config("cmnist n_per_env must be >= 4".into()));
                }
            }
        }
        Ok(())
    }

    fn check_eta_grid(&self) -> Result<()> {
        if self.eta_grid.is_empty() {
            return Err(Error::Config("eta_grid must be nonempty".into()));
        }
        for e in &self.eta_grid {
            validate_eta(*e)?;
        }
        Ok(())
    }
}
