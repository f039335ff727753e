use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use super::results::{SweepResult, SweepRow};
use super::sweeps::{build_datasets, evaluate_run, run_config};
use crate::error::{Error, Result};
use crate::model::{sigmoid, BlockedLinearModel};
use crate::objectives::{irm_coefficient, irm_sign_changes};
use crate::trainer::train;

const ROOT_SCAN_STEPS: usize = 100_000;
const ROOT_TOL: f64 = 1e-12;

/// One point of an IRMv1 coefficient curve `α(φ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub lambda: f64,
    pub y: u8,
    pub phi: f64,
    pub alpha: f64,
    pub negative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignChange {
    pub lambda: f64,
    pub y: u8,
    pub phi: f64,
    /// Sign of `α` just right of the root: -1 entering a negative region.
    pub direction: i8,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub rows: Vec<CurveRow>,
    pub sign_changes: Vec<SignChange>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl CurveTable {
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }

    pub fn write_sign_changes(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.sign_changes)
    }

    /// Minimum of the tabulated curve for one `(λ, y)`.
    pub fn minimum(&self, lambda: f64, y: u8) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.lambda == lambda && r.y == y)
            .map(|r| r.alpha)
            .reduce(f64::min)
    }
}

/// Tabulates `α(φ)` over the configured `φ` range for every `λ` of the grid
/// and `y ∈ {0, 1}`, and locates its sign changes by scan and bisection.
pub fn run_coefficient_curves(config: &ExperimentConfig) -> Result<CurveTable> {
    if config.kind != ExperimentKind::CoefficientCurves {
        return Err(Error::Config(format!(
            "expected coefficient_curves, got {}",
            config.kind.name()
        )));
    }
    config.validate()?;
    let c = &config.curves;
    let step = (c.phi_max - c.phi_min) / (c.points - 1) as f64;
    let mut table = CurveTable::default();
    for &lambda in &config.lambda_grid {
        for y in [0u8, 1] {
            let y01 = y as f64;
            for k in 0..c.points {
                let phi = if k + 1 == c.points {
                    c.phi_max
                } else {
                    c.phi_min + step * k as f64
                };
                let alpha = irm_coefficient(phi, y01, lambda);
                table.rows.push(CurveRow {
                    lambda,
                    y,
                    phi,
                    alpha,
                    negative: alpha < 0.0,
                });
            }
            for phi in irm_sign_changes(y01, lambda, c.phi_min, c.phi_max, ROOT_SCAN_STEPS, ROOT_TOL) {
                let right = irm_coefficient(phi + 1e-9, y01, lambda);
                table.sign_changes.push(SignChange {
                    lambda,
                    y,
                    phi,
                    direction: if right < 0.0 { -1 } else { 1 },
                });
            }
        }
    }
    Ok(table)
}

/// Prediction of one model at a point of the `(x_inv, x_spu)` plane with
/// nuisance coordinates at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub eta: f64,
    pub seed: u64,
    pub objective: String,
    pub x_inv: f64,
    pub x_spu: f64,
    pub logit: f64,
    pub prob: f64,
    pub pred: i8,
}

/// A training point projected to the `(x_inv, x_spu)` plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub eta: f64,
    pub seed: u64,
    pub index: usize,
    pub x_inv: f64,
    pub x_spu: f64,
    pub clean_label: i8,
    pub label: i8,
    pub group: String,
    pub minority: bool,
    pub flipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryExport {
    pub result: SweepResult,
    pub grid: Vec<GridRow>,
    pub points: Vec<PointRow>,
}

impl BoundaryExport {
    pub fn write_grid(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.grid)
    }

    pub fn write_points(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.points)
    }
}

fn grid_rows(
    config: &ExperimentConfig,
    eta: f64,
    seed: u64,
    objective: &str,
    model: &BlockedLinearModel,
) -> Vec<GridRow> {
    let b = &config.boundary;
    let (lo, hi) = (b.range[0], b.range[1]);
    let h = (hi - lo) / (b.grid_size - 1) as f64;
    let coord = |k: usize| if k + 1 == b.grid_size { hi } else { lo + h * k as f64 };
    let (wi, ws) = (model.w_inv()[0], model.w_spu()[0]);
    let mut rows = Vec::with_capacity(b.grid_size * b.grid_size);
    for i in 0..b.grid_size {
        for j in 0..b.grid_size {
            let (x_inv, x_spu) = (coord(i), coord(j));
            let logit = wi * x_inv + ws * x_spu;
            rows.push(GridRow {
                eta,
                seed,
                objective: objective.to_string(),
                x_inv,
                x_spu,
                logit,
                prob: sigmoid(logit),
                pred: if logit > 0.0 { 1 } else { -1 },
            });
        }
    }
    rows
}

/// Trains on the two-dimensional-signal setting (`d_inv = d_spu = 1`) at
/// every `eta` and exports the decision boundary on the `(x_inv, x_spu)`
/// plane with nuisance coordinates fixed at zero, plus the training points.
pub fn run_boundary_export(config: &ExperimentConfig) -> Result<BoundaryExport> {
    if config.kind != ExperimentKind::BoundaryExport {
        return Err(Error::Config(format!(
            "expected boundary_export, got {}",
            config.kind.name()
        )));
    }
    config.validate()?;
    let jobs: Vec<(f64, u64)> = config
        .eta_grid
        .iter()
        .flat_map(|&e| config.seeds.iter().map(move |&s| (e, s)))
        .collect();
    let parts: Vec<Result<BoundaryExport>> = jobs
        .par_iter()
        .map(|&(eta, seed)| boundary_job(config, eta, seed).map_err(|e| e.at(format!("grid value {eta}, seed {seed}"))))
        .collect();
    let mut out = BoundaryExport::default();
    for part in parts {
        let part = part?;
        out.result.rows.extend(part.result.rows);
        out.grid.extend(part.grid);
        out.points.extend(part.points);
    }
    Ok(out)
}

fn boundary_job(config: &ExperimentConfig, eta: f64, seed: u64) -> Result<BoundaryExport> {
    let (train_set, test_set) = build_datasets(config, config.n, eta, seed)?;
    let (inv, spu) = (config.spec.inv_range().start, config.spec.spu_range().start);
    let mut part = BoundaryExport::default();
    for (i, g) in train_set.group_ids.iter().enumerate() {
        part.points.push(PointRow {
            eta,
            seed,
            index: i,
            x_inv: train_set.features[[i, inv]],
            x_spu: train_set.features[[i, spu]],
            clean_label: train_set.clean_labels[i] as i8,
            label: train_set.labels[i] as i8,
            group: g.name().to_string(),
            minority: g.is_minority(),
            flipped: train_set.noise_mask[i],
        });
    }
    for obj in &config.objectives {
        let (model, _) = train(std::slice::from_ref(&train_set), obj, &run_config(config, seed))?;
        let label = obj.label();
        let row = SweepRow::keyed(config.kind.name(), "eta", eta, seed, &label);
        part.result
            .rows
            .push(evaluate_run(row, &model, std::slice::from_ref(&train_set), &test_set)?);
        part.grid.extend(grid_rows(config, eta, seed, &label, &model));
    }
    Ok(part)
}
