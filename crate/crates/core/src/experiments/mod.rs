//! Configuration-driven experiments writing `raw.csv`, `summary.csv` and
//! `manifest.json` into an output directory.
//!
//! Every sweep produces one [`SweepRow`] per (grid point, seed, objective).
//! Jobs run on the rayon pool and are collected in job order, so output files
//! are byte-identical across reruns of the same configuration.

mod config;
mod curves;
mod results;
mod sweeps;

pub use config::{
    BoundarySettings, CmnistSettings, CurveSettings, ExperimentConfig, ExperimentKind, MemoSettings,
    TEST_SET_CONVENTION,
};
pub use curves::{
    run_boundary_export, run_coefficient_curves, BoundaryExport, CurveRow, CurveTable, GridRow, PointRow, SignChange,
};
pub use results::{Manifest, SummaryRow, SweepResult, SweepRow};
pub use sweeps::{
    build_datasets, estimate_memo_cost, evaluate_run, run_cmnist_analogue, run_config, run_ndata_sweep,
    run_noise_sweep, run_norm_sweep, run_projection_check,
};

use std::path::Path;

use crate::error::Result;

/// Runs the experiment named by `config.kind` and writes its files to `out`.
pub fn run_and_write(config: &ExperimentConfig, out: &Path) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let mut files = vec!["raw.csv".to_string()];
    match config.kind {
        ExperimentKind::CoefficientCurves => {
            let table = run_coefficient_curves(config)?;
            table.write_raw(&out.join("raw.csv"))?;
            table.write_sign_changes(&out.join("sign_changes.csv"))?;
            files.push("sign_changes.csv".into());
            return Manifest::new(config, table.rows.len(), files).write(&out.join("manifest.json"));
        }
        ExperimentKind::BoundaryExport => {
            let export = run_boundary_export(config)?;
            export.result.write_raw(&out.join("raw.csv"))?;
            export.result.write_summary(&out.join("summary.csv"))?;
            export.write_grid(&out.join("boundary_grid.csv"))?;
            export.write_points(&out.join("boundary_points.csv"))?;
            files.extend(["summary.csv", "boundary_grid.csv", "boundary_points.csv"].map(String::from));
            return Manifest::new(config, export.result.rows.len(), files).write(&out.join("manifest.json"));
        }
        _ => {}
    }
    let result = match config.kind {
        ExperimentKind::NoiseSweep => run_noise_sweep(config)?,
        ExperimentKind::NdataSweep => run_ndata_sweep(config)?,
        ExperimentKind::NormSweep => run_norm_sweep(config)?,
        ExperimentKind::CmnistAnalogue => run_cmnist_analogue(config)?,
        ExperimentKind::ProjectionCheck => run_projection_check(config)?,
        ExperimentKind::CoefficientCurves | ExperimentKind::BoundaryExport => unreachable!("handled above"),
    };
    result.write_raw(&out.join("raw.csv"))?;
    result.write_summary(&out.join("summary.csv"))?;
    files.push("summary.csv".into());
    Manifest::new(config, result.rows.len(), files).write(&out.join("manifest.json"))
}
