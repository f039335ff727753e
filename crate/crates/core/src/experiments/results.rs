use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, TEST_SET_CONVENTION};
use crate::error::{Error, Result};

/// One (grid point, seed, objective) run. Columns that do not apply to an
/// experiment are left empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub experiment: String,
    pub grid_param: String,
    pub grid_value: f64,
    pub seed: u64,
    pub objective: String,
    pub err_g1: Option<f64>,
    pub err_g2: Option<f64>,
    pub err_g3: Option<f64>,
    pub err_g4: Option<f64>,
    pub wg_err: Option<f64>,
    pub avg_err: Option<f64>,
    pub majority_err: Option<f64>,
    pub minority_err: Option<f64>,
    pub test_acc: Option<f64>,
    pub norm_inv: Option<f64>,
    pub norm_spu: Option<f64>,
    pub norm_nui: Option<f64>,
    pub norm_total: Option<f64>,
    /// `|w_spu| / |w_inv|` of the trained model; the boundary tilt in 2-D.
    pub spu_inv_ratio: Option<f64>,
    pub memo_acc: Option<f64>,
    pub train_err: Option<f64>,
    pub gap_lhs: Option<f64>,
    pub gap_rhs: Option<f64>,
    pub memo_cost_c: Option<f64>,
    pub condition_holds: Option<bool>,
    pub n_tilde_inv: Option<f64>,
    pub n_tilde_spu: Option<f64>,
    pub norm_w_inv_model: Option<f64>,
    pub norm_w_spu_model: Option<f64>,
    pub full_norm_order_holds: Option<bool>,
    pub proj_wg_err: Option<f64>,
    pub paired_wg_abs_diff: Option<f64>,
}

fn flag(b: Option<bool>) -> Option<f64> {
    b.map(|b| if b { 1.0 } else { 0.0 })
}

impl SweepRow {
    pub fn keyed(experiment: &str, grid_param: &str, grid_value: f64, seed: u64, objective: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            grid_param: grid_param.to_string(),
            grid_value,
            seed,
            objective: objective.to_string(),
            ..Self::default()
        }
    }

    /// Numeric columns in output order; flags are reported as 0/1.
    pub fn metrics(&self) -> [(&'static str, Option<f64>); 27] {
        [
            ("err_g1", self.err_g1),
            ("err_g2", self.err_g2),
            ("err_g3", self.err_g3),
            ("err_g4", self.err_g4),
            ("wg_err", self.wg_err),
            ("avg_err", self.avg_err),
            ("majority_err", self.majority_err),
            ("minority_err", self.minority_err),
            ("test_acc", self.test_acc),
            ("norm_inv", self.norm_inv),
            ("norm_spu", self.norm_spu),
            ("norm_nui", self.norm_nui),
            ("norm_total", self.norm_total),
            ("spu_inv_ratio", self.spu_inv_ratio),
            ("memo_acc", self.memo_acc),
            ("train_err", self.train_err),
            ("gap_lhs", self.gap_lhs),
            ("gap_rhs", self.gap_rhs),
            ("memo_cost_c", self.memo_cost_c),
            ("condition_holds", flag(self.condition_holds)),
            ("n_tilde_inv", self.n_tilde_inv),
            ("n_tilde_spu", self.n_tilde_spu),
            ("norm_w_inv_model", self.norm_w_inv_model),
            ("norm_w_spu_model", self.norm_w_spu_model),
            ("full_norm_order_holds", flag(self.full_norm_order_holds)),
            ("proj_wg_err", self.proj_wg_err),
            ("paired_wg_abs_diff", self.paired_wg_abs_diff),
        ]
    }
}

/// Mean and standard error of one metric over the seeds of a grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub grid_param: String,
    pub grid_value: f64,
    pub objective: String,
    pub metric: String,
    pub n_seeds: usize,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n_seeds)`; zero for one seed.
    pub stderr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl SweepResult {
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Empty("sweep rows"));
        }
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_raw(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Rows matching a grid value and objective label.
    pub fn select(&self, grid_value: f64, objective: &str) -> Vec<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.grid_value == grid_value && r.objective == objective)
            .collect()
    }

    /// Mean of one metric over the rows matching a grid value and objective.
    pub fn mean_of(&self, grid_value: f64, objective: &str, metric: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .select(grid_value, objective)
            .iter()
            .filter_map(|r| r.metrics().into_iter().find(|(m, _)| *m == metric).and_then(|(_, v)| v))
            .collect();
        (!values.is_empty()).then(|| mean_stderr(&values).0)
    }

    /// Long-format aggregation keyed by (grid point, objective, metric), in
    /// first-appearance order of grid points and objectives. Metrics that are
    /// empty for every seed are omitted.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut order: Vec<(String, u64, String)> = Vec::new();
        let mut groups: BTreeMap<(String, u64, String), Vec<&SweepRow>> = BTreeMap::new();
        for row in &self.rows {
            let key = (row.grid_param.clone(), row.grid_value.to_bits(), row.objective.clone());
            let entry = groups.entry(key.clone()).or_default();
            if entry.is_empty() {
                order.push(key);
            }
            entry.push(row);
        }
        let mut out = Vec::new();
        for key in order {
            let rows = &groups[&key];
            let metric_names = rows[0].metrics().map(|(m, _)| m);
            for (k, metric) in metric_names.iter().enumerate() {
                let values: Vec<f64> = rows.iter().filter_map(|r| r.metrics()[k].1).collect();
                if values.is_empty() {
                    continue;
                }
                let (mean, stderr) = mean_stderr(&values);
                out.push(SummaryRow {
                    grid_param: key.0.clone(),
                    grid_value: f64::from_bits(key.1),
                    objective: key.2.clone(),
                    metric: metric.to_string(),
                    n_seeds: values.len(),
                    mean,
                    stderr,
                });
            }
        }
        out
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in self.summary() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `manifest.json`: the configuration echo, tool version, seeds and the
/// test-set convention. Contains no timestamps so reruns are identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub test_set_convention: String,
    pub files: Vec<String>,
    pub rows: usize,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, rows: usize, files: Vec<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            experiment: config.kind.name().to_string(),
            seeds: config.seeds.clone(),
            test_set_convention: TEST_SET_CONVENTION.to_string(),
            files,
            rows,
            config: config.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
