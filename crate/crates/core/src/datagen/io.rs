//! Dataset directories: `features.bin` (little-endian f64, row-major `n × d`)
//! next to a `meta.json` sidecar.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{FeatureSpec, Group, LabeledDataset};
use crate::error::{Error, Result};

pub const COLUMN_ORDER: &str = "inv,spu,nui";
const FEATURES_FILE: &str = "features.bin";
const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: FeatureSpec,
    pub env_id: String,
    pub n: usize,
    pub d: usize,
    pub gamma: f64,
    pub eta: f64,
    pub seed: u64,
    pub projection_seed: Option<u64>,
    pub group_counts: [usize; 4],
    pub column_order: String,
    pub clean_labels: Vec<i8>,
    pub labels: Vec<i8>,
    pub noise_mask: Vec<bool>,
    pub group_ids: Vec<Group>,
}

fn to_pm(v: &Array1<f64>) -> Vec<i8> {
    v.iter().map(|y| if *y > 0.0 { 1 } else { -1 }).collect()
}

pub fn export_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(dataset.features.len() * 8);
    for row in dataset.features.rows() {
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(FEATURES_FILE), bytes)?;
    let meta = DatasetMeta {
        spec: dataset.spec,
        env_id: dataset.env_id.clone(),
        n: dataset.n(),
        d: dataset.dim(),
        gamma: dataset.gamma,
        eta: dataset.eta,
        seed: dataset.seed,
        projection_seed: dataset.projection_seed,
        group_counts: dataset.group_counts(),
        column_order: COLUMN_ORDER.to_string(),
        clean_labels: to_pm(&dataset.clean_labels),
        labels: to_pm(&dataset.labels),
        noise_mask: dataset.noise_mask.clone(),
        group_ids: dataset.group_ids.clone(),
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<LabeledDataset> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
    if meta.column_order != COLUMN_ORDER {
        return Err(Error::InvalidArgument(format!(
            "unsupported column order {:?}",
            meta.column_order
        )));
    }
    let bytes = fs::read(dir.join(FEATURES_FILE))?;
    if bytes.len() != meta.n * meta.d * 8 {
        return Err(Error::DimensionMismatch {
            expected: meta.n * meta.d * 8,
            got: bytes.len(),
            context: "features.bin byte length",
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let features =
        Array2::from_shape_vec((meta.n, meta.d), values).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let ds = LabeledDataset {
        features,
        clean_labels: meta.clean_labels.iter().map(|&y| y as f64).collect(),
        labels: meta.labels.iter().map(|&y| y as f64).collect(),
        noise_mask: meta.noise_mask,
        group_ids: meta.group_ids,
        env_id: meta.env_id,
        spec: meta.spec,
        gamma: meta.gamma,
        eta: meta.eta,
        seed: meta.seed,
        projection_seed: meta.projection_seed,
    };
    ds.validate()?;
    if ds.group_counts() != meta.group_counts {
        return Err(Error::InvalidArgument("group counts disagree with group ids".into()));
    }
    Ok(ds)
}
