//! Random orthogonal rotations of the feature space.

use ndarray::{Array2, Axis};
use ndarray_linalg::QR;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{stream_rng, LabeledDataset, PROJECTION_STREAM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMatrix {
    pub matrix: Array2<f64>,
    pub seed: u64,
}

impl ProjectionMatrix {
    /// Largest entry of `|MᵀM - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let mtm = self.matrix.t().dot(&self.matrix);
        mtm.indexed_iter()
            .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }
}

/// Haar-distributed `d × d` orthogonal matrix: the Q factor of a standard
/// Gaussian matrix, with column signs fixed so that `diag(R) > 0`.
pub fn random_orthogonal(d: usize, seed: u64) -> Result<ProjectionMatrix> {
    if d == 0 {
        return Err(Error::Empty("projection dimension"));
    }
    let mut rng = stream_rng(seed, PROJECTION_STREAM);
    let g: Array2<f64> = Array2::from_shape_simple_fn((d, d), || StandardNormal.sample(&mut rng));
    let (mut q, r) = g.qr()?;
    for (j, mut col) in q.axis_iter_mut(Axis(1)).enumerate() {
        if r[[j, j]] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    Ok(ProjectionMatrix { matrix: q, seed })
}

/// Replaces the features of `dataset` by `X·M` for a fresh random orthogonal `M`.
pub fn apply_random_projection(dataset: &LabeledDataset, seed: u64) -> Result<(LabeledDataset, ProjectionMatrix)> {
    if dataset.n() == 0 {
        return Err(Error::Empty("dataset"));
    }
    let m = random_orthogonal(dataset.dim(), seed)?;
    let projected = project_with(dataset, &m)?;
    Ok((projected, m))
}

/// Applies an existing rotation, so train and test sets can share one `M`.
pub fn project_with(dataset: &LabeledDataset, m: &ProjectionMatrix) -> Result<LabeledDataset> {
    if m.matrix.nrows() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dim(),
            got: m.matrix.nrows(),
            context: "projection matrix rows",
        });
    }
    if dataset.is_projected() {
        return Err(Error::ProjectedDataset);
    }
    Ok(LabeledDataset {
        features: dataset.features.dot(&m.matrix),
        projection_seed: Some(m.seed),
        ..dataset.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_environment, EnvironmentSpec, FeatureSpec};

    fn dataset() -> LabeledDataset {
        let spec = FeatureSpec {
            d_nui: 40,
            ..FeatureSpec::default()
        };
        sample_environment(&spec, &EnvironmentSpec::new(30, 0.9, 0.2, "e"), 4).unwrap()
    }

    #[test]
    fn matrix_is_orthogonal() {
        for seed in 0..3 {
            let m = random_orthogonal(60, seed).unwrap();
            assert!(m.orthogonality_error() < 1e-10);
        }
    }

    #[test]
    fn projection_preserves_row_norms_and_metadata() {
        let ds = dataset();
        let (p, m) = apply_random_projection(&ds, 1).unwrap();
        assert_eq!(m.seed, 1);
        assert!(p.is_projected());
        for (a, b) in ds.features.rows().into_iter().zip(p.features.rows()) {
            assert!((a.dot(&a).sqrt() - b.dot(&b).sqrt()).abs() < 1e-8);
        }
        assert_eq!(p.labels, ds.labels);
        assert_eq!(p.clean_labels, ds.clean_labels);
        assert_eq!(p.noise_mask, ds.noise_mask);
        assert_eq!(p.group_ids, ds.group_ids);
    }

    #[test]
    fn same_seed_same_matrix() {
        assert_eq!(random_orthogonal(10, 5).unwrap(), random_orthogonal(10, 5).unwrap());
        assert_ne!(random_orthogonal(10, 5).unwrap(), random_orthogonal(10, 6).unwrap());
    }

    #[test]
    fn rejects_double_projection_and_bad_shape() {
        let ds = dataset();
        let (p, m) = apply_random_projection(&ds, 1).unwrap();
        assert!(matches!(project_with(&p, &m), Err(Error::ProjectedDataset)));
        let small = random_orthogonal(3, 0).unwrap();
        assert!(project_with(&ds, &small).is_err());
    }
}
