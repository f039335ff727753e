//! Library-level pipeline checks: dataset round trips, projections, sweep
//! outputs and their summaries.

use noisedg::analysis::{gap_rhs, memorization_counts};
use noisedg::datagen::{
    apply_random_projection, derive_seed, export_dataset, import_dataset, sample_environment, EnvironmentSpec,
    FeatureSpec,
};
use noisedg::experiments::{
    run_boundary_export, run_coefficient_curves, run_noise_sweep, run_norm_sweep, ExperimentConfig, ExperimentKind,
    SweepResult,
};
use noisedg::objectives::{irm_coefficient, irm_sign_changes};
use noisedg::trainer::TrainConfig;

fn spec(d_inv: usize, d_spu: usize, d_nui: usize) -> FeatureSpec {
    FeatureSpec {
        d_inv,
        d_spu,
        d_nui,
        var_inv: 0.25,
        var_spu: 0.25,
        var_nui: 1.0,
        nuisance_scaled: true,
    }
}

fn small(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig {
        kind,
        spec: spec(2, 2, 60),
        n: 60,
        n_test: 80,
        eta_grid: vec![0.0, 0.2],
        seeds: vec![0, 1, 2],
        train: TrainConfig {
            learning_rate: 0.5,
            steps: 40,
            l2_reg: 1e-4,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn dataset_round_trip_is_exact() {
    let env = EnvironmentSpec::new(37, 0.9, 0.2, "train");
    let ds = sample_environment(&spec(3, 2, 11), &env, 17).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&ds, dir.path()).unwrap();
    assert_eq!(import_dataset(dir.path()).unwrap(), ds);

    let (projected, _) = apply_random_projection(&ds, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&projected, dir.path()).unwrap();
    assert_eq!(import_dataset(dir.path()).unwrap(), projected);
}

#[test]
fn projection_keeps_metadata_and_row_norms() {
    let env = EnvironmentSpec::new(50, 0.95, 0.1, "train");
    let ds = sample_environment(&spec(2, 2, 30), &env, derive_seed(3, 0)).unwrap();
    let (p, m) = apply_random_projection(&ds, 9).unwrap();
    assert!(m.orthogonality_error() < 1e-10);
    assert_eq!(p.labels, ds.labels);
    assert_eq!(p.clean_labels, ds.clean_labels);
    assert_eq!(p.noise_mask, ds.noise_mask);
    assert_eq!(p.group_ids, ds.group_ids);
    assert_eq!(p.projection_seed, Some(9));
    for (a, b) in ds.features.rows().into_iter().zip(p.features.rows()) {
        let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
        assert!((na - nb).abs() <= 1e-10 * na.max(1.0));
    }
}

#[test]
fn raw_csv_round_trip_and_summary_recomputation() {
    let result = run_noise_sweep(&small(ExperimentKind::NoiseSweep)).unwrap();
    assert_eq!(result.rows.len(), 2 * 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("raw.csv");
    result.write_raw(&path).unwrap();
    let back = SweepResult::read_raw(&path).unwrap();
    assert_eq!(back, result);

    for s in result.summary() {
        let values: Vec<f64> = result
            .select(s.grid_value, &s.objective)
            .iter()
            .filter_map(|r| r.metrics().iter().find(|(m, _)| *m == s.metric).unwrap().1)
            .collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert_eq!(s.n_seeds, values.len());
        assert!((s.mean - mean).abs() <= 1e-12, "{} mean", s.metric);
        assert!((s.stderr - sd / n.sqrt()).abs() <= 1e-12, "{} stderr", s.metric);
    }
}

#[test]
fn sweep_rows_are_complete() {
    let result = run_noise_sweep(&small(ExperimentKind::NoiseSweep)).unwrap();
    for row in &result.rows {
        let groups = [row.err_g1, row.err_g2, row.err_g3, row.err_g4].map(Option::unwrap);
        let wg = groups.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(row.wg_err, Some(wg));
        assert!((row.test_acc.unwrap() - (1.0 - row.avg_err.unwrap())).abs() < 1e-12);
        assert!(row.norm_total.unwrap() >= row.norm_nui.unwrap());
        assert_eq!(row.grid_param, "eta");
    }
    // memorization accuracy is undefined without flipped points
    assert!(result
        .select(0.0, "erm")
        .iter()
        .all(|r| r.memo_acc.is_none_or(f64::is_nan)));
}

#[test]
fn norm_sweep_right_hand_side_recomputes() {
    let mut config = small(ExperimentKind::NormSweep);
    config.seeds = vec![0];
    config.restricted_train.steps = 200;
    config.memo.k_values = vec![2, 4, 8];
    config.memo.trials = 2;
    let result = run_norm_sweep(&config).unwrap();
    for row in &result.rows {
        let c = row.memo_cost_c.unwrap();
        let rhs = gap_rhs(config.n, config.gamma, row.grid_value, c);
        assert!((row.gap_rhs.unwrap() - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
        let (ni, ns) = memorization_counts(config.n, config.gamma, row.grid_value).unwrap();
        assert_eq!((row.n_tilde_inv, row.n_tilde_spu), (Some(ni), Some(ns)));
        let holds = row.gap_lhs.unwrap() >= row.gap_rhs.unwrap();
        assert_eq!(row.condition_holds, Some(holds));
    }
}

#[test]
fn boundary_is_upright_when_nearly_balanced_and_tilts_with_noise() {
    let mut config = ExperimentConfig {
        kind: ExperimentKind::BoundaryExport,
        spec: FeatureSpec {
            var_inv: 0.1,
            var_spu: 0.1,
            ..spec(1, 1, 400)
        },
        n: 200,
        n_test: 200,
        gamma: 0.51,
        eta_grid: vec![0.0],
        seeds: vec![0],
        train: TrainConfig {
            learning_rate: 0.5,
            steps: 500,
            l2_reg: 0.0,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let balanced = run_boundary_export(&config).unwrap();
    let ratio = balanced.result.rows[0].spu_inv_ratio.unwrap();
    assert!(ratio < 0.2, "nearly balanced data ratio {ratio}");
    assert_eq!(balanced.grid.len(), 61 * 61);
    assert_eq!(balanced.points.len(), 200);

    config.gamma = 0.99;
    config.eta_grid = vec![0.0, 0.3];
    let skewed = run_boundary_export(&config).unwrap();
    let clean = skewed.result.select(0.0, "erm")[0].spu_inv_ratio.unwrap();
    let noisy = skewed.result.select(0.3, "erm")[0].spu_inv_ratio.unwrap();
    assert!(noisy > clean, "ratio {clean} at eta 0, {noisy} at eta 0.3");
    let flipped = skewed.points.iter().filter(|p| p.eta == 0.3 && p.flipped).count();
    assert!(flipped > 0);
}

#[test]
fn curve_roots_match_independent_bisection() {
    let config = ExperimentConfig {
        kind: ExperimentKind::CoefficientCurves,
        lambda_grid: vec![1.0, 10.0, 100.0],
        ..ExperimentConfig::default()
    };
    let table = run_coefficient_curves(&config).unwrap();
    let points = config.curves.points;
    assert_eq!(table.rows.len(), 3 * 2 * points);
    for change in &table.sign_changes {
        let y01 = change.y as f64;
        let f = |phi: f64| irm_coefficient(phi, y01, change.lambda);
        // bisect independently inside a bracket around the reported root
        let (mut lo, mut hi) = (change.phi - 0.05, change.phi + 0.05);
        assert!((f(lo) < 0.0) != (f(hi) < 0.0));
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) < 0.0) == (f(lo) < 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((change.phi - lo).abs() < 1e-6, "root {} vs {lo}", change.phi);
        let right = f(change.phi + 1e-6);
        assert_eq!(change.direction, if right < 0.0 { -1 } else { 1 });
    }
    let expected = irm_sign_changes(1.0, 100.0, config.curves.phi_min, config.curves.phi_max, 10_000, 1e-12);
    let found: Vec<f64> = table
        .sign_changes
        .iter()
        .filter(|c| c.lambda == 100.0 && c.y == 1)
        .map(|c| c.phi)
        .collect();
    assert_eq!(found.len(), expected.len());
    // the tabulated curve must dip below zero for large lambda
    assert!(table.minimum(100.0, 1).unwrap() < 0.0);
}
