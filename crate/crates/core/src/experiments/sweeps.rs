use rayon::prelude::*;

use super::config::{ExperimentConfig, ExperimentKind};
use super::results::{SweepResult, SweepRow};
use crate::analysis::{
    estimate_memorization_cost, group_errors, norm_decomposition, theorem_gap_check, MemoCostEstimate,
};
use crate::datagen::{
    derive_seed, make_cmnist_analogue, project_with, random_orthogonal, sample_environment, sample_test_environment,
    EnvironmentSpec, LabeledDataset,
};
use crate::error::{Error, Result};
use crate::model::{error_rate, is_mistake, predict_logits, BlockMask, BlockedLinearModel};
use crate::objectives::ObjectiveConfig;
use crate::trainer::{fit_restricted, train, TrainConfig};

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;
const PROJECTION_STREAM: u64 = 2;
const OPTIMIZER_STREAM: u64 = 3;

/// Training set of size `n` at noise rate `eta` and the noise-free test set
/// for one seed. The training draw does not depend on `eta`, so noise sets
/// are nested along an `eta` grid.
pub fn build_datasets(
    config: &ExperimentConfig,
    n: usize,
    eta: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let env = EnvironmentSpec::new(n, config.gamma, eta, "train");
    let train_set = sample_environment(&config.spec, &env, derive_seed(seed, TRAIN_STREAM))?;
    let test_set = sample_test_environment(
        &config.spec,
        config.n_test,
        config.gamma_test,
        "test",
        derive_seed(seed, TEST_STREAM),
    )?;
    Ok((train_set, test_set))
}

pub fn estimate_memo_cost(config: &ExperimentConfig) -> Result<MemoCostEstimate> {
    let m = &config.memo;
    estimate_memorization_cost(&config.spec, &m.k_values, m.trials, &m.train, m.seed)
}

/// Training configuration of one run; the optimizer stream (Mixup pairing)
/// is derived from the run seed.
pub fn run_config(config: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, OPTIMIZER_STREAM),
        ..config.train
    }
}

/// Fills the evaluation columns of `row`: test-set group errors, block
/// norms, and training error and memorization accuracy pooled over
/// `train_envs` (left empty when nothing was flipped).
pub fn evaluate_run(
    mut row: SweepRow,
    model: &BlockedLinearModel,
    train_envs: &[LabeledDataset],
    test: &LabeledDataset,
) -> Result<SweepRow> {
    let groups = group_errors(model, test)?;
    let logits = predict_logits(model, test.features.view())?;
    let avg = error_rate(&logits, &test.labels, None)?;
    let norms = norm_decomposition(model);

    let (mut wrong, mut total, mut flipped, mut memorized) = (0usize, 0usize, 0usize, 0usize);
    for env in train_envs {
        let logits = predict_logits(model, env.features.view())?;
        for (i, (&phi, &y)) in logits.iter().zip(&env.labels).enumerate() {
            let mistake = is_mistake(phi, y);
            wrong += mistake as usize;
            total += 1;
            if env.noise_mask[i] {
                flipped += 1;
                memorized += !mistake as usize;
            }
        }
    }

    [row.err_g1, row.err_g2, row.err_g3, row.err_g4] = groups.errors;
    row.wg_err = Some(groups.worst);
    row.avg_err = Some(avg);
    row.majority_err = Some(groups.majority()).filter(|v| v.is_finite());
    row.minority_err = Some(groups.minority()).filter(|v| v.is_finite());
    row.test_acc = Some(1.0 - avg);
    row.norm_inv = Some(norms.norm_inv);
    row.norm_spu = Some(norms.norm_spu);
    row.norm_nui = Some(norms.norm_nui);
    row.norm_total = Some(norms.norm_total);
    row.spu_inv_ratio = (norms.norm_inv > 0.0).then(|| norms.norm_spu / norms.norm_inv);
    row.train_err = (total > 0).then(|| wrong as f64 / total as f64);
    row.memo_acc = (flipped > 0).then(|| memorized as f64 / flipped as f64);
    Ok(row)
}

/// Runs `job` for every (grid value, seed) pair in parallel and concatenates
/// the returned rows in grid-major, seed-minor order.
fn grid_jobs<G, F>(grid: &[G], seeds: &[u64], job: F) -> Result<SweepResult>
where
    G: Copy + Sync + std::fmt::Display,
    F: Fn(G, u64) -> Result<Vec<SweepRow>> + Sync,
{
    let jobs: Vec<(G, u64)> = grid.iter().flat_map(|&g| seeds.iter().map(move |&s| (g, s))).collect();
    let chunks: Vec<Result<Vec<SweepRow>>> = jobs
        .par_iter()
        .map(|&(g, s)| job(g, s).map_err(|e| e.at(format!("grid value {g}, seed {s}"))))
        .collect();
    let mut rows = Vec::new();
    for chunk in chunks {
        rows.extend(chunk?);
    }
    Ok(SweepResult { rows })
}

fn train_single(
    config: &ExperimentConfig,
    objective: &ObjectiveConfig,
    train_set: &LabeledDataset,
    seed: u64,
) -> Result<BlockedLinearModel> {
    let (model, _) = train(std::slice::from_ref(train_set), objective, &run_config(config, seed))
        .map_err(|e| e.at(format!("objective {}", objective.label())))?;
    Ok(model)
}

fn single_env_rows(
    config: &ExperimentConfig,
    grid_value: f64,
    seed: u64,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
) -> Result<Vec<SweepRow>> {
    let kind = config.kind.name();
    let param = config.kind.grid_param();
    config
        .objectives
        .iter()
        .map(|obj| {
            let model = train_single(config, obj, train_set, seed)?;
            let row = SweepRow::keyed(kind, param, grid_value, seed, &obj.label());
            evaluate_run(row, &model, std::slice::from_ref(train_set), test_set)
        })
        .collect()
}

fn expect_kind(config: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if config.kind != kind {
        return Err(Error::Config(format!(
            "expected a {} configuration, got {}",
            kind.name(),
            config.kind.name()
        )));
    }
    config.validate()
}

/// Trains each objective at every `eta` of the grid on `n` training points
/// and evaluates on the group-balanced noise-free test set.
pub fn run_noise_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    expect_kind(config, ExperimentKind::NoiseSweep)?;
    grid_jobs(&config.eta_grid, &config.seeds, |eta, seed| {
        let (train_set, test_set) = build_datasets(config, config.n, eta, seed)?;
        single_env_rows(config, eta, seed, &train_set, &test_set)
    })
}

/// As [`run_noise_sweep`] with `eta` fixed and the training-set size swept.
pub fn run_ndata_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    expect_kind(config, ExperimentKind::NdataSweep)?;
    grid_jobs(&config.n_grid, &config.seeds, |n, seed| {
        let (train_set, test_set) = build_datasets(config, n, config.eta, seed)?;
        single_env_rows(config, n as f64, seed, &train_set, &test_set)
    })
}

/// At every `eta`, fits the restricted classifiers `w^(inv)` and `w^(spu)`
/// and the unrestricted model, then records the norm-gap condition with a
/// memorization cost estimated once for the whole sweep.
pub fn run_norm_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    expect_kind(config, ExperimentKind::NormSweep)?;
    let memo = estimate_memo_cost(config).map_err(|e| e.at("memorization cost"))?;
    grid_jobs(&config.eta_grid, &config.seeds, |eta, seed| {
        let (train_set, test_set) = build_datasets(config, config.n, eta, seed)?;
        let w_inv = fit_restricted(&train_set, BlockMask::INVARIANT, &config.restricted_train)
            .map_err(|e| e.at("invariant-restricted fit"))?;
        let w_spu = fit_restricted(&train_set, BlockMask::SPURIOUS, &config.restricted_train)
            .map_err(|e| e.at("spurious-restricted fit"))?;
        let gap = theorem_gap_check(&w_inv, &w_spu, config.n, config.gamma, eta, memo.slope)?;
        let mut rows = single_env_rows(config, eta, seed, &train_set, &test_set)?;
        for row in &mut rows {
            row.gap_lhs = Some(gap.lhs);
            row.gap_rhs = Some(gap.rhs);
            row.memo_cost_c = Some(gap.memo_cost_c);
            row.condition_holds = Some(gap.condition_holds);
            row.n_tilde_inv = Some(gap.n_tilde_inv);
            row.n_tilde_spu = Some(gap.n_tilde_spu);
            row.norm_w_inv_model = Some(gap.norm_w_inv);
            row.norm_w_spu_model = Some(gap.norm_w_spu);
            row.full_norm_order_holds = Some(gap.full_norm_order_holds);
        }
        Ok(rows)
    })
}

/// Trains every objective on the multi-environment analogue and evaluates
/// on its shifted test environment. Memorization accuracy is pooled over
/// the flipped points of all training environments.
pub fn run_cmnist_analogue(config: &ExperimentConfig) -> Result<SweepResult> {
    expect_kind(config, ExperimentKind::CmnistAnalogue)?;
    let c = &config.cmnist;
    grid_jobs(&config.eta_grid, &config.seeds, |eta, seed| {
        let mut envs = make_cmnist_analogue(
            &config.spec,
            c.n_per_env,
            &c.env_gammas,
            c.gamma_test,
            eta,
            derive_seed(seed, TRAIN_STREAM),
        )?;
        let test_set = envs.pop().expect("analogue always has a test environment");
        config
            .objectives
            .iter()
            .map(|obj| {
                let (model, _) = train(&envs, obj, &run_config(config, seed))
                    .map_err(|e| e.at(format!("objective {}", obj.label())))?;
                let row = SweepRow::keyed(config.kind.name(), "eta", eta, seed, &obj.label());
                evaluate_run(row, &model, &envs, &test_set)
            })
            .collect()
    })
}

/// Runs the noise sweep twice per grid point, on the original features and
/// after one random orthogonal rotation (shared by the training and test
/// sets of a seed), and pairs the worst-group errors.
pub fn run_projection_check(config: &ExperimentConfig) -> Result<SweepResult> {
    expect_kind(config, ExperimentKind::ProjectionCheck)?;
    let d = config.spec.dim();
    // one rotation per seed, shared across the eta grid
    let rotations = config
        .seeds
        .par_iter()
        .map(|&s| random_orthogonal(d, derive_seed(s, PROJECTION_STREAM)))
        .collect::<Result<Vec<_>>>()?;
    grid_jobs(&config.eta_grid, &config.seeds, |eta, seed| {
        let k = config
            .seeds
            .iter()
            .position(|&s| s == seed)
            .expect("seed from the grid");
        let (train_set, test_set) = build_datasets(config, config.n, eta, seed)?;
        let train_proj = project_with(&train_set, &rotations[k])?;
        let test_proj = project_with(&test_set, &rotations[k])?;
        let mut rows = single_env_rows(config, eta, seed, &train_set, &test_set)?;
        for (row, obj) in rows.iter_mut().zip(&config.objectives) {
            let model = train_single(config, obj, &train_proj, seed).map_err(|e| e.at("projected data"))?;
            let projected = group_errors(&model, &test_proj)?.worst;
            row.proj_wg_err = Some(projected);
            row.paired_wg_abs_diff = row.wg_err.map(|w| (w - projected).abs());
        }
        Ok(rows)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::FeatureSpec;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            kind,
            spec: FeatureSpec {
                d_nui: 60,
                ..FeatureSpec::default()
            },
            n: 40,
            n_test: 80,
            eta_grid: vec![0.0, 0.2],
            n_grid: vec![20, 40],
            seeds: vec![1, 2],
            train: TrainConfig {
                steps: 50,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn row_count_is_grid_times_seeds_times_objectives() {
        let mut c = small(ExperimentKind::NoiseSweep);
        c.objectives = vec![ObjectiveConfig::erm(), ObjectiveConfig::mixup(0.2)];
        let r = run_noise_sweep(&c).unwrap();
        assert_eq!(r.rows.len(), 2 * 2 * 2);
        let keys: Vec<(f64, u64, &str)> = r
            .rows
            .iter()
            .map(|r| (r.grid_value, r.seed, r.objective.as_str()))
            .collect();
        assert_eq!(keys[0], (0.0, 1, "erm"));
        assert_eq!(keys[1], (0.0, 1, "mixup(alpha=0.2)"));
        assert_eq!(keys[2].1, 2);
        assert_eq!(keys[4].0, 0.2);
        assert!(r.rows[0].memo_acc.is_none());
        assert!(r.rows[4].memo_acc.is_some());
    }

    #[test]
    fn noise_sets_are_nested_along_the_grid() {
        let c = small(ExperimentKind::NoiseSweep);
        let (a, _) = build_datasets(&c, 200, 0.1, 5).unwrap();
        let (b, _) = build_datasets(&c, 200, 0.3, 5).unwrap();
        assert_eq!(a.features, b.features);
        assert!(a.noise_mask.iter().zip(&b.noise_mask).all(|(x, y)| !x || *y));
    }

    #[test]
    fn wrong_kind_rejected() {
        let c = small(ExperimentKind::NoiseSweep);
        assert!(matches!(run_ndata_sweep(&c), Err(Error::Config(_))));
    }

    #[test]
    fn evaluate_run_on_invariant_oracle() {
        let c = small(ExperimentKind::NoiseSweep);
        let (train_set, test_set) = build_datasets(&c, 200, 0.2, 3).unwrap();
        let s = c.spec;
        let oracle = BlockedLinearModel::from_blocks(&s, &[1.0; 5], &[0.0; 5], &vec![0.0; s.d_nui]).unwrap();
        let row = evaluate_run(
            SweepRow::default(),
            &oracle,
            std::slice::from_ref(&train_set),
            &test_set,
        )
        .unwrap();
        assert!(row.wg_err.unwrap() < 0.05);
        // flipped points disagree with the invariant prediction
        assert!(row.memo_acc.unwrap() < 0.05);
        assert_eq!(row.spu_inv_ratio, Some(0.0));
    }
}
