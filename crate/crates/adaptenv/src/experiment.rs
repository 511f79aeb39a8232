//! End-to-end experiment runs: dataset bundles, per-seed training, test
//! evaluation, and run-directory output.

use crate::config::{DatasetKind, PolicyKind, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    env_accuracy_profile, group_accuracy_profile, policy_stats, worst_case_accuracy,
    EnvAccuracyProfile, PolicyStats,
};
use crate::objectives::Method;
use crate::policy::{ContinuousPolicy, DiscretePolicy, Policy, PointMassPolicy, PriorSpec};
use crate::trainer::{train, EnvFamily, TrainBase, TrainInputs, TrainState, ValSpec};
use crate::transforms::{
    build_colored_mnist, build_rotated_mnist, build_synthetic_groups, load_mnist,
    shuffled_splits, EnvDataset, EnvDescriptor, GrayBatch, RawMnist, Split, COLOR_LABEL_NOISE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// The 11-point correlation grid used for worst-case evaluation.
pub fn correlation_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn seeded(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ tag)
}

/// Training inputs plus the held-out test environments for one seed.
pub struct ExperimentData {
    pub inputs: TrainInputs,
    pub test_sets: Vec<EnvDataset>,
    /// For grouped datasets, worst-case evaluation runs per group of this
    /// dataset instead of across `test_sets`.
    pub grouped_test: Option<EnvDataset>,
}

/// Build the per-seed data bundle (subsampling, environment grids) and the
/// policy the method trains with.
pub fn prepare(config: &RunConfig, mnist: Option<&RawMnist>, seed: u64) -> Result<ExperimentData> {
    let model_in = match config.run.dataset {
        DatasetKind::ColoredMnist => 2 * crate::transforms::IMAGE_PIXELS,
        DatasetKind::RotatedMnist => crate::transforms::IMAGE_PIXELS,
        DatasetKind::SyntheticGroups => 3,
    };
    let mut dims = vec![model_in];
    dims.extend(std::iter::repeat(config.train.hidden_units).take(config.train.hidden_layers));
    dims.push(2);

    let policy = build_policy(config, seed)?;
    let prior = build_prior(config)?;

    match config.run.dataset {
        DatasetKind::ColoredMnist | DatasetKind::RotatedMnist => {
            let mnist = mnist.ok_or_else(|| {
                Error::config("MNIST data required; load it with the fetch command first")
            })?;
            let n_train_pool = mnist.train_images.dim().0;
            let splits = shuffled_splits(
                n_train_pool,
                &[config.run.subsample_train, config.run.subsample_val],
                &mut seeded(seed, 0xda7a),
            )?;
            let full_train = GrayBatch::from_mnist(mnist.train_images.view(), &mnist.train_digits)?;
            let train_gray = Arc::new(full_train.select(&splits[0]));
            let val_gray = Arc::new(full_train.select(&splits[1]));
            drop(full_train);
            let test_full = GrayBatch::from_mnist(mnist.test_images.view(), &mnist.test_digits)?;
            let test_gray: Arc<GrayBatch> = if config.run.subsample_test > 0
                && config.run.subsample_test < test_full.len()
            {
                let idx = shuffled_splits(
                    test_full.len(),
                    &[config.run.subsample_test],
                    &mut seeded(seed, 0x7e57),
                )?;
                Arc::new(test_full.select(&idx[0]))
            } else {
                Arc::new(test_full)
            };

            match config.run.dataset {
                DatasetKind::ColoredMnist => {
                    let mut env_rng = seeded(seed, 0xc0103);
                    let val_envs: Vec<EnvDataset> = correlation_grid()
                        .into_iter()
                        .map(|e| {
                            build_colored_mnist(Arc::clone(&val_gray), e, Split::Val, &mut env_rng)
                        })
                        .collect::<Result<_>>()?;
                    let test_sets: Vec<EnvDataset> = correlation_grid()
                        .into_iter()
                        .map(|e| {
                            build_colored_mnist(Arc::clone(&test_gray), e, Split::Test, &mut env_rng)
                        })
                        .collect::<Result<_>>()?;
                    Ok(ExperimentData {
                        inputs: TrainInputs {
                            family: EnvFamily::ColorCorrelation {
                                label_noise: COLOR_LABEL_NOISE,
                            },
                            train: TrainBase::Image(train_gray),
                            val: ValSpec::PerEnv(val_envs),
                            model_dims: dims,
                            policy,
                            prior,
                        },
                        test_sets,
                        grouped_test: None,
                    })
                }
                DatasetKind::RotatedMnist => {
                    let all: Vec<usize> = (0..crate::transforms::ANGLES_DEG.len()).collect();
                    let val_envs = build_rotated_mnist(Arc::clone(&val_gray), &all, Split::Val)?;
                    let test_sets = build_rotated_mnist(Arc::clone(&test_gray), &all, Split::Test)?;
                    Ok(ExperimentData {
                        inputs: TrainInputs {
                            family: EnvFamily::Rotation,
                            train: TrainBase::Image(train_gray),
                            val: ValSpec::PerEnv(val_envs),
                            model_dims: dims,
                            policy,
                            prior,
                        },
                        test_sets,
                        grouped_test: None,
                    })
                }
                DatasetKind::SyntheticGroups => unreachable!(),
            }
        }
        DatasetKind::SyntheticGroups => {
            let g = &config.groups;
            let train_ds = build_synthetic_groups(
                g.n_train,
                g.spurious_corr,
                Split::Train,
                &mut seeded(seed, 0x60011),
            )?;
            let val_ds = build_synthetic_groups(
                g.n_val,
                g.spurious_corr,
                Split::Val,
                &mut seeded(seed, 0x60012),
            )?;
            let test_ds = build_synthetic_groups(
                g.n_test,
                g.spurious_corr,
                Split::Test,
                &mut seeded(seed, 0x60013),
            )?;
            let train_tab = match train_ds.source {
                crate::transforms::EnvSource::Tabular(t) => Arc::new(t),
                _ => unreachable!(),
            };
            Ok(ExperimentData {
                inputs: TrainInputs {
                    family: EnvFamily::GroupShift,
                    train: TrainBase::Tabular(train_tab),
                    val: ValSpec::Grouped(val_ds),
                    model_dims: dims,
                    policy,
                    prior,
                },
                test_sets: Vec::new(),
                grouped_test: Some(test_ds),
            })
        }
    }
}

fn build_policy(config: &RunConfig, seed: u64) -> Result<Policy> {
    let n_angles = crate::transforms::ANGLES_DEG.len();
    Ok(match config.effective_policy_kind() {
        PolicyKind::Beta => Policy::Continuous(ContinuousPolicy::new(
            &mut seeded(seed, 0x90110),
            config.policy.epsilon,
        )),
        PolicyKind::Categorical => Policy::Discrete(DiscretePolicy::new(n_angles, 1.0)?),
        PolicyKind::PointMass => match config.run.dataset {
            DatasetKind::RotatedMnist => Policy::PointMass(PointMassPolicy::discrete(
                config.policy.fixed_angles.clone(),
                n_angles,
            )?),
            _ => Policy::PointMass(PointMassPolicy::continuous(
                config.policy.fixed_gammas.clone(),
            )?),
        },
        PolicyKind::Auto => unreachable!("resolved by effective_policy_kind"),
    })
}

fn build_prior(config: &RunConfig) -> Result<Option<PriorSpec>> {
    Ok(match config.effective_policy_kind() {
        PolicyKind::Beta => Some(PriorSpec::beta(
            config.policy.prior_alpha,
            config.policy.prior_beta,
        )?),
        PolicyKind::Categorical => Some(PriorSpec::uniform_categorical(
            crate::transforms::ANGLES_DEG.len(),
        )),
        _ => None,
    })
}

/// Per-seed run result written to the run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: DatasetKind,
    pub method: Method,
    pub seed: u64,
    pub worst_case_acc: f64,
    pub mean_acc: f64,
    /// Accuracy at the strongest reversed correlation (e = 0.9), when the
    /// dataset defines it.
    pub acc_at_e09: Option<f64>,
    pub profile: EnvAccuracyProfile,
    pub policy_stats: Option<PolicyStats>,
    /// Entropy of the final categorical policy, with the uniform entropy.
    pub policy_entropy: Option<(f64, f64)>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub final_risk_variance: f64,
    pub baseline: bool,
}

/// Outcome of one seed: the trained state plus its summary.
pub struct RunOutput {
    pub state: TrainState,
    pub summary: RunSummary,
}

/// Train one seed and evaluate it on the held-out environments.
pub fn run_seed(config: &RunConfig, mnist: Option<&RawMnist>, seed: u64) -> Result<RunOutput> {
    let data = prepare(config, mnist, seed)?;
    let train_config = config.train_config(seed);
    let outcome = train(&train_config, &data.inputs)?;
    let state = outcome.state;

    let profile = match (&data.grouped_test, data.test_sets.is_empty()) {
        (Some(grouped), _) => group_accuracy_profile(&state.model, grouped)?,
        (None, false) => env_accuracy_profile(&state.model, &data.test_sets)?,
        (None, true) => return Err(Error::config("no test environments built")),
    };
    let worst = worst_case_accuracy(&profile)?;
    let mean = profile.mean();
    let acc_at_e09 = profile
        .descriptors
        .iter()
        .zip(&profile.accuracies)
        .find(|(d, _)| matches!(d, EnvDescriptor::Correlation { e } if (*e - 0.9).abs() < 1e-9))
        .map(|(_, &a)| a);

    let stats = match &state.policy {
        Policy::Continuous(_) => Some(policy_stats(
            &state.policy,
            10_000,
            &mut seeded(seed, 0x57a7),
        )?),
        _ => None,
    };
    let entropy = match &state.policy {
        Policy::Discrete(p) => Some((p.entropy()?, (p.k() as f64).ln())),
        _ => None,
    };
    let final_risk_variance = state
        .metric_trace
        .last()
        .map(|r| r.risk_variance)
        .unwrap_or(f64::NAN);

    let summary = RunSummary {
        dataset: config.run.dataset,
        method: config.robust.method,
        seed,
        worst_case_acc: worst,
        mean_acc: mean,
        acc_at_e09,
        profile,
        policy_stats: stats,
        policy_entropy: entropy,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        final_risk_variance,
        baseline: config.robust.method == Method::Erm,
    };
    Ok(RunOutput { state, summary })
}

/// Write metrics, summary, and checkpoint into the run directory.
pub fn write_run_dir(dir: &Path, output: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for record in &output.state.metric_trace {
        lines.push_str(
            &serde_json::to_string(record).map_err(|e| Error::config(format!("metrics: {e}")))?,
        );
        lines.push('\n');
    }
    std::fs::write(dir.join("metrics.jsonl"), lines)?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&output.summary)
            .map_err(|e| Error::config(format!("summary: {e}")))?,
    )?;
    let checkpoint = bincode::serialize(&output.state)
        .map_err(|e| Error::config(format!("checkpoint encode: {e}")))?;
    std::fs::write(dir.join("checkpoint.bin"), checkpoint)?;
    Ok(())
}

/// Load a checkpointed training state.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(dir.join("checkpoint.bin"))?;
    bincode::deserialize(&bytes).map_err(|e| Error::config(format!("checkpoint decode: {e}")))
}

/// Aggregated mean ± std over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub dataset: DatasetKind,
    pub seeds: Vec<u64>,
    pub worst_mean: f64,
    pub worst_std: f64,
    pub mean_mean: f64,
    pub mean_std: f64,
    pub baseline: bool,
}

pub fn aggregate(summaries: &[RunSummary]) -> Result<Aggregate> {
    if summaries.is_empty() {
        return Err(Error::config("no runs to aggregate"));
    }
    let worst: Vec<f64> = summaries.iter().map(|s| s.worst_case_acc).collect();
    let mean: Vec<f64> = summaries.iter().map(|s| s.mean_acc).collect();
    let stat = |xs: &[f64]| -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / n;
        (m, var.sqrt())
    };
    let (wm, ws) = stat(&worst);
    let (mm, ms) = stat(&mean);
    Ok(Aggregate {
        method: summaries[0].method,
        dataset: summaries[0].dataset,
        seeds: summaries.iter().map(|s| s.seed).collect(),
        worst_mean: wm,
        worst_std: ws,
        mean_mean: mm,
        mean_std: ms,
        baseline: summaries[0].baseline,
    })
}

/// Run every seed of the config, write run directories, and aggregate.
pub fn run_all(config: &RunConfig) -> Result<(Vec<RunOutput>, Aggregate)> {
    let mnist = match config.run.dataset {
        DatasetKind::SyntheticGroups => None,
        _ => Some(load_mnist(&config.run.data_dir)?),
    };
    let mut outputs = Vec::new();
    for &seed in &config.run.seeds {
        let out = run_seed(config, mnist.as_ref(), seed)?;
        write_run_dir(&config.run_dir(seed), &out)?;
        outputs.push(out);
    }
    let summaries: Vec<RunSummary> = outputs.iter().map(|o| o.summary.clone()).collect();
    let agg = aggregate(&summaries)?;
    let agg_path = config.run.out_dir.join(format!(
        "{}_{}_{}_aggregate.json",
        config.run.dataset,
        config.robust.method,
        config.config_hash()
    ));
    std::fs::create_dir_all(&config.run.out_dir)?;
    std::fs::write(
        &agg_path,
        serde_json::to_string_pretty(&agg).map_err(|e| Error::config(format!("agg: {e}")))?,
    )?;
    Ok((outputs, agg))
}
