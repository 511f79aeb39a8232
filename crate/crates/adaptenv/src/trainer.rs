//! Alternating policy/model optimization of the policy-averaged robust
//! objective.
//!
//! Each step samples `K` environments from the policy, materializes the
//! transformed minibatch views, and reduces them through a mixture matrix:
//! continuous draws weight their own materialized environment (an identity
//! mixture), while relaxed Gumbel-Softmax draws softly mix the per-angle
//! environments. The policy update descends the full objective with the
//! model detached (score-function gradients for Beta policies, pathwise
//! gradients through the soft sample for categorical ones); the model
//! update then descends with the policy detached. Fixed-environment
//! baselines run the same loop under a frozen point-mass policy, which is
//! what makes the adaptive/fixed equivalence testable step for step.

use crate::error::{Error, Result};
use crate::metrics::{env_accuracy_profile, group_accuracy_profile, worst_case_accuracy};
use crate::nn::{hash_f64_params, Adam, AdamF64, ForwardCache, Grads, Mlp};
use crate::objectives::{
    coral_cov_grads, coral_penalty_from_covs, covariance, covariance_backward, entropic_weights,
    groupdro_surrogate, irm_grad_and_seed, population_variance, risk_and_seed, IrmEval,
    LossKind, Method, PenaltyKind, RiskEval, RiskVector, RobustConfig, Targets,
};
use crate::policy::{
    anneal_temperature, ContinuousPolicy, EnvDraw, Policy, PolicySummary, PriorSpec,
};
use crate::transforms::{
    apply_group_shift, color_draws, colorize_features, rotate_features, EnvDataset, GrayBatch,
    TabularBatch,
};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Policy-gradient estimator for continuous policies. Pathwise derivatives
/// through Beta sampling are not available here; the discrete policy always
/// differentiates through its soft relaxed sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyEstimator {
    ScoreFunction,
    Pathwise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub robust: RobustConfig,
    /// Model learning rate.
    pub lr_theta: f64,
    /// Policy learning rate = `lr_theta * policy_lr_multiplier`.
    pub policy_lr_multiplier: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// L2 weight decay, applied to the model parameters only.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs before the policy update is enabled and the penalty weight
    /// switches from `eta_warmup` to `eta`. `warmup_epochs == epochs`
    /// disables the adaptive policy entirely.
    pub warmup_epochs: usize,
    /// Temperature anneal horizon for discrete policies.
    pub t0_temp_epochs: usize,
    /// Early-stopping patience on worst-group validation accuracy.
    pub patience: usize,
    /// Resample environments between the policy and model updates instead
    /// of reusing them.
    pub resample_envs: bool,
    /// Optional step-size decay `t^{-0.6}` (summable squares, divergent sum).
    pub lr_decay: bool,
    /// EMA decay of the score-function baseline.
    pub baseline_decay: f64,
    pub policy_estimator: PolicyEstimator,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            robust: RobustConfig::default(),
            lr_theta: 1e-4,
            policy_lr_multiplier: 100.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 1e-5,
            batch_size: 128,
            epochs: 30,
            warmup_epochs: 5,
            t0_temp_epochs: 10,
            patience: 10,
            resample_envs: false,
            lr_decay: false,
            baseline_decay: 0.9,
            policy_estimator: PolicyEstimator::ScoreFunction,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.robust.validate()?;
        if self.warmup_epochs > self.epochs {
            return Err(Error::config("warmup_epochs must not exceed epochs"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if self.lr_theta <= 0.0 || self.policy_lr_multiplier <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::config("baseline decay must lie in [0, 1)"));
        }
        if self.t0_temp_epochs == 0 {
            return Err(Error::config("t0_temp_epochs must be >= 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training inputs
// ---------------------------------------------------------------------------

/// The transformation family the policy parameter indexes into.
#[derive(Debug, Clone)]
pub enum EnvFamily {
    /// Continuous `γ`: color-correlation strength with the given label noise.
    ColorCorrelation { label_noise: f64 },
    /// Discrete environments: rotations by the angle-set indices.
    Rotation,
    /// Continuous `γ`: spurious-feature agreement probability.
    GroupShift,
}

/// Base training data the transformations act on.
#[derive(Clone)]
pub enum TrainBase {
    Image(Arc<GrayBatch>),
    Tabular(Arc<TabularBatch>),
}

impl TrainBase {
    pub fn len(&self) -> usize {
        match self {
            TrainBase::Image(b) => b.len(),
            TrainBase::Tabular(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Validation target: a per-environment grid or a single grouped dataset.
#[derive(Clone)]
pub enum ValSpec {
    PerEnv(Vec<EnvDataset>),
    Grouped(EnvDataset),
}

/// Everything the training loop needs besides the config.
#[derive(Clone)]
pub struct TrainInputs {
    pub family: EnvFamily,
    pub train: TrainBase,
    pub val: ValSpec,
    /// Model layer widths, `[in, hidden.., out]`.
    pub model_dims: Vec<usize>,
    pub policy: Policy,
    pub prior: Option<PriorSpec>,
}

// ---------------------------------------------------------------------------
// State and metric records
// ---------------------------------------------------------------------------

/// Per-epoch metric record; this is also the line-delimited format written
/// to `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub mean_risk: f64,
    /// Positional mean of the K per-sample mixed risks across steps.
    pub per_env_risk: Vec<f64>,
    /// Mean over steps of the population variance of the per-step risks.
    pub risk_variance: f64,
    pub penalty: f64,
    pub kl: f64,
    pub policy_summary: PolicySummary,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
    pub val_worst_acc: f64,
}

impl EpochRecord {
    /// Hand-built record from a per-environment risk list; the variance is
    /// the population variance of that list.
    pub fn from_env_risks(epoch: usize, per_env_risk: Vec<f64>) -> Self {
        let mean = per_env_risk.iter().sum::<f64>() / per_env_risk.len().max(1) as f64;
        let var = population_variance(&per_env_risk);
        EpochRecord {
            epoch,
            objective: mean,
            mean_risk: mean,
            per_env_risk,
            risk_variance: var,
            penalty: 0.0,
            kl: 0.0,
            policy_summary: PolicySummary::PointMass { atoms: vec![] },
            grad_norm_theta: 0.0,
            grad_norm_phi: 0.0,
            val_worst_acc: 0.0,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Mlp,
    pub policy: Policy,
    pub prior: Option<PriorSpec>,
    pub opt_theta: Adam,
    pub opt_phi: Option<AdamF64>,
    pub epoch: usize,
    pub step: u64,
    /// EMA baseline of the score-function estimator.
    pub baseline: Option<f64>,
    pub metric_trace: Vec<EpochRecord>,
    pub best_worst_group_val: f64,
    pub best_epoch: usize,
    pub best_model: Option<Mlp>,
    pub best_policy: Option<Policy>,
    pub consecutive_aborts: u32,
    pub data_rng: ChaCha8Rng,
    pub policy_rng: ChaCha8Rng,
    pub run_seed: u64,
}

impl TrainState {
    pub fn init(config: &TrainConfig, inputs: &TrainInputs) -> Result<Self> {
        config.validate()?;
        if inputs.train.is_empty() {
            return Err(Error::config("empty training data"));
        }
        if let (Policy::Continuous(_), PolicyEstimator::Pathwise) =
            (&inputs.policy, config.policy_estimator)
        {
            return Err(Error::config(
                "pathwise gradients through Beta sampling are not available; use score_function",
            ));
        }
        // Fixed point-mass policies must still satisfy the pairwise-penalty
        // sample requirement.
        if let Policy::PointMass(p) = &inputs.policy {
            let needs_pairs = matches!(
                config.robust.method.penalty(),
                PenaltyKind::Rex | PenaltyKind::Coral
            );
            if needs_pairs && p.atoms.len() < 2 {
                return Err(Error::config(
                    "variance/pairwise penalties need at least 2 environments",
                ));
            }
        }
        let mut init_rng = stream_rng(config.seed, 0x11);
        let model = Mlp::new(&inputs.model_dims, &mut init_rng);
        let opt_theta = Adam::new(
            model.param_count(),
            config.lr_theta,
            config.adam_beta1,
            config.adam_beta2,
            config.weight_decay,
        );
        let opt_phi = if inputs.policy.is_learnable() {
            Some(AdamF64::new(
                inputs.policy.params_flat().len(),
                config.lr_theta * config.policy_lr_multiplier,
                config.adam_beta1,
                config.adam_beta2,
            ))
        } else {
            None
        };
        Ok(TrainState {
            model,
            policy: inputs.policy.clone(),
            prior: inputs.prior.clone(),
            opt_theta,
            opt_phi,
            epoch: 0,
            step: 0,
            baseline: None,
            metric_trace: Vec::new(),
            best_worst_group_val: f64::NEG_INFINITY,
            best_epoch: 0,
            best_model: None,
            best_policy: None,
            consecutive_aborts: 0,
            data_rng: stream_rng(config.seed, 0x22),
            policy_rng: stream_rng(config.seed, 0x33),
            run_seed: config.seed,
        })
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(tag)))
}

/// Transform rng derived from (run seed, step, environment slot) so
/// environment materialization is deterministic and order-independent.
fn env_rng(seed: u64, step: u64, slot: usize) -> ChaCha8Rng {
    let mixed = splitmix(seed ^ splitmix(step.wrapping_mul(0xd1342543de82ef95)))
        ^ splitmix((slot as u64).wrapping_add(0x51ed270b));
    ChaCha8Rng::seed_from_u64(splitmix(mixed))
}

// ---------------------------------------------------------------------------
// Step internals
// ---------------------------------------------------------------------------

struct BaseMini {
    pixels: Option<Array2<f32>>,
    tabular: Option<TabularBatch>,
    labels: Vec<u8>,
}

fn gather_mini(train: &TrainBase, indices: &[usize]) -> BaseMini {
    match train {
        TrainBase::Image(b) => BaseMini {
            pixels: Some(b.pixels.select(Axis(0), indices)),
            tabular: None,
            labels: indices.iter().map(|&i| b.labels[i]).collect(),
        },
        TrainBase::Tabular(t) => {
            let tab = TabularBatch {
                features: t.features.select(Axis(0), indices),
                labels: indices.iter().map(|&i| t.labels[i]).collect(),
                spurious_bits: indices.iter().map(|&i| t.spurious_bits[i]).collect(),
                groups: indices.iter().map(|&i| t.groups[i]).collect(),
            };
            BaseMini {
                pixels: None,
                labels: tab.labels.clone(),
                tabular: Some(tab),
            }
        }
    }
}

/// One materialized environment with its forward pass and per-env stats.
struct EnvEval {
    features: Array2<f32>,
    cache: ForwardCache,
    risk: RiskEval,
    irm: Option<IrmEval>,
    cov: Option<Array2<f64>>,
}

/// Sampled draws reduced to a mixture over materialized environments.
struct Mixture {
    /// `weights[k][i]`: weight of draw `k` on materialized environment `i`.
    weights: Vec<Vec<f64>>,
    /// Environment slot (for rng derivation) per materialized environment.
    slots: Vec<usize>,
    /// The γ (or angle index) each materialized environment realizes.
    params: Vec<EnvParam>,
}

#[derive(Clone, Copy)]
enum EnvParam {
    Gamma(f64),
    Angle(usize),
}

fn build_mixture(family: &EnvFamily, draws: &[EnvDraw]) -> Result<Mixture> {
    match family {
        EnvFamily::ColorCorrelation { .. } | EnvFamily::GroupShift => {
            let k = draws.len();
            let mut weights = vec![vec![0.0; k]; k];
            let mut params = Vec::with_capacity(k);
            for (i, d) in draws.iter().enumerate() {
                let g = match d {
                    EnvDraw::Continuous(g) => *g,
                    EnvDraw::Relaxed(_) => {
                        return Err(Error::config(
                            "relaxed draw for a continuous environment family",
                        ))
                    }
                };
                weights[i][i] = 1.0;
                params.push(EnvParam::Gamma(g));
            }
            Ok(Mixture {
                weights,
                slots: (0..k).collect(),
                params,
            })
        }
        EnvFamily::Rotation => {
            let n_angles = match draws.first() {
                Some(EnvDraw::Relaxed(y)) => y.len(),
                _ => {
                    return Err(Error::config(
                        "rotation family expects relaxed or one-hot draws",
                    ))
                }
            };
            // materialize only angles that carry weight
            let mut total = vec![0.0f64; n_angles];
            for d in draws {
                match d {
                    EnvDraw::Relaxed(y) if y.len() == n_angles => {
                        for (t, &yi) in total.iter_mut().zip(y.iter()) {
                            *t += yi;
                        }
                    }
                    _ => return Err(Error::config("inconsistent relaxed draw width")),
                }
            }
            let active: Vec<usize> = (0..n_angles).filter(|&i| total[i] > 0.0).collect();
            let weights = draws
                .iter()
                .map(|d| match d {
                    EnvDraw::Relaxed(y) => active.iter().map(|&i| y[i]).collect(),
                    _ => unreachable!("checked above"),
                })
                .collect();
            let params = active.iter().map(|&i| EnvParam::Angle(i)).collect();
            Ok(Mixture {
                weights,
                slots: active.clone(),
                params,
            })
        }
    }
}

fn materialize_env(
    family: &EnvFamily,
    mini: &BaseMini,
    param: EnvParam,
    slot: usize,
    run_seed: u64,
    step: u64,
) -> Result<(Array2<f32>, Vec<u8>)> {
    match (family, param) {
        (EnvFamily::ColorCorrelation { label_noise }, EnvParam::Gamma(g)) => {
            let mut rng = env_rng(run_seed, step, slot);
            let pixels = mini.pixels.as_ref().expect("image family");
            let (noisy, color) = color_draws(&mini.labels, g, *label_noise, &mut rng);
            Ok((colorize_features(pixels, &color), noisy))
        }
        (EnvFamily::Rotation, EnvParam::Angle(a)) => {
            let pixels = mini.pixels.as_ref().expect("image family");
            Ok((rotate_features(pixels, a)?, mini.labels.clone()))
        }
        (EnvFamily::GroupShift, EnvParam::Gamma(g)) => {
            let mut rng = env_rng(run_seed, step, slot);
            let tab = mini.tabular.as_ref().expect("tabular family");
            let shifted = apply_group_shift(tab, g, &mut rng)?;
            Ok((shifted.features, shifted.labels))
        }
        _ => Err(Error::config("environment family/parameter mismatch")),
    }
}

/// Scalar outputs of one environment-set evaluation.
struct StepEval {
    envs: Vec<EnvEval>,
    mixture: Mixture,
    /// Mixed risks, one per draw.
    mixed_risks: Vec<f64>,
    /// Mixed IRM scale-gradients `D_k`, one per draw (IRM methods).
    mixed_irm: Vec<f64>,
    /// Mixed covariances per draw (CORAL methods).
    mixed_covs: Vec<Array2<f64>>,
    penalty: f64,
    /// Risk-part value of the objective (mean or entropic surrogate).
    risk_part: f64,
    /// Coefficients of each draw's mixed risk inside the objective risk part.
    risk_coef: Vec<f64>,
}

fn evaluate_envs(
    state: &Mlp,
    config: &TrainConfig,
    family: &EnvFamily,
    mini: &BaseMini,
    draws: &[EnvDraw],
    eta: f64,
    run_seed: u64,
    step: u64,
) -> Result<StepEval> {
    let robust = &config.robust;
    let mixture = build_mixture(family, draws)?;
    let penalty_kind = robust.method.penalty();
    let mut envs = Vec::with_capacity(mixture.params.len());
    for (idx, &param) in mixture.params.iter().enumerate() {
        let (features, labels) =
            materialize_env(family, mini, param, mixture.slots[idx], run_seed, step)?;
        let cache = state.forward(features.view());
        let risk = risk_and_seed(
            cache.logits().view(),
            Targets::Classes(&labels),
            LossKind::CrossEntropy,
        )?;
        let irm = if penalty_kind == PenaltyKind::Irm {
            Some(irm_grad_and_seed(
                cache.logits().view(),
                Targets::Classes(&labels),
                LossKind::CrossEntropy,
            )?)
        } else {
            None
        };
        let cov = if penalty_kind == PenaltyKind::Coral {
            let feats = cache
                .features()
                .ok_or_else(|| Error::config("CORAL needs a hidden feature layer"))?;
            Some(covariance(feats.view())?)
        } else {
            None
        };
        envs.push(EnvEval {
            features,
            cache,
            risk,
            irm,
            cov,
        });
    }

    let k_draws = mixture.weights.len();
    let mix = |per_env: &dyn Fn(usize) -> f64| -> Vec<f64> {
        mixture
            .weights
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                for (i, &w) in row.iter().enumerate() {
                    acc += w * per_env(i);
                }
                acc
            })
            .collect()
    };
    let mixed_risks = mix(&|i| envs[i].risk.risk);
    let mixed_irm = if penalty_kind == PenaltyKind::Irm {
        mix(&|i| envs[i].irm.as_ref().expect("irm eval").g)
    } else {
        Vec::new()
    };
    let mixed_covs: Vec<Array2<f64>> = if penalty_kind == PenaltyKind::Coral {
        mixture
            .weights
            .iter()
            .map(|row| {
                let dim = envs[0].cov.as_ref().expect("cov").dim();
                let mut acc = Array2::<f64>::zeros(dim);
                for (i, &w) in row.iter().enumerate() {
                    acc.scaled_add(w, envs[i].cov.as_ref().expect("cov"));
                }
                acc
            })
            .collect()
    } else {
        Vec::new()
    };

    let penalty = match penalty_kind {
        PenaltyKind::Irm => {
            if robust.irm_unbiased {
                // Two-split product estimator handled at the seed level;
                // penalty value recomputed below per draw.
                mixed_irm.iter().map(|&d| d * d).sum::<f64>() / k_draws as f64
            } else {
                mixed_irm.iter().map(|&d| d * d).sum::<f64>() / k_draws as f64
            }
        }
        PenaltyKind::Rex => population_variance(&mixed_risks),
        PenaltyKind::Coral => {
            if mixed_covs.len() >= 2 {
                coral_penalty_from_covs(&mixed_covs)?
            } else {
                return Err(Error::config("CORAL needs K >= 2 draws"));
            }
        }
        PenaltyKind::Entropic | PenaltyKind::None => 0.0,
    };

    let risks_vec = RiskVector::new(mixed_risks.clone(), None)?;
    let (risk_part, risk_coef) = match robust.method {
        Method::GroupDro => {
            let value = crate::objectives::entropic_risk(&risks_vec, robust.lambda_ent, None)?;
            (value, entropic_weights(&risks_vec, robust.lambda_ent, None)?)
        }
        Method::AGroupDro => {
            let value = groupdro_surrogate(&risks_vec, robust.lambda_ent, robust.rho)?;
            (value, entropic_weights(&risks_vec, robust.lambda_ent, None)?)
        }
        _ => {
            let mean = risks_vec.mean();
            (mean, vec![1.0 / k_draws as f64; k_draws])
        }
    };

    // REx folds its penalty into the per-draw risk coefficients.
    let mut risk_coef = risk_coef;
    if penalty_kind == PenaltyKind::Rex {
        let mean = mixed_risks.iter().sum::<f64>() / k_draws as f64;
        for (c, &r) in risk_coef.iter_mut().zip(&mixed_risks) {
            *c += eta * 2.0 / k_draws as f64 * (r - mean);
        }
    }

    Ok(StepEval {
        envs,
        mixture,
        mixed_risks,
        mixed_irm,
        mixed_covs,
        penalty,
        risk_part,
        risk_coef,
    })
}

/// Assemble per-environment seeds and run the model backward pass.
fn model_gradient(
    model: &Mlp,
    config: &TrainConfig,
    eval: &StepEval,
    eta: f64,
) -> Result<Grads> {
    let robust = &config.robust;
    let penalty_kind = robust.method.penalty();
    let k_draws = eval.mixture.weights.len() as f64;
    let n_envs = eval.envs.len();

    // coefficient of env i inside the risk part
    let mut risk_w = vec![0.0f64; n_envs];
    for (k, row) in eval.mixture.weights.iter().enumerate() {
        for (i, &w) in row.iter().enumerate() {
            risk_w[i] += eval.risk_coef[k] * w;
        }
    }
    // coefficient of env i inside the IRM penalty
    let mut irm_w = vec![0.0f64; n_envs];
    if penalty_kind == PenaltyKind::Irm {
        for (k, row) in eval.mixture.weights.iter().enumerate() {
            let dk = eval.mixed_irm[k];
            for (i, &w) in row.iter().enumerate() {
                irm_w[i] += eta * 2.0 / k_draws * dk * w;
            }
        }
    }
    // covariance gradients per env for CORAL
    let cov_grads: Option<Vec<Array2<f64>>> = if penalty_kind == PenaltyKind::Coral {
        let mixed_grads = coral_cov_grads(&eval.mixed_covs);
        let dim = eval.mixed_covs[0].dim();
        let mut per_env: Vec<Array2<f64>> = (0..n_envs).map(|_| Array2::zeros(dim)).collect();
        for (k, row) in eval.mixture.weights.iter().enumerate() {
            for (i, &w) in row.iter().enumerate() {
                per_env[i].scaled_add(w * eta, &mixed_grads[k]);
            }
        }
        Some(per_env)
    } else {
        None
    };

    let mut total = Grads::zeros_like(model);
    for (i, env) in eval.envs.iter().enumerate() {
        let mut seed = env.risk.seed.mapv(|v| v * risk_w[i] as f32);
        if let Some(irm) = &env.irm {
            seed.scaled_add(irm_w[i] as f32, &irm.seed);
        }
        let feature_seed = cov_grads.as_ref().map(|grads| {
            covariance_backward(
                env.cache.features().expect("coral has features").view(),
                &grads[i],
            )
        });
        let grads = model.backward(
            env.features.view(),
            &env.cache,
            seed.view(),
            feature_seed.as_ref().map(|f| f.view()),
        );
        total.add_scaled(&grads, 1.0);
    }
    if !total.is_finite() {
        return Err(Error::Numerical {
            batch_index: 0,
            message: "non-finite model gradient".into(),
        });
    }
    Ok(total)
}

/// Policy gradient (model detached), flat over the learnable parameters.
fn policy_gradient(
    state: &TrainState,
    config: &TrainConfig,
    eval: &StepEval,
    draws: &[EnvDraw],
    log_probs: &[f64],
    objective_core: f64,
    eta: f64,
    baseline: Option<f64>,
) -> Result<Vec<f64>> {
    let robust = &config.robust;
    match &state.policy {
        Policy::Continuous(p) => {
            let fwd = p.net.forward();
            let (alpha, beta) = p.beta_params_from(&fwd)?;
            let b = baseline.unwrap_or(objective_core);
            let advantage = objective_core - b;
            let mut d_alpha = 0.0;
            let mut d_beta = 0.0;
            for draw in draws {
                let g = match draw {
                    EnvDraw::Continuous(g) => *g,
                    _ => return Err(Error::config("continuous policy with relaxed draw")),
                };
                let (sa, sb) = ContinuousPolicy::score(alpha, beta, g);
                d_alpha += advantage * sa;
                d_beta += advantage * sb;
            }
            let _ = log_probs;
            if let Some(PriorSpec::Beta { alpha0, beta0 }) = state.prior {
                let (ka, kb) = ContinuousPolicy::kl_grad(alpha, beta, alpha0, beta0);
                d_alpha += robust.beta_kl * ka;
                d_beta += robust.beta_kl * kb;
            }
            // chain through softplus(raw) + eps
            let d_raw = [
                d_alpha * crate::special::sigmoid(fwd.raw[0]),
                d_beta * crate::special::sigmoid(fwd.raw[1]),
            ];
            Ok(p.net.backward(&fwd, d_raw))
        }
        Policy::Discrete(p) => {
            // pathwise through the relaxed sample: dL/dy_{k,i}
            let k_draws = eval.mixture.weights.len() as f64;
            let penalty_kind = robust.method.penalty();
            let n_envs = eval.envs.len();
            let mut d_y: Vec<Vec<f64>> = Vec::with_capacity(draws.len());
            for (k, _row) in eval.mixture.weights.iter().enumerate() {
                let mut dy = vec![0.0f64; p.k()];
                for i in 0..n_envs {
                    let slot = eval.mixture.slots[i];
                    let mut v = eval.risk_coef[k] * eval.envs[i].risk.risk;
                    if penalty_kind == PenaltyKind::Irm {
                        let gi = eval.envs[i].irm.as_ref().expect("irm").g;
                        v += eta * 2.0 / k_draws * eval.mixed_irm[k] * gi;
                    }
                    if penalty_kind == PenaltyKind::Coral {
                        let mixed_grads = coral_cov_grads(&eval.mixed_covs);
                        let ci = eval.envs[i].cov.as_ref().expect("cov");
                        let inner: f64 = mixed_grads[k]
                            .iter()
                            .zip(ci.iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        v += eta * inner;
                    }
                    dy[slot] = v;
                }
                d_y.push(dy);
            }
            let mut grad = p.backprop_relaxed(draws, &d_y)?;
            if let Some(prior) = &state.prior {
                let klg = p.kl_grad(prior)?;
                for (g, k) in grad.iter_mut().zip(klg) {
                    *g += robust.beta_kl * k;
                }
            }
            Ok(grad)
        }
        Policy::PointMass(_) => Ok(Vec::new()),
    }
}

/// Outputs of one training step, for metric aggregation.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub objective: f64,
    pub mean_risk: f64,
    pub mixed_risks: Vec<f64>,
    pub risk_variance: f64,
    pub penalty: f64,
    pub kl: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
}

/// One alternating step: sample environments, update the policy on the full
/// objective (model held fixed), then update the model (policy held fixed).
pub fn train_step(
    state: &mut TrainState,
    inputs: &TrainInputs,
    indices: &[usize],
    config: &TrainConfig,
) -> Result<StepStats> {
    let robust = &config.robust;
    let eta = if state.epoch < config.warmup_epochs {
        robust.eta_warmup
    } else {
        robust.eta
    };
    // temperature schedule for discrete policies
    if let Policy::Discrete(p) = &mut state.policy {
        p.temperature = anneal_temperature(state.epoch, config.t0_temp_epochs);
    }

    let mini = gather_mini(&inputs.train, indices);
    let sample = state.policy.sample(robust.k_samples, &mut state.policy_rng)?;
    sample.validate()?;
    let eval = evaluate_envs(
        &state.model,
        config,
        &inputs.family,
        &mini,
        &sample.draws,
        eta,
        state.run_seed,
        state.step,
    )?;
    let kl = state.policy.kl_to_prior(state.prior.as_ref())?;
    if !kl.is_finite() {
        return Err(Error::Numerical {
            batch_index: 0,
            message: "infinite KL to prior".into(),
        });
    }
    // risk part + penalty; the KL enters the policy update only
    let core = match robust.method.penalty() {
        PenaltyKind::Irm | PenaltyKind::Coral => eval.risk_part + eta * eval.penalty,
        PenaltyKind::Rex => eval.risk_part + eta * eval.penalty,
        PenaltyKind::Entropic | PenaltyKind::None => eval.risk_part,
    };
    let objective = core + robust.beta_kl * kl;
    if !objective.is_finite() {
        return Err(Error::Numerical {
            batch_index: 0,
            message: "non-finite objective".into(),
        });
    }

    let lr_scale = if config.lr_decay {
        1.0 / ((state.step + 1) as f64).powf(0.6)
    } else {
        1.0
    };

    // --- policy update (model detached) ---
    let policy_enabled = state.policy.is_learnable()
        && robust.method.is_adaptive()
        && state.epoch >= config.warmup_epochs;
    let mut grad_norm_phi = 0.0;
    if policy_enabled {
        #[cfg(debug_assertions)]
        let theta_hash = state.model.param_hash();
        let grad = policy_gradient(
            state,
            config,
            &eval,
            &sample.draws,
            &sample.log_probs,
            core,
            eta,
            state.baseline,
        )?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                batch_index: 0,
                message: "non-finite policy gradient".into(),
            });
        }
        grad_norm_phi = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut params = state.policy.params_flat();
        state
            .opt_phi
            .as_mut()
            .expect("learnable policy has optimizer")
            .step(&mut params, &grad, lr_scale);
        state.policy.set_params_flat(&params);
        // score-function baseline tracks the objective core
        state.baseline = Some(match state.baseline {
            Some(b) => config.baseline_decay * b + (1.0 - config.baseline_decay) * core,
            None => core,
        });
        #[cfg(debug_assertions)]
        assert_eq!(
            theta_hash,
            state.model.param_hash(),
            "policy update must not touch model parameters"
        );
    }

    // --- model update (policy detached) ---
    #[cfg(debug_assertions)]
    let phi_hash = hash_f64_params(&state.policy.params_flat());
    let theta_eval;
    let eval_for_theta = if config.resample_envs && policy_enabled {
        let sample2 = state.policy.sample(robust.k_samples, &mut state.policy_rng)?;
        theta_eval = evaluate_envs(
            &state.model,
            config,
            &inputs.family,
            &mini,
            &sample2.draws,
            eta,
            state.run_seed,
            // a distinct transform stream for the resampled views
            state.step | (1 << 63),
        )?;
        &theta_eval
    } else {
        &eval
    };
    let mut grads = model_gradient(&state.model, config, eval_for_theta, eta)?;
    // standard conditioning trick for large penalty weights: rescale the
    // whole gradient so Adam sees an O(1) objective
    if eta > 1.0 {
        grads.scale((1.0 / eta) as f32);
    }
    let grad_norm_theta = grads.sq_norm().sqrt();
    let mut params = state.model.params_flat();
    let flat_grads: Vec<f32> = {
        let mut v = Vec::with_capacity(params.len());
        for (w, b) in &grads.layers {
            v.extend(w.iter());
            v.extend(b.iter());
        }
        v
    };
    state.opt_theta.step(&mut params, &flat_grads, lr_scale);
    state.model.set_params_flat(&params);
    #[cfg(debug_assertions)]
    assert_eq!(
        phi_hash,
        hash_f64_params(&state.policy.params_flat()),
        "model update must not touch policy parameters"
    );

    state.step += 1;
    Ok(StepStats {
        objective,
        mean_risk: eval.mixed_risks.iter().sum::<f64>() / eval.mixed_risks.len() as f64,
        risk_variance: population_variance(&eval.mixed_risks),
        mixed_risks: eval.mixed_risks,
        penalty: eval.penalty,
        kl,
        grad_norm_theta,
        grad_norm_phi,
    })
}

// ---------------------------------------------------------------------------
// Full training loop
// ---------------------------------------------------------------------------

/// Worst-group (or worst-environment) validation accuracy.
pub fn worst_val_accuracy(model: &Mlp, val: &ValSpec) -> Result<f64> {
    let profile = match val {
        ValSpec::PerEnv(sets) => env_accuracy_profile(model, sets)?,
        ValSpec::Grouped(ds) => group_accuracy_profile(model, ds)?,
    };
    worst_case_accuracy(&profile)
}

/// Outcome of a full run: the trained state with the best-validation
/// parameters restored.
pub struct TrainOutcome {
    pub state: TrainState,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
    /// Epochs actually trained (early stopping may cut the loop short).
    pub epochs_run: usize,
}

/// Run the full alternating loop with per-epoch validation and early
/// stopping on worst-group validation accuracy.
pub fn train(config: &TrainConfig, inputs: &TrainInputs) -> Result<TrainOutcome> {
    let mut state = TrainState::init(config, inputs)?;
    let n = inputs.train.len();
    let mut since_best = 0usize;
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.data_rng);

        let mut acc = EpochAccumulator::default();
        for chunk in order.chunks(config.batch_size) {
            match train_step(&mut state, inputs, chunk, config) {
                Ok(stats) => {
                    state.consecutive_aborts = 0;
                    acc.add(&stats);
                }
                Err(Error::Numerical { batch_index, message }) => {
                    state.consecutive_aborts += 1;
                    eprintln!(
                        "numerical abort at epoch {epoch} step {} (batch index {batch_index}): {message}",
                        state.step
                    );
                    if state.consecutive_aborts >= 3 {
                        return Err(Error::Numerical {
                            batch_index,
                            message: format!("three consecutive aborted steps: {message}"),
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }

        let val_worst_acc = worst_val_accuracy(&state.model, &inputs.val)?;
        let record = acc.finish(epoch, &state.policy, val_worst_acc);
        state.metric_trace.push(record);

        if val_worst_acc > state.best_worst_group_val + 1e-12 {
            state.best_worst_group_val = val_worst_acc;
            state.best_epoch = epoch;
            state.best_model = Some(state.model.clone());
            state.best_policy = Some(state.policy.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let epochs_run = state.metric_trace.len();
    if let (Some(m), Some(p)) = (state.best_model.take(), state.best_policy.take()) {
        state.model = m;
        state.policy = p;
    }
    let best_epoch = state.best_epoch;
    state.best_model = Some(state.model.clone());
    state.best_policy = Some(state.policy.clone());
    Ok(TrainOutcome {
        state,
        best_epoch,
        epochs_run,
    })
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    objective: f64,
    mean_risk: f64,
    per_env: Vec<f64>,
    risk_variance: f64,
    penalty: f64,
    kl: f64,
    grad_theta: f64,
    grad_phi: f64,
}

impl EpochAccumulator {
    fn add(&mut self, s: &StepStats) {
        self.steps += 1;
        self.objective += s.objective;
        self.mean_risk += s.mean_risk;
        self.risk_variance += s.risk_variance;
        self.penalty += s.penalty;
        self.kl += s.kl;
        self.grad_theta += s.grad_norm_theta;
        self.grad_phi += s.grad_norm_phi;
        if self.per_env.len() < s.mixed_risks.len() {
            self.per_env.resize(s.mixed_risks.len(), 0.0);
        }
        for (acc, &r) in self.per_env.iter_mut().zip(&s.mixed_risks) {
            *acc += r;
        }
    }

    fn finish(&self, epoch: usize, policy: &Policy, val_worst_acc: f64) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        EpochRecord {
            epoch,
            objective: self.objective / n,
            mean_risk: self.mean_risk / n,
            per_env_risk: self.per_env.iter().map(|&x| x / n).collect(),
            risk_variance: self.risk_variance / n,
            penalty: self.penalty / n,
            kl: self.kl / n,
            policy_summary: policy.summary(),
            grad_norm_theta: self.grad_theta / n,
            grad_norm_phi: self.grad_phi / n,
            val_worst_acc,
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient-norm trend (empirical convergence monitor)
// ---------------------------------------------------------------------------

/// Running mean of squared gradient norms with a first-vs-last quartile
/// comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendSummary {
    pub running_mean_sq: Vec<f64>,
    pub first_quartile_mean: f64,
    pub last_quartile_mean: f64,
    pub flagged: bool,
}

/// Empirical check of the expected decreasing gradient-norm trend: flags a
/// violation when the last-quartile mean of squared gradient norms exceeds
/// the first-quartile mean.
pub fn gradient_norm_trend(trace: &[EpochRecord]) -> Result<TrendSummary> {
    if trace.len() < 10 {
        return Err(Error::config("trend check needs at least 10 epochs"));
    }
    let sq: Vec<f64> = trace
        .iter()
        .map(|r| r.grad_norm_theta * r.grad_norm_theta)
        .collect();
    let mut running = Vec::with_capacity(sq.len());
    let mut acc = 0.0;
    for (i, &x) in sq.iter().enumerate() {
        acc += x;
        running.push(acc / (i + 1) as f64);
    }
    let q = sq.len() / 4;
    let first = sq[..q].iter().sum::<f64>() / q as f64;
    let last = sq[sq.len() - q..].iter().sum::<f64>() / q as f64;
    Ok(TrendSummary {
        running_mean_sq: running,
        first_quartile_mean: first,
        last_quartile_mean: last,
        flagged: last > first,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_with_grad(epoch: usize, g: f64) -> EpochRecord {
        let mut r = EpochRecord::from_env_risks(epoch, vec![0.5, 0.5]);
        r.grad_norm_theta = g;
        r
    }

    #[test]
    fn trend_no_flag_on_decreasing_or_constant() {
        let dec: Vec<EpochRecord> = (0..20)
            .map(|e| record_with_grad(e, 10.0 / (e + 1) as f64))
            .collect();
        assert!(!gradient_norm_trend(&dec).unwrap().flagged);

        let flat: Vec<EpochRecord> = (0..20).map(|e| record_with_grad(e, 2.0)).collect();
        assert!(!gradient_norm_trend(&flat).unwrap().flagged);
    }

    #[test]
    fn trend_flags_increasing() {
        let inc: Vec<EpochRecord> = (0..100)
            .map(|e| record_with_grad(e, (e + 1) as f64))
            .collect();
        let t = gradient_norm_trend(&inc).unwrap();
        assert!(t.flagged);
        assert!(t.last_quartile_mean > t.first_quartile_mean);
    }

    #[test]
    fn trend_needs_ten_epochs() {
        let short: Vec<EpochRecord> = (0..9).map(|e| record_with_grad(e, 1.0)).collect();
        assert!(gradient_norm_trend(&short).is_err());
    }

    #[test]
    fn hand_built_trace_variance() {
        let r = EpochRecord::from_env_risks(0, vec![0.0, 1.0]);
        assert!((r.risk_variance - 0.25).abs() < 1e-12);
        let r = EpochRecord::from_env_risks(0, vec![0.3, 0.3, 0.3]);
        assert!(r.risk_variance.abs() < 1e-15);
    }
}
