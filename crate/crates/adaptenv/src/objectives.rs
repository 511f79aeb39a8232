//! Per-environment risks, robust penalties, and the training objectives.
//!
//! Every penalty comes in two pieces: the scalar value, and the seed
//! vectors the trainer backpropagates through the predictor. Risk and seed
//! computations accumulate in f64 and reduce in a fixed order, so runs are
//! bit-reproducible.

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::policy::EnvDraw;
use crate::special::log_sum_exp;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Robust training method. `A_*` variants sample environments from the
/// learned policy; the plain variants train on a fixed environment list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ERM")]
    Erm,
    #[serde(rename = "IRM")]
    Irm,
    #[serde(rename = "REx")]
    Rex,
    #[serde(rename = "CORAL")]
    Coral,
    #[serde(rename = "GroupDRO")]
    GroupDro,
    #[serde(rename = "A_IRM")]
    AIrm,
    #[serde(rename = "A_REx")]
    ARex,
    #[serde(rename = "A_CORAL")]
    ACoral,
    #[serde(rename = "A_GroupDRO")]
    AGroupDro,
}

impl Method {
    pub fn is_adaptive(self) -> bool {
        matches!(
            self,
            Method::AIrm | Method::ARex | Method::ACoral | Method::AGroupDro
        )
    }

    /// The penalty family shared by the fixed and adaptive variants.
    pub fn penalty(self) -> PenaltyKind {
        match self {
            Method::Irm | Method::AIrm => PenaltyKind::Irm,
            Method::Rex | Method::ARex => PenaltyKind::Rex,
            Method::Coral | Method::ACoral => PenaltyKind::Coral,
            Method::GroupDro | Method::AGroupDro => PenaltyKind::Entropic,
            Method::Erm => PenaltyKind::None,
        }
    }

    /// The fixed counterpart of an adaptive method (used for gain columns).
    pub fn fixed_counterpart(self) -> Option<Method> {
        match self {
            Method::AIrm => Some(Method::Irm),
            Method::ARex => Some(Method::Rex),
            Method::ACoral => Some(Method::Coral),
            Method::AGroupDro => Some(Method::GroupDro),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Method::Erm => "ERM",
            Method::Irm => "IRM",
            Method::Rex => "REx",
            Method::Coral => "CORAL",
            Method::GroupDro => "GroupDRO",
            Method::AIrm => "A_IRM",
            Method::ARex => "A_REx",
            Method::ACoral => "A_CORAL",
            Method::AGroupDro => "A_GroupDRO",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    None,
    Irm,
    Rex,
    Coral,
    Entropic,
}

/// Weights and sampling configuration of the robust objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustConfig {
    pub method: Method,
    /// Penalty weight η after warm-up.
    pub eta: f64,
    /// Penalty weight during warm-up.
    pub eta_warmup: f64,
    /// KL regularization weight β.
    pub beta_kl: f64,
    /// Entropic-risk temperature λ.
    pub lambda_ent: f64,
    /// KL-ball radius ρ added as ρ/λ to the entropic surrogate.
    pub rho: f64,
    /// Monte Carlo environment samples per step.
    pub k_samples: usize,
    /// Use the two-split unbiased IRM penalty estimator.
    pub irm_unbiased: bool,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig {
            method: Method::AIrm,
            eta: 1e4,
            eta_warmup: 1.0,
            beta_kl: 1.0,
            lambda_ent: 10.0,
            rho: 0.0,
            k_samples: 5,
            irm_unbiased: false,
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 0.0 || self.eta_warmup < 0.0 {
            return Err(Error::config("penalty weight eta must be >= 0"));
        }
        if self.beta_kl < 0.0 {
            return Err(Error::config("KL weight beta must be >= 0"));
        }
        if self.lambda_ent <= 0.0 {
            return Err(Error::config("entropic temperature lambda must be > 0"));
        }
        if self.rho < 0.0 {
            return Err(Error::config("KL-ball radius rho must be >= 0"));
        }
        if self.k_samples == 0 {
            return Err(Error::config("k_samples must be >= 1"));
        }
        let needs_pairs = matches!(self.method.penalty(), PenaltyKind::Rex | PenaltyKind::Coral);
        if self.method.is_adaptive() && needs_pairs && self.k_samples < 2 {
            return Err(Error::config(format!(
                "{} needs k_samples >= 2 for its variance/pairwise penalty",
                self.method
            )));
        }
        Ok(())
    }
}

/// Risks of the K sampled environments with the draws that produced them.
#[derive(Debug, Clone)]
pub struct RiskVector {
    pub risks: Vec<f64>,
    pub draws: Option<Vec<EnvDraw>>,
}

impl RiskVector {
    pub fn new(risks: Vec<f64>, draws: Option<Vec<EnvDraw>>) -> Result<Self> {
        if risks.is_empty() {
            return Err(Error::config("risk vector must hold K >= 1 entries"));
        }
        if risks.iter().any(|r| !r.is_finite()) {
            return Err(Error::config("risk vector holds non-finite entries"));
        }
        if let Some(d) = &draws {
            if d.len() != risks.len() {
                return Err(Error::config("risks and draws lengths differ"));
            }
        }
        Ok(RiskVector { risks, draws })
    }

    pub fn from_risks(risks: Vec<f64>) -> Result<Self> {
        RiskVector::new(risks, None)
    }

    pub fn len(&self) -> usize {
        self.risks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.risks.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.risks.iter().sum::<f64>() / self.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Loss applied to the predictor outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy over class logits.
    CrossEntropy,
    /// Squared error on a single output.
    Squared,
}

/// Targets for a loss: class indices or regression values.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [u8]),
    Values(&'a [f32]),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Risk value together with its gradient seed at the logits.
pub struct RiskEval {
    pub risk: f64,
    /// `d(mean loss)/d logits`.
    pub seed: Array2<f32>,
}

/// `dR/dw|_{w=1}` of the scalar-scaled risk, with its own logit seed.
pub struct IrmEval {
    pub g: f64,
    /// `d(g)/d logits`.
    pub seed: Array2<f32>,
}

fn check_targets(logits: &ArrayView2<f32>, targets: &Targets, loss: LossKind) -> Result<()> {
    let (n, c) = logits.dim();
    if n == 0 {
        return Err(Error::config("empty batch"));
    }
    if targets.len() != n {
        return Err(Error::config(format!(
            "{n} rows of logits but {} targets",
            targets.len()
        )));
    }
    match (loss, targets) {
        (LossKind::CrossEntropy, Targets::Classes(cls)) => {
            if cls.iter().any(|&y| y as usize >= c) {
                return Err(Error::config("class label out of range"));
            }
        }
        (LossKind::Squared, Targets::Values(_)) => {
            if c != 1 {
                return Err(Error::config("squared loss expects a single output"));
            }
        }
        _ => return Err(Error::config("loss kind and target kind disagree")),
    }
    Ok(())
}

/// Per-sample losses; index of the first non-finite entry aborts.
pub fn per_sample_losses(
    logits: ArrayView2<f32>,
    targets: Targets,
    loss: LossKind,
) -> Result<Vec<f64>> {
    check_targets(&logits, &targets, loss)?;
    let n = logits.nrows();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = logits.row(i);
        let li = match (loss, &targets) {
            (LossKind::CrossEntropy, Targets::Classes(cls)) => {
                let zs: Vec<f64> = row.iter().map(|&z| z as f64).collect();
                log_sum_exp(&zs) - zs[cls[i] as usize]
            }
            (LossKind::Squared, Targets::Values(vals)) => {
                let d = row[0] as f64 - vals[i] as f64;
                d * d
            }
            _ => unreachable!("checked above"),
        };
        if !li.is_finite() {
            return Err(Error::Numerical {
                batch_index: i,
                message: format!("loss value {li}"),
            });
        }
        out.push(li);
    }
    Ok(out)
}

/// Mean loss over the batch; `clip` bounds each per-sample loss for the
/// bounded-risk variant used by the bound calculators.
pub fn mean_risk(
    logits: ArrayView2<f32>,
    targets: Targets,
    loss: LossKind,
    clip: Option<f64>,
) -> Result<f64> {
    let losses = per_sample_losses(logits, targets, loss)?;
    let n = losses.len() as f64;
    let sum = match clip {
        Some(cap) => losses.iter().map(|&l| l.min(cap)).sum::<f64>(),
        None => losses.iter().sum::<f64>(),
    };
    Ok(sum / n)
}

/// Risk of a predictor on a feature batch.
pub fn env_risk(
    model: &Mlp,
    features: ArrayView2<f32>,
    targets: Targets,
    loss: LossKind,
    clip: Option<f64>,
) -> Result<f64> {
    let logits = model.logits(features);
    mean_risk(logits.view(), targets, loss, clip)
}

/// Risk and logit seed in one pass.
pub fn risk_and_seed(
    logits: ArrayView2<f32>,
    targets: Targets,
    loss: LossKind,
) -> Result<RiskEval> {
    check_targets(&logits, &targets, loss)?;
    let (n, c) = logits.dim();
    let inv_n = 1.0 / n as f64;
    let mut seed = Array2::<f32>::zeros((n, c));
    let mut risk = 0.0f64;
    for i in 0..n {
        let row = logits.row(i);
        match (loss, &targets) {
            (LossKind::CrossEntropy, Targets::Classes(cls)) => {
                let zs: Vec<f64> = row.iter().map(|&z| z as f64).collect();
                let lse = log_sum_exp(&zs);
                let li = lse - zs[cls[i] as usize];
                if !li.is_finite() {
                    return Err(Error::Numerical {
                        batch_index: i,
                        message: format!("loss value {li}"),
                    });
                }
                risk += li;
                for j in 0..c {
                    let p = (zs[j] - lse).exp();
                    let y = f64::from(j == cls[i] as usize);
                    seed[[i, j]] = ((p - y) * inv_n) as f32;
                }
            }
            (LossKind::Squared, Targets::Values(vals)) => {
                let d = row[0] as f64 - vals[i] as f64;
                let li = d * d;
                if !li.is_finite() {
                    return Err(Error::Numerical {
                        batch_index: i,
                        message: format!("loss value {li}"),
                    });
                }
                risk += li;
                seed[[i, 0]] = (2.0 * d * inv_n) as f32;
            }
            _ => unreachable!("checked above"),
        }
    }
    Ok(RiskEval {
        risk: risk * inv_n,
        seed,
    })
}

/// `g = dR(w · logits)/dw |_{w=1}` and its logit seed.
///
/// For cross-entropy, `g = mean_i (Σ_c z_c p_c - z_y)` and
/// `dg_i/dz_k = p_k + p_k (z_k - z̄_i) - 1[k = y_i]` with
/// `z̄_i = Σ_c z_c p_c`. For squared loss, `g = mean_i 2 z_i (z_i - y_i)`.
pub fn irm_grad_and_seed(
    logits: ArrayView2<f32>,
    targets: Targets,
    loss: LossKind,
) -> Result<IrmEval> {
    check_targets(&logits, &targets, loss)?;
    let (n, c) = logits.dim();
    let inv_n = 1.0 / n as f64;
    let mut seed = Array2::<f32>::zeros((n, c));
    let mut g = 0.0f64;
    for i in 0..n {
        let row = logits.row(i);
        match (loss, &targets) {
            (LossKind::CrossEntropy, Targets::Classes(cls)) => {
                let zs: Vec<f64> = row.iter().map(|&z| z as f64).collect();
                let lse = log_sum_exp(&zs);
                let ps: Vec<f64> = zs.iter().map(|&z| (z - lse).exp()).collect();
                let zbar: f64 = zs.iter().zip(&ps).map(|(&z, &p)| z * p).sum();
                let u = zbar - zs[cls[i] as usize];
                if !u.is_finite() {
                    return Err(Error::Numerical {
                        batch_index: i,
                        message: format!("irm term {u}"),
                    });
                }
                g += u;
                for j in 0..c {
                    let y = f64::from(j == cls[i] as usize);
                    let du = ps[j] + ps[j] * (zs[j] - zbar) - y;
                    seed[[i, j]] = (du * inv_n) as f32;
                }
            }
            (LossKind::Squared, Targets::Values(vals)) => {
                let z = row[0] as f64;
                let y = vals[i] as f64;
                let u = 2.0 * z * (z - y);
                g += u;
                seed[[i, 0]] = ((4.0 * z - 2.0 * y) * inv_n) as f32;
            }
            _ => unreachable!("checked above"),
        }
    }
    Ok(IrmEval { g: g * inv_n, seed })
}

/// IRM penalty of a predictor on one batch: `g²` (single-minibatch biased
/// estimator).
pub fn irm_penalty(
    model: &Mlp,
    features: ArrayView2<f32>,
    targets: Targets,
    loss: LossKind,
) -> Result<f64> {
    let logits = model.logits(features);
    let eval = irm_grad_and_seed(logits.view(), targets, loss)?;
    Ok(eval.g * eval.g)
}

// ---------------------------------------------------------------------------
// REx / CORAL / entropic penalties
// ---------------------------------------------------------------------------

/// Population variance (divide by K) of the per-environment risks.
pub fn rex_penalty(risks: &RiskVector) -> Result<f64> {
    if risks.len() < 2 {
        return Err(Error::config("REx variance needs K >= 2 environments"));
    }
    Ok(population_variance(&risks.risks))
}

pub fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Unbiased (n−1) covariance of a feature matrix, accumulated in f64.
pub fn covariance(features: ArrayView2<f32>) -> Result<Array2<f64>> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(Error::config("covariance needs at least 2 rows"));
    }
    let mut mean = vec![0.0f64; d];
    for row in features.rows() {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in features.rows() {
        let centered: Vec<f64> = row
            .iter()
            .zip(&mean)
            .map(|(&v, &m)| v as f64 - m)
            .collect();
        for a in 0..d {
            for b in a..d {
                cov[[a, b]] += centered[a] * centered[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            cov[[a, b]] /= denom;
            cov[[b, a]] = cov[[a, b]];
        }
    }
    Ok(cov)
}

/// Mean squared Frobenius distance between covariance matrices over all
/// unordered environment pairs.
pub fn coral_penalty_from_covs(covs: &[Array2<f64>]) -> Result<f64> {
    if covs.len() < 2 {
        return Err(Error::config("CORAL needs K >= 2 environments"));
    }
    let k = covs.len();
    let mut total = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let mut d2 = 0.0;
            for (a, b) in covs[i].iter().zip(covs[j].iter()) {
                let d = a - b;
                d2 += d * d;
            }
            total += d2;
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}

/// CORAL penalty from per-environment feature matrices.
pub fn coral_penalty(features: &[Array2<f32>]) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::config("CORAL needs K >= 2 environments"));
    }
    let covs: Vec<Array2<f64>> = features
        .iter()
        .map(|f| covariance(f.view()))
        .collect::<Result<_>>()?;
    coral_penalty_from_covs(&covs)
}

/// `dPenalty/dC_i` for the mean-over-pairs CORAL penalty.
pub fn coral_cov_grads(covs: &[Array2<f64>]) -> Vec<Array2<f64>> {
    let k = covs.len();
    let pairs = (k * (k - 1) / 2) as f64;
    let mut grads: Vec<Array2<f64>> = covs.iter().map(|c| Array2::zeros(c.dim())).collect();
    for i in 0..k {
        for j in (i + 1)..k {
            let diff = &covs[i] - &covs[j];
            grads[i].scaled_add(2.0 / pairs, &diff);
            grads[j].scaled_add(-2.0 / pairs, &diff);
        }
    }
    grads
}

/// Backpropagate a covariance gradient to the feature matrix:
/// `dL/dF = center(2 X G / (n-1))` where `X` is the centered feature matrix
/// and `G = dL/dC` is symmetric.
pub fn covariance_backward(features: ArrayView2<f32>, d_cov: &Array2<f64>) -> Array2<f32> {
    let (n, d) = features.dim();
    let mut mean = vec![0.0f64; d];
    for row in features.rows() {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let scale = 2.0 / (n as f64 - 1.0);
    let mut d_x = Array2::<f64>::zeros((n, d));
    for (i, row) in features.rows().into_iter().enumerate() {
        let centered: Vec<f64> = row
            .iter()
            .zip(&mean)
            .map(|(&v, &m)| v as f64 - m)
            .collect();
        for b in 0..d {
            let mut acc = 0.0;
            for a in 0..d {
                acc += centered[a] * d_cov[[a, b]];
            }
            d_x[[i, b]] = scale * acc;
        }
    }
    // d/dF of the centering: subtract the column means of d_x.
    let mut col_mean = vec![0.0f64; d];
    for i in 0..n {
        for b in 0..d {
            col_mean[b] += d_x[[i, b]];
        }
    }
    for m in col_mean.iter_mut() {
        *m /= n as f64;
    }
    Array2::from_shape_fn((n, d), |(i, b)| (d_x[[i, b]] - col_mean[b]) as f32)
}

/// Entropic (smooth worst-case) risk: `(1/λ) ln Σ w e^{λ r}` with a max
/// shift. `weights` default to uniform and must sum to 1.
pub fn entropic_risk(risks: &RiskVector, lambda: f64, weights: Option<&[f64]>) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::config("entropic risk needs lambda > 0"));
    }
    let k = risks.len();
    let terms: Vec<f64> = match weights {
        Some(w) => {
            validate_weights(w, k)?;
            risks
                .risks
                .iter()
                .zip(w)
                .map(|(&r, &wi)| lambda * r + wi.max(f64::MIN_POSITIVE).ln())
                .collect()
        }
        None => risks
            .risks
            .iter()
            .map(|&r| lambda * r - (k as f64).ln())
            .collect(),
    };
    Ok(log_sum_exp(&terms) / lambda)
}

/// Exponential-tilt weights `w_γ e^{λ r_γ} / Σ` used as the entropic-risk
/// gradient with respect to the risks.
pub fn entropic_weights(risks: &RiskVector, lambda: f64, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if lambda <= 0.0 {
        return Err(Error::config("entropic risk needs lambda > 0"));
    }
    let k = risks.len();
    let logs: Vec<f64> = match weights {
        Some(w) => {
            validate_weights(w, k)?;
            risks
                .risks
                .iter()
                .zip(w)
                .map(|(&r, &wi)| lambda * r + wi.max(f64::MIN_POSITIVE).ln())
                .collect()
        }
        None => risks.risks.iter().map(|&r| lambda * r).collect(),
    };
    let lse = log_sum_exp(&logs);
    Ok(logs.iter().map(|&l| (l - lse).exp()).collect())
}

fn validate_weights(w: &[f64], k: usize) -> Result<()> {
    if w.len() != k {
        return Err(Error::config("weights length must equal K"));
    }
    if w.iter().any(|&x| x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("weights must be a probability vector"));
    }
    Ok(())
}

/// Entropic surrogate with the KL-ball slack: `entropic + ρ/λ`.
pub fn groupdro_surrogate(risks: &RiskVector, lambda: f64, rho: f64) -> Result<f64> {
    if rho < 0.0 {
        return Err(Error::config("rho must be >= 0"));
    }
    Ok(entropic_risk(risks, lambda, None)? + rho / lambda)
}

// ---------------------------------------------------------------------------
// Objective dispatch
// ---------------------------------------------------------------------------

/// The policy-averaged training objective for the adaptive methods (and the
/// ERM degenerate case).
pub fn policy_objective(
    config: &RobustConfig,
    eta: f64,
    risks: &RiskVector,
    penalty: f64,
    kl: f64,
) -> Result<f64> {
    match config.method {
        Method::Erm => Ok(risks.mean()),
        Method::AGroupDro => {
            Ok(groupdro_surrogate(risks, config.lambda_ent, config.rho)? + config.beta_kl * kl)
        }
        Method::AIrm | Method::ARex | Method::ACoral => {
            Ok(risks.mean() + eta * penalty + config.beta_kl * kl)
        }
        _ => Err(Error::config(format!(
            "{} is a fixed-environment method; use fixed_env_objective",
            config.method
        ))),
    }
}

/// The fixed-environment objective of the classical baselines.
pub fn fixed_env_objective(
    config: &RobustConfig,
    eta: f64,
    risks: &RiskVector,
    penalty: f64,
) -> Result<f64> {
    match config.method {
        Method::Erm => Ok(risks.mean()),
        Method::GroupDro => entropic_risk(risks, config.lambda_ent, None),
        Method::Irm | Method::Rex | Method::Coral => Ok(risks.mean() + eta * penalty),
        _ => Err(Error::config(format!(
            "{} is an adaptive method; use policy_objective",
            config.method
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::array;

    fn rv(risks: &[f64]) -> RiskVector {
        RiskVector::from_risks(risks.to_vec()).unwrap()
    }

    #[test]
    fn perfect_logits_give_tiny_risk() {
        let logits = array![[20.0f32, -20.0], [-20.0, 20.0]];
        let r = mean_risk(
            logits.view(),
            Targets::Classes(&[0, 1]),
            LossKind::CrossEntropy,
            None,
        )
        .unwrap();
        assert!(r < 1e-6, "risk {r}");
    }

    #[test]
    fn uniform_logits_risk_is_ln2() {
        let logits = Array2::<f32>::zeros((4, 2));
        let r = mean_risk(
            logits.view(),
            Targets::Classes(&[0, 1, 0, 1]),
            LossKind::CrossEntropy,
            None,
        )
        .unwrap();
        assert_relative_eq!(r, 2.0_f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn three_sample_risk_matches_hand_computation() {
        let logits = array![[1.0f32, -0.5], [0.2, 0.9], [-1.3, 0.4]];
        let labels = [0u8, 1, 1];
        let hand: f64 = {
            let mut acc = 0.0;
            for (row, &y) in logits.rows().into_iter().zip(labels.iter()) {
                let z: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                let lse = (z[0].exp() + z[1].exp()).ln();
                acc += lse - z[y as usize];
            }
            acc / 3.0
        };
        let r = mean_risk(
            logits.view(),
            Targets::Classes(&labels),
            LossKind::CrossEntropy,
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(r, hand, epsilon = 1e-8);
    }

    #[test]
    fn clipped_risk_is_bounded() {
        let logits = array![[-30.0f32, 30.0]];
        let clipped = mean_risk(
            logits.view(),
            Targets::Classes(&[0]),
            LossKind::CrossEntropy,
            Some(1.0),
        )
        .unwrap();
        assert_abs_diff_eq!(clipped, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_loss_reports_batch_index() {
        let logits = array![[0.1f32, 0.2], [f32::INFINITY, 0.0]];
        match mean_risk(
            logits.view(),
            Targets::Classes(&[0, 1]),
            LossKind::CrossEntropy,
            None,
        ) {
            Err(Error::Numerical { batch_index, .. }) => assert_eq!(batch_index, 1),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn irm_squared_loss_examples() {
        // f(x) = x, y = x: stationary in the scale, penalty 0.
        let z = array![[0.5f32], [-1.2], [2.0]];
        let y = [0.5f32, -1.2, 2.0];
        let eval = irm_grad_and_seed(z.view(), Targets::Values(&y), LossKind::Squared).unwrap();
        assert_abs_diff_eq!(eval.g * eval.g, 0.0, epsilon = 1e-12);

        // y = 0 with E[x^2] = 1: dR/dw = 2, penalty 4.
        let z = array![[1.0f32], [-1.0]];
        let y = [0.0f32, 0.0];
        let eval = irm_grad_and_seed(z.view(), Targets::Values(&y), LossKind::Squared).unwrap();
        assert_abs_diff_eq!(eval.g, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eval.g * eval.g, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn irm_matches_scale_finite_difference() {
        let logits = array![[1.2f32, -0.3], [0.4, 0.8], [-0.9, 1.5], [2.0, -1.0]];
        let labels = [0u8, 1, 1, 0];
        let eval = irm_grad_and_seed(
            logits.view(),
            Targets::Classes(&labels),
            LossKind::CrossEntropy,
        )
        .unwrap();
        let h = 1e-4;
        let risk_at = |w: f64| -> f64 {
            let scaled = logits.mapv(|z| (z as f64 * w) as f32);
            mean_risk(
                scaled.view(),
                Targets::Classes(&labels),
                LossKind::CrossEntropy,
                None,
            )
            .unwrap()
        };
        let fd = (risk_at(1.0 + h) - risk_at(1.0 - h)) / (2.0 * h);
        assert_relative_eq!(eval.g * eval.g, fd * fd, max_relative = 1e-3);
    }

    #[test]
    fn rex_penalty_values() {
        assert_abs_diff_eq!(rex_penalty(&rv(&[0.2, 0.2, 0.2])).unwrap(), 0.0);
        assert_abs_diff_eq!(rex_penalty(&rv(&[0.0, 1.0])).unwrap(), 0.25, epsilon = 1e-12);
        assert_relative_eq!(
            rex_penalty(&rv(&[0.1, 0.5, 0.9])).unwrap(),
            0.32 / 3.0,
            epsilon = 1e-12
        );
        assert!(rex_penalty(&rv(&[0.3])).is_err());
    }

    #[test]
    fn coral_identical_and_scalar_cases() {
        let f = Array2::from_shape_vec((4, 2), vec![0.1f32, 0.2, 0.4, -0.3, 0.9, 0.0, -0.5, 0.7])
            .unwrap();
        assert_abs_diff_eq!(
            coral_penalty(&[f.clone(), f.clone(), f.clone()]).unwrap(),
            0.0,
            epsilon = 1e-12
        );

        // 1-D features with sample variances 1 and 4 -> (1 - 4)^2 = 9.
        let a = Array2::from_shape_vec((3, 1), vec![-1.0f32, 0.0, 1.0]).unwrap(); // var 1
        let b = Array2::from_shape_vec((3, 1), vec![-2.0f32, 0.0, 2.0]).unwrap(); // var 4
        assert_abs_diff_eq!(coral_penalty(&[a.clone(), b.clone()]).unwrap(), 9.0, epsilon = 1e-9);

        // permutation invariance
        let c = Array2::from_shape_vec((3, 1), vec![0.0f32, 0.5, 1.0]).unwrap();
        let p1 = coral_penalty(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let p2 = coral_penalty(&[c, a, b]).unwrap();
        assert_abs_diff_eq!(p1, p2, epsilon = 1e-12);
    }

    #[test]
    fn coral_rejects_degenerate_inputs() {
        let one_row = Array2::<f32>::zeros((1, 2));
        let ok = Array2::<f32>::zeros((3, 2));
        assert!(coral_penalty(&[one_row, ok.clone()]).is_err());
        assert!(coral_penalty(&[ok]).is_err());
    }

    #[test]
    fn entropic_risk_values() {
        assert_abs_diff_eq!(
            entropic_risk(&rv(&[0.5, 0.5, 0.5]), 3.7, None).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        let expected = ((1.0 + std::f64::consts::E) / 2.0).ln();
        assert_relative_eq!(
            entropic_risk(&rv(&[0.0, 1.0]), 1.0, None).unwrap(),
            expected,
            epsilon = 1e-12
        );
        let big = entropic_risk(&rv(&[0.3, 0.7]), 1e3, None).unwrap();
        assert!((big - 0.7).abs() < 0.01, "limit {big}");
        assert!(entropic_risk(&rv(&[0.1]), 0.0, None).is_err());
    }

    #[test]
    fn groupdro_surrogate_values() {
        let risks = rv(&[0.0, 1.0]);
        let base = entropic_risk(&risks, 1.0, None).unwrap();
        assert_abs_diff_eq!(
            groupdro_surrogate(&risks, 1.0, 0.0).unwrap(),
            base,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            groupdro_surrogate(&risks, 1.0, 0.1).unwrap(),
            base + 0.1,
            epsilon = 1e-12
        );
        let mut prev = 0.0;
        for i in 0..5 {
            let v = groupdro_surrogate(&risks, 1.0, i as f64 * 0.3).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn policy_objective_dispatch() {
        let mut cfg = RobustConfig {
            method: Method::ARex,
            eta: 0.0,
            beta_kl: 0.0,
            ..RobustConfig::default()
        };
        let risks = rv(&[0.4, 0.6]);
        assert_abs_diff_eq!(
            policy_objective(&cfg, 0.0, &risks, 123.0, 55.0).unwrap(),
            0.5,
            epsilon = 1e-12
        );

        cfg.method = Method::AIrm;
        cfg.beta_kl = 1.0;
        let risks = rv(&[0.5, 0.7]);
        assert_relative_eq!(
            policy_objective(&cfg, 100.0, &risks, 0.01, 0.2).unwrap(),
            1.8,
            epsilon = 1e-12
        );

        cfg.method = Method::AGroupDro;
        cfg.rho = 0.0;
        let risks = rv(&[0.4, 0.4, 0.4]);
        assert_abs_diff_eq!(
            policy_objective(&cfg, 0.0, &risks, 0.0, 0.0).unwrap(),
            0.4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn fixed_objective_dispatch() {
        let cfg = RobustConfig {
            method: Method::Irm,
            ..RobustConfig::default()
        };
        assert_abs_diff_eq!(
            fixed_env_objective(&cfg, 1.0, &rv(&[0.6, 0.6]), 0.0).unwrap(),
            0.6,
            epsilon = 1e-12
        );
        let cfg = RobustConfig {
            method: Method::GroupDro,
            lambda_ent: 10.0,
            ..RobustConfig::default()
        };
        assert_relative_eq!(
            fixed_env_objective(&cfg, 0.0, &rv(&[0.3, 0.7]), 0.0).unwrap(),
            0.6325002747357864,
            epsilon = 1e-12
        );
    }

    #[test]
    fn adaptive_pairwise_methods_require_two_samples() {
        let cfg = RobustConfig {
            method: Method::ARex,
            k_samples: 1,
            ..RobustConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RobustConfig {
            method: Method::AIrm,
            k_samples: 1,
            ..RobustConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn entropic_risk_between_min_and_max_and_monotone_in_lambda() {
        let risks = rv(&[0.12, 0.55, 0.83, 0.41]);
        let mut prev = f64::NEG_INFINITY;
        for &lam in &[0.1, 0.5, 1.0, 5.0, 25.0, 125.0] {
            let v = entropic_risk(&risks, lam, None).unwrap();
            assert!(v >= 0.12 - 1e-12 && v <= 0.83 + 1e-12);
            assert!(v >= prev - 1e-12, "not monotone at lambda {lam}");
            prev = v;
        }
    }
}
