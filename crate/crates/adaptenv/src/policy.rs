//! Environment policies: learnable distributions over the transformation
//! parameter `γ`.
//!
//! Two learnable families are provided, plus a frozen point-mass policy that
//! reproduces classical fixed-environment training through the same code
//! path:
//!
//! - [`ContinuousPolicy`]: `γ ~ Beta(α, β)` on (0, 1), where the shape
//!   parameters are produced by a small generator network
//!   (`softplus(net(seed)) + ε`). Policy gradients use the score function
//!   (REINFORCE); the Beta–Beta KL to the prior and its gradient are exact.
//! - [`DiscretePolicy`]: a categorical over `k` environments with
//!   probabilities `softmax(logits/τ)`, sampled through the Gumbel-Softmax
//!   relaxation so gradients flow through the soft sample.
//! - [`PointMassPolicy`]: a fixed list of atoms, sampled in order with no
//!   learnable parameters.

use crate::error::{Error, Result};
use crate::special::{digamma, ln_beta, log_sum_exp, softmax, softplus, trigamma};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta as BetaDist, Distribution};
use serde::{Deserialize, Serialize};

/// Keep sampled `γ` strictly inside (0, 1).
const GAMMA_MARGIN: f64 = 1e-9;

/// Generator network architecture: fixed learnable seed vector fed through
/// one tanh hidden layer into two raw outputs.
pub const SEED_DIM: usize = 8;
pub const HIDDEN_DIM: usize = 64;
const RAW_DIM: usize = 2;

/// One sampled environment parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnvDraw {
    /// A continuous `γ ∈ (0, 1)`.
    Continuous(f64),
    /// A relaxed one-hot vector over discrete environments.
    Relaxed(Vec<f64>),
}

impl EnvDraw {
    /// Index of the largest coordinate for relaxed draws.
    pub fn argmax(&self) -> Option<usize> {
        match self {
            EnvDraw::Continuous(_) => None,
            EnvDraw::Relaxed(y) => y
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i),
        }
    }
}

/// A batch of `K` environment draws with their log-probabilities under the
/// policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySample {
    pub draws: Vec<EnvDraw>,
    pub log_probs: Vec<f64>,
}

impl PolicySample {
    /// Check the structural invariants: equal lengths, `K ≥ 1`, relaxed
    /// entries nonnegative and summing to one.
    pub fn validate(&self) -> Result<()> {
        if self.draws.is_empty() || self.draws.len() != self.log_probs.len() {
            return Err(Error::PolicyConfig(format!(
                "sample must hold K >= 1 draws with matching log_probs, got {} draws / {} log_probs",
                self.draws.len(),
                self.log_probs.len()
            )));
        }
        for draw in &self.draws {
            match draw {
                EnvDraw::Continuous(g) => {
                    if !(*g > 0.0 && *g < 1.0) {
                        return Err(Error::PolicyConfig(format!(
                            "continuous draw {g} outside (0, 1)"
                        )));
                    }
                }
                EnvDraw::Relaxed(y) => {
                    let s: f64 = y.iter().sum();
                    if y.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-9 {
                        return Err(Error::PolicyConfig(format!(
                            "relaxed draw must be a probability vector, sum {s}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Prior `Π₀` over the environment parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PriorSpec {
    Beta { alpha0: f64, beta0: f64 },
    Categorical(Vec<f64>),
}

impl PriorSpec {
    pub fn beta(alpha0: f64, beta0: f64) -> Result<Self> {
        if !(alpha0 > 0.0 && beta0 > 0.0 && alpha0.is_finite() && beta0.is_finite()) {
            return Err(Error::PolicyConfig(format!(
                "beta prior needs positive finite parameters, got ({alpha0}, {beta0})"
            )));
        }
        Ok(PriorSpec::Beta { alpha0, beta0 })
    }

    /// A categorical prior. Probabilities must be nonnegative and sum to 1;
    /// a zero atom makes the prior invalid as a KL reference wherever the
    /// policy has mass there (the KL is reported as `+∞`, not an error).
    pub fn categorical(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::PolicyConfig("categorical prior is empty".into()));
        }
        let s: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::PolicyConfig(format!(
                "categorical prior must be a probability vector, sum {s}"
            )));
        }
        Ok(PriorSpec::Categorical(probs))
    }

    pub fn uniform_categorical(k: usize) -> Self {
        PriorSpec::Categorical(vec![1.0 / k as f64; k])
    }
}

/// Linear temperature annealing from 1.0 to 0.3 over the first `t0` epochs.
pub fn anneal_temperature(epoch: usize, t0: usize) -> f64 {
    assert!(t0 >= 1, "temperature schedule needs t0 >= 1");
    1.0 - 0.7 * (epoch.min(t0) as f64) / (t0 as f64)
}

// ---------------------------------------------------------------------------
// Continuous (Beta) policy
// ---------------------------------------------------------------------------

/// The generator network that maps a fixed learnable seed to the two raw
/// Beta shape outputs. All parameters (including the seed) are learnable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorNet {
    pub seed: Vec<f64>,        // SEED_DIM
    pub w1: Vec<f64>,          // SEED_DIM x HIDDEN_DIM, row-major by input
    pub b1: Vec<f64>,          // HIDDEN_DIM
    pub w2: Vec<f64>,          // HIDDEN_DIM x RAW_DIM
    pub b2: Vec<f64>,          // RAW_DIM
}

/// Forward cache for the generator network.
#[derive(Debug, Clone)]
pub struct GeneratorForward {
    pub hidden: Vec<f64>,
    pub raw: [f64; 2],
}

impl GeneratorNet {
    /// Initialize so that the derived shape parameters start at the uniform
    /// Beta(1, 1): the output bias is set to `softplus⁻¹(1 - ε)` and the
    /// output weights are small.
    pub fn init(rng: &mut ChaCha8Rng, epsilon: f64) -> Self {
        use crate::special::inv_softplus;
        let mut randn = |scale: f64| -> f64 {
            // Box-Muller on two uniforms keeps the dependency surface small.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let seed: Vec<f64> = (0..SEED_DIM).map(|_| randn(1.0)).collect();
        let w1_scale = (2.0 / SEED_DIM as f64).sqrt();
        let w1: Vec<f64> = (0..SEED_DIM * HIDDEN_DIM).map(|_| randn(w1_scale)).collect();
        let b1 = vec![0.0; HIDDEN_DIM];
        let w2: Vec<f64> = (0..HIDDEN_DIM * RAW_DIM).map(|_| randn(0.01)).collect();
        let b2 = vec![inv_softplus(1.0 - epsilon); RAW_DIM];
        GeneratorNet { seed, w1, b1, w2, b2 }
    }

    pub fn forward(&self) -> GeneratorForward {
        let mut hidden = vec![0.0; HIDDEN_DIM];
        for j in 0..HIDDEN_DIM {
            let mut acc = self.b1[j];
            for i in 0..SEED_DIM {
                acc += self.seed[i] * self.w1[i * HIDDEN_DIM + j];
            }
            hidden[j] = acc.tanh();
        }
        let mut raw = [0.0; 2];
        for (o, r) in raw.iter_mut().enumerate() {
            let mut acc = self.b2[o];
            for (j, h) in hidden.iter().enumerate() {
                acc += h * self.w2[j * RAW_DIM + o];
            }
            *r = acc;
        }
        GeneratorForward { hidden, raw }
    }

    /// Backpropagate `d_raw` through the network, returning a flat gradient
    /// aligned with [`GeneratorNet::params_flat`].
    pub fn backward(&self, fwd: &GeneratorForward, d_raw: [f64; 2]) -> Vec<f64> {
        let mut d_seed = vec![0.0; SEED_DIM];
        let mut d_w1 = vec![0.0; SEED_DIM * HIDDEN_DIM];
        let mut d_b1 = vec![0.0; HIDDEN_DIM];
        let mut d_w2 = vec![0.0; HIDDEN_DIM * RAW_DIM];
        let d_b2 = [d_raw[0], d_raw[1]];

        let mut d_hidden = vec![0.0; HIDDEN_DIM];
        for j in 0..HIDDEN_DIM {
            for o in 0..RAW_DIM {
                d_w2[j * RAW_DIM + o] = fwd.hidden[j] * d_raw[o];
                d_hidden[j] += self.w2[j * RAW_DIM + o] * d_raw[o];
            }
            // tanh'(x) = 1 - tanh(x)^2
            let d_pre = d_hidden[j] * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
            d_b1[j] = d_pre;
            for i in 0..SEED_DIM {
                d_w1[i * HIDDEN_DIM + j] = self.seed[i] * d_pre;
                d_seed[i] += self.w1[i * HIDDEN_DIM + j] * d_pre;
            }
        }

        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend_from_slice(&d_seed);
        flat.extend_from_slice(&d_w1);
        flat.extend_from_slice(&d_b1);
        flat.extend_from_slice(&d_w2);
        flat.extend_from_slice(&d_b2);
        flat
    }

    pub fn param_count(&self) -> usize {
        SEED_DIM + SEED_DIM * HIDDEN_DIM + HIDDEN_DIM + HIDDEN_DIM * RAW_DIM + RAW_DIM
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend_from_slice(&self.seed);
        flat.extend_from_slice(&self.w1);
        flat.extend_from_slice(&self.b1);
        flat.extend_from_slice(&self.w2);
        flat.extend_from_slice(&self.b2);
        flat
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[at..at + dst.len()]);
            at += dst.len();
        };
        take(&mut self.seed);
        take(&mut self.w1);
        take(&mut self.b1);
        take(&mut self.w2);
        take(&mut self.b2);
    }
}

/// Beta policy over continuous `γ ∈ (0, 1)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuousPolicy {
    pub net: GeneratorNet,
    /// Stability offset added to the softplus outputs.
    pub epsilon: f64,
}

impl ContinuousPolicy {
    pub fn new(rng: &mut ChaCha8Rng, epsilon: f64) -> Self {
        ContinuousPolicy {
            net: GeneratorNet::init(rng, epsilon),
            epsilon,
        }
    }

    /// Derive the Beta shape parameters: `softplus(raw) + ε`.
    pub fn beta_params(&self) -> Result<(f64, f64)> {
        let fwd = self.net.forward();
        self.beta_params_from(&fwd)
    }

    pub(crate) fn beta_params_from(&self, fwd: &GeneratorForward) -> Result<(f64, f64)> {
        if !fwd.raw[0].is_finite() || !fwd.raw[1].is_finite() {
            return Err(Error::PolicyNumerical(format!(
                "generator produced non-finite raw outputs ({}, {})",
                fwd.raw[0], fwd.raw[1]
            )));
        }
        Ok((
            softplus(fwd.raw[0]) + self.epsilon,
            softplus(fwd.raw[1]) + self.epsilon,
        ))
    }

    /// Draw `K` independent `γ ~ Beta(α, β)` with exact log-densities.
    pub fn sample(&self, k: usize, rng: &mut ChaCha8Rng) -> Result<PolicySample> {
        if k == 0 {
            return Err(Error::PolicyConfig("K must be >= 1".into()));
        }
        let (alpha, beta) = self.beta_params()?;
        sample_beta(alpha, beta, k, rng)
    }

    /// Exact Beta–Beta KL divergence to the prior.
    pub fn kl_to_prior(&self, prior: &PriorSpec) -> Result<f64> {
        let (alpha, beta) = self.beta_params()?;
        match prior {
            PriorSpec::Beta { alpha0, beta0 } => Ok(beta_beta_kl(alpha, beta, *alpha0, *beta0)),
            PriorSpec::Categorical(_) => Err(Error::PolicyConfig(
                "continuous policy paired with categorical prior".into(),
            )),
        }
    }

    /// Gradient of the KL to a Beta prior with respect to `(α, β)`.
    pub fn kl_grad(alpha: f64, beta: f64, alpha0: f64, beta0: f64) -> (f64, f64) {
        let t = trigamma(alpha + beta);
        let excess = alpha + beta - alpha0 - beta0;
        (
            (alpha - alpha0) * trigamma(alpha) - excess * t,
            (beta - beta0) * trigamma(beta) - excess * t,
        )
    }

    /// Score function `∇_{(α,β)} ln p(γ | α, β)`.
    pub fn score(alpha: f64, beta: f64, gamma: f64) -> (f64, f64) {
        let d_ab = digamma(alpha + beta);
        (
            gamma.ln() - digamma(alpha) + d_ab,
            (1.0 - gamma).ln() - digamma(beta) + d_ab,
        )
    }

    /// Analytic mean `α / (α + β)`.
    pub fn analytic_mean(&self) -> Result<f64> {
        let (a, b) = self.beta_params()?;
        Ok(a / (a + b))
    }
}

/// Beta log-density at `γ`.
pub fn beta_log_density(alpha: f64, beta: f64, gamma: f64) -> f64 {
    (alpha - 1.0) * gamma.ln() + (beta - 1.0) * (1.0 - gamma).ln() - ln_beta(alpha, beta)
}

/// Draw `k` samples from `Beta(α, β)` with log-densities.
pub fn sample_beta(alpha: f64, beta: f64, k: usize, rng: &mut ChaCha8Rng) -> Result<PolicySample> {
    let dist = BetaDist::new(alpha, beta)
        .map_err(|e| Error::PolicyConfig(format!("invalid beta parameters: {e}")))?;
    let mut draws = Vec::with_capacity(k);
    let mut log_probs = Vec::with_capacity(k);
    for _ in 0..k {
        let g: f64 = dist.sample(rng);
        let g = g.clamp(GAMMA_MARGIN, 1.0 - GAMMA_MARGIN);
        draws.push(EnvDraw::Continuous(g));
        log_probs.push(beta_log_density(alpha, beta, g));
    }
    Ok(PolicySample { draws, log_probs })
}

/// Exact `KL(Beta(α, β) ‖ Beta(α₀, β₀))`.
pub fn beta_beta_kl(alpha: f64, beta: f64, alpha0: f64, beta0: f64) -> f64 {
    ln_beta(alpha0, beta0) - ln_beta(alpha, beta)
        + (alpha - alpha0) * digamma(alpha)
        + (beta - beta0) * digamma(beta)
        + (alpha0 + beta0 - alpha - beta) * digamma(alpha + beta)
}

// ---------------------------------------------------------------------------
// Discrete (Gumbel-Softmax categorical) policy
// ---------------------------------------------------------------------------

/// Categorical policy with probabilities `softmax(logits / τ)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscretePolicy {
    pub logits: Vec<f64>,
    pub temperature: f64,
}

impl DiscretePolicy {
    pub fn new(k: usize, temperature: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::PolicyConfig("discrete policy needs k >= 1".into()));
        }
        let p = DiscretePolicy {
            logits: vec![0.0; k],
            temperature,
        };
        p.check_temperature()?;
        Ok(p)
    }

    fn check_temperature(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::PolicyConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    /// Post-softmax probabilities at the current temperature.
    pub fn probs(&self) -> Result<Vec<f64>> {
        self.check_temperature()?;
        let scaled: Vec<f64> = self.logits.iter().map(|&z| z / self.temperature).collect();
        Ok(softmax(&scaled))
    }

    /// Draw `K` Gumbel-Softmax relaxed one-hot samples; `log_probs` record
    /// the categorical log-mass at the argmax index.
    pub fn sample(&self, k_samples: usize, rng: &mut ChaCha8Rng) -> Result<PolicySample> {
        if k_samples == 0 {
            return Err(Error::PolicyConfig("K must be >= 1".into()));
        }
        let probs = self.probs()?;
        let log_pi: Vec<f64> = probs.iter().map(|&p| p.ln()).collect();
        let mut draws = Vec::with_capacity(k_samples);
        let mut log_probs = Vec::with_capacity(k_samples);
        for _ in 0..k_samples {
            let noisy: Vec<f64> = log_pi
                .iter()
                .map(|&lp| {
                    let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
                    let gumbel = -(-u.ln()).ln();
                    (lp + gumbel) / self.temperature
                })
                .collect();
            let y = softmax(&noisy);
            let argmax = y
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("nonempty");
            log_probs.push(log_pi[argmax]);
            draws.push(EnvDraw::Relaxed(y));
        }
        Ok(PolicySample { draws, log_probs })
    }

    /// `KL(softmax(logits/τ) ‖ q)`. A zero prior atom under policy mass
    /// yields `+∞`.
    pub fn kl_to_prior(&self, prior: &PriorSpec) -> Result<f64> {
        let q = match prior {
            PriorSpec::Categorical(q) => q,
            PriorSpec::Beta { .. } => {
                return Err(Error::PolicyConfig(
                    "discrete policy paired with beta prior".into(),
                ))
            }
        };
        if q.len() != self.k() {
            return Err(Error::PolicyConfig(format!(
                "prior has {} atoms, policy has {}",
                q.len(),
                self.k()
            )));
        }
        Ok(categorical_kl(&self.probs()?, q))
    }

    /// Gradient of the KL to a categorical prior with respect to the logits.
    pub fn kl_grad(&self, prior: &PriorSpec) -> Result<Vec<f64>> {
        let q = match prior {
            PriorSpec::Categorical(q) => q,
            PriorSpec::Beta { .. } => {
                return Err(Error::PolicyConfig(
                    "discrete policy paired with beta prior".into(),
                ))
            }
        };
        let p = self.probs()?;
        let kl = categorical_kl(&p, q);
        if !kl.is_finite() {
            return Err(Error::PolicyNumerical(
                "KL to prior is infinite; gradient undefined".into(),
            ));
        }
        Ok(p.iter()
            .zip(q.iter())
            .map(|(&pi, &qi)| pi * ((pi / qi).ln() - kl) / self.temperature)
            .collect())
    }

    /// Entropy of the categorical distribution at the current temperature.
    pub fn entropy(&self) -> Result<f64> {
        Ok(self
            .probs()?
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum())
    }

    /// Backpropagate per-sample gradients `∂L/∂y` through the relaxed
    /// samples to the logits (the sampled Gumbel noise is fixed).
    ///
    /// For `y = softmax((ln π + g)/τ)` with `π = softmax(logits/τ)` the chain
    /// collapses to `∂L/∂logit_m = (1/τ²) Σ_k b_{k,m}` where
    /// `b_{k,j} = y_{k,j} (∂L/∂y_{k,j} - Σ_i ∂L/∂y_{k,i} y_{k,i})`.
    pub fn backprop_relaxed(&self, draws: &[EnvDraw], d_y: &[Vec<f64>]) -> Result<Vec<f64>> {
        let k = self.k();
        let mut grad = vec![0.0; k];
        let tau2 = self.temperature * self.temperature;
        for (draw, dy) in draws.iter().zip(d_y.iter()) {
            let y = match draw {
                EnvDraw::Relaxed(y) => y,
                EnvDraw::Continuous(_) => {
                    return Err(Error::PolicyConfig(
                        "continuous draw passed to discrete backprop".into(),
                    ))
                }
            };
            let inner: f64 = dy.iter().zip(y.iter()).map(|(d, yi)| d * yi).sum();
            for j in 0..k {
                grad[j] += y[j] * (dy[j] - inner) / tau2;
            }
        }
        Ok(grad)
    }
}

/// `Σ p ln(p/q)` with the +∞ convention for zero prior atoms.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        kl += pi * (pi / qi).ln();
    }
    kl.max(0.0)
}

// ---------------------------------------------------------------------------
// Point-mass policy (fixed environments)
// ---------------------------------------------------------------------------

/// Atom of a frozen point-mass policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnvAtom {
    Continuous(f64),
    Discrete(usize),
}

/// A frozen policy placing unit mass on a fixed list of environments;
/// sampling returns the atoms in order. This is how the fixed-environment
/// baselines run through the adaptive machinery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointMassPolicy {
    pub atoms: Vec<EnvAtom>,
    /// Number of discrete environments, for relaxed one-hot encoding.
    pub k_discrete: Option<usize>,
}

impl PointMassPolicy {
    pub fn continuous(gammas: Vec<f64>) -> Result<Self> {
        if gammas.is_empty() {
            return Err(Error::PolicyConfig("point mass needs >= 1 atom".into()));
        }
        Ok(PointMassPolicy {
            atoms: gammas.into_iter().map(EnvAtom::Continuous).collect(),
            k_discrete: None,
        })
    }

    pub fn discrete(indices: Vec<usize>, k: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::PolicyConfig("point mass needs >= 1 atom".into()));
        }
        if indices.iter().any(|&i| i >= k) {
            return Err(Error::PolicyConfig(format!(
                "point-mass atom out of range for k = {k}"
            )));
        }
        Ok(PointMassPolicy {
            atoms: indices.into_iter().map(EnvAtom::Discrete).collect(),
            k_discrete: Some(k),
        })
    }

    /// Deterministically emit all atoms (hard one-hots for discrete atoms).
    pub fn sample(&self) -> PolicySample {
        let draws = self
            .atoms
            .iter()
            .map(|atom| match atom {
                EnvAtom::Continuous(g) => EnvDraw::Continuous(*g),
                EnvAtom::Discrete(i) => {
                    let k = self.k_discrete.expect("discrete atoms carry k");
                    let mut y = vec![0.0; k];
                    y[*i] = 1.0;
                    EnvDraw::Relaxed(y)
                }
            })
            .collect::<Vec<_>>();
        let log_probs = vec![0.0; draws.len()];
        PolicySample { draws, log_probs }
    }
}

// ---------------------------------------------------------------------------
// Unified policy handle used by the trainer
// ---------------------------------------------------------------------------

/// Any environment policy the trainer can drive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Policy {
    Continuous(ContinuousPolicy),
    Discrete(DiscretePolicy),
    PointMass(PointMassPolicy),
}

impl Policy {
    pub fn is_learnable(&self) -> bool {
        !matches!(self, Policy::PointMass(_))
    }

    /// Sample `k` draws; the point-mass policy ignores `k` and returns its
    /// atoms in order without consuming randomness.
    pub fn sample(&self, k: usize, rng: &mut ChaCha8Rng) -> Result<PolicySample> {
        match self {
            Policy::Continuous(p) => p.sample(k, rng),
            Policy::Discrete(p) => p.sample(k, rng),
            Policy::PointMass(p) => Ok(p.sample()),
        }
    }

    /// KL to the prior; a point-mass policy contributes no KL term.
    pub fn kl_to_prior(&self, prior: Option<&PriorSpec>) -> Result<f64> {
        match (self, prior) {
            (Policy::PointMass(_), _) | (_, None) => Ok(0.0),
            (Policy::Continuous(p), Some(prior)) => p.kl_to_prior(prior),
            (Policy::Discrete(p), Some(prior)) => p.kl_to_prior(prior),
        }
    }

    pub fn params_flat(&self) -> Vec<f64> {
        match self {
            Policy::Continuous(p) => p.net.params_flat(),
            Policy::Discrete(p) => p.logits.clone(),
            Policy::PointMass(_) => Vec::new(),
        }
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        match self {
            Policy::Continuous(p) => p.net.set_params_flat(flat),
            Policy::Discrete(p) => p.logits.copy_from_slice(flat),
            Policy::PointMass(_) => assert!(flat.is_empty()),
        }
    }

    /// Short human-readable summary for metric traces.
    pub fn summary(&self) -> PolicySummary {
        match self {
            Policy::Continuous(p) => match p.beta_params() {
                Ok((alpha, beta)) => PolicySummary::Beta {
                    alpha,
                    beta,
                    mean: alpha / (alpha + beta),
                },
                Err(_) => PolicySummary::Beta {
                    alpha: f64::NAN,
                    beta: f64::NAN,
                    mean: f64::NAN,
                },
            },
            Policy::Discrete(p) => PolicySummary::Categorical {
                probs: p.probs().unwrap_or_default(),
                temperature: p.temperature,
            },
            Policy::PointMass(p) => PolicySummary::PointMass {
                atoms: p
                    .atoms
                    .iter()
                    .map(|a| match a {
                        EnvAtom::Continuous(g) => *g,
                        EnvAtom::Discrete(i) => *i as f64,
                    })
                    .collect(),
            },
        }
    }
}

/// Per-epoch policy summary recorded in metric traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySummary {
    Beta { alpha: f64, beta: f64, mean: f64 },
    Categorical { probs: Vec<f64>, temperature: f64 },
    PointMass { atoms: Vec<f64> },
}

/// Log-density/mass helper used by diagnostics: mean log-prob of a sample.
pub fn mean_log_prob(sample: &PolicySample) -> f64 {
    log_sum_exp(&sample.log_probs) - (sample.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn beta_params_softplus_offsets() {
        // Zero raw outputs give softplus(0) + eps = ln 2 + 1e-6.
        let mut p = ContinuousPolicy::new(&mut rng(0), 1e-6);
        p.net.w2.iter_mut().for_each(|w| *w = 0.0);
        p.net.b2 = vec![0.0, 0.0];
        let (a, b) = p.beta_params().unwrap();
        assert_relative_eq!(a, 2.0_f64.ln() + 1e-6, epsilon = 1e-12);
        assert_relative_eq!(b, 2.0_f64.ln() + 1e-6, epsilon = 1e-12);

        // Large raw outputs saturate softplus(x) -> x.
        p.net.b2 = vec![20.0, 20.0];
        let (a, b) = p.beta_params().unwrap();
        assert_relative_eq!(a, 20.000001, epsilon = 1e-6);
        assert_relative_eq!(b, 20.000001, epsilon = 1e-6);
    }

    #[test]
    fn beta_params_non_finite_rejected() {
        let mut p = ContinuousPolicy::new(&mut rng(0), 1e-6);
        p.net.b2 = vec![f64::NAN, 0.0];
        assert!(matches!(
            p.beta_params(),
            Err(Error::PolicyNumerical(_))
        ));
    }

    #[test]
    fn discovered_mean_matches_shape_ratio() {
        assert_relative_eq!(3.54 / (3.54 + 6.46), 0.354, epsilon = 1e-12);
    }

    #[test]
    fn uniform_beta_draws_have_zero_log_prob() {
        let s = sample_beta(1.0, 1.0, 4, &mut rng(7)).unwrap();
        s.validate().unwrap();
        for (draw, lp) in s.draws.iter().zip(&s.log_probs) {
            match draw {
                EnvDraw::Continuous(g) => assert!(*g > 0.0 && *g < 1.0),
                _ => panic!("expected continuous draw"),
            }
            assert_abs_diff_eq!(*lp, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn concentrated_beta_mean_near_half() {
        let s = sample_beta(50.0, 50.0, 1000, &mut rng(11)).unwrap();
        let mean: f64 = s
            .draws
            .iter()
            .map(|d| match d {
                EnvDraw::Continuous(g) => *g,
                _ => unreachable!(),
            })
            .sum::<f64>()
            / 1000.0;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let p = ContinuousPolicy::new(&mut rng(3), 1e-6);
        let a = p.sample(8, &mut rng(42)).unwrap();
        let b = p.sample(8, &mut rng(42)).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.log_probs, b.log_probs);
    }

    #[test]
    fn anneal_schedule_endpoints() {
        assert_abs_diff_eq!(anneal_temperature(0, 10), 1.0);
        assert_abs_diff_eq!(anneal_temperature(10, 10), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(anneal_temperature(25, 10), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(anneal_temperature(5, 10), 0.65, epsilon = 1e-12);
    }

    #[test]
    fn gumbel_low_temperature_is_one_hot() {
        // At τ = 1e-4 every sample is one-hot to within 0.99; at τ = 0.01
        // the top-two Gumbel gap (an Exp(1) variable) dips below τ·ln 99 in
        // ≈4.5% of draws, so the bulk of the samples clear 0.99 and the
        // mean max-coordinate stays near 1.
        let max_coord = |d: &EnvDraw| match d {
            EnvDraw::Relaxed(y) => y.iter().cloned().fold(0.0, f64::max),
            _ => panic!("expected relaxed draw"),
        };

        let sharp = DiscretePolicy {
            logits: vec![0.0; 5],
            temperature: 1e-4,
        };
        let s = sharp.sample(100, &mut rng(5)).unwrap();
        s.validate().unwrap();
        for d in &s.draws {
            assert!(max_coord(d) >= 0.99, "max coord {}", max_coord(d));
        }

        let soft = DiscretePolicy {
            logits: vec![0.0; 5],
            temperature: 0.01,
        };
        let s = soft.sample(100, &mut rng(5)).unwrap();
        let maxes: Vec<f64> = s.draws.iter().map(max_coord).collect();
        let hits = maxes.iter().filter(|&&m| m >= 0.99).count();
        let mean = maxes.iter().sum::<f64>() / maxes.len() as f64;
        assert!(hits >= 90, "only {hits}/100 samples effectively one-hot");
        assert!(mean >= 0.98, "mean max coordinate {mean}");
    }

    #[test]
    fn gumbel_respects_extreme_logits() {
        for &tau in &[0.3, 0.65, 1.0] {
            let p = DiscretePolicy {
                logits: vec![10.0, -10.0],
                temperature: tau,
            };
            let s = p.sample(100, &mut rng(9)).unwrap();
            let hits = s
                .draws
                .iter()
                .filter(|d| d.argmax() == Some(0))
                .count();
            assert!(hits >= 99, "tau {tau}: only {hits}/100 argmax hits");
        }
    }

    #[test]
    fn single_environment_sample_is_exact() {
        let p = DiscretePolicy::new(1, 0.5).unwrap();
        let s = p.sample(3, &mut rng(1)).unwrap();
        for d in &s.draws {
            assert_eq!(d, &EnvDraw::Relaxed(vec![1.0]));
        }
        for lp in &s.log_probs {
            assert_abs_diff_eq!(*lp, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        assert!(DiscretePolicy::new(3, 0.0).is_err());
        assert!(DiscretePolicy::new(3, -1.0).is_err());
        let p = DiscretePolicy {
            logits: vec![0.0; 3],
            temperature: 0.0,
        };
        assert!(matches!(
            p.sample(2, &mut rng(0)),
            Err(Error::PolicyConfig(_))
        ));
    }

    #[test]
    fn kl_identical_betas_is_zero() {
        assert_abs_diff_eq!(beta_beta_kl(1.0, 1.0, 1.0, 1.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(beta_beta_kl(3.2, 0.8, 3.2, 0.8), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_beta22_vs_uniform_closed_form() {
        // KL(Beta(2,2) || Beta(1,1)) = ln 6 - 5/3.
        let expected = 6.0_f64.ln() - 5.0 / 3.0;
        assert_relative_eq!(beta_beta_kl(2.0, 2.0, 1.0, 1.0), expected, epsilon = 1e-12);
    }

    #[test]
    fn categorical_one_hot_vs_uniform_is_ln2() {
        let kl = categorical_kl(&[1.0, 0.0], &[0.5, 0.5]);
        assert_relative_eq!(kl, 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn zero_prior_atom_gives_infinite_kl() {
        let kl = categorical_kl(&[0.5, 0.5], &[1.0, 0.0]);
        assert!(kl.is_infinite() && kl > 0.0);
    }

    #[test]
    fn point_mass_sample_is_atoms_in_order() {
        let p = PointMassPolicy::continuous(vec![0.1, 0.2]).unwrap();
        let s = p.sample();
        assert_eq!(
            s.draws,
            vec![EnvDraw::Continuous(0.1), EnvDraw::Continuous(0.2)]
        );
        let p = PointMassPolicy::discrete(vec![0, 2], 5).unwrap();
        let s = p.sample();
        assert_eq!(s.draws[1], EnvDraw::Relaxed(vec![0.0, 0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn generator_backward_matches_finite_differences() {
        let p = ContinuousPolicy::new(&mut rng(13), 1e-6);
        let fwd = p.net.forward();
        // d(raw0)/dparams via backward with seed (1, 0)
        let grad = p.net.backward(&fwd, [1.0, 0.0]);
        let mut flat = p.net.params_flat();
        let h = 1e-6;
        for idx in [0, 3, 10, 200, SEED_DIM + SEED_DIM * HIDDEN_DIM + 5, grad.len() - 1] {
            let orig = flat[idx];
            flat[idx] = orig + h;
            let mut pp = p.clone();
            pp.net.set_params_flat(&flat);
            let up = pp.net.forward().raw[0];
            flat[idx] = orig - h;
            pp.net.set_params_flat(&flat);
            let dn = pp.net.forward().raw[0];
            flat[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert_relative_eq!(grad[idx], fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }
}
