//! Run configuration: a strict, sectioned TOML schema.
//!
//! Unknown keys are rejected everywhere (`deny_unknown_fields`) so a typo'd
//! hyperparameter fails loudly instead of silently using a default. The
//! defaults are the reference training setup: Adam(0.9, 0.999) at 1e-4
//! with weight decay 1e-5, batch size 128, 30 epochs, 5 warm-up epochs,
//! policy learning-rate multiplier 100x (continuous) / 10x (discrete),
//! K = 5 Monte Carlo environments (3 for the grouped stand-in), and KL
//! weight 1.0.

use crate::error::{Error, Result};
use crate::objectives::RobustConfig;
use crate::trainer::{PolicyEstimator, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ColoredMnist,
    RotatedMnist,
    SyntheticGroups,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DatasetKind::ColoredMnist => "colored_mnist",
            DatasetKind::RotatedMnist => "rotated_mnist",
            DatasetKind::SyntheticGroups => "synthetic_groups",
        };
        write!(f, "{s}")
    }
}

/// Which policy family drives environment sampling. `Auto` resolves to a
/// Beta policy for continuous families and a categorical policy for the
/// rotation family; fixed (non-adaptive) methods always resolve to the
/// frozen point-mass policy over `fixed_gammas`/`fixed_angles`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Auto,
    Beta,
    Categorical,
    PointMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Desk-scale training subset size.
    pub subsample_train: usize,
    /// Validation subset size (per-environment grids reuse it).
    pub subsample_val: usize,
    /// Test subset size; 0 means the full test split.
    pub subsample_test: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            dataset: DatasetKind::ColoredMnist,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            subsample_train: 20_000,
            subsample_val: 2_000,
            subsample_test: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr_theta: f64,
    /// Policy learning-rate multiplier; default 100 for continuous
    /// policies, 10 for discrete ones.
    pub policy_lr_multiplier: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub t0_temp_epochs: usize,
    pub patience: usize,
    pub resample_envs: bool,
    pub lr_decay: bool,
    pub baseline_decay: f64,
    pub policy_estimator: PolicyEstimator,
    pub hidden_units: usize,
    pub hidden_layers: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr_theta: 1e-4,
            policy_lr_multiplier: None,
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
            hidden_units: 256,
            hidden_layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub kind: PolicyKind,
    /// Stability offset for the Beta shape parameters.
    pub epsilon: f64,
    pub prior_alpha: f64,
    pub prior_beta: f64,
    /// Fixed correlation environments (fixed methods, continuous families).
    pub fixed_gammas: Vec<f64>,
    /// Fixed angle indices (fixed methods, rotation family).
    pub fixed_angles: Vec<usize>,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            kind: PolicyKind::Auto,
            epsilon: 1e-6,
            prior_alpha: 1.0,
            prior_beta: 1.0,
            fixed_gammas: vec![0.1, 0.2],
            fixed_angles: vec![0, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupsSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub spurious_corr: f64,
}

impl Default for GroupsSection {
    fn default() -> Self {
        GroupsSection {
            n_train: 10_000,
            n_val: 2_000,
            n_test: 10_000,
            spurious_corr: 0.95,
        }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub robust: RobustConfig,
    pub train: TrainSection,
    pub policy: PolicySection,
    pub groups: GroupsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            robust: RobustConfig::default(),
            train: TrainSection::default(),
            policy: PolicySection::default(),
            groups: GroupsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.robust.validate()?;
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds must list at least one seed"));
        }
        if self.run.subsample_train == 0 {
            return Err(Error::config("run.subsample_train must be positive"));
        }
        if self.train.hidden_layers == 0 || self.train.hidden_units == 0 {
            return Err(Error::config("model must have at least one hidden layer"));
        }
        if !(0.0..=1.0).contains(&self.groups.spurious_corr) {
            return Err(Error::config("groups.spurious_corr must lie in [0, 1]"));
        }
        for &g in &self.policy.fixed_gammas {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::config("policy.fixed_gammas must lie in [0, 1]"));
            }
        }
        for &a in &self.policy.fixed_angles {
            if a >= crate::transforms::ANGLES_DEG.len() {
                return Err(Error::config("policy.fixed_angles must index the angle set"));
            }
        }
        // dataset/method compatibility is resolved by the experiment layer
        Ok(())
    }

    /// Resolve the effective policy kind for this dataset and method.
    pub fn effective_policy_kind(&self) -> PolicyKind {
        if !self.robust.method.is_adaptive() {
            return PolicyKind::PointMass;
        }
        match self.policy.kind {
            PolicyKind::Auto => match self.run.dataset {
                DatasetKind::RotatedMnist => PolicyKind::Categorical,
                _ => PolicyKind::Beta,
            },
            k => k,
        }
    }

    /// Resolve the learning-rate multiplier default (100x continuous,
    /// 10x discrete).
    pub fn effective_policy_lr_multiplier(&self) -> f64 {
        self.train.policy_lr_multiplier.unwrap_or(
            match self.effective_policy_kind() {
                PolicyKind::Categorical => 10.0,
                _ => 100.0,
            },
        )
    }

    /// Effective Monte Carlo sample count: point-mass policies always use
    /// one draw per atom.
    pub fn effective_k(&self) -> usize {
        match self.effective_policy_kind() {
            PolicyKind::PointMass => match self.run.dataset {
                DatasetKind::RotatedMnist => self.policy.fixed_angles.len(),
                _ => self.policy.fixed_gammas.len(),
            },
            _ => self.robust.k_samples,
        }
    }

    /// Assemble the trainer configuration for one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut robust = self.robust.clone();
        robust.k_samples = self.effective_k();
        // fixed methods never run the policy update; keep their penalty
        // weight schedule identical to the adaptive counterpart
        TrainConfig {
            robust,
            lr_theta: self.train.lr_theta,
            policy_lr_multiplier: self.effective_policy_lr_multiplier(),
            adam_beta1: self.train.adam_beta1,
            adam_beta2: self.train.adam_beta2,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            warmup_epochs: self.train.warmup_epochs,
            t0_temp_epochs: self.train.t0_temp_epochs,
            patience: self.train.patience,
            resample_envs: self.train.resample_envs,
            lr_decay: self.train.lr_decay,
            baseline_decay: self.train.baseline_decay,
            policy_estimator: self.train.policy_estimator,
            seed,
        }
    }

    /// Short digest of the canonical serialized config, used to name run
    /// directories.
    pub fn config_hash(&self) -> String {
        let text = self.to_toml_string().unwrap_or_default();
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        digest
            .iter()
            .take(6)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Run directory for one seed: `<dataset>_<method>_<hash>_s<seed>`.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.run.out_dir.join(format!(
            "{}_{}_{}_s{}",
            self.run.dataset,
            self.robust.method,
            self.config_hash(),
            seed
        ))
    }
}

/// Environment-variable overrides for data and output directories.
pub fn apply_env_overrides(cfg: &mut RunConfig) {
    if let Ok(dir) = std::env::var("ADAPTENV_DATA_DIR") {
        if !dir.is_empty() {
            cfg.run.data_dir = PathBuf::from(dir);
        }
    }
    if let Ok(dir) = std::env::var("ADAPTENV_OUT_DIR") {
        if !dir.is_empty() {
            cfg.run.out_dir = PathBuf::from(dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Method;

    #[test]
    fn defaults_match_reference_setup() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.lr_theta, 1e-4);
        assert_eq!(cfg.train.adam_beta1, 0.9);
        assert_eq!(cfg.train.adam_beta2, 0.999);
        assert_eq!(cfg.train.weight_decay, 1e-5);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.warmup_epochs, 5);
        assert_eq!(cfg.robust.beta_kl, 1.0);
        assert_eq!(cfg.robust.k_samples, 5);
        assert_eq!(cfg.run.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"
[run]
dataset = "colored_mnist"
not_a_real_key = 3
"#;
        let err = RunConfig::from_toml_str(text).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("not_a_real_key"), "{msg}");
    }

    #[test]
    fn invalid_method_rejected() {
        let text = r#"
[robust]
method = "IRMv7"
"#;
        assert!(RunConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.robust.method = Method::AGroupDro;
        cfg.run.dataset = DatasetKind::SyntheticGroups;
        cfg.robust.k_samples = 3;
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        let text2 = back.to_toml_string().unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn policy_kind_and_multiplier_resolution() {
        let mut cfg = RunConfig::default();
        cfg.run.dataset = DatasetKind::ColoredMnist;
        cfg.robust.method = Method::AIrm;
        assert_eq!(cfg.effective_policy_kind(), PolicyKind::Beta);
        assert_eq!(cfg.effective_policy_lr_multiplier(), 100.0);

        cfg.run.dataset = DatasetKind::RotatedMnist;
        assert_eq!(cfg.effective_policy_kind(), PolicyKind::Categorical);
        assert_eq!(cfg.effective_policy_lr_multiplier(), 10.0);

        cfg.robust.method = Method::Irm;
        assert_eq!(cfg.effective_policy_kind(), PolicyKind::PointMass);
        assert_eq!(cfg.effective_k(), 2);
    }

    #[test]
    fn run_dir_embeds_dataset_method_hash_seed() {
        let cfg = RunConfig::default();
        let dir = cfg.run_dir(1).to_string_lossy().to_string();
        assert!(dir.contains("colored_mnist"));
        assert!(dir.contains("A_IRM"));
        assert!(dir.ends_with("_s1"));
    }
}
