//! Evaluation metrics: worst-case accuracy, per-environment profiles,
//! discovered-policy statistics, and loss-variance traces.

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::policy::{EnvDraw, Policy};
use crate::trainer::EpochRecord;
use crate::transforms::{EnvDataset, EnvDescriptor};
use ndarray::ArrayView2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const EVAL_CHUNK: usize = 1024;

/// Accuracy per environment, in descriptor order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvAccuracyProfile {
    pub descriptors: Vec<EnvDescriptor>,
    pub accuracies: Vec<f64>,
}

impl EnvAccuracyProfile {
    pub fn new(descriptors: Vec<EnvDescriptor>, accuracies: Vec<f64>) -> Result<Self> {
        if descriptors.len() != accuracies.len() {
            return Err(Error::config("descriptor/accuracy length mismatch"));
        }
        if accuracies.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::config("accuracies must lie in [0, 1]"));
        }
        Ok(EnvAccuracyProfile {
            descriptors,
            accuracies,
        })
    }

    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }
}

/// Minimum accuracy across environments or groups.
pub fn worst_case_accuracy(profile: &EnvAccuracyProfile) -> Result<f64> {
    profile
        .accuracies
        .iter()
        .cloned()
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::config("empty accuracy profile"))
}

/// Fraction of argmax-correct predictions on a feature batch.
pub fn batch_accuracy(model: &Mlp, features: ArrayView2<f32>, labels: &[u8]) -> f64 {
    let logits = model.logits(features);
    let mut correct = 0usize;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if pred == y as usize {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

/// Accuracy of the predictor on each test environment, in descriptor order.
pub fn env_accuracy_profile(model: &Mlp, test_sets: &[EnvDataset]) -> Result<EnvAccuracyProfile> {
    if test_sets.is_empty() {
        return Err(Error::config("no test environments"));
    }
    let mut descriptors = Vec::with_capacity(test_sets.len());
    let mut accuracies = Vec::with_capacity(test_sets.len());
    for ds in test_sets {
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut at = 0;
        while at < ds.len() {
            let chunk = ds.materialize(at, EVAL_CHUNK)?;
            let n = chunk.labels.len();
            correct +=
                (batch_accuracy(model, chunk.features.view(), &chunk.labels) * n as f64).round()
                    as usize;
            total += n;
            at += n;
        }
        descriptors.push(ds.descriptor.clone());
        accuracies.push(correct as f64 / total.max(1) as f64);
    }
    EnvAccuracyProfile::new(descriptors, accuracies)
}

/// Accuracy per annotated group of one grouped dataset.
pub fn group_accuracy_profile(model: &Mlp, dataset: &EnvDataset) -> Result<EnvAccuracyProfile> {
    let mut correct = [0usize; 4];
    let mut total = [0usize; 4];
    let mut at = 0;
    while at < dataset.len() {
        let chunk = dataset.materialize(at, EVAL_CHUNK)?;
        let groups = chunk
            .groups
            .as_ref()
            .ok_or_else(|| Error::config("dataset carries no group annotations"))?;
        let logits = model.logits(chunk.features.view());
        for ((row, &y), &g) in logits.rows().into_iter().zip(&chunk.labels).zip(groups) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            total[g as usize] += 1;
            if pred == y as usize {
                correct[g as usize] += 1;
            }
        }
        at += chunk.labels.len();
    }
    let mut descriptors = Vec::new();
    let mut accuracies = Vec::new();
    for g in 0..4 {
        if total[g] > 0 {
            descriptors.push(EnvDescriptor::Group { id: g as u8 });
            accuracies.push(correct[g] as f64 / total[g] as f64);
        }
    }
    EnvAccuracyProfile::new(descriptors, accuracies)
}

/// Monte Carlo statistics of `γ` under the policy. For Beta policies the
/// analytic mean `α/(α+β)` is reported alongside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyStats {
    pub mc_mean: f64,
    pub mc_std: f64,
    pub analytic_mean: Option<f64>,
}

pub fn policy_stats(policy: &Policy, n_samples: usize, rng: &mut ChaCha8Rng) -> Result<PolicyStats> {
    if n_samples < 100 {
        return Err(Error::config("policy stats need n_samples >= 100"));
    }
    let sample = policy.sample(n_samples, rng)?;
    let values: Vec<f64> = sample
        .draws
        .iter()
        .map(|d| match d {
            EnvDraw::Continuous(g) => *g,
            EnvDraw::Relaxed(_) => d.argmax().unwrap_or(0) as f64,
        })
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let analytic_mean = match policy {
        Policy::Continuous(p) => Some(p.analytic_mean()?),
        _ => None,
    };
    Ok(PolicyStats {
        mc_mean: mean,
        mc_std: var.sqrt(),
        analytic_mean,
    })
}

/// Per-epoch cross-environment loss variance series from a metric trace.
pub fn loss_variance_trace(trace: &[EpochRecord]) -> Vec<f64> {
    trace.iter().map(|r| r.risk_variance).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ContinuousPolicy;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn worst_case_is_minimum() {
        let profile = EnvAccuracyProfile::new(
            vec![
                EnvDescriptor::Correlation { e: 0.0 },
                EnvDescriptor::Correlation { e: 0.5 },
                EnvDescriptor::Correlation { e: 1.0 },
            ],
            vec![0.95, 0.72, 0.88],
        )
        .unwrap();
        assert_abs_diff_eq!(worst_case_accuracy(&profile).unwrap(), 0.72);
        assert!(worst_case_accuracy(&profile).unwrap() <= profile.mean());

        let single = EnvAccuracyProfile::new(
            vec![EnvDescriptor::Angle { index: 0 }],
            vec![0.81],
        )
        .unwrap();
        assert_abs_diff_eq!(worst_case_accuracy(&single).unwrap(), 0.81);

        let empty = EnvAccuracyProfile::new(vec![], vec![]).unwrap();
        assert!(worst_case_accuracy(&empty).is_err());
    }

    #[test]
    fn policy_stats_uniform_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut policy = ContinuousPolicy::new(&mut rng, 1e-6);
        // force exactly Beta(1, 1)
        policy.net.w2.iter_mut().for_each(|w| *w = 0.0);
        policy.net.b2 = vec![crate::special::inv_softplus(1.0 - 1e-6); 2];
        let policy = Policy::Continuous(policy);
        let stats = policy_stats(&policy, 10_000, &mut rng).unwrap();
        assert!((stats.mc_mean - 0.5).abs() < 0.02, "{}", stats.mc_mean);
        let analytic = stats.analytic_mean.unwrap();
        assert_abs_diff_eq!(analytic, 0.5, epsilon = 1e-9);
        // analytic and MC agree within 3 standard errors of the mean
        let se = stats.mc_std / (10_000f64).sqrt();
        assert!((stats.mc_mean - analytic).abs() < 3.0 * se);
        assert!(policy_stats(&policy, 50, &mut rng).is_err());
    }
}
