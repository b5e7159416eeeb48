use serde::{Deserialize, Serialize};

use super::protocol::TrialRecord;

/// 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let denom = 1.0 + z * z / n_f;
    let center = (p + z * z / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z * z / (4.0 * n_f * n_f)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Success rate of a batch of trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspMetrics {
    pub policy: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

impl GraspMetrics {
    pub fn from_trials(policy: impl Into<String>, records: &[TrialRecord]) -> Self {
        let n = records.len();
        let k = records.iter().filter(|r| r.success).count();
        let (lo, hi) = wilson_interval(k, n);
        Self {
            policy: policy.into(),
            trials: n,
            successes: k,
            success_rate: if n == 0 { 0.0 } else { k as f64 / n as f64 },
            wilson_low: lo,
            wilson_high: hi,
        }
    }
}

/// Clean and noisy runs of the same policy on the same scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedShift {
    pub clean: GraspMetrics,
    pub noisy: GraspMetrics,
    /// Clean minus noisy success rate.
    pub degradation: f64,
    /// Trials that succeeded clean and failed noisy, and the reverse.
    pub lost: usize,
    pub gained: usize,
}

impl PairedShift {
    pub fn new(policy: &str, clean: &[TrialRecord], noisy: &[TrialRecord]) -> Self {
        let c = GraspMetrics::from_trials(policy, clean);
        let n = GraspMetrics::from_trials(policy, noisy);
        let lost = clean.iter().zip(noisy).filter(|(a, b)| a.success && !b.success).count();
        let gained = clean.iter().zip(noisy).filter(|(a, b)| !a.success && b.success).count();
        Self {
            degradation: c.success_rate - n.success_rate,
            clean: c,
            noisy: n,
            lost,
            gained,
        }
    }
}
