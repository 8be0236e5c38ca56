//! Synthetic point rewards standing in for learned reward models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;

/// 1 iff the target component has the maximum responsibility at `x0`; ties
/// break toward the lower component index.
#[allow(clippy::needless_range_loop)]
pub fn indicator_reward(x0: &[f64], target: usize, mix: &GaussianMixture) -> f64 {
    let mut best = 0usize;
    let mut best_lp = f64::NEG_INFINITY;
    for (k, c) in mix.components().iter().enumerate() {
        let mut lp = c.weight.ln();
        for d in 0..mix.dim() {
            let diff = x0[d] - c.mean[d];
            lp += -0.5 * (diff * diff / c.var[d] + c.var[d].ln());
        }
        if lp > best_lp {
            best_lp = lp;
            best = k;
        }
    }
    if best == target {
        1.0
    } else {
        0.0
    }
}

/// Smooth radial reward `exp(-||x0 - center||^2 / tau)`.
pub fn radial_reward(x0: &[f64], center: &[f64], tau: f64) -> f64 {
    let d2: f64 = x0
        .iter()
        .zip(center)
        .map(|(x, c)| (x - c) * (x - c))
        .sum();
    (-d2 / tau).exp()
}

/// 1 iff `<normal, x0> >= offset` (closed halfspace).
pub fn halfspace_reward(x0: &[f64], normal: &[f64], offset: f64) -> f64 {
    let dot: f64 = x0.iter().zip(normal).map(|(x, n)| x * n).sum();
    if dot >= offset {
        1.0
    } else {
        0.0
    }
}

/// Declarative reward used in configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    Indicator {
        target_component: usize,
    },
    Radial {
        center: Vec<f64>,
        tau: f64,
    },
    Halfspace {
        normal: Vec<f64>,
        offset: f64,
    },
    /// Convex combination of rewards; weights must sum to 1 so the value
    /// stays in [0, 1].
    Combined {
        parts: Vec<WeightedReward>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedReward {
    pub weight: f64,
    #[serde(flatten)]
    pub reward: Box<RewardSpec>,
}

impl RewardSpec {
    pub fn validate(&self, mix: &GaussianMixture) -> Result<()> {
        match self {
            RewardSpec::Indicator { target_component } => {
                if *target_component >= mix.components().len() {
                    return Err(Error::Config(format!(
                        "target component {target_component} outside mixture of {}",
                        mix.components().len()
                    )));
                }
            }
            RewardSpec::Radial { center, tau } => {
                if center.len() != mix.dim() {
                    return Err(Error::Config("radial center dimension mismatch".into()));
                }
                if *tau <= 0.0 {
                    return Err(Error::Config("radial tau must be > 0".into()));
                }
            }
            RewardSpec::Halfspace { normal, .. } => {
                if normal.len() != mix.dim() {
                    return Err(Error::Config("halfspace normal dimension mismatch".into()));
                }
                if normal.iter().all(|&n| n == 0.0) {
                    return Err(Error::Config("halfspace normal must be nonzero".into()));
                }
            }
            RewardSpec::Combined { parts } => {
                if parts.is_empty() {
                    return Err(Error::Config("combined reward needs parts".into()));
                }
                let total: f64 = parts.iter().map(|p| p.weight).sum();
                if (total - 1.0).abs() > 1e-9 || parts.iter().any(|p| p.weight < 0.0) {
                    return Err(Error::Config(
                        "combined reward weights must be nonnegative and sum to 1".into(),
                    ));
                }
                for p in parts {
                    p.reward.validate(mix)?;
                }
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, x0: &[f64], mix: &GaussianMixture) -> f64 {
        match self {
            RewardSpec::Indicator { target_component } => {
                indicator_reward(x0, *target_component, mix)
            }
            RewardSpec::Radial { center, tau } => radial_reward(x0, center, *tau),
            RewardSpec::Halfspace { normal, offset } => halfspace_reward(x0, normal, *offset),
            RewardSpec::Combined { parts } => parts
                .iter()
                .map(|p| p.weight * p.reward.evaluate(x0, mix))
                .sum(),
        }
    }
}
