//! flowrl: a desk-scale laboratory for online reinforcement learning of
//! flow-matching generative models.
//!
//! The lab trains small velocity-field models on analytic Gaussian-mixture
//! data, where densities, posteriors, and optimal velocity fields all have
//! closed forms. That makes every identity behind the training algorithms
//! checkable to tight numerical tolerances instead of eyeballed on images.
//!
//! Main pieces:
//!
//! - [`schedule`] — noise schedules (rectified flow) and conversions among
//!   velocity / score / data predictors.
//! - [`mixture`] — the Gaussian-mixture oracle: exact marginals, posteriors,
//!   velocities, and positive/negative policy splits.
//! - [`nn`] — a small MLP velocity model with manual backprop, Adam, and EMA.
//! - [`fm`] — flow-matching pretraining with selectable loss weighting.
//! - [`samplers`] — Euler ODE, second-order multistep ODE, SDE Euler, and
//!   DDIM-style SDE steps, plus trajectory recording.
//! - [`nft`] — negative-aware finetuning: optimality rewards, implicit
//!   positive/negative policies, the contrastive loss, and the online loop.
//! - [`baselines`] — reverse-process comparators: group-relative policy
//!   gradient on SDE step likelihoods, and rejection finetuning.
//! - [`rewards`] — synthetic point rewards (indicator / radial / halfspace).
//! - [`harness`] — config, checkpoints, CSV metrics, verification suites,
//!   ablations, and SVG plotting behind the CLI.

pub mod baselines;
pub mod error;
pub mod fm;
pub mod harness;
pub mod metrics;
pub mod mixture;
pub mod nft;
pub mod nn;
pub mod rewards;
pub mod rng;
pub mod samplers;
pub mod schedule;

pub use error::{Error, Result};
