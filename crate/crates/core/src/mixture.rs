//! Closed-form Gaussian-mixture oracle.
//!
//! For diagonal Gaussian-mixture data every quantity the training algorithms
//! reason about has an exact expression: diffused marginals, posteriors over
//! clean data, optimal velocity fields, and the positive/negative policy
//! split induced by a component-wise-constant reward. This module computes
//! them all in 64-bit floats, log-space where ratios are involved, so
//! identities can be asserted to 1e-8 .. 1e-12 tolerances.
//!
//! Component-wise-constant rewards keep the split inside the mixture family
//! and are therefore the exact-oracle path. Arbitrary smooth rewards are
//! supported through the Monte-Carlo oracle in [`mc`], at looser tolerances.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.8378770664093453;

/// One diagonal Gaussian component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Per-dimension variance (not standard deviation).
    pub var: Vec<f64>,
}

/// A Gaussian mixture with diagonal covariances.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
    dim: usize,
}

impl GaussianMixture {
    /// Validates weights (nonnegative, summing to 1 within 1e-9, then
    /// renormalized exactly), variances (strictly positive), and dimensions.
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidParam("mixture needs >= 1 component".into()));
        }
        let dim = components[0].mean.len();
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.var.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.mean.len().min(c.var.len()),
                });
            }
            if c.weight < 0.0 || !c.weight.is_finite() {
                return Err(Error::InvalidParam(format!(
                    "component {k} has invalid weight {}",
                    c.weight
                )));
            }
            if c.var.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
                return Err(Error::InvalidParam(format!(
                    "component {k} has non-positive variance"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        let mut components = components;
        for c in &mut components {
            c.weight /= total;
        }
        Ok(Self { components, dim })
    }

    /// Equal-weight helper used all over the tests.
    pub fn uniform(means: Vec<Vec<f64>>, var: f64) -> Result<Self> {
        let k = means.len();
        let w = 1.0 / k as f64;
        Self::new(
            means
                .into_iter()
                .map(|mean| {
                    let d = mean.len();
                    MixtureComponent {
                        weight: w,
                        mean,
                        var: vec![var; d],
                    }
                })
                .collect(),
        )
    }

    /// A single standard Gaussian in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self::new(vec![MixtureComponent {
            weight: 1.0,
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }])
        .expect("standard mixture is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Mixture mean per dimension.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (mi, &cm) in m.iter_mut().zip(&c.mean) {
                *mi += c.weight * cm;
            }
        }
        m
    }

    /// Mixture variance per dimension: `E[x^2] - E[x]^2`.
    #[allow(clippy::needless_range_loop)]
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim];
        for c in &self.components {
            for d in 0..self.dim {
                v[d] += c.weight * (c.var[d] + c.mean[d] * c.mean[d]);
            }
        }
        for d in 0..self.dim {
            v[d] -= m[d] * m[d];
        }
        v
    }

    /// Draw one sample; also returns the index of the component it came from.
    #[allow(clippy::needless_range_loop)]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                idx = k;
                break;
            }
        }
        let c = &self.components[idx];
        let x = (0..self.dim)
            .map(|d| {
                let z: f64 = rng.sample(StandardNormal);
                c.mean[d] + c.var[d].sqrt() * z
            })
            .collect();
        (x, idx)
    }

    /// Log density of the mixture itself (no diffusion).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_marginal_density_impl(x, 1.0, 0.0)
    }

    /// Per-component log joint `log w_k + log N(x_t; alpha mu_k, alpha^2 S_k + sigma^2 I)`.
    #[allow(clippy::needless_range_loop)]
    fn diffused_log_joints(&self, x_t: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                let mut lp = c.weight.ln();
                for d in 0..self.dim {
                    let var = alpha * alpha * c.var[d] + sigma * sigma;
                    let diff = x_t[d] - alpha * c.mean[d];
                    lp += -0.5 * (diff * diff / var + var.ln() + LN_2PI);
                }
                lp
            })
            .collect()
    }

    fn log_marginal_density_impl(&self, x_t: &[f64], alpha: f64, sigma: f64) -> f64 {
        log_sum_exp(&self.diffused_log_joints(x_t, alpha, sigma))
    }

    /// Log density of the diffused marginal at time `t`.
    ///
    /// Each component diffuses to `N(alpha mu_k, alpha^2 S_k + sigma^2 I)`.
    pub fn log_marginal_density<S: NoiseSchedule + ?Sized>(
        &self,
        sched: &S,
        x_t: &[f64],
        t: f64,
    ) -> f64 {
        self.log_marginal_density_impl(x_t, sched.alpha(t), sched.sigma(t))
    }

    /// Density of the diffused marginal at time `t`.
    pub fn marginal_density<S: NoiseSchedule + ?Sized>(&self, sched: &S, x_t: &[f64], t: f64) -> f64 {
        self.log_marginal_density(sched, x_t, t).exp()
    }

    /// Posterior component responsibilities given `x_t` at time `t`.
    pub fn responsibilities<S: NoiseSchedule + ?Sized>(
        &self,
        sched: &S,
        x_t: &[f64],
        t: f64,
    ) -> Vec<f64> {
        let joints = self.diffused_log_joints(x_t, sched.alpha(t), sched.sigma(t));
        let lse = log_sum_exp(&joints);
        joints.iter().map(|&lp| (lp - lse).exp()).collect()
    }

    /// Posterior mean `E[x0 | x_t]`: responsibility-weighted per-component
    /// Gaussian conditioning.
    pub fn posterior_mean<S: NoiseSchedule + ?Sized>(
        &self,
        sched: &S,
        x_t: &[f64],
        t: f64,
    ) -> Vec<f64> {
        let (alpha, sigma) = (sched.alpha(t), sched.sigma(t));
        let resp = self.responsibilities(sched, x_t, t);
        let mut out = vec![0.0; self.dim];
        for (c, &r) in self.components.iter().zip(&resp) {
            for d in 0..self.dim {
                let gain = alpha * c.var[d] / (alpha * alpha * c.var[d] + sigma * sigma);
                let m = c.mean[d] + gain * (x_t[d] - alpha * c.mean[d]);
                out[d] += r * m;
            }
        }
        out
    }

    /// Log posterior density `log pi(x0 | x_t)` at time `t`.
    pub fn posterior_log_density<S: NoiseSchedule + ?Sized>(
        &self,
        sched: &S,
        x0: &[f64],
        x_t: &[f64],
        t: f64,
    ) -> f64 {
        let (alpha, sigma) = (sched.alpha(t), sched.sigma(t));
        let joints = self.diffused_log_joints(x_t, alpha, sigma);
        let lse = log_sum_exp(&joints);
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&joints)
            .map(|(c, &lj)| {
                let mut lp = lj - lse; // log responsibility
                for d in 0..self.dim {
                    let marg = alpha * alpha * c.var[d] + sigma * sigma;
                    let gain = alpha * c.var[d] / marg;
                    let m = c.mean[d] + gain * (x_t[d] - alpha * c.mean[d]);
                    let v = c.var[d] * sigma * sigma / marg;
                    let diff = x0[d] - m;
                    lp += -0.5 * (diff * diff / v + v.ln() + LN_2PI);
                }
                lp
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// Exact optimal velocity of the mixture's flow at `(x_t, t)`:
    /// `v = a_t x_t + b_t E[x0 | x_t]` with `a = sigma_dot / sigma` and
    /// `b = alpha_dot - sigma_dot alpha / sigma`. Singular at `t = 0`.
    pub fn exact_velocity<S: NoiseSchedule + ?Sized>(
        &self,
        sched: &S,
        x_t: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        let sigma = sched.sigma(t);
        if sigma <= 0.0 {
            return Err(Error::Singularity {
                t,
                what: "sigma vanishes; optimal velocity undefined",
            });
        }
        let a = sched.sigma_dot(t) / sigma;
        let b = sched.alpha_dot(t) - sched.sigma_dot(t) * sched.alpha(t) / sigma;
        let post = self.posterior_mean(sched, x_t, t);
        Ok(x_t
            .iter()
            .zip(&post)
            .map(|(x, p)| a * x + b * p)
            .collect())
    }

    /// Reweight components by a per-component reward in `[0, 1]`, producing
    /// the positive/negative policy split.
    ///
    /// Positive weights are `w_k r_k / sum_j w_j r_j`, negative weights
    /// `w_k (1 - r_k) / sum_j w_j (1 - r_j)`, and the mean reward is
    /// `sum_k w_k r_k`. Errors when every reward is 0 (positive split
    /// undefined) or every reward is 1 (negative split undefined).
    pub fn split_by_componentwise_reward(&self, reward: &[f64]) -> Result<PolicyTriplet> {
        if reward.len() != self.components.len() {
            return Err(Error::DimensionMismatch {
                expected: self.components.len(),
                got: reward.len(),
            });
        }
        if reward.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::InvalidParam("rewards must lie in [0, 1]".into()));
        }
        let mean_reward: f64 = self
            .components
            .iter()
            .zip(reward)
            .map(|(c, &r)| c.weight * r)
            .sum();
        if mean_reward <= 0.0 {
            return Err(Error::DegenerateSplit(
                "all rewards are 0; positive policy undefined",
            ));
        }
        if mean_reward >= 1.0 {
            return Err(Error::DegenerateSplit(
                "all rewards are 1; negative policy undefined",
            ));
        }
        let reweight = |f: &dyn Fn(f64) -> f64, norm: f64| -> Result<GaussianMixture> {
            GaussianMixture::new(
                self.components
                    .iter()
                    .zip(reward)
                    .map(|(c, &r)| MixtureComponent {
                        weight: c.weight * f(r) / norm,
                        mean: c.mean.clone(),
                        var: c.var.clone(),
                    })
                    .filter(|c| c.weight > 0.0)
                    .collect(),
            )
        };
        let positive = reweight(&|r| r, mean_reward)?;
        let negative = reweight(&|r| 1.0 - r, 1.0 - mean_reward)?;
        Ok(PolicyTriplet {
            old: self.clone(),
            positive,
            negative,
            mean_reward,
        })
    }
}

/// The old policy together with its positive/negative split and the mean
/// reward under the old policy.
#[derive(Debug, Clone)]
pub struct PolicyTriplet {
    pub old: GaussianMixture,
    pub positive: GaussianMixture,
    pub negative: GaussianMixture,
    pub mean_reward: f64,
}

/// Both algebraic forms of the improvement direction, their average, and
/// their disagreement.
#[derive(Debug, Clone)]
pub struct ImprovementDirection {
    /// Average of the two forms.
    pub delta: Vec<f64>,
    /// `(1 - alpha) (v_old - v_minus)`.
    pub from_negative: Vec<f64>,
    /// `alpha (v_plus - v_old)`.
    pub from_positive: Vec<f64>,
    /// Max absolute componentwise gap between the two forms.
    pub discrepancy: f64,
    pub alpha: f64,
}

impl PolicyTriplet {
    /// Scalar mixing coefficient
    /// `alpha(x_t) = (pi+_t(x_t) / pi_old_t(x_t)) * mean_reward`.
    ///
    /// Always in `[0, 1]` for rewards in `[0, 1]` since
    /// `pi+_t * mean_reward <= pi_old_t` pointwise. Errors where the old
    /// marginal underflows and the ratio is undefined.
    pub fn alpha_coeff<S: NoiseSchedule + ?Sized>(
        &self,
        sched: &S,
        x_t: &[f64],
        t: f64,
    ) -> Result<f64> {
        let lp_old = self.old.log_marginal_density(sched, x_t, t);
        if !lp_old.is_finite() {
            return Err(Error::VanishingDensity);
        }
        let lp_pos = self.positive.log_marginal_density(sched, x_t, t);
        Ok((lp_pos - lp_old).exp() * self.mean_reward)
    }

    /// The improvement direction, computed through both of its equal forms.
    pub fn improvement_direction<S: NoiseSchedule + ?Sized>(
        &self,
        sched: &S,
        x_t: &[f64],
        t: f64,
    ) -> Result<ImprovementDirection> {
        let alpha = self.alpha_coeff(sched, x_t, t)?;
        let v_old = self.old.exact_velocity(sched, x_t, t)?;
        let v_plus = self.positive.exact_velocity(sched, x_t, t)?;
        let v_minus = self.negative.exact_velocity(sched, x_t, t)?;
        let from_negative: Vec<f64> = v_old
            .iter()
            .zip(&v_minus)
            .map(|(o, m)| (1.0 - alpha) * (o - m))
            .collect();
        let from_positive: Vec<f64> = v_plus
            .iter()
            .zip(&v_old)
            .map(|(p, o)| alpha * (p - o))
            .collect();
        let discrepancy = from_negative
            .iter()
            .zip(&from_positive)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let delta = from_negative
            .iter()
            .zip(&from_positive)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        Ok(ImprovementDirection {
            delta,
            from_negative,
            from_positive,
            discrepancy,
            alpha,
        })
    }

    /// Residual of the posterior mixing identity
    /// `pi_old(x0|x_t) = alpha pi+(x0|x_t) + (1 - alpha) pi-(x0|x_t)`.
    pub fn posterior_split_check<S: NoiseSchedule + ?Sized>(
        &self,
        sched: &S,
        x0: &[f64],
        x_t: &[f64],
        t: f64,
    ) -> Result<f64> {
        let alpha = self.alpha_coeff(sched, x_t, t)?;
        let lhs = self.old.posterior_log_density(sched, x0, x_t, t).exp();
        let p_pos = self.positive.posterior_log_density(sched, x0, x_t, t).exp();
        let p_neg = self.negative.posterior_log_density(sched, x0, x_t, t).exp();
        Ok((lhs - (alpha * p_pos + (1.0 - alpha) * p_neg)).abs())
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub mod mc {
    //! Self-normalized importance-sampling oracle for arbitrary rewards.
    //!
    //! The exact split only stays in the mixture family for component-wise
    //! constant rewards. For a smooth reward `r(x0)` the posterior-weighted
    //! quantities are instead estimated over a fixed pool of old-policy
    //! samples: with kernel weights `u_i = N(x_t; alpha x0_i, sigma^2 I)`,
    //!
    //! - `alpha(x_t) = sum u_i r_i / sum u_i` (posterior mean reward),
    //! - `E+[x0|x_t]` reweights by `u_i r_i`, `E-[x0|x_t]` by `u_i (1-r_i)`,
    //!
    //! and velocities follow from the posterior means. Tolerances are loose
    //! (around 1e-2 at the default pool size) because this is Monte Carlo.

    use super::*;

    pub struct MonteCarloOracle {
        samples: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        mean_reward: f64,
        dim: usize,
    }

    impl MonteCarloOracle {
        /// Draw `n` old-policy samples with a fixed seed and score them.
        pub fn new(
            mix: &GaussianMixture,
            reward: impl Fn(&[f64]) -> f64,
            n: usize,
            seed: u64,
        ) -> Self {
            let mut rng = crate::rng::substream(seed, &[0x6d63]);
            let mut samples = Vec::with_capacity(n);
            let mut rewards = Vec::with_capacity(n);
            for _ in 0..n {
                let (x, _) = mix.sample(&mut rng);
                rewards.push(reward(&x));
                samples.push(x);
            }
            let mean_reward = rewards.iter().sum::<f64>() / n as f64;
            Self {
                samples,
                rewards,
                mean_reward,
                dim: mix.dim(),
            }
        }

        pub fn mean_reward(&self) -> f64 {
            self.mean_reward
        }

        fn log_kernel_weights<S: NoiseSchedule + ?Sized>(
            &self,
            sched: &S,
            x_t: &[f64],
            t: f64,
        ) -> Vec<f64> {
            let (alpha, sigma) = (sched.alpha(t), sched.sigma(t));
            let var = sigma * sigma;
            self.samples
                .iter()
                .map(|x0| {
                    let mut lp = 0.0;
                    for d in 0..self.dim {
                        let diff = x_t[d] - alpha * x0[d];
                        lp += -0.5 * (diff * diff / var + var.ln() + LN_2PI);
                    }
                    lp
                })
                .collect()
        }

        /// `alpha(x_t)`: the posterior mean of the reward given `x_t`.
        pub fn alpha_coeff<S: NoiseSchedule + ?Sized>(
            &self,
            sched: &S,
            x_t: &[f64],
            t: f64,
        ) -> f64 {
            let logw = self.log_kernel_weights(sched, x_t, t);
            let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut num = 0.0;
            let mut den = 0.0;
            for (lw, &r) in logw.iter().zip(&self.rewards) {
                let w = (lw - m).exp();
                num += w * r;
                den += w;
            }
            num / den
        }

        /// Estimated `(v_old, v_plus, v_minus)` at `(x_t, t)`.
        pub fn velocities<S: NoiseSchedule + ?Sized>(
            &self,
            sched: &S,
            x_t: &[f64],
            t: f64,
        ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
            let logw = self.log_kernel_weights(sched, x_t, t);
            let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut w_old = 0.0;
            let mut w_pos = 0.0;
            let mut w_neg = 0.0;
            let mut m_old = vec![0.0; self.dim];
            let mut m_pos = vec![0.0; self.dim];
            let mut m_neg = vec![0.0; self.dim];
            for ((lw, &r), x0) in logw.iter().zip(&self.rewards).zip(&self.samples) {
                let w = (lw - m).exp();
                w_old += w;
                w_pos += w * r;
                w_neg += w * (1.0 - r);
                for d in 0..self.dim {
                    m_old[d] += w * x0[d];
                    m_pos[d] += w * r * x0[d];
                    m_neg[d] += w * (1.0 - r) * x0[d];
                }
            }
            for d in 0..self.dim {
                m_old[d] /= w_old;
                m_pos[d] /= w_pos;
                m_neg[d] /= w_neg;
            }
            let sigma = sched.sigma(t);
            let a = sched.sigma_dot(t) / sigma;
            let b = sched.alpha_dot(t) - sched.sigma_dot(t) * sched.alpha(t) / sigma;
            let to_v = |post: &[f64]| -> Vec<f64> {
                x_t.iter()
                    .zip(post)
                    .map(|(x, p)| a * x + b * p)
                    .collect()
            };
            (to_v(&m_old), to_v(&m_pos), to_v(&m_neg))
        }

        /// Improvement direction from the negative form
        /// `(1 - alpha)(v_old - v_minus)`.
        pub fn improvement_direction<S: NoiseSchedule + ?Sized>(
            &self,
            sched: &S,
            x_t: &[f64],
            t: f64,
        ) -> Vec<f64> {
            let alpha = self.alpha_coeff(sched, x_t, t);
            let (v_old, _, v_minus) = self.velocities(sched, x_t, t);
            v_old
                .iter()
                .zip(&v_minus)
                .map(|(o, mnu)| (1.0 - alpha) * (o - mnu))
                .collect()
        }
    }
}
