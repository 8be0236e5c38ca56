//! Sampler family: first-order Euler ODE, second-order multistep ODE on a
//! log-SNR grid, stochastic Euler (the policy-gradient kernel), and a
//! DDIM-style SDE discretization that avoids boundary singularities.
//!
//! Sampling integrates from `t_hi` (near noise) down to `t_lo` (near data);
//! the terminal state is converted to a clean sample through the data
//! predictor rather than stepping into the `t = 0` singularity. The SDE
//! kernels are written for the rectified-flow schedule, where the
//! stochasticity scale `a` maps to the noise amplitude `g_t = a sqrt(t/(1-t))`
//! (`a = 0` is the ODE, `a = sqrt(2)` the maximum-variance SDE).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::nn::VelocityModel;
use crate::schedule::{self, NoiseSchedule};

/// Anything that can evaluate a velocity at `(x_t, cond, t)`.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&self, x_t: &[f64], cond: usize, t: f64) -> Result<Vec<f64>>;
}

impl VelocityField for VelocityModel {
    fn dim(&self) -> usize {
        self.arch().dim
    }
    fn velocity(&self, x_t: &[f64], cond: usize, t: f64) -> Result<Vec<f64>> {
        self.forward(x_t, cond, t)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn velocity(&self, x_t: &[f64], cond: usize, t: f64) -> Result<Vec<f64>> {
        (**self).velocity(x_t, cond, t)
    }
}

/// The exact velocity field of a Gaussian mixture; ignores the condition.
pub struct OracleField<'a, S: NoiseSchedule + ?Sized> {
    pub mixture: &'a GaussianMixture,
    pub sched: &'a S,
}

impl<'a, S: NoiseSchedule + ?Sized> VelocityField for OracleField<'a, S> {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }
    fn velocity(&self, x_t: &[f64], _cond: usize, t: f64) -> Result<Vec<f64>> {
        self.mixture.exact_velocity(self.sched, x_t, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    EulerOde,
    Multistep2Ode,
    SdeEuler,
    SdeDdim,
}

/// Resolved sampler kind with its stochasticity parameter filled in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResolvedKind {
    EulerOde,
    Multistep2Ode,
    SdeEuler { a: f64 },
    SdeDdim { eta: f64 },
}

pub const MAX_STOCHASTICITY: f64 = std::f64::consts::SQRT_2;

fn default_t_lo() -> f64 {
    1e-3
}
fn default_t_hi() -> f64 {
    1.0 - 1e-3
}

/// Sampler configuration: kind, step count, stochasticity, and the time
/// range of the integration grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub steps: usize,
    /// Stochasticity scale for `sde_euler`, in `[0, sqrt(2)]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    /// ODE-to-max-variance interpolation for `sde_ddim`, in `[0, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default = "default_t_lo")]
    pub t_lo: f64,
    #[serde(default = "default_t_hi")]
    pub t_hi: f64,
    #[serde(default)]
    pub record_trajectory: bool,
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, steps: usize) -> Self {
        Self {
            kind,
            steps,
            a: None,
            eta: None,
            t_lo: default_t_lo(),
            t_hi: default_t_hi(),
            record_trajectory: false,
        }
    }

    pub fn sde_euler(steps: usize, a: f64) -> Self {
        Self {
            a: Some(a),
            ..Self::new(SamplerKind::SdeEuler, steps)
        }
    }

    pub fn sde_ddim(steps: usize, eta: f64) -> Self {
        Self {
            eta: Some(eta),
            ..Self::new(SamplerKind::SdeDdim, steps)
        }
    }

    pub fn with_recording(mut self) -> Self {
        self.record_trajectory = true;
        self
    }

    pub fn resolved(&self) -> Result<ResolvedKind> {
        match self.kind {
            SamplerKind::EulerOde => Ok(ResolvedKind::EulerOde),
            SamplerKind::Multistep2Ode => Ok(ResolvedKind::Multistep2Ode),
            SamplerKind::SdeEuler => {
                let a = self
                    .a
                    .ok_or_else(|| Error::Config("sde_euler needs the `a` parameter".into()))?;
                if !(0.0..=MAX_STOCHASTICITY + 1e-12).contains(&a) {
                    return Err(Error::Config(format!(
                        "stochasticity a = {a} outside [0, sqrt(2)]"
                    )));
                }
                Ok(ResolvedKind::SdeEuler { a })
            }
            SamplerKind::SdeDdim => {
                let eta = self
                    .eta
                    .ok_or_else(|| Error::Config("sde_ddim needs the `eta` parameter".into()))?;
                if !(0.0..=1.0).contains(&eta) {
                    return Err(Error::Config(format!("eta = {eta} outside [0, 1]")));
                }
                Ok(ResolvedKind::SdeDdim { eta })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs steps >= 1".into()));
        }
        // Endpoints stay inside the clamp range; the singular conversions
        // at the ends of the grid rely on it.
        let (lo, hi) = (crate::schedule::T_MIN, 1.0 - crate::schedule::T_MIN);
        if !(lo <= self.t_lo && self.t_lo < self.t_hi && self.t_hi <= hi) {
            return Err(Error::Config(format!(
                "time range [{}, {}] must satisfy {lo} <= t_lo < t_hi <= {hi}",
                self.t_lo, self.t_hi
            )));
        }
        self.resolved().map(|_| ())
    }

    /// Strictly decreasing integration grid of `steps + 1` times.
    ///
    /// Uniform in `t` for Euler and the SDE kinds; uniform in log-SNR for the
    /// multistep solver (its native discretization). Endpoints are pinned to
    /// `t_hi` and `t_lo` exactly.
    pub fn time_grid<S: NoiseSchedule + ?Sized>(&self, sched: &S) -> Vec<f64> {
        let n = self.steps;
        let mut grid = Vec::with_capacity(n + 1);
        match self.kind {
            SamplerKind::Multistep2Ode => {
                let lam_hi = sched.log_snr(self.t_hi);
                let lam_lo = sched.log_snr(self.t_lo);
                for i in 0..=n {
                    if i == 0 {
                        grid.push(self.t_hi);
                    } else if i == n {
                        grid.push(self.t_lo);
                    } else {
                        let lam = lam_hi + (lam_lo - lam_hi) * i as f64 / n as f64;
                        grid.push(sched.time_from_log_snr(lam));
                    }
                }
            }
            _ => {
                for i in 0..=n {
                    if i == 0 {
                        grid.push(self.t_hi);
                    } else if i == n {
                        grid.push(self.t_lo);
                    } else {
                        grid.push(self.t_hi - (self.t_hi - self.t_lo) * i as f64 / n as f64);
                    }
                }
            }
        }
        grid
    }
}

/// One recorded sampling step: state and model velocity at time `t`, plus
/// the injected noise for SDE kinds.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub noise: Option<Vec<f64>>,
}

/// A recorded sampling path. Only the SDE kinds store per-step noise; the
/// clean sample `x0` comes from the terminal data-predictor conversion.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub cond: usize,
    pub steps: Vec<TrajectoryStep>,
    pub terminal_t: f64,
    pub terminal_state: Vec<f64>,
    pub x0: Vec<f64>,
}

/// First-order Euler ODE update from `t` down to `s`:
/// `x_s = x_t - (t - s) v`.
pub fn euler_ode_step(x_t: &[f64], v: &[f64], t: f64, s: f64) -> Vec<f64> {
    let dt = t - s;
    x_t.iter().zip(v).map(|(x, vi)| x - dt * vi).collect()
}

/// Gaussian parameters of the stochastic Euler kernel from `t` to `s < t`
/// under rectified flow. Returns `(mean, var)` with
/// `mean = x_t - (t-s) [v + (g^2/2t)(x_t + (1-t) v)]` and `var = g^2 (t-s)`,
/// `g^2 = a^2 t / (1-t)`.
pub fn sde_euler_mean_var(
    x_t: &[f64],
    v: &[f64],
    t: f64,
    s: f64,
    a: f64,
) -> Result<(Vec<f64>, f64)> {
    if !(0.0 < t && t < 1.0) {
        return Err(Error::Singularity {
            t,
            what: "SDE kernel needs t strictly inside (0, 1)",
        });
    }
    if s >= t {
        return Err(Error::Grid(format!("step must go backward: s = {s}, t = {t}")));
    }
    let dt = t - s;
    let g2 = a * a * t / (1.0 - t);
    let mean = x_t
        .iter()
        .zip(v)
        .map(|(x, vi)| {
            let langevin = (g2 / (2.0 * t)) * (x + (1.0 - t) * vi);
            x - dt * vi - dt * langevin
        })
        .collect();
    Ok((mean, g2 * dt))
}

/// Stochastic Euler step; returns the new state, the standard normal draw
/// used, and the kernel's Gaussian parameters (needed for likelihoods).
#[allow(clippy::type_complexity)]
pub fn sde_euler_step<R: Rng + ?Sized>(
    x_t: &[f64],
    v: &[f64],
    t: f64,
    s: f64,
    a: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    let (mean, var) = sde_euler_mean_var(x_t, v, t, s, a)?;
    let std = var.sqrt();
    let eps: Vec<f64> = (0..x_t.len()).map(|_| rng.sample(StandardNormal)).collect();
    let x_s = mean
        .iter()
        .zip(&eps)
        .map(|(m, e)| m + std * e)
        .collect();
    Ok((x_s, eps, mean, var))
}

/// Noise amplitude of the DDIM-style step:
/// `rho = eta s sqrt(1 - s^2 (1-t)^2 / (t^2 (1-s)^2))`.
pub fn sde_ddim_rho(t: f64, s: f64, eta: f64) -> Result<f64> {
    let ratio = (s * (1.0 - t)) / (t * (1.0 - s));
    let radicand = 1.0 - ratio * ratio;
    if radicand < -1e-12 {
        return Err(Error::NumericalGuard(format!(
            "negative radicand {radicand} in DDIM noise scale (t = {t}, s = {s})"
        )));
    }
    Ok(eta * s * radicand.max(0.0).sqrt())
}

/// DDIM-style SDE step from `t` to `s < t` under rectified flow:
/// `x_s = [(1-s) + sqrt(s^2 - rho^2)] x_t
///        - [(1-s) t - sqrt(s^2 - rho^2)(1-t)] v + rho eps`.
///
/// `eta = 0` reduces exactly to the Euler ODE step.
pub fn sde_ddim_step<R: Rng + ?Sized>(
    x_t: &[f64],
    v: &[f64],
    t: f64,
    s: f64,
    eta: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if s >= t {
        return Err(Error::Grid(format!("step must go backward: s = {s}, t = {t}")));
    }
    let rho = sde_ddim_rho(t, s, eta)?;
    let radicand = s * s - rho * rho;
    if radicand < -1e-12 {
        return Err(Error::NumericalGuard(format!(
            "negative radicand {radicand} in DDIM coefficients"
        )));
    }
    let root = radicand.max(0.0).sqrt();
    let cx = (1.0 - s) + root;
    let cv = (1.0 - s) * t - root * (1.0 - t);
    let eps: Vec<f64> = (0..x_t.len()).map(|_| rng.sample(StandardNormal)).collect();
    let x_s = x_t
        .iter()
        .zip(v)
        .zip(&eps)
        .map(|((x, vi), e)| cx * x - cv * vi + rho * e)
        .collect();
    Ok((x_s, eps))
}

/// Second-order multistep ODE update on the log-SNR grid.
///
/// Given the state at `t_prev` and cached data predictions at the two most
/// recent grid points `t_prev > t_prev2`, produces the state at
/// `t_next < t_prev`:
///
/// `x_next = (sigma_next/sigma_prev) x_prev
///           - alpha_next (e^{-h} - 1) [(1 + 1/2r) x0_prev - (1/2r) x0_prev2]`
///
/// with `h = lambda(t_next) - lambda(t_prev)` and
/// `r = (lambda(t_prev) - lambda(t_prev2)) / h`.
pub fn multistep2_ode_step<S: NoiseSchedule + ?Sized>(
    sched: &S,
    x_prev: &[f64],
    x0_pred_prev: &[f64],
    x0_pred_prev2: &[f64],
    t_next: f64,
    t_prev: f64,
    t_prev2: f64,
) -> Result<Vec<f64>> {
    if !(t_next < t_prev && t_prev < t_prev2) {
        return Err(Error::Grid(format!(
            "times must be strictly decreasing: {t_prev2} > {t_prev} > {t_next}"
        )));
    }
    let h = sched.log_snr(t_next) - sched.log_snr(t_prev);
    let h_prev = sched.log_snr(t_prev) - sched.log_snr(t_prev2);
    if h == 0.0 || h_prev == 0.0 || !h.is_finite() || !h_prev.is_finite() {
        return Err(Error::Grid(format!(
            "degenerate log-SNR spacing: h = {h}, h_prev = {h_prev}"
        )));
    }
    let r = h_prev / h;
    let c_prev = 1.0 + 1.0 / (2.0 * r);
    let c_prev2 = -1.0 / (2.0 * r);
    let sig_ratio = sched.sigma(t_next) / sched.sigma(t_prev);
    let integrator = -sched.alpha(t_next) * ((-h).exp() - 1.0);
    Ok(x_prev
        .iter()
        .zip(x0_pred_prev)
        .zip(x0_pred_prev2)
        .map(|((x, p1), p2)| sig_ratio * x + integrator * (c_prev * p1 + c_prev2 * p2))
        .collect())
}

/// Run one full sampling pass; returns the clean sample and, if requested,
/// the recorded trajectory.
///
/// The state is initialized from a standard normal at `t_hi`, stepped along
/// the grid, and converted to `x0` through the data predictor at `t_lo`.
pub fn sample<S, F, R>(
    field: &F,
    spec: &SamplerSpec,
    cond: usize,
    sched: &S,
    rng: &mut R,
) -> Result<(Vec<f64>, Option<Trajectory>)>
where
    S: NoiseSchedule + ?Sized,
    F: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    spec.validate()?;
    let kind = spec.resolved()?;
    let grid = spec.time_grid(sched);
    let dim = field.dim();
    let mut x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut steps_rec: Vec<TrajectoryStep> = Vec::new();

    // Data prediction at the previous grid point, for the multistep solver.
    let mut x0_prev: Option<Vec<f64>> = None;

    for i in 0..spec.steps {
        let t = grid[i];
        let s = grid[i + 1];
        let v = field.velocity(&x, cond, t)?;
        let mut noise: Option<Vec<f64>> = None;

        let x_next = match kind {
            ResolvedKind::EulerOde => euler_ode_step(&x, &v, t, s),
            ResolvedKind::Multistep2Ode => {
                let x0_here = schedule::velocity_to_x0(sched, &x, &v, t)?;
                // First and last steps degrade to first order.
                let next = if i == 0 || i + 1 == spec.steps {
                    euler_ode_step(&x, &v, t, s)
                } else {
                    let prev = x0_prev.as_ref().expect("history exists after step 0");
                    multistep2_ode_step(sched, &x, &x0_here, prev, s, t, grid[i - 1])?
                };
                x0_prev = Some(x0_here);
                next
            }
            ResolvedKind::SdeEuler { a } => {
                let (x_s, eps, _, _) = sde_euler_step(&x, &v, t, s, a, rng)?;
                noise = Some(eps);
                x_s
            }
            ResolvedKind::SdeDdim { eta } => {
                let (x_s, eps) = sde_ddim_step(&x, &v, t, s, eta, rng)?;
                noise = Some(eps);
                x_s
            }
        };

        if spec.record_trajectory {
            steps_rec.push(TrajectoryStep {
                t,
                x: x.clone(),
                v,
                noise,
            });
        }
        x = x_next;
    }

    let t_term = grid[spec.steps];
    let v_term = field.velocity(&x, cond, t_term)?;
    let x0 = schedule::velocity_to_x0(sched, &x, &v_term, t_term)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("sampler produced a non-finite state".into()));
    }

    let traj = spec.record_trajectory.then(|| Trajectory {
        cond,
        steps: steps_rec,
        terminal_t: t_term,
        terminal_state: x.clone(),
        x0: x0.clone(),
    });
    Ok((x0, traj))
}
