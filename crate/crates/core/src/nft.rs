//! Negative-aware finetuning on the forward process.
//!
//! The training signal never touches sampling trajectories: each iteration
//! collects groups of clean samples from the frozen sampling policy, maps
//! raw rewards into optimality probabilities `r in [0, 1]`, and regresses a
//! pair of implicitly parameterized policies
//!
//! - `v_plus  = (1 - beta) v_old + beta v_theta`
//! - `v_minus = (1 + beta) v_old - beta v_theta`
//!
//! against the forward-diffusion velocity target, weighted `r` on the
//! positive branch and `1 - r` on the negative branch. The sampling policy
//! then trails the trained one through an EMA soft update.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fm::{adaptive_denominator, diffuse_batch, DiffusedBatch, Weighting};
use crate::metrics::{MetricsRow, Phase, RunSink};
use crate::nn::{ema_update, AdamState, VelocityModel};
use crate::samplers::{sample, SamplerSpec, Trajectory, VelocityField};
use crate::schedule::{self, NoiseSchedule, T_MIN};

const TAG_ROLLOUT: u64 = 0x726f;
const TAG_LOSS: u64 = 0x6c6f;
const TAG_EVAL: u64 = 0x6576;

/// One prompt group: clean samples, raw rewards, optimality probabilities.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub cond: usize,
    pub x0: Vec<Vec<f64>>,
    pub raw: Vec<f64>,
    pub r: Vec<f64>,
}

impl RolloutBatch {
    pub fn new(cond: usize, x0: Vec<Vec<f64>>, raw: Vec<f64>, r: Vec<f64>) -> Result<Self> {
        let k = x0.len();
        if k < 2 {
            return Err(Error::InvalidParam(format!(
                "group needs K >= 2 members, got {k}"
            )));
        }
        if raw.len() != k || r.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: raw.len().min(r.len()),
            });
        }
        if r.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidParam(
                "optimality probabilities must lie in [0, 1]".into(),
            ));
        }
        let mean_centered = r.iter().map(|&p| p - 0.5).sum::<f64>() / k as f64;
        debug_assert!(mean_centered.abs() <= 0.5 + 1e-12);
        Ok(Self { cond, x0, raw, r })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

/// Map raw group rewards into optimality probabilities:
/// `r = 0.5 + 0.5 clip((raw - mean(raw)) / Z, -1, 1)`.
///
/// Invariant under adding a constant to every raw reward and monotone in
/// each member's raw reward.
pub fn optimality_reward(raw: &[f64], z: f64) -> Result<Vec<f64>> {
    if raw.len() < 2 {
        return Err(Error::InvalidParam(format!(
            "group statistics need K >= 2, got {}",
            raw.len()
        )));
    }
    if z <= 0.0 || !z.is_finite() {
        return Err(Error::InvalidParam(format!("normalizer Z = {z} must be > 0")));
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw
        .iter()
        .map(|&x| 0.5 + 0.5 * ((x - mean) / z).clamp(-1.0, 1.0))
        .collect())
}

/// Implicit positive/negative policies around a frozen `v_old`.
pub fn implicit_policies(v_old: &[f64], v_theta: &[f64], beta: f64) -> (Vec<f64>, Vec<f64>) {
    let plus = v_old
        .iter()
        .zip(v_theta)
        .map(|(o, th)| (1.0 - beta) * o + beta * th)
        .collect();
    let minus = v_old
        .iter()
        .zip(v_theta)
        .map(|(o, th)| (1.0 + beta) * o - beta * th)
        .collect();
    (plus, minus)
}

/// EMA schedule for the sampling-policy soft update.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EtaSchedule {
    Constant { value: f64 },
    /// `eta_i = min(slope * i, max)`.
    LinearCap { slope: f64, max: f64 },
}

impl EtaSchedule {
    /// The default: `eta_i = min(0.001 i, 0.5)`.
    pub fn standard() -> Self {
        EtaSchedule::LinearCap {
            slope: 0.001,
            max: 0.5,
        }
    }

    /// Conservative preset for unstable rewards: cap at 0.999.
    pub fn conservative() -> Self {
        EtaSchedule::LinearCap {
            slope: 0.001,
            max: 0.999,
        }
    }

    pub fn eta(&self, iteration: usize) -> f64 {
        match *self {
            EtaSchedule::Constant { value } => value,
            EtaSchedule::LinearCap { slope, max } => (slope * iteration as f64).min(max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EtaSchedule::Constant { value } => (0.0..=1.0).contains(&value),
            EtaSchedule::LinearCap { slope, max } => slope >= 0.0 && (0.0..=1.0).contains(&max),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("eta schedule leaves [0, 1]".into()))
        }
    }
}

/// Scheduled EMA update of the frozen sampling policy toward the trained one.
pub fn soft_update(
    theta_old: &mut VelocityModel,
    theta: &VelocityModel,
    iteration: usize,
    schedule: &EtaSchedule,
) -> Result<f64> {
    let eta = schedule.eta(iteration);
    ema_update(theta_old.params_mut(), theta.params(), eta)?;
    Ok(eta)
}

/// How the loss draws diffusion times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    /// Uniform over the rollout sampler's own time grid.
    Grid,
    /// Continuous uniform on the clamped interior.
    Uniform,
}

impl TimeSampling {
    pub fn draw<R: Rng + ?Sized>(&self, grid: &[f64], rng: &mut R) -> f64 {
        match self {
            TimeSampling::Grid => grid[rng.random_range(0..grid.len())],
            TimeSampling::Uniform => rng.random_range(T_MIN..1.0 - T_MIN),
        }
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct NftLossParams {
    pub beta: f64,
    pub weighting: Weighting,
    /// Ablation switch: `false` zeroes the `(1 - r)` branch and degenerates
    /// into rejection-style finetuning.
    pub negative_branch: bool,
}

/// A rollout group diffused for the loss: a [`DiffusedBatch`] plus the
/// per-sample optimality probabilities.
#[derive(Debug, Clone)]
pub struct NftBatch {
    pub diffused: DiffusedBatch,
    pub r: Vec<f64>,
}

/// Forward-diffuse a rollout group at the given per-sample times.
pub fn assemble_nft_batch<S: NoiseSchedule + ?Sized, R: Rng + ?Sized>(
    sched: &S,
    group: &RolloutBatch,
    times: &[f64],
    rng: &mut R,
) -> Result<NftBatch> {
    let samples: Vec<(Vec<f64>, usize)> = group
        .x0
        .iter()
        .map(|x| (x.clone(), group.cond))
        .collect();
    let diffused = diffuse_batch(sched, &samples, times, rng)?;
    Ok(NftBatch {
        diffused,
        r: group.r.clone(),
    })
}

/// The contrastive forward-process loss and its flat parameter gradients.
///
/// `v_old` is evaluated without gradients; the model's gradient flows through
/// both implicit branches. With `r = 1` and `beta = 1` this reduces exactly
/// to the flow-matching loss.
pub fn nft_loss<S, F>(
    model: &VelocityModel,
    v_old: &F,
    sched: &S,
    batch: &NftBatch,
    params: &NftLossParams,
) -> Result<(f64, Vec<f64>)>
where
    S: NoiseSchedule + ?Sized,
    F: VelocityField + ?Sized,
{
    if batch.diffused.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if params.beta <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "beta = {} must be > 0",
            params.beta
        )));
    }
    let d = &batch.diffused;
    let b = d.len() as f64;
    let beta = params.beta;
    let mut grads = vec![0.0; model.num_params()];
    let mut loss = 0.0;

    match params.weighting {
        Weighting::Uniform | Weighting::OneMinusT => {
            for i in 0..d.len() {
                let (t, r) = (d.t[i], batch.r[i]);
                let w = match params.weighting {
                    Weighting::Uniform => 1.0,
                    Weighting::OneMinusT => 1.0 - t,
                    Weighting::Adaptive => unreachable!(),
                };
                let (v_th, cache) = model.forward_cached(&d.x_t[i], d.cond[i], t)?;
                let v_o = v_old.velocity(&d.x_t[i], d.cond[i], t)?;
                let (v_plus, v_minus) = implicit_policies(&v_o, &v_th, beta);
                let res_plus: Vec<f64> = v_plus
                    .iter()
                    .zip(&d.v_target[i])
                    .map(|(p, v)| p - v)
                    .collect();
                let res_minus: Vec<f64> = v_minus
                    .iter()
                    .zip(&d.v_target[i])
                    .map(|(m, v)| m - v)
                    .collect();
                let neg_w = if params.negative_branch { 1.0 - r } else { 0.0 };
                loss += w
                    * (r * res_plus.iter().map(|e| e * e).sum::<f64>()
                        + neg_w * res_minus.iter().map(|e| e * e).sum::<f64>())
                    / b;
                let d_out: Vec<f64> = res_plus
                    .iter()
                    .zip(&res_minus)
                    .map(|(p, m)| 2.0 * w * beta * (r * p - neg_w * m) / b)
                    .collect();
                model.backward(&cache, &d_out, &mut grads);
            }
        }
        Weighting::Adaptive => {
            // Residuals are converted to data space; one stop-gradient
            // denominator, computed from the positive branch, is shared by
            // both branches so the r/(1-r) balance is preserved.
            let mut caches = Vec::with_capacity(d.len());
            let mut res_plus_all = Vec::with_capacity(d.len());
            let mut res_minus_all = Vec::with_capacity(d.len());
            let mut sigma_over_det = Vec::with_capacity(d.len());
            for i in 0..d.len() {
                let t = d.t[i];
                let (v_th, cache) = model.forward_cached(&d.x_t[i], d.cond[i], t)?;
                let v_o = v_old.velocity(&d.x_t[i], d.cond[i], t)?;
                let (v_plus, v_minus) = implicit_policies(&v_o, &v_th, beta);
                let x_plus = schedule::velocity_to_x0(sched, &d.x_t[i], &v_plus, t)?;
                let x_minus = schedule::velocity_to_x0(sched, &d.x_t[i], &v_minus, t)?;
                res_plus_all.push(
                    x_plus
                        .iter()
                        .zip(&d.x0[i])
                        .map(|(p, x)| p - x)
                        .collect::<Vec<f64>>(),
                );
                res_minus_all.push(
                    x_minus
                        .iter()
                        .zip(&d.x0[i])
                        .map(|(m, x)| m - x)
                        .collect::<Vec<f64>>(),
                );
                caches.push(cache);
                sigma_over_det.push(sched.sigma(t) / schedule::snr_determinant(sched, t));
            }
            let denom = adaptive_denominator(&res_plus_all);
            for i in 0..d.len() {
                let r = batch.r[i];
                let neg_w = if params.negative_branch { 1.0 - r } else { 0.0 };
                loss += (r * res_plus_all[i].iter().map(|e| e * e).sum::<f64>()
                    + neg_w * res_minus_all[i].iter().map(|e| e * e).sum::<f64>())
                    / (denom * b);
                let scale = -sigma_over_det[i] * 2.0 * beta / (denom * b);
                let d_out: Vec<f64> = res_plus_all[i]
                    .iter()
                    .zip(&res_minus_all[i])
                    .map(|(p, m)| scale * (r * p - neg_w * m))
                    .collect();
                model.backward(&caches[i], &d_out, &mut grads);
            }
        }
    }
    Ok((loss, grads))
}

/// Running normalizer: population standard deviation of the raw rewards in
/// the last `window` iterations' buffers, floored.
#[derive(Debug, Clone)]
pub struct RunningZ {
    history: VecDeque<Vec<f64>>,
    window: usize,
    floor: f64,
}

impl RunningZ {
    pub fn new(window: usize, floor: f64) -> Self {
        Self {
            history: VecDeque::new(),
            window: window.max(1),
            floor,
        }
    }

    pub fn push_iteration(&mut self, raws: Vec<f64>) {
        self.history.push_back(raws);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
    }

    pub fn value(&self) -> f64 {
        let mut n = 0usize;
        let mut sum = 0.0;
        for it in &self.history {
            for &x in it {
                sum += x;
                n += 1;
            }
        }
        if n == 0 {
            return self.floor;
        }
        let mean = sum / n as f64;
        let var = self
            .history
            .iter()
            .flatten()
            .map(|&x| (x - mean) * (x - mean))
            .sum::<f64>()
            / n as f64;
        var.sqrt().max(self.floor)
    }
}

/// Configuration of the online loop.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    pub beta: f64,
    pub eta: EtaSchedule,
    pub group_size: usize,
    pub groups_per_iter: usize,
    pub iterations: usize,
    #[serde(default = "default_grad_steps")]
    pub grad_steps: usize,
    pub lr: f64,
    pub weighting: Weighting,
    #[serde(default = "default_t_sampling")]
    pub t_sampling: TimeSampling,
    #[serde(default = "default_z_floor")]
    pub z_floor: f64,
    #[serde(default = "default_z_window")]
    pub z_window: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_negative_branch")]
    pub negative_branch: bool,
}

fn default_grad_steps() -> usize {
    4
}
fn default_t_sampling() -> TimeSampling {
    TimeSampling::Grid
}
fn default_z_floor() -> f64 {
    1e-3
}
fn default_z_window() -> usize {
    10
}
fn default_eval_every() -> usize {
    10
}
fn default_eval_samples() -> usize {
    512
}
fn default_checkpoint_every() -> usize {
    50
}
fn default_negative_branch() -> bool {
    true
}

impl RlConfig {
    /// Desk-scale defaults: beta 1, standard eta schedule, K = 8 members in
    /// each of 24 groups, 4 gradient passes per iteration.
    pub fn desk_default() -> Self {
        Self {
            beta: 1.0,
            eta: EtaSchedule::standard(),
            group_size: 8,
            groups_per_iter: 24,
            iterations: 300,
            grad_steps: 4,
            lr: 1e-3,
            weighting: Weighting::Adaptive,
            t_sampling: TimeSampling::Grid,
            z_floor: 1e-3,
            z_window: 10,
            eval_every: 10,
            eval_samples: 512,
            checkpoint_every: 50,
            negative_branch: true,
        }
    }

    /// Reference-scale preset mirroring the cited large-scale configuration:
    /// 48 groups of 24 members and the conservative 3e-4 learning rate.
    /// Slower than the desk preset; useful for stress runs.
    pub fn reference_scale() -> Self {
        Self {
            group_size: 24,
            groups_per_iter: 48,
            lr: 3e-4,
            ..Self::desk_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("beta = {} must be > 0", self.beta)));
        }
        self.eta.validate()?;
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.groups_per_iter == 0 || self.iterations == 0 || self.grad_steps == 0 {
            return Err(Error::Config(
                "groups_per_iter, iterations, grad_steps must be >= 1".into(),
            ));
        }
        if self.z_floor <= 0.0 {
            return Err(Error::Config("z_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Result of an online run: the trained policy and the emitted metrics.
pub struct RlOutcome {
    pub model: VelocityModel,
    pub rows: Vec<MetricsRow>,
}

/// Collect one iteration's rollout groups from the frozen sampling policy.
///
/// Each member draws an independent substream from
/// `(seed, rollout-tag, iteration, group, member)`, so results do not depend
/// on collection order.
#[allow(clippy::type_complexity, clippy::too_many_arguments)]
pub(crate) fn collect_rollouts<S, F>(
    policy: &F,
    sampler: &SamplerSpec,
    sched: &S,
    reward: &dyn Fn(&[f64], usize) -> f64,
    cond_vocab: usize,
    groups: usize,
    group_size: usize,
    seed: u64,
    iteration: u64,
) -> Result<Vec<(usize, Vec<Vec<f64>>, Vec<f64>, Vec<Option<Trajectory>>)>>
where
    S: NoiseSchedule + ?Sized,
    F: VelocityField + ?Sized,
{
    let mut out = Vec::with_capacity(groups);
    for g in 0..groups {
        let cond = g % cond_vocab;
        let mut x0s = Vec::with_capacity(group_size);
        let mut raws = Vec::with_capacity(group_size);
        let mut trajs = Vec::with_capacity(group_size);
        for k in 0..group_size {
            let mut rng =
                crate::rng::substream(seed, &[TAG_ROLLOUT, iteration, g as u64, k as u64]);
            let (x0, traj) = sample(policy, sampler, cond, sched, &mut rng)?;
            raws.push(reward(&x0, cond));
            x0s.push(x0);
            trajs.push(traj);
        }
        out.push((cond, x0s, raws, trajs));
    }
    Ok(out)
}

/// Mean raw reward of a policy under the evaluation sampler.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy<S, F>(
    policy: &F,
    eval_sampler: &SamplerSpec,
    sched: &S,
    reward: &dyn Fn(&[f64], usize) -> f64,
    cond_vocab: usize,
    samples_per_cond: usize,
    seed: u64,
    iteration: u64,
) -> Result<f64>
where
    S: NoiseSchedule + ?Sized,
    F: VelocityField + ?Sized,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for cond in 0..cond_vocab {
        for k in 0..samples_per_cond {
            let mut rng =
                crate::rng::substream(seed, &[TAG_EVAL, iteration, cond as u64, k as u64]);
            let (x0, _) = sample(policy, eval_sampler, cond, sched, &mut rng)?;
            total += reward(&x0, cond);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// The full online loop: rollouts from the frozen policy, optimality-reward
/// transform, contrastive gradient steps, EMA soft update, buffer cleared
/// every iteration.
///
/// On a non-finite loss the last good parameters are checkpointed under
/// `"last_good"` and the run aborts.
#[allow(clippy::too_many_arguments)]
pub fn rl_loop<S: NoiseSchedule + ?Sized>(
    cfg: &RlConfig,
    sampler: &SamplerSpec,
    eval_sampler: &SamplerSpec,
    reward: &dyn Fn(&[f64], usize) -> f64,
    v_ref: &VelocityModel,
    sched: &S,
    seed: u64,
    sink: &mut dyn RunSink,
) -> Result<RlOutcome> {
    cfg.validate()?;
    sampler.validate()?;
    eval_sampler.validate()?;

    let mut model = v_ref.clone();
    let mut model_old = v_ref.clone();
    let mut adam = AdamState::new(cfg.lr, model.num_params());
    let mut z = RunningZ::new(cfg.z_window, cfg.z_floor);
    let grid = sampler.time_grid(sched);
    let vocab = model.arch().cond_vocab;
    let loss_params = NftLossParams {
        beta: cfg.beta,
        weighting: cfg.weighting,
        negative_branch: cfg.negative_branch,
    };
    let start = std::time::Instant::now();
    let mut rows: Vec<MetricsRow> = Vec::new();

    for iter in 0..cfg.iterations {
        let last_good = model.params().to_vec();

        let rollouts = collect_rollouts(
            &model_old,
            sampler,
            sched,
            reward,
            vocab,
            cfg.groups_per_iter,
            cfg.group_size,
            seed,
            iter as u64,
        )?;

        let all_raws: Vec<f64> = rollouts
            .iter()
            .flat_map(|(_, _, raws, _)| raws.iter().copied())
            .collect();
        let mean_raw = all_raws.iter().sum::<f64>() / all_raws.len() as f64;
        z.push_iteration(all_raws);
        let z_val = z.value();

        let mut buffer = Vec::with_capacity(rollouts.len());
        for (cond, x0s, raws, _) in rollouts {
            let r = optimality_reward(&raws, z_val)?;
            buffer.push(RolloutBatch::new(cond, x0s, raws, r)?);
        }

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for pass in 0..cfg.grad_steps {
            for (bi, group) in buffer.iter().enumerate() {
                let mut rng = crate::rng::substream(
                    seed,
                    &[TAG_LOSS, iter as u64, pass as u64, bi as u64],
                );
                let times: Vec<f64> = (0..group.len())
                    .map(|_| cfg.t_sampling.draw(&grid, &mut rng))
                    .collect();
                let batch = assemble_nft_batch(sched, group, &times, &mut rng)?;
                // A corrupted forward pass and a non-finite loss are both
                // divergence: retain the last good weights and abort.
                let diverged = |reason: String,
                                model: &VelocityModel,
                                sink: &mut dyn RunSink|
                 -> Result<()> {
                    let mut snapshot = model.clone();
                    snapshot.params_mut().copy_from_slice(&last_good);
                    sink.save_checkpoint("last_good", &snapshot)?;
                    Err(Error::Diverged(reason))
                };
                let (loss, grads) = match nft_loss(&model, &model_old, sched, &batch, &loss_params)
                {
                    Ok(out) => out,
                    Err(Error::CorruptedModel) => {
                        diverged(
                            format!("model corrupted at iteration {iter}, pass {pass}"),
                            &model,
                            sink,
                        )?;
                        unreachable!()
                    }
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    diverged(
                        format!("loss became {loss} at iteration {iter}, pass {pass}"),
                        &model,
                        sink,
                    )?;
                }
                adam.step(model.params_mut(), &grads)?;
                loss_sum += loss;
                loss_count += 1;
            }
        }

        let eta = soft_update(&mut model_old, &model, iter, &cfg.eta)?;

        let row = MetricsRow {
            phase: Phase::Train,
            iteration: iter as u64,
            mean_raw_reward: mean_raw,
            loss: loss_sum / loss_count as f64,
            eta,
            beta: cfg.beta,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        sink.emit(&row)?;
        rows.push(row);

        if cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0 {
            let eval_reward = evaluate_policy(
                &model,
                eval_sampler,
                sched,
                reward,
                vocab,
                cfg.eval_samples,
                seed,
                iter as u64,
            )?;
            let row = MetricsRow {
                phase: Phase::Eval,
                iteration: iter as u64,
                mean_raw_reward: eval_reward,
                loss: f64::NAN,
                eta,
                beta: cfg.beta,
                wall_clock_s: start.elapsed().as_secs_f64(),
            };
            sink.emit(&row)?;
            rows.push(row);
        }

        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            sink.save_checkpoint("model", &model)?;
        }
    }

    sink.save_checkpoint("model", &model)?;
    Ok(RlOutcome { model, rows })
}
