//! Reverse-process baselines: group-relative policy gradient on the
//! stochastic Euler kernel's step likelihoods, and rejection finetuning.
//!
//! The policy-gradient path needs full sampling trajectories recorded with
//! an SDE sampler (the step likelihood is a Gaussian in the injected
//! noise); the contrast with the forward-process loop, which consumes only
//! clean samples, is enforced by the types.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fm::{fm_loss, Weighting};
use crate::metrics::{MetricsRow, Phase, RunSink};
use crate::nft::{RlConfig, RolloutBatch, TimeSampling};
use crate::nn::{AdamState, VelocityModel};
use crate::samplers::{sde_euler_mean_var, SamplerKind, SamplerSpec, Trajectory, VelocityField};
use crate::schedule::NoiseSchedule;

const TAG_LOSS: u64 = 0x676c;

const ADVANTAGE_STD_EPS: f64 = 1e-6;

/// Group-mean-centered, std-normalized advantages with the trajectories
/// they came from.
#[derive(Debug)]
pub struct AdvantageGroup {
    pub cond: usize,
    pub advantages: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
}

impl AdvantageGroup {
    /// Normalize raw rewards into advantages `(raw - mean)/(std + 1e-6)`.
    pub fn from_raw(cond: usize, raw: &[f64], trajectories: Vec<Trajectory>) -> Result<Self> {
        if raw.len() < 2 {
            return Err(Error::InvalidParam(
                "advantage group needs >= 2 members".into(),
            ));
        }
        if raw.len() != trajectories.len() {
            return Err(Error::DimensionMismatch {
                expected: raw.len(),
                got: trajectories.len(),
            });
        }
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let std = (raw.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        let advantages: Vec<f64> = raw
            .iter()
            .map(|&x| (x - mean) / (std + ADVANTAGE_STD_EPS))
            .collect();
        let total: f64 = advantages.iter().sum();
        debug_assert!(total.abs() <= 1e-10 * n, "advantages should center");
        Ok(Self {
            cond,
            advantages,
            trajectories,
        })
    }
}

/// Log density of `x_s` under the stochastic Euler kernel at `(x_t, t, s)`
/// with stochasticity `a > 0`.
#[allow(clippy::too_many_arguments)]
pub fn step_log_prob<S, F>(
    field: &F,
    _sched: &S,
    x_t: &[f64],
    x_s: &[f64],
    cond: usize,
    t: f64,
    s: f64,
    a: f64,
) -> Result<f64>
where
    S: NoiseSchedule + ?Sized,
    F: VelocityField + ?Sized,
{
    if a <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let v = field.velocity(x_t, cond, t)?;
    let (mean, var) = sde_euler_mean_var(x_t, &v, t, s, a)?;
    Ok(gaussian_log_density(x_s, &mean, var))
}

fn gaussian_log_density(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x
        .iter()
        .zip(mean)
        .map(|(xi, mi)| (xi - mi) * (xi - mi))
        .sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
}

/// Coefficients of the kernel written as `x_s = l x_t - m v + n eps`.
pub fn kernel_coefficients(t: f64, s: f64, a: f64) -> (f64, f64, f64) {
    let dt = t - s;
    let g2 = a * a * t / (1.0 - t);
    let l = 1.0 - dt * g2 / (2.0 * t);
    let m = dt * (1.0 + g2 * (1.0 - t) / (2.0 * t));
    let n = (g2 * dt).sqrt();
    (l, m, n)
}

/// Negative advantage-weighted log likelihood over recorded trajectories,
/// with gradients through the kernel means.
///
/// `L = -(1/(N S)) sum_i A_i sum_steps log p(x_next | x, t, s)`.
/// Requires SDE-recorded trajectories (stored noise); on-policy use assumes
/// the sampling model equals the training model snapshot.
pub fn grpo_loss(
    model: &VelocityModel,
    groups: &[AdvantageGroup],
    a: f64,
) -> Result<(f64, Vec<f64>)> {
    if a <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    if groups.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut grads = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    // Normalizer: members x steps, averaged.
    let n_members: usize = groups.iter().map(|g| g.trajectories.len()).sum();
    let n_steps = groups
        .first()
        .and_then(|g| g.trajectories.first())
        .map(|t| t.steps.len())
        .unwrap_or(0);
    if n_steps == 0 {
        return Err(Error::MissingNoise);
    }
    let norm = (n_members * n_steps) as f64;

    for g in groups {
        for (member, traj) in g.trajectories.iter().enumerate() {
            let adv = g.advantages[member];
            for j in 0..traj.steps.len() {
                let step = &traj.steps[j];
                if step.noise.is_none() {
                    return Err(Error::MissingNoise);
                }
                let (x_next, s) = if j + 1 < traj.steps.len() {
                    (&traj.steps[j + 1].x, traj.steps[j + 1].t)
                } else {
                    (&traj.terminal_state, traj.terminal_t)
                };
                let (v, cache) = model.forward_cached(&step.x, g.cond, step.t)?;
                let (mean, var) = sde_euler_mean_var(&step.x, &v, step.t, s, a)?;
                if var <= 0.0 {
                    return Err(Error::ZeroVariance);
                }
                loss -= adv * gaussian_log_density(x_next, &mean, var) / norm;
                // d loss / d v = (adv m / (norm var)) (x_next - mean).
                let (_, m, _) = kernel_coefficients(step.t, s, a);
                let scale = adv * m / (norm * var);
                let d_out: Vec<f64> = x_next
                    .iter()
                    .zip(&mean)
                    .map(|(xn, mu)| scale * (xn - mu))
                    .collect();
                model.backward(&cache, &d_out, &mut grads);
            }
        }
    }
    Ok((loss, grads))
}

/// Branched single-step loss: all members share `x_t` and differ only in
/// the injected noise. Mirrors one term of [`grpo_loss`].
#[allow(clippy::too_many_arguments)]
pub fn grpo_branched_loss(
    model: &VelocityModel,
    x_t: &[f64],
    cond: usize,
    t: f64,
    s: f64,
    a: f64,
    x_s: &[Vec<f64>],
    advantages: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if a <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let n = x_s.len() as f64;
    let mut grads = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    let (v, cache) = model.forward_cached(x_t, cond, t)?;
    let (mean, var) = sde_euler_mean_var(x_t, &v, t, s, a)?;
    let (_, m, _) = kernel_coefficients(t, s, a);
    let mut d_out = vec![0.0; x_t.len()];
    for (xs, &adv) in x_s.iter().zip(advantages) {
        loss -= adv * gaussian_log_density(xs, &mean, var) / n;
        for d in 0..x_t.len() {
            d_out[d] += adv * m * (xs[d] - mean[d]) / (n * var);
        }
    }
    model.backward(&cache, &d_out, &mut grads);
    Ok((loss, grads))
}

/// The advantage-weighted-noise form of the same gradient:
/// `(m/n) grad[(1/N) sum_i (A_i eps_i)^T v_theta(x_t, t)]`.
///
/// Exactly equal to the [`grpo_branched_loss`] gradient when the branches
/// were sampled on-policy from this very model.
#[allow(clippy::too_many_arguments)]
pub fn grpo_noise_gradient(
    model: &VelocityModel,
    x_t: &[f64],
    cond: usize,
    t: f64,
    s: f64,
    a: f64,
    noises: &[Vec<f64>],
    advantages: &[f64],
) -> Result<Vec<f64>> {
    if a <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let (_, m, n_coef) = kernel_coefficients(t, s, a);
    let n = noises.len() as f64;
    let mut upstream = vec![0.0; x_t.len()];
    for (eps, &adv) in noises.iter().zip(advantages) {
        for d in 0..x_t.len() {
            upstream[d] += (m / n_coef) * adv * eps[d] / n;
        }
    }
    let (_, cache) = model.forward_cached(x_t, cond, t)?;
    let mut grads = vec![0.0; model.num_params()];
    model.backward(&cache, &upstream, &mut grads);
    Ok(grads)
}

/// Rejection finetuning: flow-matching loss on the members whose optimality
/// probability exceeds their group mean. Returns the accepted count; zero
/// accepted is a no-op (zero loss and gradients).
pub fn rft_loss<S, R>(
    model: &VelocityModel,
    sched: &S,
    groups: &[RolloutBatch],
    weighting: Weighting,
    t_sampling: TimeSampling,
    grid: &[f64],
    rng: &mut R,
) -> Result<(f64, Vec<f64>, usize)>
where
    S: NoiseSchedule + ?Sized,
    R: Rng + ?Sized,
{
    let mut accepted: Vec<(Vec<f64>, usize)> = Vec::new();
    for g in groups {
        let mean = g.r.iter().sum::<f64>() / g.len() as f64;
        for (x0, &r) in g.x0.iter().zip(&g.r) {
            if r > mean {
                accepted.push((x0.clone(), g.cond));
            }
        }
    }
    if accepted.is_empty() {
        return Ok((0.0, vec![0.0; model.num_params()], 0));
    }
    let times: Vec<f64> = (0..accepted.len())
        .map(|_| t_sampling.draw(grid, rng))
        .collect();
    let batch = crate::fm::diffuse_batch(sched, &accepted, &times, rng)?;
    let (loss, grads) = fm_loss(model, sched, &batch, weighting)?;
    Ok((loss, grads, accepted.len()))
}

/// On-policy group-relative policy-gradient loop.
///
/// The rollout sampler must be the stochastic Euler kernel with `a > 0` and
/// trajectory recording is forced on; the sampling policy is the current
/// model every iteration (no EMA).
#[allow(clippy::too_many_arguments)]
pub fn grpo_rl_loop<S: NoiseSchedule + ?Sized>(
    cfg: &RlConfig,
    sampler: &SamplerSpec,
    eval_sampler: &SamplerSpec,
    reward: &dyn Fn(&[f64], usize) -> f64,
    v_ref: &VelocityModel,
    sched: &S,
    seed: u64,
    sink: &mut dyn RunSink,
) -> Result<RlOutcomeAlias> {
    cfg.validate()?;
    let a = match (sampler.kind, sampler.a) {
        (SamplerKind::SdeEuler, Some(a)) if a > 0.0 => a,
        _ => {
            return Err(Error::Config(
                "policy-gradient training needs an sde_euler sampler with a > 0".into(),
            ))
        }
    };
    let mut rollout_spec = sampler.clone();
    rollout_spec.record_trajectory = true;
    rollout_spec.validate()?;
    eval_sampler.validate()?;

    let mut model = v_ref.clone();
    let mut adam = AdamState::new(cfg.lr, model.num_params());
    let vocab = model.arch().cond_vocab;
    let start = std::time::Instant::now();
    let mut rows: Vec<MetricsRow> = Vec::new();

    for iter in 0..cfg.iterations {
        let last_good = model.params().to_vec();
        let rollouts = crate::nft::collect_rollouts(
            &model,
            &rollout_spec,
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

        let mut groups = Vec::with_capacity(rollouts.len());
        for (cond, _x0s, raws, trajs) in rollouts {
            let trajs: Vec<Trajectory> = trajs.into_iter().map(|t| t.expect("recorded")).collect();
            groups.push(AdvantageGroup::from_raw(cond, &raws, trajs)?);
        }

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for _pass in 0..cfg.grad_steps {
            for group in &groups {
                let (loss, grads) = grpo_loss(&model, std::slice::from_ref(group), a)?;
                if !loss.is_finite() {
                    let mut snapshot = model.clone();
                    snapshot.params_mut().copy_from_slice(&last_good);
                    sink.save_checkpoint("last_good", &snapshot)?;
                    return Err(Error::Diverged(format!(
                        "policy-gradient loss became {loss} at iteration {iter}"
                    )));
                }
                adam.step(model.params_mut(), &grads)?;
                loss_sum += loss;
                loss_count += 1;
            }
        }

        let row = MetricsRow {
            phase: Phase::Train,
            iteration: iter as u64,
            mean_raw_reward: mean_raw,
            loss: loss_sum / loss_count.max(1) as f64,
            eta: 0.0,
            beta: f64::NAN,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        sink.emit(&row)?;
        rows.push(row);

        if cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0 {
            let eval_reward = crate::nft::evaluate_policy(
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
                eta: 0.0,
                beta: f64::NAN,
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
    Ok(crate::nft::RlOutcome { model, rows })
}

type RlOutcomeAlias = crate::nft::RlOutcome;

/// Rejection-finetuning loop: same rollout/soft-update skeleton as the
/// forward-process loop, with the loss replaced by flow matching on the
/// accepted (above-group-mean) members only.
#[allow(clippy::too_many_arguments)]
pub fn rft_rl_loop<S: NoiseSchedule + ?Sized>(
    cfg: &RlConfig,
    sampler: &SamplerSpec,
    eval_sampler: &SamplerSpec,
    reward: &dyn Fn(&[f64], usize) -> f64,
    v_ref: &VelocityModel,
    sched: &S,
    seed: u64,
    sink: &mut dyn RunSink,
) -> Result<RlOutcomeAlias> {
    cfg.validate()?;
    sampler.validate()?;
    eval_sampler.validate()?;

    let mut model = v_ref.clone();
    let mut model_old = v_ref.clone();
    let mut adam = AdamState::new(cfg.lr, model.num_params());
    let mut z = crate::nft::RunningZ::new(cfg.z_window, cfg.z_floor);
    let grid = sampler.time_grid(sched);
    let vocab = model.arch().cond_vocab;
    let start = std::time::Instant::now();
    let mut rows: Vec<MetricsRow> = Vec::new();

    for iter in 0..cfg.iterations {
        let rollouts = crate::nft::collect_rollouts(
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
            let r = crate::nft::optimality_reward(&raws, z_val)?;
            buffer.push(RolloutBatch::new(cond, x0s, raws, r)?);
        }

        let mut loss_sum = 0.0;
        let mut steps_taken = 0usize;
        let mut any_accepted = false;
        for pass in 0..cfg.grad_steps {
            let mut rng =
                crate::rng::substream(seed, &[TAG_LOSS, iter as u64, pass as u64]);
            let (loss, grads, accepted) = rft_loss(
                &model,
                sched,
                &buffer,
                cfg.weighting,
                cfg.t_sampling,
                &grid,
                &mut rng,
            )?;
            if accepted == 0 {
                continue;
            }
            any_accepted = true;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "rejection-finetuning loss became {loss} at iteration {iter}"
                )));
            }
            adam.step(model.params_mut(), &grads)?;
            loss_sum += loss;
            steps_taken += 1;
        }
        if !any_accepted {
            eprintln!("warning: iteration {iter} accepted no samples; skipping update");
        }

        let eta = crate::nft::soft_update(&mut model_old, &model, iter, &cfg.eta)?;
        let row = MetricsRow {
            phase: Phase::Train,
            iteration: iter as u64,
            mean_raw_reward: mean_raw,
            loss: if steps_taken > 0 {
                loss_sum / steps_taken as f64
            } else {
                f64::NAN
            },
            eta,
            beta: f64::NAN,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        sink.emit(&row)?;
        rows.push(row);

        if cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0 {
            let eval_reward = crate::nft::evaluate_policy(
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
                beta: f64::NAN,
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
    Ok(crate::nft::RlOutcome { model, rows })
}
