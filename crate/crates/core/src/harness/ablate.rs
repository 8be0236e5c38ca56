//! Ablation sweeps: rerun the online loop varying one axis, collect
//! reward-curve summaries side by side.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::run::RunDir;
use crate::metrics::Phase;
use crate::nft::{rl_loop, EtaSchedule};
use crate::nn::VelocityModel;
use crate::samplers::{SamplerKind, SamplerSpec, MAX_STOCHASTICITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Beta,
    Eta,
    Weighting,
    Sampler,
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(AblationAxis::Beta),
            "eta" => Ok(AblationAxis::Eta),
            "weighting" => Ok(AblationAxis::Weighting),
            "sampler" => Ok(AblationAxis::Sampler),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?}; expected beta|eta|weighting|sampler"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub value: String,
    pub final_reward: f64,
    pub mean_reward_last10: f64,
    pub slope_first_50: f64,
}

/// Least-squares slope of reward against iteration over the first `n` rows.
pub fn reward_slope(rows: &[(f64, f64)], n: usize) -> f64 {
    let pts = &rows[..rows.len().min(n)];
    let m = pts.len() as f64;
    if pts.len() < 2 {
        return 0.0;
    }
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let cov: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    cov / var
}

fn apply_axis(cfg: &mut ExperimentConfig, axis: AblationAxis, value: &str) -> Result<()> {
    match axis {
        AblationAxis::Beta => {
            cfg.rl.beta = value
                .parse()
                .map_err(|_| Error::Config(format!("beta value {value:?} is not a number")))?;
        }
        AblationAxis::Eta => {
            cfg.rl.eta = match value {
                "schedule" => EtaSchedule::standard(),
                "conservative" => EtaSchedule::conservative(),
                v => EtaSchedule::Constant {
                    value: v.parse().map_err(|_| {
                        Error::Config(format!(
                            "eta value {v:?} is not a number, \"schedule\", or \"conservative\""
                        ))
                    })?,
                },
            };
        }
        AblationAxis::Weighting => {
            cfg.rl.weighting = match value {
                "uniform" => crate::fm::Weighting::Uniform,
                "one_minus_t" => crate::fm::Weighting::OneMinusT,
                "adaptive" => crate::fm::Weighting::Adaptive,
                other => {
                    return Err(Error::Config(format!(
                        "unknown weighting {other:?}"
                    )))
                }
            };
        }
        AblationAxis::Sampler => {
            let steps = cfg.rollout_sampler.steps;
            cfg.rollout_sampler = match value {
                "euler_ode" => SamplerSpec::new(SamplerKind::EulerOde, steps),
                "multistep2_ode" => SamplerSpec::new(SamplerKind::Multistep2Ode, steps),
                "sde_euler" => SamplerSpec::sde_euler(steps, MAX_STOCHASTICITY),
                other => {
                    return Err(Error::Config(format!(
                        "unknown sampler {other:?}"
                    )))
                }
            };
        }
    }
    cfg.validate()
}

/// Run the online loop once per axis value; each run writes its own
/// `metrics.csv` under `<out>/<value>/`, and a `summary.csv` compares them.
pub fn run_ablation(
    base: &ExperimentConfig,
    axis: AblationAxis,
    values: &[String],
    pretrained: &VelocityModel,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let mut summary = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        apply_axis(&mut cfg, axis, value)?;
        let sched = cfg.schedule.build()?;
        let mixture = cfg.mixture.build()?;
        let reward_spec = cfg.reward.clone();
        let reward = move |x0: &[f64], _cond: usize| reward_spec.evaluate(x0, &mixture);

        let run_dir = out_dir.join(value.replace('.', "_"));
        let mut sink = RunDir::create(&run_dir, &cfg.schedule.id, cfg.digest()?)?;
        let outcome = rl_loop(
            &cfg.rl,
            &cfg.rollout_sampler,
            &cfg.eval_sampler,
            &reward,
            pretrained,
            &sched,
            cfg.seed,
            &mut sink,
        )?;

        let train: Vec<(f64, f64)> = outcome
            .rows
            .iter()
            .filter(|r| r.phase == Phase::Train)
            .map(|r| (r.iteration as f64, r.mean_raw_reward))
            .collect();
        let last10 = &train[train.len().saturating_sub(10)..];
        summary.push(AblationRow {
            value: value.clone(),
            final_reward: train.last().map(|p| p.1).unwrap_or(f64::NAN),
            mean_reward_last10: last10.iter().map(|p| p.1).sum::<f64>() / last10.len() as f64,
            slope_first_50: reward_slope(&train, 50),
        });
    }

    let mut csv = String::from("value,final_reward,mean_reward_last10,slope_first_50\n");
    for row in &summary {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.value, row.final_reward, row.mean_reward_last10, row.slope_first_50
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("summary.csv"), csv)?;
    Ok(summary)
}
