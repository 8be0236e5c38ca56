//! Command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowrl::harness::ablate::{run_ablation, AblationAxis};
use flowrl::harness::checkpoint::load_checked;
use flowrl::harness::config::{apply_overrides, ExperimentConfig};
use flowrl::harness::{plot, verify, RunDir};
use flowrl::nn::VelocityModel;
use flowrl::{baselines, fm, nft};

#[derive(Parser)]
#[command(
    name = "flowrl",
    about = "Desk-scale lab for online RL of flow-matching models",
    version
)]
struct Cli {
    /// Experiment config (TOML). Falls back to the built-in desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. --override rl.beta=0.1
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,
    /// Accept checkpoints whose config digest does not match.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Flow-matching pretraining of the reference policy.
    Pretrain,
    /// Negative-aware finetuning on the forward process.
    RlNft {
        /// Pretrained checkpoint (default: <out>/pretrain/model.dnft).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Group-relative policy gradient on SDE step likelihoods (baseline).
    RlGrpo {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rejection finetuning on above-mean samples (baseline).
    RlRft {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sample from a checkpoint and report the mean raw reward.
    Eval {
        /// Checkpoint to evaluate (default: <out>/rl-nft/model.dnft).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the identity verification suites; nonzero exit on any failure.
    Verify,
    /// Sweep one axis of the online loop and summarize reward curves.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 0.1,1 or euler_ode,sde_euler.
        #[arg(long)]
        values: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render a metrics CSV column as an SVG line chart.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "mean_raw_reward")]
        column: String,
        #[arg(long)]
        output: PathBuf,
    },
}

fn load_config(cli: &Cli) -> flowrl::Result<ExperimentConfig> {
    let table: toml::Table = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                flowrl::Error::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            text.parse()
                .map_err(|e| flowrl::Error::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::desk_default()
            .to_toml_string()?
            .parse()
            .expect("preset serializes"),
    };
    let mut value = toml::Value::Table(table);
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("out_dir=\"{}\"", out.display()));
    }
    apply_overrides(&mut value, &overrides)?;
    ExperimentConfig::from_value(value)
}

fn pretrained_model(
    cfg: &ExperimentConfig,
    checkpoint: &Option<PathBuf>,
    force: bool,
) -> flowrl::Result<VelocityModel> {
    let path = checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("pretrain/model.dnft"));
    let (model, _) = load_checked(&path, &cfg.schedule.id, cfg.digest()?, force)?;
    if model.arch() != &cfg.architecture()? {
        return Err(flowrl::Error::Checkpoint(
            "checkpoint architecture does not match config".into(),
        ));
    }
    Ok(model)
}

fn run(cli: Cli) -> flowrl::Result<ExitCode> {
    match &cli.command {
        Command::Plot {
            input,
            column,
            output,
        } => {
            plot::render_csv(input, column, output)?;
            println!("wrote {}", output.display());
            return Ok(ExitCode::SUCCESS);
        }
        Command::Verify => {
            let cfg = load_config(&cli)?;
            let results = verify::run_all(cfg.seed);
            verify::print_table(&results);
            return Ok(if verify::all_passed(&results) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            });
        }
        _ => {}
    }

    let cfg = load_config(&cli)?;
    let sched = cfg.schedule.build()?;
    let mixture = cfg.mixture.build()?;
    let digest = cfg.digest()?;
    let reward_spec = cfg.reward.clone();
    let reward_mix = mixture.clone();
    let reward = move |x0: &[f64], _cond: usize| reward_spec.evaluate(x0, &reward_mix);

    match cli.command {
        Command::Pretrain => {
            let dir = cfg.out_dir.join("pretrain");
            let mut sink = RunDir::create(&dir, &cfg.schedule.id, digest)?;
            let init = VelocityModel::init(cfg.architecture()?, cfg.seed);
            let model = fm::pretrain(&cfg.pretrain, init, &mixture, &sched, cfg.seed, &mut sink)?;
            println!(
                "pretrained {} parameters; checkpoint at {}",
                model.num_params(),
                sink.checkpoint_path("model").display()
            );
        }
        Command::RlNft { checkpoint } => {
            let v_ref = pretrained_model(&cfg, &checkpoint, cli.force)?;
            let dir = cfg.out_dir.join("rl-nft");
            let mut sink = RunDir::create(&dir, &cfg.schedule.id, digest)?;
            let outcome = nft::rl_loop(
                &cfg.rl,
                &cfg.rollout_sampler,
                &cfg.eval_sampler,
                &reward,
                &v_ref,
                &sched,
                cfg.seed,
                &mut sink,
            )?;
            let last = outcome.rows.iter().rev().find(|r| r.loss.is_finite());
            println!(
                "finished {} iterations; final mean raw reward {:.4}",
                cfg.rl.iterations,
                last.map(|r| r.mean_raw_reward).unwrap_or(f64::NAN)
            );
        }
        Command::RlGrpo { checkpoint } => {
            let v_ref = pretrained_model(&cfg, &checkpoint, cli.force)?;
            let dir = cfg.out_dir.join("rl-grpo");
            let mut sink = RunDir::create(&dir, &cfg.schedule.id, digest)?;
            let outcome = baselines::grpo_rl_loop(
                &cfg.rl,
                &cfg.rollout_sampler,
                &cfg.eval_sampler,
                &reward,
                &v_ref,
                &sched,
                cfg.seed,
                &mut sink,
            )?;
            println!(
                "finished {} iterations; final mean raw reward {:.4}",
                cfg.rl.iterations,
                outcome
                    .rows
                    .last()
                    .map(|r| r.mean_raw_reward)
                    .unwrap_or(f64::NAN)
            );
        }
        Command::RlRft { checkpoint } => {
            let v_ref = pretrained_model(&cfg, &checkpoint, cli.force)?;
            let dir = cfg.out_dir.join("rl-rft");
            let mut sink = RunDir::create(&dir, &cfg.schedule.id, digest)?;
            let outcome = baselines::rft_rl_loop(
                &cfg.rl,
                &cfg.rollout_sampler,
                &cfg.eval_sampler,
                &reward,
                &v_ref,
                &sched,
                cfg.seed,
                &mut sink,
            )?;
            println!(
                "finished {} iterations; final mean raw reward {:.4}",
                cfg.rl.iterations,
                outcome
                    .rows
                    .last()
                    .map(|r| r.mean_raw_reward)
                    .unwrap_or(f64::NAN)
            );
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join("rl-nft/model.dnft"));
            let (model, _) = load_checked(&path, &cfg.schedule.id, digest, cli.force)?;
            let mean = nft::evaluate_policy(
                &model,
                &cfg.eval_sampler,
                &sched,
                &reward,
                model.arch().cond_vocab,
                cfg.rl.eval_samples,
                cfg.seed,
                u64::MAX,
            )?;
            println!(
                "mean raw reward over {} samples: {mean:.4}",
                cfg.rl.eval_samples * model.arch().cond_vocab
            );
        }
        Command::Ablate {
            axis,
            values,
            checkpoint,
        } => {
            let v_ref = match pretrained_model(&cfg, &checkpoint, cli.force) {
                Ok(m) => m,
                Err(_) => {
                    // No pretrained checkpoint yet: produce one in place.
                    eprintln!("no pretrained checkpoint found; pretraining first");
                    let dir = cfg.out_dir.join("pretrain");
                    let mut sink = RunDir::create(&dir, &cfg.schedule.id, digest)?;
                    let init = VelocityModel::init(cfg.architecture()?, cfg.seed);
                    fm::pretrain(&cfg.pretrain, init, &mixture, &sched, cfg.seed, &mut sink)?
                }
            };
            let axis: AblationAxis = axis.parse()?;
            let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
            let out = cfg.out_dir.join(format!("ablate-{}", axis_name(axis)));
            let rows = run_ablation(&cfg, axis, &values, &v_ref, &out)?;
            println!(
                "{:<14} {:>14} {:>20} {:>16}",
                "value", "final_reward", "mean_reward_last10", "slope_first_50"
            );
            for row in rows {
                println!(
                    "{:<14} {:>14.4} {:>20.4} {:>16.6}",
                    row.value, row.final_reward, row.mean_reward_last10, row.slope_first_50
                );
            }
            println!("summary at {}", out.join("summary.csv").display());
        }
        Command::Verify | Command::Plot { .. } => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

fn axis_name(axis: AblationAxis) -> &'static str {
    match axis {
        AblationAxis::Beta => "beta",
        AblationAxis::Eta => "eta",
        AblationAxis::Weighting => "weighting",
        AblationAxis::Sampler => "sampler",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
