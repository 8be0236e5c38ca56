//! Versioned TOML experiment configuration.
//!
//! Unknown keys are rejected everywhere: a typo in an RL config should fail
//! loudly, not silently run a different experiment. Seeds are explicit; no
//! wall-clock seeding exists anywhere in the lab.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fm::PretrainConfig;
use crate::mixture::{GaussianMixture, MixtureComponent};
use crate::nft::RlConfig;
use crate::nn::Architecture;
use crate::rewards::RewardSpec;
use crate::samplers::{SamplerKind, SamplerSpec};
use crate::schedule::RectifiedFlow;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
}

impl MixtureSpec {
    pub fn build(&self) -> Result<GaussianMixture> {
        GaussianMixture::new(self.components.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub id: String,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            id: "rectified_flow".into(),
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<RectifiedFlow> {
        if self.id == "rectified_flow" {
            Ok(RectifiedFlow)
        } else {
            Err(Error::Config(format!("unknown schedule id {:?}", self.id)))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_cond_vocab")]
    pub cond_vocab: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}
fn default_cond_vocab() -> usize {
    1
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            cond_vocab: default_cond_vocab(),
        }
    }
}

/// Top-level experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub mixture: MixtureSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub model: ModelSpec,
    pub pretrain: PretrainConfig,
    pub rl: RlConfig,
    pub rollout_sampler: SamplerSpec,
    pub eval_sampler: SamplerSpec,
    pub reward: RewardSpec,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    /// Desk-scale preset: two well-separated 2-D components, indicator
    /// reward on the second, 10-step ODE rollouts.
    pub fn desk_default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 42,
            out_dir: default_out_dir(),
            mixture: MixtureSpec {
                components: vec![
                    MixtureComponent {
                        weight: 0.5,
                        mean: vec![-1.5, 0.0],
                        var: vec![0.25, 0.25],
                    },
                    MixtureComponent {
                        weight: 0.5,
                        mean: vec![1.5, 0.0],
                        var: vec![0.25, 0.25],
                    },
                ],
            },
            schedule: ScheduleSpec::default(),
            model: ModelSpec::default(),
            pretrain: PretrainConfig::default(),
            rl: RlConfig::desk_default(),
            rollout_sampler: SamplerSpec::new(SamplerKind::EulerOde, 10),
            eval_sampler: SamplerSpec::new(SamplerKind::EulerOde, 40),
            reward: RewardSpec::Indicator {
                target_component: 1,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(toml::Value::Table(table))
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let mixture = self.mixture.build()?;
        self.schedule.build()?;
        self.architecture()?;
        self.reward.validate(&mixture)?;
        self.rollout_sampler.validate()?;
        self.eval_sampler.validate()?;
        self.rl.validate()?;
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let dim = self
            .mixture
            .components
            .first()
            .map(|c| c.mean.len())
            .unwrap_or(0);
        Architecture::new(dim, self.model.cond_vocab, self.model.hidden.clone())
    }

    /// SHA-256 of the canonical serialized form; stored in checkpoints so a
    /// checkpoint trained under one configuration refuses to load under
    /// another unless forced.
    ///
    /// `out_dir` is excluded: it decides where a run lands, not what it
    /// computes, and relocating outputs must not orphan checkpoints.
    pub fn digest(&self) -> Result<[u8; 32]> {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let text = canonical.to_toml_string()?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(hasher.finalize().into())
    }
}

/// Apply `key=value` overrides onto a raw TOML value using dotted paths,
/// e.g. `rl.beta=0.1` or `rollout_sampler.kind=sde_euler`.
pub fn apply_overrides(value: &mut toml::Value, overrides: &[String]) -> Result<()> {
    for entry in overrides {
        let (key, raw) = entry.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {entry:?} must have the form key=value"))
        })?;
        let parsed = parse_override_value(raw);
        let parts: Vec<&str> = key.split('.').collect();
        insert_path(value, &parts, parsed, key)?;
    }
    Ok(())
}

fn insert_path(node: &mut toml::Value, parts: &[&str], parsed: toml::Value, key: &str) -> Result<()> {
    let table = node.as_table_mut().ok_or_else(|| {
        Error::Config(format!("override path {key:?} does not address a table"))
    })?;
    match parts {
        [] => Err(Error::Config("empty override path".into())),
        [last] => {
            table.insert(last.to_string(), parsed);
            Ok(())
        }
        [head, rest @ ..] => {
            let child = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
            insert_path(child, rest, parsed, key)
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Reuse the TOML scalar grammar; fall back to a string.
    let wrapped = format!("x = {raw}");
    if let Ok(mut t) = wrapped.parse::<toml::Table>() {
        if let Some(v) = t.remove("x") {
            return v;
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_validates_and_round_trips() {
        let cfg = ExperimentConfig::desk_default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(cfg.digest().unwrap(), back.digest().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::desk_default().to_toml_string().unwrap();
        text.push_str("\n[rl]\nbogus_key = 3\n");
        // Duplicate table: parse error; instead inject into a fresh copy.
        let text = text.replace("[rl]\nbogus_key = 3\n", "");
        let mut value = toml::Value::Table(text.parse::<toml::Table>().unwrap());
        value
            .get_mut("rl")
            .unwrap()
            .as_table_mut()
            .unwrap()
            .insert("bogus_key".into(), toml::Value::Integer(3));
        assert!(ExperimentConfig::from_value(value).is_err());
    }

    #[test]
    fn overrides_apply_to_nested_paths() {
        let cfg = ExperimentConfig::desk_default();
        let mut value = toml::Value::Table(
            cfg.to_toml_string().unwrap().parse::<toml::Table>().unwrap(),
        );
        apply_overrides(
            &mut value,
            &[
                "rl.beta=0.1".to_string(),
                "seed=7".to_string(),
                "rollout_sampler.kind=sde_euler".to_string(),
                "rollout_sampler.a=1.4142135623730951".to_string(),
            ],
        )
        .unwrap();
        let cfg = ExperimentConfig::from_value(value).unwrap();
        assert_eq!(cfg.rl.beta, 0.1);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.rollout_sampler.kind, SamplerKind::SdeEuler);
    }

    #[test]
    fn digest_changes_with_config() {
        let a = ExperimentConfig::desk_default();
        let mut b = a.clone();
        b.rl.beta = 0.1;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn bad_schedule_and_version_are_rejected() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.schedule.id = "variance_preserving".into();
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default();
        cfg.version = 9;
        assert!(cfg.validate().is_err());
    }
}
