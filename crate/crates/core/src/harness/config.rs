use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::sac::{AgentConfig, AgentSpec};
use crate::transformer::EncoderConfig;

/// A complete training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub total_steps: u64,
    /// Uniform random actions before the policy takes over.
    pub random_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Train the reconstruction objective alongside the critic.
    pub aux: bool,
    pub output_dir: PathBuf,
    /// Keep one checkpoint per evaluation instead of only the latest.
    pub keep_checkpoints: bool,
    pub env: EnvConfig,
    pub encoder: EncoderConfig,
    pub sac: AgentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 30_000,
            random_steps: 1_000,
            eval_interval: 2_500,
            eval_episodes: 20,
            aux: true,
            output_dir: PathBuf::from("runs/default"),
            keep_checkpoints: false,
            env: EnvConfig::default(),
            encoder: EncoderConfig::default(),
            sac: AgentConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; unknown keys are rejected with their location.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.encoder.validate()?;
        self.sac.validate()?;
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        if self.encoder.color != self.env.task.has_color() {
            return Err(Error::Config(format!(
                "encoder.color = {} but task {:?} {} colors",
                self.encoder.color,
                self.env.task,
                if self.env.task.has_color() { "emits" } else { "does not emit" }
            )));
        }
        Ok(())
    }

    pub fn agent_spec(&self) -> AgentSpec {
        AgentSpec {
            encoder: self.encoder.clone(),
            sac: self.sac.clone(),
            aux: self.aux,
            state_dim: self.env.state_dim(),
            action_dim: self.env.action_dim(),
        }
    }
}
