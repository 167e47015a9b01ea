use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::Granularity;
use crate::discriminator::{DiscObjective, RewardKind};
use crate::error::{Error, Result};
use crate::recurrent::Architecture;

/// How the final step of a rollout enters the policy-gradient surrogate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalPg {
    /// The sampled terminal action is valued at the discriminator reward.
    #[default]
    RewardSubstitute,
    /// Critic values at every step, the last one included.
    CriticOnly,
}

/// Where `prepare` reads its corpus from. Exactly one source must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Grammar description file.
    pub grammar: Option<PathBuf>,
    /// Plain text file, cut into train/valid/test by token fractions.
    pub text: Option<PathBuf>,
    pub granularity: Granularity,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            grammar: None,
            text: None,
            granularity: Granularity::Char,
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub seq_len: usize,
    pub batch_size: usize,
    /// Teacher-forcing learning rate.
    pub lr_pretrain: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_disc: f64,
    /// Variance-penalty weight.
    pub lambda: f64,
    pub tau: f64,
    pub ll_weight: f64,
    pub clip_norm: f64,
    pub disc_steps_per_cycle: usize,
    pub inner_steps_per_cycle: usize,
    /// Validation evaluations without improvement before pretraining stops.
    pub early_stop_patience: usize,
    /// Steps between validation evaluations.
    pub eval_every: usize,
    pub pretrain_actor_steps: usize,
    pub pretrain_critic_steps: usize,
    pub train_steps: usize,
    pub disc_objective: DiscObjective,
    pub reward: RewardKind,
    pub terminal_pg: TerminalPg,
    pub actor: Architecture,
    pub critic: Architecture,
    pub discriminator: Architecture,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seq_len: 32,
            batch_size: 32,
            lr_pretrain: 3e-3,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            lr_disc: 1e-3,
            lambda: 0.1,
            tau: 1e-3,
            ll_weight: 0.1,
            clip_norm: 5.0,
            disc_steps_per_cycle: 1,
            inner_steps_per_cycle: 1,
            early_stop_patience: 10,
            eval_every: 50,
            pretrain_actor_steps: 2000,
            pretrain_critic_steps: 500,
            train_steps: 1000,
            disc_objective: DiscObjective::Gan,
            reward: RewardKind::Probability,
            terminal_pg: TerminalPg::RewardSubstitute,
            actor: Architecture::default(),
            critic: Architecture::default(),
            discriminator: Architecture::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::Config(format!("malformed key `{key}`")));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    Err(Error::Config(format!("malformed key `{key}`")))
}

impl TrainConfig {
    /// Parses a TOML document, applies `key=value` overrides in order and validates.
    /// Keys may be dotted (`actor.hidden_dim=16`).
    pub fn resolve<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::resolve::<&str>(text, &[])
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        for (name, v) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("lr_disc", self.lr_disc),
            ("lambda", self.lambda),
            ("ll_weight", self.ll_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.early_stop_patience == 0 || self.eval_every == 0 {
            return bad("early_stop_patience and eval_every must be at least 1");
        }
        for (name, a) in [
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("discriminator", &self.discriminator),
        ] {
            if a.embed_dim == 0 || a.hidden_dim == 0 {
                return Err(Error::Config(format!("{name} dimensions must be positive")));
            }
        }
        let d = &self.data;
        if !(d.valid_fraction >= 0.0 && d.test_fraction >= 0.0 && d.valid_fraction + d.test_fraction < 1.0) {
            return bad("data fractions must be non-negative and leave room for training");
        }
        Ok(())
    }
}
