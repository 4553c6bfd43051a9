//! Experiment configuration: scale presets, TOML files and dotted overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::PhantomDatasetSpec;
use crate::evaluation::EvalConfig;
use crate::network::NetworkConfig;
use crate::training::{Phase, TrainConfig};
use crate::{DigestError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

/// Per-phase replacements for a few [`TrainConfig`] fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_initial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine_decay_start_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub teacher: PhaseOverrides,
    #[serde(default)]
    pub student: PhaseOverrides,
    /// Teacher network; the student is the same with attention blocks.
    pub network: NetworkConfig,
    pub data: PhantomDatasetSpec,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self::desk(),
            Scale::Paper => Self::paper(),
        }
    }

    /// 32³ crops of 40³ phantoms, width 8, depth 4.
    pub fn desk() -> Self {
        let train = TrainConfig {
            epochs: 30,
            cosine_decay_start_epoch: 15,
            lr_initial: 3e-3,
            crop: [32; 3],
            ..TrainConfig::default()
        };
        Self {
            train,
            teacher: PhaseOverrides::default(),
            student: PhaseOverrides::default(),
            network: NetworkConfig::default(),
            data: PhantomDatasetSpec::default(),
            eval: EvalConfig::default(),
        }
    }

    /// 128³ crops, 200 epochs, cosine decay after 100, width 16.
    pub fn paper() -> Self {
        let mut data = PhantomDatasetSpec {
            cases: 369,
            val_cases: 74,
            test_cases: 75,
            ..PhantomDatasetSpec::default()
        };
        data.phantom.volume_size = [160, 160, 160];
        data.phantom.lesion_radius_range = (12.0, 32.0);
        Self {
            train: TrainConfig {
                crop: [128; 3],
                ..TrainConfig::default()
            },
            teacher: PhaseOverrides::default(),
            student: PhaseOverrides::default(),
            network: NetworkConfig {
                base_width: 16,
                ..NetworkConfig::default()
            },
            data,
            eval: EvalConfig {
                sliding_window: true,
                ..EvalConfig::default()
            },
        }
    }

    /// Preset, then the TOML file, then `key=value` overrides, in that order.
    pub fn load(scale: Scale, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some((
                p.display().to_string(),
                std::fs::read_to_string(p).map_err(|e| DigestError::io(p, e))?,
            )),
            None => None,
        };
        Self::layered(scale, text.as_ref().map(|(n, t)| (n.as_str(), t.as_str())), overrides)
    }

    /// As [`load`](Self::load) with the file contents given directly as
    /// `(name, text)`.
    pub fn layered(scale: Scale, file: Option<(&str, &str)>, overrides: &[String]) -> Result<Self> {
        let mut table = Table::try_from(Self::preset(scale)).map_err(|e| DigestError::Config(e.to_string()))?;
        if let Some((name, text)) = file {
            let user: Table = text.parse().map_err(|e| DigestError::Config(format!("{name}: {e}")))?;
            merge(&mut table, user);
        }
        for o in overrides {
            set_dotted(&mut table, o)?;
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| DigestError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.data.phantom.validate()?;
        for phase in [Phase::Teacher, Phase::Student] {
            self.phase(phase).validate()?;
        }
        if !(0.0..1.0).contains(&self.eval.overlap) {
            return Err(DigestError::Config(format!(
                "eval.overlap must be in [0, 1), got {}",
                self.eval.overlap
            )));
        }
        Ok(())
    }

    /// Sets every seed from one top-level seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.network.seed = seed;
        self.data.seed = seed;
        self
    }

    /// Training settings of one phase.
    pub fn phase(&self, phase: Phase) -> TrainConfig {
        let o = match phase {
            Phase::Teacher => &self.teacher,
            Phase::Student => &self.student,
        };
        TrainConfig {
            phase,
            epochs: o.epochs.unwrap_or(self.train.epochs),
            lr_initial: o.lr_initial.unwrap_or(self.train.lr_initial),
            cosine_decay_start_epoch: o
                .cosine_decay_start_epoch
                .unwrap_or(self.train.cosine_decay_start_epoch),
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DigestError::Config(e.to_string()))
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`; the value is read as TOML, else as a bare string.
pub fn set_dotted(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| DigestError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(DigestError::Config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(DigestError::Config(format!("`{p}` in `{key}` is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
