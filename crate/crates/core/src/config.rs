//! Run configuration: one TOML-serializable struct with embedded defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::buffer::BufferConfig;
use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::sim::schedule::ScheduleSpec;
use crate::sim::topology::TopologySpec;
use crate::trainer::{Mlp, Objective, Softmax, TrainerConfig};
use crate::wcp::ValueWidth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Centroid messages, push-sum aggregation, anchored local updates.
    Pushcen,
    /// Full-precision messages averaged uniformly, plain local SGD.
    AsyncDfedavg,
    /// Local SGD only.
    Independent,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Pushcen, Method::AsyncDfedavg, Method::Independent];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pushcen => "pushcen",
            Method::AsyncDfedavg => "async-dfedavg",
            Method::Independent => "independent",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (pushcen | async-dfedavg | independent)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    Softmax,
    Mlp { hidden: usize },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Mlp { hidden: 64 }
    }
}

impl ModelSpec {
    pub fn build(&self, data: &DataSpec) -> Result<Box<dyn Objective>> {
        Ok(match self {
            ModelSpec::Softmax => Box::new(Softmax::new(data.dim, data.classes)?),
            ModelSpec::Mlp { hidden } => {
                if *hidden == 0 {
                    return Err(Error::Config("hidden width must be positive".into()));
                }
                Box::new(Mlp::new(data.dim, *hidden, data.classes)?)
            }
        })
    }
}

/// What happens to push-sum mass when the buffer evicts a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvictionPolicy {
    /// The evicted message and its mass leave the system.
    Drop,
    /// A superseded message is mass-averaged into the message replacing it;
    /// an overflow victim is aggregated into the receiver right away. Both
    /// keep total mass and numerator unchanged.
    Merge,
    /// The evicted content is discarded but its mass is kept: a superseded
    /// share is added to the newest message from the same sender, an
    /// overflow victim's share to the receiver's own mass.
    Reassign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Every client starts from the same seed-derived model.
    Shared,
    /// Each client draws its own initial model.
    PerClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Centroid payloads; when off, messages are dense at `dense_bits`.
    pub compression: bool,
    /// Run local updates on activation.
    pub training: bool,
    pub eviction: EvictionPolicy,
    pub dense_bits: ValueWidth,
    pub init: InitMode,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            compression: true,
            training: true,
            eviction: EvictionPolicy::Reassign,
            dense_bits: ValueWidth::B32,
            init: InitMode::Shared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Sets `λ = 0`.
    pub no_reg: bool,
    /// Turns sender deduplication off and the capacity to unbounded.
    pub no_buffer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Seeds data, schedule, initialization and training.
    pub seed: u64,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub topology: TopologySpec,
    pub schedule: ScheduleSpec,
    pub trainer: TrainerConfig,
    pub buffer: BufferConfig,
    pub protocol: ProtocolConfig,
    pub ablation: Ablation,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Pushcen,
            seed: 0,
            data: DataSpec::default(),
            model: ModelSpec::default(),
            topology: TopologySpec::default(),
            schedule: ScheduleSpec::default(),
            trainer: TrainerConfig::default(),
            buffer: BufferConfig::default(),
            protocol: ProtocolConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The configuration the engine actually runs: ablations applied, the
    /// method's fixed choices imposed, and the data seed tied to the run
    /// seed.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.data.seed = c.seed;
        if c.ablation.no_reg {
            c.trainer.lambda = 0.0;
        }
        if c.ablation.no_buffer {
            c.buffer = BufferConfig { capacity: 0, dedup: false };
        }
        match c.method {
            Method::Pushcen => {}
            Method::AsyncDfedavg => {
                c.protocol.compression = false;
                c.trainer.lambda = 0.0;
                c.buffer = BufferConfig { capacity: 0, dedup: false };
            }
            Method::Independent => {
                c.protocol.compression = false;
                c.trainer.lambda = 0.0;
                c.topology = TopologySpec::RandomGossip { fanout: 0 };
            }
        }
        c.ablation = Ablation::default();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule.validate()?;
        self.trainer.validate()?;
        self.model.build(&self.data)?;
        crate::sim::topology::Topology::new(&self.topology, self.data.clients)?;
        Ok(())
    }

    /// SHA-256 of the resolved configuration's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.resolved()).expect("config is always serializable");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
