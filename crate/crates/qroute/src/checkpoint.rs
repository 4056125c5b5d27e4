//! Self-describing JSON checkpoints holding everything needed to resume a
//! run: the config echo, live and baseline parameters with batch norm
//! buffers, Adam moments, the epoch counter and the random stream lineage.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use qroute_core::autodiff::{AdamState, ParameterStore, Tensor};
use qroute_core::policy::Policy;
use qroute_core::trainer::{BaselineState, Trainer};

use crate::config::Config;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// How the run's random draws are derived. Every stream is a pure function
/// of the seed and its path, so no generator state needs saving.
pub const RNG_LINEAGE: &str = "chacha8 streams keyed by seed and path [epoch, batch, episode, purpose]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: Config,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngRecord,
    pub policy: TensorSet,
    pub baseline: BaselineRecord,
    pub adam: AdamRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngRecord {
    pub seed: u64,
    pub lineage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Array {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSet {
    pub params: BTreeMap<String, Array>,
    pub buffers: BTreeMap<String, Array>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineRecord {
    pub policy: TensorSet,
    /// Epoch win fractions since the last baseline update.
    pub recent_win_fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamRecord {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

fn array(t: &Tensor) -> Array {
    Array {
        shape: [t.shape.0, t.shape.1],
        values: t.values.clone(),
    }
}

impl TensorSet {
    pub fn of(store: &ParameterStore) -> Self {
        Self {
            params: store.params().map(|(k, t)| (k.to_string(), array(t))).collect(),
            buffers: store.buffers().map(|(k, t)| (k.to_string(), array(t))).collect(),
        }
    }

    pub fn to_store(&self) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let tensor = |a: &Array| Tensor::new((a.shape[0], a.shape[1]), a.values.clone());
        for (k, a) in &self.params {
            store.insert(k, tensor(a)?)?;
        }
        for (k, a) in &self.buffers {
            store.insert_buffer(k, tensor(a)?)?;
        }
        Ok(store)
    }
}

impl Checkpoint {
    pub fn from_trainer(config: &Config, trainer: &Trainer) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            epoch: trainer.epoch,
            rng: RngRecord {
                seed: trainer.config.seed,
                lineage: RNG_LINEAGE.into(),
            },
            policy: TensorSet::of(&trainer.policy.store),
            baseline: BaselineRecord {
                policy: TensorSet::of(&trainer.baseline.policy.store),
                recent_win_fractions: trainer.baseline.recent.clone(),
            },
            adam: AdamRecord {
                step: trainer.adam.step,
                m: trainer.adam.m.clone(),
                v: trainer.adam.v.clone(),
            },
        }
    }

    pub fn policy(&self) -> Result<Policy> {
        Ok(Policy::from_store(self.config.policy_config(), self.policy.to_store()?)?)
    }

    /// Rebuilds the trainer exactly as it was when saved.
    pub fn to_trainer(&self) -> Result<Trainer> {
        let policy = self.policy()?;
        let baseline = Policy::from_store(self.config.policy_config(), self.baseline.policy.to_store()?)?;
        let mut t = Trainer::new(self.config.train_config(), policy)?;
        t.baseline = BaselineState {
            policy: baseline,
            recent: self.baseline.recent_win_fractions.clone(),
        };
        t.adam = AdamState {
            step: self.adam.step,
            m: self.adam.m.clone(),
            v: self.adam.v.clone(),
        };
        t.epoch = self.epoch;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serialises");
        s.push('\n');
        s
    }

    /// Parses checkpoint JSON, refusing other format versions before
    /// looking at anything else.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint format_version {v} is not supported (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("checkpoint has no format_version".into())),
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        ckpt.config.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json(&text)
    }
}

/// File name of the checkpoint written after `epoch` (1-based).
pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}.json")
}
