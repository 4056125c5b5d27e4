//! Run configuration: a TOML file with `[train]`, `[policy]`, `[instances]`,
//! `[hw]` and `[paths]` tables, overridable with `--set key=value`.
//!
//! Defaults reproduce the full-scale training setup. Every key is optional;
//! unknown keys are rejected, and all of them are reported at once.

use std::path::Path;

use serde::{Deserialize, Serialize};

use qroute_core::autodiff::AdamConfig;
use qroute_core::env::{DemandKind, GeneratorSpec};
use qroute_core::policy::{Compatibility, HeadType, PolicyConfig};
use qroute_core::trainer::{Algorithm, BaselineMode, TrainConfig};

use crate::{Error, Result};

/// The only CNOT orientation whose six-qubit line embedding reproduces the
/// four-qubit circuit: key qubit 2 controls query qubit 1, and query qubit
/// 2 controls key qubit 1.
pub const CNOT_CONVENTION: &str = "key2->query1,query2->key1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Seeds parameter init, instance generation and every sampled stream.
    pub seed: u64,
    pub train: TrainSection,
    pub policy: PolicySection,
    pub instances: InstanceSection,
    pub hw: HwSection,
    pub paths: PathSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub num_epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_freeze_epoch: usize,
    pub baseline_win_threshold: f64,
    pub baseline_streak: usize,
    pub baseline_instant_threshold: f64,
    pub baseline_mode: BaselineModeName,
    pub baseline_shares_streams: bool,
    pub algorithm: AlgorithmName,
    pub gamma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every this many epochs (the last epoch always).
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineModeName {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    RollingBaseline,
    NoBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum HeadName {
    Quantum,
    Classical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompatibilityName {
    Sum,
    Mean,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub d_h: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub decoder_heads: usize,
    pub dropout: f64,
    pub head_type: HeadName,
    pub compatibility: CompatibilityName,
    pub query_uses_key_theta2: bool,
    pub bn_momentum: f64,
    pub cnot_convention: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandName {
    UniformIntegers,
    UniformReal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceSection {
    /// Nodes per instance, depot included.
    pub n_nodes: usize,
    pub demand: DemandName,
    pub demand_lo: f64,
    pub demand_hi: f64,
    /// Divisor of integer demands.
    pub demand_scale: f64,
    pub box_size: f64,
    /// Optional supplier pool CSV; when set, `generate` subsamples it.
    pub pool: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HwSection {
    /// Nodes of the instance whose attention circuits are planned.
    pub n_nodes: usize,
    /// Parallel circuit slots per call; at most the packable placements.
    pub slots: usize,
    pub shots: usize,
    /// Connectivity graph file; empty selects the built-in lattice.
    pub graph: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSection {
    pub out: String,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainSection::default(),
            policy: PolicySection::default(),
            instances: InstanceSection::default(),
            hw: HwSection::default(),
            paths: PathSection::default(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            num_epochs: t.num_epochs,
            batches_per_epoch: t.batches_per_epoch,
            batch_size: t.batch_size,
            lr0: t.lr0,
            lr_decay: t.lr_decay,
            lr_freeze_epoch: t.lr_freeze_epoch,
            baseline_win_threshold: t.baseline_win_threshold,
            baseline_streak: t.baseline_streak,
            baseline_instant_threshold: t.baseline_instant_threshold,
            baseline_mode: BaselineModeName::Sample,
            baseline_shares_streams: t.baseline_shares_streams,
            algorithm: AlgorithmName::RollingBaseline,
            gamma: t.gamma,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            checkpoint_every: 1,
        }
    }
}

impl Default for PolicySection {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            d_h: p.d_h,
            n_layers: p.n_layers,
            n_heads: p.n_heads,
            d_k: p.d_k,
            d_ff: p.d_ff,
            decoder_heads: p.decoder_heads,
            dropout: p.dropout,
            head_type: HeadName::Quantum,
            compatibility: CompatibilityName::Sum,
            query_uses_key_theta2: p.query_uses_key_theta2,
            bn_momentum: p.bn_momentum,
            cnot_convention: CNOT_CONVENTION.into(),
        }
    }
}

impl Default for InstanceSection {
    fn default() -> Self {
        Self {
            n_nodes: GeneratorSpec::default().n_nodes,
            demand: DemandName::UniformIntegers,
            demand_lo: 1.0,
            demand_hi: 23.0,
            demand_scale: 10.0,
            box_size: 1.0,
            pool: String::new(),
        }
    }
}

impl Default for HwSection {
    fn default() -> Self {
        Self {
            n_nodes: 5,
            slots: 5,
            shots: qroute_core::hwplan::DEFAULT_SHOTS,
            graph: String::new(),
        }
    }
}

impl Default for PathSection {
    fn default() -> Self {
        Self { out: "runs/qroute".into() }
    }
}

impl Config {
    /// Parses TOML text, applies `overrides` (`dotted.key=value`) and
    /// validates the result.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().into()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let unknown = unknown_keys(&table);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().into()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or uses the defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(Error::io(p))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Checks every value, reporting all offending keys together.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(qroute_core::Error::Config(m)) = self.train_config().validate() {
            bad.push(format!("train/instances: {m}"));
        }
        if self.train.checkpoint_every == 0 {
            bad.push("train.checkpoint_every must be positive".into());
        }
        for (k, v) in [("train.adam_beta1", self.train.adam_beta1), ("train.adam_beta2", self.train.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                bad.push(format!("{k} must be in [0, 1), got {v}"));
            }
        }
        if !(self.train.adam_eps > 0.0) {
            bad.push(format!("train.adam_eps must be positive, got {}", self.train.adam_eps));
        }
        if let Err(qroute_core::Error::Config(m)) = self.policy_config().validate() {
            bad.push(format!("policy: {m}"));
        }
        if self.policy.n_layers == 0 || self.policy.n_heads == 0 {
            bad.push("policy.n_layers and policy.n_heads must be positive".into());
        }
        if self.policy.cnot_convention != CNOT_CONVENTION {
            bad.push(format!(
                "policy.cnot_convention {:?} unsupported; only {CNOT_CONVENTION:?} keeps the line embedding exact",
                self.policy.cnot_convention
            ));
        }
        if self.instances.demand == DemandName::UniformIntegers
            && (self.instances.demand_lo.fract() != 0.0 || self.instances.demand_hi.fract() != 0.0)
        {
            bad.push("instances.demand_lo/demand_hi must be integers for uniform_integers".into());
        }
        if self.hw.n_nodes == 0 || self.hw.slots == 0 || self.hw.shots == 0 {
            bad.push("hw.n_nodes, hw.slots and hw.shots must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        let i = &self.instances;
        let demand = match i.demand {
            DemandName::UniformIntegers => DemandKind::UniformIntegers {
                lo: i.demand_lo.max(0.0) as u32,
                hi: i.demand_hi.max(0.0) as u32,
                scale: i.demand_scale,
            },
            DemandName::UniformReal => DemandKind::UniformReal {
                lo: i.demand_lo,
                hi: i.demand_hi,
            },
        };
        GeneratorSpec {
            n_nodes: i.n_nodes,
            demand,
            box_size: i.box_size,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            num_epochs: t.num_epochs,
            batches_per_epoch: t.batches_per_epoch,
            batch_size: t.batch_size,
            lr0: t.lr0,
            lr_decay: t.lr_decay,
            lr_freeze_epoch: t.lr_freeze_epoch,
            baseline_win_threshold: t.baseline_win_threshold,
            baseline_streak: t.baseline_streak,
            baseline_instant_threshold: t.baseline_instant_threshold,
            baseline_mode: match t.baseline_mode {
                BaselineModeName::Sample => BaselineMode::Sample,
                BaselineModeName::Greedy => BaselineMode::Greedy,
            },
            baseline_shares_streams: t.baseline_shares_streams,
            algorithm: match t.algorithm {
                AlgorithmName::RollingBaseline => Algorithm::RollingBaseline,
                AlgorithmName::NoBaseline => Algorithm::NoBaseline,
            },
            gamma: t.gamma,
            adam: AdamConfig {
                beta1: t.adam_beta1,
                beta2: t.adam_beta2,
                eps: t.adam_eps,
            },
            seed: self.seed,
            instances: self.generator_spec(),
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let p = &self.policy;
        PolicyConfig {
            d_h: p.d_h,
            n_layers: p.n_layers,
            n_heads: p.n_heads,
            d_k: p.d_k,
            d_ff: p.d_ff,
            decoder_heads: p.decoder_heads,
            dropout: p.dropout,
            head_type: match p.head_type {
                HeadName::Quantum => HeadType::Quantum,
                HeadName::Classical => HeadType::Classical,
            },
            compatibility: match p.compatibility {
                CompatibilityName::Sum => Compatibility::Sum,
                CompatibilityName::Mean => Compatibility::Mean,
                CompatibilityName::Learned => Compatibility::Learned,
            },
            query_uses_key_theta2: p.query_uses_key_theta2,
            bn_momentum: p.bn_momentum,
        }
    }
}

/// Sets `dotted.key` in `table`. The value is read as a TOML value when it
/// parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().into()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Dotted keys of `table` that the default configuration does not have.
fn unknown_keys(table: &toml::Table) -> Vec<String> {
    fn walk(user: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
        for (k, v) in user {
            let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match (v, known.get(k)) {
                (_, None) => out.push(name),
                (toml::Value::Table(u), Some(toml::Value::Table(d))) => walk(u, d, &name, out),
                _ => {}
            }
        }
    }
    let known = toml::Table::try_from(Config::default()).expect("defaults serialise");
    let mut out = Vec::new();
    walk(table, &known, "", &mut out);
    out
}
