//! Attention policy: encoder with quantum (or classical) attention heads and
//! a classical multi-head decoder that emits one node per step.
//!
//! Parameters live in a [`ParameterStore`] under dotted names:
//!
//! ```text
//! encoder.depot.{w,b}                       d_h x 2, 1 x d_h
//! encoder.embed.{w,b}                       d_h x 3, 1 x d_h
//! encoder.layer<l>.head<m>.key_angles       3 x d_h      (quantum)
//! encoder.layer<l>.head<m>.query_angles     3 x d_h      (quantum)
//! encoder.layer<l>.head<m>.compat           1 x 2        (quantum, learned variant)
//! encoder.layer<l>.head<m>.{query,key}      d_k x d_h    (classical)
//! encoder.layer<l>.head<m>.value            d_k x d_h
//! encoder.layer<l>.head<m>.out              d_h x d_k
//! encoder.layer<l>.ff1.{w,b}, ff2.{w,b}
//! encoder.layer<l>.bn{1,2}.{gamma,beta}     buffers: .running_mean, .running_var
//! decoder.head<m>.query                     d_k x (2 d_h + 1)
//! decoder.head<m>.{key,value}               d_k x d_h
//! decoder.head<m>.out                       d_h x d_k
//! decoder.final.{query,key}                 d_h x d_h
//! ```
//!
//! Layers and heads are numbered from 1.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::autodiff::{BatchStats, Graph, NormMode, ParameterStore, Tensor, Var};
use crate::env::{self, Instance, Route, RouteState};
use crate::math;
use crate::{Error, Result};

/// Bound on the final decoder logits.
pub const LOGIT_CLIP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadType {
    Quantum,
    Classical,
}

/// How the two expectation values of a quantum head become one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compatibility {
    /// `e13 + e24`
    Sum,
    /// `(e13 + e24) / 2`
    Mean,
    /// `w1 e13 + w2 e24` with learned weights
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub d_h: usize,
    pub n_layers: usize,
    /// Encoder heads per layer.
    pub n_heads: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub decoder_heads: usize,
    pub dropout: f64,
    pub head_type: HeadType,
    pub compatibility: Compatibility,
    /// Prepare each query with the node's key `θ2` in place of `φ2`.
    pub query_uses_key_theta2: bool,
    pub bn_momentum: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_h: 128,
            n_layers: 3,
            n_heads: 6,
            d_k: 16,
            d_ff: 128,
            decoder_heads: 6,
            dropout: 0.1,
            head_type: HeadType::Quantum,
            compatibility: Compatibility::Sum,
            query_uses_key_theta2: false,
            bn_momentum: 0.1,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("d_h", self.d_h),
            ("d_k", self.d_k),
            ("d_ff", self.d_ff),
            ("decoder_heads", self.decoder_heads),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            bad.push(format!("bn_momentum must be in (0, 1], got {}", self.bn_momentum));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Whether the encoder normalises with batch statistics and applies dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How the decoder picks each node.
pub enum Decode<'r> {
    Sample(&'r mut dyn RngCore),
    /// Highest probability, lowest index on ties.
    Greedy,
    /// Replays the given nodes (the route after the starting depot).
    Forced(&'r [usize]),
}

/// The policy configuration and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub store: ParameterStore,
}

fn head_name(l: usize, m: usize, what: &str) -> String {
    format!("encoder.layer{l}.head{m}.{what}")
}

fn layer_name(l: usize, what: &str) -> String {
    format!("encoder.layer{l}.{what}")
}

fn dec_head_name(m: usize, what: &str) -> String {
    format!("decoder.head{m}.{what}")
}

/// `(name, shape, fan_in)` of every weight in registration order; a fan-in
/// of 0 marks a tensor initialised to ones.
fn layout(cfg: &PolicyConfig) -> Vec<(String, (usize, usize), usize)> {
    let (d_h, d_k, d_ff) = (cfg.d_h, cfg.d_k, cfg.d_ff);
    let mut v = vec![
        ("encoder.depot.w".into(), (d_h, 2), 2),
        ("encoder.depot.b".into(), (1, d_h), 2),
        ("encoder.embed.w".into(), (d_h, 3), 3),
        ("encoder.embed.b".into(), (1, d_h), 3),
    ];
    for l in 1..=cfg.n_layers {
        for m in 1..=cfg.n_heads {
            match cfg.head_type {
                HeadType::Quantum => {
                    v.push((head_name(l, m, "key_angles"), (3, d_h), d_h));
                    v.push((head_name(l, m, "query_angles"), (3, d_h), d_h));
                    if cfg.compatibility == Compatibility::Learned {
                        v.push((head_name(l, m, "compat"), (1, 2), 0));
                    }
                }
                HeadType::Classical => {
                    v.push((head_name(l, m, "query"), (d_k, d_h), d_h));
                    v.push((head_name(l, m, "key"), (d_k, d_h), d_h));
                }
            }
            v.push((head_name(l, m, "value"), (d_k, d_h), d_h));
            v.push((head_name(l, m, "out"), (d_h, d_k), d_k));
        }
        v.push((layer_name(l, "ff1.w"), (d_ff, d_h), d_h));
        v.push((layer_name(l, "ff1.b"), (1, d_ff), d_h));
        v.push((layer_name(l, "ff2.w"), (d_h, d_ff), d_ff));
        v.push((layer_name(l, "ff2.b"), (1, d_h), d_ff));
        for bn in ["bn1", "bn2"] {
            v.push((layer_name(l, &format!("{bn}.gamma")), (1, d_h), 0));
            v.push((layer_name(l, &format!("{bn}.beta")), (1, d_h), usize::MAX));
        }
    }
    for m in 1..=cfg.decoder_heads {
        v.push((dec_head_name(m, "query"), (d_k, 2 * d_h + 1), 2 * d_h + 1));
        v.push((dec_head_name(m, "key"), (d_k, d_h), d_h));
        v.push((dec_head_name(m, "value"), (d_k, d_h), d_h));
        v.push((dec_head_name(m, "out"), (d_h, d_k), d_k));
    }
    v.push(("decoder.final.query".into(), (d_h, d_h), d_h));
    v.push(("decoder.final.key".into(), (d_h, d_h), d_h));
    v
}

impl Policy {
    /// Fresh parameters: weights and biases uniform in `±1/√fan_in`, batch
    /// norm scale 1 and shift 0, running statistics 0 and 1.
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        for (name, shape, fan_in) in layout(&config) {
            let n = shape.0 * shape.1;
            let values = match fan_in {
                0 => vec![1.0; n],
                usize::MAX => vec![0.0; n],
                f => {
                    let bound = 1.0 / math::sqrt(f as f64);
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
            };
            store.insert(&name, Tensor::new(shape, values)?)?;
        }
        for l in 1..=config.n_layers {
            for bn in ["bn1", "bn2"] {
                let p = layer_name(l, bn);
                store.insert_buffer(&format!("{p}.running_mean"), Tensor::zeros((1, config.d_h)))?;
                store.insert_buffer(&format!("{p}.running_var"), Tensor::filled((1, config.d_h), 1.0))?;
            }
        }
        Ok(Self { config, store })
    }

    /// Wraps existing parameters after checking them against `config`.
    pub fn from_store(config: PolicyConfig, store: ParameterStore) -> Result<Self> {
        let reference = Self::new(config.clone(), &mut crate::rng::stream(0, &[]))?;
        reference.store.check_compatible(&store)?;
        Ok(Self { config, store })
    }

    pub fn n_params(&self) -> usize {
        self.store.n_params()
    }

    /// Starts a forward pass. With `frozen` the parameters enter the graph as
    /// constants and no gradient is recorded for them.
    pub fn forward(&self, frozen: bool) -> Forward<'_> {
        Forward {
            graph: Graph::new(),
            config: &self.config,
            store: &self.store,
            frozen,
            bound: BTreeMap::new(),
        }
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        let mom = self.config.bn_momentum;
        for (prefix, s) in stats {
            let mean = self.store.buffer_mut(&format!("{prefix}.running_mean"))?;
            for (r, b) in mean.values.iter_mut().zip(&s.mean) {
                *r = (1.0 - mom) * *r + mom * b;
            }
            let var = self.store.buffer_mut(&format!("{prefix}.running_var"))?;
            for (r, b) in var.values.iter_mut().zip(&s.var) {
                *r = (1.0 - mom) * *r + mom * b;
            }
        }
        Ok(())
    }

    /// One eval-mode episode without gradient bookkeeping.
    pub fn rollout(&self, instance: &Instance, decode: Decode<'_>) -> Result<Rollout> {
        let mut fwd = self.forward(true);
        let enc = fwd.encode(core::slice::from_ref(instance), Mode::Eval, &mut NoRng)?;
        let ep = fwd.rollout(&enc, 0, instance, decode)?;
        Ok(Rollout {
            route: ep.route,
            log_prob: ep.log_prob_value,
            cost: ep.cost,
            step_probs: ep.step_probs,
        })
    }

    /// Eval-mode action distribution for `state`.
    pub fn step_probabilities(&self, instance: &Instance, state: &RouteState) -> Result<Vec<f64>> {
        let mut fwd = self.forward(true);
        let enc = fwd.encode(core::slice::from_ref(instance), Mode::Eval, &mut NoRng)?;
        let cache = fwd.decoder_cache(&enc, 0)?;
        let p = fwd.decode_step(&cache, state, &env::legal_mask(state, instance))?;
        Ok(fwd.graph.value(p).to_vec())
    }
}

impl Policy {
    /// Key and query angle triples of every node at every quantum head,
    /// taken from an eval-mode encoding of `instance`.
    pub fn circuit_angles(&self, instance: &Instance) -> Result<Vec<HeadAngles>> {
        if self.config.head_type != HeadType::Quantum {
            return Err(Error::Argument("circuit angles need quantum heads".into()));
        }
        let mut fwd = self.forward(true);
        let (mut h, n) = fwd.embed_inputs(core::slice::from_ref(instance))?;
        let mut out = Vec::new();
        for l in 1..=self.config.n_layers {
            for m in 1..=self.config.n_heads {
                let ka = fwd.param(&head_name(l, m, "key_angles"))?;
                let qa = fwd.param(&head_name(l, m, "query_angles"))?;
                let k = fwd.graph.matmul_t(h, ka)?;
                let q = fwd.graph.matmul_t(h, qa)?;
                let triples = |v: &[f64]| -> Vec<[f64; 3]> { v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() };
                let key = triples(fwd.graph.value(k));
                let mut query = triples(fwd.graph.value(q));
                if self.config.query_uses_key_theta2 {
                    for (q, k) in query.iter_mut().zip(&key) {
                        q[1] = k[1];
                    }
                }
                out.push(HeadAngles { layer: l, head: m, key, query });
            }
            h = fwd.encoder_layer(l, h, n, Mode::Eval, &mut NoRng, &mut Vec::new())?;
        }
        Ok(out)
    }
}

/// Circuit angles of one encoder head; `key[i]` is `(θ1, θ2, α)` and
/// `query[j]` is `(φ1, φ2, β)` for nodes `i`, `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAngles {
    pub layer: usize,
    pub head: usize,
    pub key: Vec<[f64; 3]>,
    pub query: Vec<[f64; 3]>,
}

/// Result of [`Policy::rollout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub route: Route,
    pub log_prob: f64,
    pub cost: f64,
    /// Probability vector of every decoding step.
    pub step_probs: Vec<Vec<f64>>,
}

/// Random source for passes that never draw (eval mode has no dropout).
struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval-mode forward drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval-mode forward drew a random number")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("eval-mode forward drew a random number")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> core::result::Result<(), rand::Error> {
        unreachable!("eval-mode forward drew a random number")
    }
}

/// Node embeddings of a batch of same-size instances, instance-major.
#[derive(Debug, Clone)]
pub struct Encoding {
    /// `(batch · n) x d_h`
    pub h: Var,
    pub batch: usize,
    pub n: usize,
    /// Training-mode statistics per batch norm, keyed by parameter prefix.
    pub stats: Vec<(String, BatchStats)>,
}

/// Per-instance decoder inputs computed once per episode.
#[derive(Debug, Clone, Copy)]
pub struct DecoderCache {
    pub n: usize,
    /// `n x d_h`
    pub h: Var,
    /// `1 x d_h`
    pub mean: Var,
    keys: Var,
    values: Var,
    final_keys: Var,
}

/// One decoded episode on a [`Forward`] graph.
#[derive(Debug, Clone)]
pub struct Episode {
    pub route: Route,
    /// `1 x 1` sum of per-step log-probabilities.
    pub log_prob: Var,
    pub log_prob_value: f64,
    pub cost: f64,
    pub step_probs: Vec<Vec<f64>>,
}

/// A forward pass under construction.
pub struct Forward<'a> {
    pub graph: Graph,
    config: &'a PolicyConfig,
    store: &'a ParameterStore,
    frozen: bool,
    bound: BTreeMap<String, Var>,
}

impl<'a> Forward<'a> {
    pub fn into_graph(self) -> Graph {
        self.graph
    }

    /// Graph node of a parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let v = if self.frozen {
            self.graph.constant_tensor(self.store.get(name)?)
        } else {
            self.graph.param(self.store, name)?
        };
        self.bound.insert(name.into(), v);
        Ok(v)
    }

    fn stacked(&mut self, key: &str, names: &[String], rows: bool) -> Result<Var> {
        if let Some(v) = self.bound.get(key) {
            return Ok(*v);
        }
        let parts = names.iter().map(|n| self.param(n)).collect::<Result<Vec<_>>>()?;
        let v = if rows {
            self.graph.concat_rows(&parts)?
        } else {
            self.graph.concat_cols(&parts)?
        };
        self.bound.insert(key.into(), v);
        Ok(v)
    }

    /// Initial projections: depot rows `W₀ x₀ + b₀`, supplier rows
    /// `W [x, d] + b`; instance-major `(batch · n) x d_h`.
    pub fn embed_inputs(&mut self, instances: &[Instance]) -> Result<(Var, usize)> {
        let first = instances
            .first()
            .ok_or_else(|| Error::Argument("empty instance batch".into()))?;
        let (b, n) = (instances.len(), first.n());
        if let Some(bad) = instances.iter().find(|i| i.n() != n) {
            return Err(Error::Argument(format!(
                "instances in one batch must share a size ({n} vs {})",
                bad.n()
            )));
        }
        let mut dep = Vec::with_capacity(b * 2);
        let mut sup = Vec::with_capacity(b * (n - 1) * 3);
        for inst in instances {
            dep.extend_from_slice(&inst.depot());
            for i in 1..n {
                let [x, y] = inst.coord(i);
                sup.extend_from_slice(&[x, y, inst.demand(i)]);
            }
        }
        let dep = self.graph.constant((b, 2), dep)?;
        let sup = self.graph.constant((b * (n - 1), 3), sup)?;
        let (w0, b0) = (self.param("encoder.depot.w")?, self.param("encoder.depot.b")?);
        let (w, bias) = (self.param("encoder.embed.w")?, self.param("encoder.embed.b")?);
        let hd = self.graph.linear(dep, w0, Some(b0))?;
        let hs = self.graph.linear(sup, w, Some(bias))?;
        let all = self.graph.concat_rows(&[hd, hs])?;
        let order: Vec<usize> = (0..b)
            .flat_map(|k| (0..n).map(move |i| if i == 0 { k } else { b + k * (n - 1) + i - 1 }))
            .collect();
        Ok((self.graph.gather_rows(all, &order)?, n))
    }

    /// Embeddings after all encoder layers.
    pub fn encode(&mut self, instances: &[Instance], mode: Mode, rng: &mut dyn RngCore) -> Result<Encoding> {
        let (mut h, n) = self.embed_inputs(instances)?;
        let mut stats = Vec::new();
        for l in 1..=self.config.n_layers {
            h = self.encoder_layer(l, h, n, mode, rng, &mut stats)?;
        }
        Ok(Encoding {
            h,
            batch: instances.len(),
            n,
            stats,
        })
    }

    fn norm(&mut self, prefix: &str, x: Var, mode: Mode, stats: &mut Vec<(String, BatchStats)>) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let (y, s) = match mode {
            Mode::Train => self.graph.batchnorm(x, gamma, beta, NormMode::Train)?,
            Mode::Eval => {
                let mean = &self.store.buffer(&format!("{prefix}.running_mean"))?.values;
                let var = &self.store.buffer(&format!("{prefix}.running_var"))?.values;
                self.graph.batchnorm(x, gamma, beta, NormMode::Eval { mean, var })?
            }
        };
        if let Some(s) = s {
            stats.push((prefix.into(), s));
        }
        Ok(y)
    }

    /// `g = BN(h + Σ heads)`, `h' = BN(g + FF(g))`.
    pub fn encoder_layer(
        &mut self,
        l: usize,
        h: Var,
        n: usize,
        mode: Mode,
        rng: &mut dyn RngCore,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let mut terms = vec![h];
        for m in 1..=self.config.n_heads {
            terms.push(self.encoder_head(l, m, h, n)?);
        }
        let sum = self.graph.add_n(&terms)?;
        let g = self.norm(&layer_name(l, "bn1"), sum, mode, stats)?;
        let (w1, b1) = (self.param(&layer_name(l, "ff1.w"))?, self.param(&layer_name(l, "ff1.b"))?);
        let (w2, b2) = (self.param(&layer_name(l, "ff2.w"))?, self.param(&layer_name(l, "ff2.b"))?);
        let hidden = self.graph.linear(g, w1, Some(b1))?;
        let hidden = self.graph.relu(hidden);
        let hidden = self.graph.dropout(hidden, self.config.dropout, mode == Mode::Train, rng)?;
        let ff = self.graph.linear(hidden, w2, Some(b2))?;
        let skip = self.graph.add(g, ff)?;
        self.norm(&layer_name(l, "bn2"), skip, mode, stats)
    }

    fn encoder_head(&mut self, l: usize, m: usize, h: Var, n: usize) -> Result<Var> {
        let u = match self.config.head_type {
            HeadType::Quantum => {
                let ka = self.param(&head_name(l, m, "key_angles"))?;
                let qa = self.param(&head_name(l, m, "query_angles"))?;
                let weights = match self.config.compatibility {
                    Compatibility::Learned => Some(self.param(&head_name(l, m, "compat"))?),
                    _ => None,
                };
                let spec = QuantumCompat {
                    compatibility: self.config.compatibility,
                    query_uses_key_theta2: self.config.query_uses_key_theta2,
                    weights,
                };
                quantum_head_compatibilities(&mut self.graph, h, ka, qa, n, &spec)?
            }
            HeadType::Classical => {
                let q = self.param(&head_name(l, m, "query"))?;
                let k = self.param(&head_name(l, m, "key"))?;
                classical_head_compatibilities(&mut self.graph, h, q, k, n)?
            }
        };
        let v = self.param(&head_name(l, m, "value"))?;
        let a = self.param(&head_name(l, m, "out"))?;
        attention_aggregate(&mut self.graph, u, h, v, a, n, None)
    }

    /// Keys and values of instance `b` of an encoded batch.
    pub fn decoder_cache(&mut self, enc: &Encoding, b: usize) -> Result<DecoderCache> {
        if b >= enc.batch {
            return Err(Error::Argument(format!("instance {b} of a batch of {}", enc.batch)));
        }
        let n = enc.n;
        let rows: Vec<usize> = (b * n..(b + 1) * n).collect();
        let h = self.graph.gather_rows(enc.h, &rows)?;
        let mean = self.graph.mean_rows(h);
        let heads = self.config.decoder_heads;
        let names = |what: &str| (1..=heads).map(|m| dec_head_name(m, what)).collect::<Vec<_>>();
        let kw = self.stacked("#decoder.keys", &names("key"), true)?;
        let vw = self.stacked("#decoder.values", &names("value"), true)?;
        let fk = self.param("decoder.final.key")?;
        Ok(DecoderCache {
            n,
            h,
            mean,
            keys: self.graph.matmul_t(h, kw)?,
            values: self.graph.matmul_t(h, vw)?,
            final_keys: self.graph.matmul_t(h, fk)?,
        })
    }

    /// Context vector `[h̄, h_current, D]`, `1 x (2 d_h + 1)`.
    pub fn context(&mut self, cache: &DecoderCache, state: &RouteState) -> Result<Var> {
        let cur = self.graph.gather_rows(cache.h, &[state.current_node])?;
        let d = self.graph.constant((1, 1), vec![state.capacity])?;
        self.graph.concat_cols(&[cache.mean, cur, d])
    }

    /// `1 x n` action distribution; masked entries are exactly 0.
    pub fn decode_step(&mut self, cache: &DecoderCache, state: &RouteState, mask: &env::Mask) -> Result<Var> {
        if mask.forbidden.len() != cache.n {
            return Err(Error::Argument(format!("mask of {} for {} nodes", mask.forbidden.len(), cache.n)));
        }
        if mask.n_allowed() == 0 {
            return Err(Error::Contract("every node is masked".into()));
        }
        let heads = self.config.decoder_heads;
        let names = |what: &str| (1..=heads).map(|m| dec_head_name(m, what)).collect::<Vec<_>>();
        let qw = self.stacked("#decoder.queries", &names("query"), true)?;
        let aw = self.stacked("#decoder.outs", &names("out"), false)?;
        let ctx = self.context(cache, state)?;
        let q = self.graph.matmul_t(ctx, qw)?;
        let scores = self.graph.head_scores(q, cache.keys, heads)?;
        let scores = self.graph.scale(scores, 1.0 / math::sqrt(self.config.d_k as f64));
        let attn = self.graph.masked_softmax(scores, Some(&mask.forbidden))?;
        let mixed = self.graph.head_mix(attn, cache.values, heads)?;
        let glimpse = self.graph.matmul_t(mixed, aw)?;
        let fq = self.param("decoder.final.query")?;
        let q = self.graph.matmul_t(glimpse, fq)?;
        let logits = self.graph.matmul_t(q, cache.final_keys)?;
        let logits = self.graph.scale(logits, 1.0 / math::sqrt(self.config.d_h as f64));
        let logits = self.graph.tanh(logits);
        let logits = self.graph.scale(logits, LOGIT_CLIP);
        self.graph.masked_softmax(logits, Some(&mask.forbidden))
    }

    /// Decodes instance `b` of `enc` until the route is complete.
    pub fn rollout(&mut self, enc: &Encoding, b: usize, instance: &Instance, mut decode: Decode<'_>) -> Result<Episode> {
        if instance.n() != enc.n {
            return Err(Error::Argument(format!("instance has {} nodes, encoding {}", instance.n(), enc.n)));
        }
        let cache = self.decoder_cache(enc, b)?;
        let limit = env::step_limit(instance);
        let mut state = RouteState::initial(instance);
        let mut logs = Vec::new();
        let mut log_prob_value = 0.0;
        let mut step_probs = Vec::new();
        while !env::is_complete(&state, instance) {
            if state.step >= limit {
                return Err(Error::Runtime(format!("route exceeded the step limit {limit}")));
            }
            let mask = env::legal_mask(&state, instance);
            let p = self.decode_step(&cache, &state, &mask)?;
            let probs = self.graph.value(p).to_vec();
            let action = match &mut decode {
                Decode::Sample(rng) => crate::rng::sample_categorical(&probs, *rng),
                Decode::Greedy => argmax(&probs),
                Decode::Forced(seq) => *seq.get(state.step).ok_or_else(|| {
                    Error::Argument(format!("forced route ended after {} steps", seq.len()))
                })?,
            };
            if mask.forbidden.get(action).copied().unwrap_or(true) {
                return Err(Error::Contract(format!("action {action} is masked at step {}", state.step)));
            }
            let pa = self.graph.slice_cols(p, action, 1)?;
            logs.push(self.graph.log(pa));
            log_prob_value += math::ln(probs[action]);
            step_probs.push(probs);
            state.advance(action, instance)?;
        }
        if let Decode::Forced(seq) = decode {
            if seq.len() != state.step {
                return Err(Error::Argument(format!(
                    "forced route has {} steps but completed after {}",
                    seq.len(),
                    state.step
                )));
            }
        }
        let route = state.route();
        let cost = env::route_cost(instance, &route)?;
        let log_prob = self.graph.add_n(&logs)?;
        Ok(Episode {
            route,
            log_prob,
            log_prob_value,
            cost,
            step_probs,
        })
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Options of a quantum compatibility computation.
#[derive(Debug, Clone, Copy)]
pub struct QuantumCompat {
    pub compatibility: Compatibility,
    pub query_uses_key_theta2: bool,
    /// `1 x 2` weights of [`Compatibility::Learned`].
    pub weights: Option<Var>,
}

/// Columns `[c2α sinθ1, c2α cosθ1 cosθ2, c2α sinθ1 sinθ2, c2α cosθ2]` from
/// `rows x 3` angles `(θ1, θ2, α)`; see [`crate::qsim::key_features`].
fn circuit_features(g: &mut Graph, angles: Var) -> Result<Var> {
    let t1 = g.slice_cols(angles, 0, 1)?;
    let t2 = g.slice_cols(angles, 1, 1)?;
    let a = g.slice_cols(angles, 2, 1)?;
    let a2 = g.scale(a, 2.0);
    let c2a = g.cos(a2);
    let (s1, c1) = (g.sin(t1), g.cos(t1));
    let (s2, c2) = (g.sin(t2), g.cos(t2));
    let f0 = g.mul(c2a, s1)?;
    let c2a_c1 = g.mul(c2a, c1)?;
    let f1 = g.mul(c2a_c1, c2)?;
    let f2 = g.mul(f0, s2)?;
    let f3 = g.mul(c2a, c2)?;
    g.concat_cols(&[f0, f1, f2, f3])
}

/// Quantum head scores for blocks of `n` nodes: key angles `KA h_i`, query
/// angles `QA h_j`, and `u_ij` the circuit's expectation pair combined per
/// [`QuantumCompat`]. Output is `rows x n`.
pub fn quantum_head_compatibilities(
    g: &mut Graph,
    h: Var,
    key_angles: Var,
    query_angles: Var,
    n: usize,
    spec: &QuantumCompat,
) -> Result<Var> {
    let ka = g.matmul_t(h, key_angles)?;
    let mut qa = g.matmul_t(h, query_angles)?;
    if spec.query_uses_key_theta2 {
        let phi1 = g.slice_cols(qa, 0, 1)?;
        let theta2 = g.slice_cols(ka, 1, 1)?;
        let beta = g.slice_cols(qa, 2, 1)?;
        qa = g.concat_cols(&[phi1, theta2, beta])?;
    }
    let mut kf = circuit_features(g, ka)?;
    let qf = circuit_features(g, qa)?;
    let scale = match spec.compatibility {
        Compatibility::Sum => 0.25,
        Compatibility::Mean => 0.125,
        Compatibility::Learned => {
            let w = spec
                .weights
                .ok_or_else(|| Error::Argument("learned compatibility needs weights".into()))?;
            let w1 = g.slice_cols(w, 0, 1)?;
            let w2 = g.slice_cols(w, 1, 1)?;
            let w4 = g.concat_cols(&[w1, w1, w2, w2])?;
            kf = g.mul_row(kf, w4)?;
            0.25
        }
    };
    let u = g.block_matmul_t(kf, qf, n)?;
    Ok(g.scale(u, scale))
}

/// Scaled dot-product scores `(q_i · k_j)/√d_k` for blocks of `n` nodes.
pub fn classical_head_compatibilities(g: &mut Graph, h: Var, query: Var, key: Var, n: usize) -> Result<Var> {
    let d_k = g.shape(query).0;
    let q = g.matmul_t(h, query)?;
    let k = g.matmul_t(h, key)?;
    let u = g.block_matmul_t(q, k, n)?;
    Ok(g.scale(u, 1.0 / math::sqrt(d_k as f64)))
}

/// `A Σ_j softmax_j(u_ij) V h_j` per row; `no_edge` (length `rows · n`)
/// marks scores treated as `-∞`.
pub fn attention_aggregate(
    g: &mut Graph,
    u: Var,
    h: Var,
    value: Var,
    out: Var,
    n: usize,
    no_edge: Option<&[bool]>,
) -> Result<Var> {
    let a = g.masked_softmax(u, no_edge)?;
    let v = g.matmul_t(h, value)?;
    let mixed = g.block_matmul(a, v, n)?;
    g.matmul_t(mixed, out)
}
