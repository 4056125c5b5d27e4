//! REINFORCE training with a rolling baseline, and evaluation.
//!
//! Every random draw comes from a stream keyed by
//! `(seed, epoch, batch, episode, purpose)` so a run is a pure function of
//! its configuration.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{adam_step, AdamConfig, AdamState};
use crate::env::{generate_instance, GeneratorSpec, Instance, Route};
use crate::math;
use crate::policy::{Decode, Mode, Policy, PolicyConfig};
use crate::rng::stream;
use crate::{Error, Result};

mod purpose {
    pub const INSTANCES: u64 = 0;
    pub const DROPOUT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const BASELINE_DROPOUT: u64 = 3;
    pub const BASELINE_SAMPLE: u64 = 4;
    pub const EVAL_SAMPLE: u64 = 5;
    pub const INIT: u64 = 6;
}

/// How the baseline policy decodes its comparison route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    Sample,
    Greedy,
}

/// Which REINFORCE variant a [`Trainer`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Advantage `L(ξ) - L(ξ_BL)` against the rolling baseline.
    RollingBaseline,
    /// Advantage `L(ξ)` (no baseline).
    NoBaseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub num_epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_freeze_epoch: usize,
    pub baseline_win_threshold: f64,
    pub baseline_streak: usize,
    pub baseline_instant_threshold: f64,
    pub baseline_mode: BaselineMode,
    /// Baseline rollouts reuse the live policy's random streams.
    pub baseline_shares_streams: bool,
    pub algorithm: Algorithm,
    /// Discount factor; a route is a single action so it never matters.
    pub gamma: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub instances: GeneratorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_epochs: 600,
            batches_per_epoch: 100,
            batch_size: 128,
            lr0: 1.0 / 2048.0,
            lr_decay: 0.96,
            lr_freeze_epoch: 90,
            baseline_win_threshold: 0.5,
            baseline_streak: 10,
            baseline_instant_threshold: 0.7,
            baseline_mode: BaselineMode::Sample,
            baseline_shares_streams: false,
            algorithm: Algorithm::RollingBaseline,
            gamma: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
            instances: GeneratorSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("num_epochs", self.num_epochs),
            ("batches_per_epoch", self.batches_per_epoch),
            ("batch_size", self.batch_size),
            ("lr_freeze_epoch", self.lr_freeze_epoch),
            ("baseline_streak", self.baseline_streak),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            bad.push(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            bad.push(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        for (name, v) in [
            ("baseline_win_threshold", self.baseline_win_threshold),
            ("baseline_instant_threshold", self.baseline_instant_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                bad.push(format!("{name} must be in (0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            bad.push(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if let Err(Error::Config(m)) = self.instances.validate() {
            bad.push(m);
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// `lr0 · decay^n` for epochs `n < N`, then held at `lr0 · decay^(N-1)`.
/// Epochs count from 0.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let n = epoch.min(cfg.lr_freeze_epoch.saturating_sub(1));
    cfg.lr0 * math::exp(n as f64 * math::ln(cfg.lr_decay))
}

/// Baseline update rule over the win fractions since the last update: the
/// latest exceeds `instant`, or the last `streak` all exceed `win`.
pub fn baseline_test(recent: &[f64], instant: f64, win: f64, streak: usize) -> bool {
    match recent.last() {
        None => false,
        Some(&last) if last > instant => true,
        Some(_) => recent.len() >= streak && recent[recent.len() - streak..].iter().all(|&f| f > win),
    }
}

/// `Σ_t γ^t r_(t+1)`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Frozen snapshot `θ_BL` and the win fractions since it was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    pub policy: Policy,
    pub recent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchMetrics {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub mean_cost: f64,
    pub min_cost: f64,
    pub baseline_mean_cost: f64,
    pub wins: usize,
    pub episodes: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub mean_cost: f64,
    pub min_cost: f64,
    pub baseline_mean_cost: f64,
    pub win_fraction: f64,
    pub lr: f64,
    /// Filled in by callers that have a clock.
    pub seconds: f64,
    pub baseline_updated: bool,
}

/// Costs and loss of one batch; the gradient is left in the live store.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub loss: f64,
    pub costs: Vec<f64>,
    pub baseline_costs: Vec<f64>,
    pub routes: Vec<Route>,
}

/// Fresh policy parameters drawn from the run seed's init stream.
pub fn init_policy(config: PolicyConfig, seed: u64) -> Result<Policy> {
    Policy::new(config, &mut stream(seed, &[purpose::INIT]))
}

/// Instances of batch `(epoch, batch)` (0-based).
pub fn batch_instances(cfg: &TrainConfig, epoch: usize, batch: usize) -> Result<Vec<Instance>> {
    let mut rng = stream(cfg.seed, &[epoch as u64, batch as u64, purpose::INSTANCES]);
    (0..cfg.batch_size)
        .map(|_| generate_instance(&cfg.instances, &mut rng))
        .collect()
}

/// One REINFORCE gradient evaluation on `instances`: gradients of
/// `mean((L - L_BL) · Σ log p)` are added to `policy.store`, batch norm
/// running statistics of the live policy are updated. With
/// [`Algorithm::NoBaseline`] the baseline cost is 0 and `baseline` unused.
pub fn reinforce_batch(
    cfg: &TrainConfig,
    policy: &mut Policy,
    baseline: &Policy,
    instances: &[Instance],
    epoch: usize,
    batch: usize,
) -> Result<BatchOutcome> {
    let key = |e: u64, p: u64| [epoch as u64, batch as u64, e, p];
    let b = instances.len();
    let mut fwd = policy.forward(false);
    let enc = fwd.encode(
        instances,
        Mode::Train,
        &mut stream(cfg.seed, &key(u64::MAX, purpose::DROPOUT)),
    )?;
    let mut episodes = Vec::with_capacity(b);
    for (e, inst) in instances.iter().enumerate() {
        let mut rng = stream(cfg.seed, &key(e as u64, purpose::SAMPLE));
        episodes.push(fwd.rollout(&enc, e, inst, Decode::Sample(&mut rng))?);
    }

    let baseline_costs = match cfg.algorithm {
        Algorithm::NoBaseline => vec![0.0; b],
        Algorithm::RollingBaseline => {
            let (drop_purpose, sample_purpose) = if cfg.baseline_shares_streams {
                (purpose::DROPOUT, purpose::SAMPLE)
            } else {
                (purpose::BASELINE_DROPOUT, purpose::BASELINE_SAMPLE)
            };
            let mut bfwd = baseline.forward(true);
            let benc = bfwd.encode(
                instances,
                Mode::Train,
                &mut stream(cfg.seed, &key(u64::MAX, drop_purpose)),
            )?;
            let mut costs = Vec::with_capacity(b);
            for (e, inst) in instances.iter().enumerate() {
                let ep = match cfg.baseline_mode {
                    BaselineMode::Greedy => bfwd.rollout(&benc, e, inst, Decode::Greedy)?,
                    BaselineMode::Sample => {
                        let mut rng = stream(cfg.seed, &key(e as u64, sample_purpose));
                        bfwd.rollout(&benc, e, inst, Decode::Sample(&mut rng))?
                    }
                };
                costs.push(ep.cost);
            }
            costs
        }
    };

    let mut terms = Vec::with_capacity(b);
    let mut loss = 0.0;
    for (ep, bl) in episodes.iter().zip(&baseline_costs) {
        // a route earns a single reward, -L, so its return ignores gamma
        let advantage = -discounted_return(&[-ep.cost], cfg.gamma) - bl;
        terms.push(fwd.graph.scale(ep.log_prob, advantage / b as f64));
        loss += advantage * ep.log_prob_value / b as f64;
    }
    let loss_var = fwd.graph.add_n(&terms)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "batch loss {loss} at epoch {epoch} batch {batch}"
        )));
    }
    let stats = enc.stats;
    let mut graph = fwd.into_graph();
    graph.backward(loss_var, &mut policy.store)?;
    policy.update_running_stats(&stats)?;
    Ok(BatchOutcome {
        loss,
        costs: episodes.iter().map(|e| e.cost).collect(),
        baseline_costs,
        routes: episodes.into_iter().map(|e| e.route).collect(),
    })
}

/// Full training state; advancing it one epoch at a time lets callers
/// checkpoint between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub policy: Policy,
    pub baseline: BaselineState,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, policy: Policy) -> Result<Self> {
        config.validate()?;
        let baseline = BaselineState {
            policy: policy.clone(),
            recent: Vec::new(),
        };
        Ok(Self {
            config,
            policy,
            baseline,
            adam: AdamState::new(),
            epoch: 0,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.num_epochs
    }

    /// Runs the next epoch; `on_batch` sees every batch as it finishes.
    pub fn run_epoch(&mut self, on_batch: &mut dyn FnMut(&BatchMetrics)) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.config);
        let (mut sum, mut bsum, mut min, mut wins, mut count) = (0.0, 0.0, f64::INFINITY, 0usize, 0usize);
        for batch in 0..self.config.batches_per_epoch {
            let instances = batch_instances(&self.config, epoch, batch)?;
            let out = reinforce_batch(
                &self.config,
                &mut self.policy,
                &self.baseline.policy,
                &instances,
                epoch,
                batch,
            )?;
            adam_step(&mut self.policy.store, &mut self.adam, &self.config.adam, lr)?;
            let b_wins = out.costs.iter().zip(&out.baseline_costs).filter(|(c, b)| c < b).count();
            let b_sum: f64 = out.costs.iter().sum();
            let b_min = out.costs.iter().copied().fold(f64::INFINITY, f64::min);
            let b_bsum: f64 = out.baseline_costs.iter().sum();
            let n = out.costs.len();
            on_batch(&BatchMetrics {
                epoch: epoch + 1,
                batch,
                loss: out.loss,
                mean_cost: b_sum / n as f64,
                min_cost: b_min,
                baseline_mean_cost: b_bsum / n as f64,
                wins: b_wins,
                episodes: n,
                lr,
            });
            sum += b_sum;
            bsum += b_bsum;
            min = min.min(b_min);
            wins += b_wins;
            count += n;
        }
        let win_fraction = wins as f64 / count as f64;
        let mut baseline_updated = false;
        if self.config.algorithm == Algorithm::RollingBaseline {
            self.baseline.recent.push(win_fraction);
            let c = &self.config;
            if baseline_test(
                &self.baseline.recent,
                c.baseline_instant_threshold,
                c.baseline_win_threshold,
                c.baseline_streak,
            ) {
                self.baseline.policy = self.policy.clone();
                self.baseline.recent.clear();
                baseline_updated = true;
            }
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            mean_cost: sum / count as f64,
            min_cost: min,
            baseline_mean_cost: bsum / count as f64,
            win_fraction,
            lr,
            seconds: 0.0,
            baseline_updated,
        })
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while !self.is_finished() {
            out.push(self.run_epoch(&mut |_| {})?);
        }
        Ok(out)
    }
}

/// REINFORCE against a rolling baseline.
pub fn train(config: TrainConfig, policy: Policy) -> Result<(Policy, Vec<EpochMetrics>)> {
    let mut t = Trainer::new(config, policy)?;
    let metrics = t.run()?;
    Ok((t.policy, metrics))
}

/// Plain REINFORCE; the advantage is the route cost itself.
pub fn reinforce_no_baseline(mut config: TrainConfig, policy: Policy) -> Result<(Policy, Vec<EpochMetrics>)> {
    config.algorithm = Algorithm::NoBaseline;
    train(config, policy)
}

/// Decoding used by [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Greedy,
    Sample { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub costs: Vec<f64>,
    pub routes: Vec<Route>,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
}

/// Eval-mode rollouts of `policy` on each instance.
pub fn evaluate(policy: &Policy, instances: &[Instance], mode: EvalMode) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::Argument("nothing to evaluate".into()));
    }
    let mut costs = Vec::with_capacity(instances.len());
    let mut routes = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let r = match mode {
            EvalMode::Greedy => policy.rollout(inst, Decode::Greedy)?,
            EvalMode::Sample { seed } => {
                let mut rng = stream(seed, &[i as u64, purpose::EVAL_SAMPLE]);
                policy.rollout(inst, Decode::Sample(&mut rng))?
            }
        };
        costs.push(r.cost);
        routes.push(r.route);
    }
    let mut sorted = costs.clone();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    };
    Ok(EvalReport {
        mean: costs.iter().sum::<f64>() / k as f64,
        median,
        min: sorted[0],
        costs,
        routes,
    })
}

#[cfg(test)]
mod tests;
