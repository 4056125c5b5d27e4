//! The operations behind each CLI subcommand.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use qroute_core::env::{generate_instance, subsample, GeneratorSpec, Instance};
use qroute_core::hwplan::{self, ConnectivityGraph, RunPlan};
use qroute_core::policy::{Decode, HeadAngles};
use qroute_core::qsim::AngleSet;
use qroute_core::rng::stream;
use qroute_core::trainer::{evaluate, init_policy, EpochMetrics, EvalMode, Trainer};

use crate::checkpoint::{checkpoint_file_name, Checkpoint};
use crate::config::Config;
use crate::instances::{self, instance_file_name, load_instance, write_instance};
use crate::metrics::{MetricsRow, MetricsWriter, BATCH_FILE, EPOCH_FILE};
use crate::{Error, Result};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

/// Writes `count` instances to `out`, drawn from the generator or, when
/// `instances.pool` is set, subsampled from that supplier pool.
pub fn generate(cfg: &Config, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let spec = cfg.generator_spec();
    let pool = match cfg.instances.pool.as_str() {
        "" => None,
        p => Some(load_instance(Path::new(p))?),
    };
    let mut rng = spec.rng();
    let mut written = Vec::with_capacity(count);
    for k in 0..count {
        let inst = match &pool {
            Some(pool) => subsample(pool, spec.n_nodes - 1, &mut rng)?,
            None => generate_instance(&spec, &mut rng)?,
        };
        let path = out.join(instance_file_name(k));
        write_instance(&path, &inst)?;
        written.push(path);
    }
    Ok(written)
}

/// Trains from scratch or from `resume`, writing metrics and checkpoints
/// into `out`. The config echo of `resume` wins over `cfg`.
pub fn train(cfg: &Config, out: &Path, resume: Option<&Checkpoint>) -> Result<Vec<EpochMetrics>> {
    create_dir(out)?;
    let (cfg, mut trainer) = match resume {
        Some(ckpt) => (ckpt.config.clone(), ckpt.to_trainer()?),
        None => {
            let policy = init_policy(cfg.policy_config(), cfg.seed)?;
            (cfg.clone(), Trainer::new(cfg.train_config(), policy)?)
        }
    };
    let echo = out.join("config.toml");
    std::fs::write(&echo, cfg.to_toml()).map_err(Error::io(&echo))?;
    let mut epochs = MetricsWriter::open(&out.join(EPOCH_FILE))?;
    let mut batches = MetricsWriter::open(&out.join(BATCH_FILE))?;
    log::info!(
        "training {} parameters from epoch {} of {}",
        trainer.policy.n_params(),
        trainer.epoch,
        cfg.train.num_epochs
    );
    let mut all = Vec::new();
    while !trainer.is_finished() {
        let started = Instant::now();
        let mut last = Instant::now();
        let mut write_error = None;
        let mut m = trainer.run_epoch(&mut |b| {
            let row = MetricsRow::batch(b, last.elapsed().as_secs_f64());
            last = Instant::now();
            if let Err(e) = batches.write(&row) {
                write_error.get_or_insert(e);
            }
            log::debug!("epoch {} batch {}: mean cost {:.4}", b.epoch, b.batch, b.mean_cost);
        })?;
        if let Some(e) = write_error {
            return Err(e);
        }
        m.seconds = started.elapsed().as_secs_f64();
        epochs.write(&MetricsRow::epoch(&m))?;
        log::info!(
            "epoch {}: mean cost {:.4}, baseline {:.4}, win {:.3}{}",
            m.epoch,
            m.mean_cost,
            m.baseline_mean_cost,
            m.win_fraction,
            if m.baseline_updated { ", baseline updated" } else { "" }
        );
        if m.epoch % cfg.train.checkpoint_every == 0 || trainer.is_finished() {
            Checkpoint::from_trainer(&cfg, &trainer).save(&out.join(checkpoint_file_name(m.epoch)))?;
        }
        all.push(m);
    }
    Ok(all)
}

#[derive(Debug, Serialize)]
struct InstanceResult {
    file: String,
    cost: f64,
    route: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct Report {
    mode: &'static str,
    mean: f64,
    median: f64,
    min: f64,
    instances: Vec<InstanceResult>,
}

fn eval_mode(greedy: bool, seed: u64) -> EvalMode {
    if greedy {
        EvalMode::Greedy
    } else {
        EvalMode::Sample { seed }
    }
}

/// JSON report of eval-mode rollouts on every instance file.
pub fn eval(ckpt: &Checkpoint, files: &[PathBuf], greedy: bool, seed: u64) -> Result<String> {
    let files = instances::expand_instance_paths(files)?;
    let insts = files.iter().map(|f| load_instance(f)).collect::<Result<Vec<_>>>()?;
    let report = evaluate(&ckpt.policy()?, &insts, eval_mode(greedy, seed))?;
    let out = Report {
        mode: if greedy { "greedy" } else { "sample" },
        mean: report.mean,
        median: report.median,
        min: report.min,
        instances: files
            .iter()
            .zip(report.costs.iter().zip(&report.routes))
            .map(|(f, (&cost, r))| InstanceResult {
                file: f.display().to_string(),
                cost,
                route: r.nodes.clone(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&out).expect("report serialises");
    s.push('\n');
    Ok(s)
}

/// `route: 0 3 1 0 ...` and `cost: <c>` lines for one instance.
pub fn rollout(ckpt: &Checkpoint, file: &Path, greedy: bool, seed: u64) -> Result<String> {
    let inst = load_instance(file)?;
    let policy = ckpt.policy()?;
    let r = if greedy {
        policy.rollout(&inst, Decode::Greedy)?
    } else {
        policy.rollout(&inst, Decode::Sample(&mut stream(seed, &[])))?
    };
    let nodes: Vec<String> = r.route.nodes.iter().map(usize::to_string).collect();
    Ok(format!(
        "route: {}\ncost: {}\nlog_prob: {}\n",
        nodes.join(" "),
        r.cost,
        r.log_prob
    ))
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Plans the attention circuits of `instance` (or of a generated instance
/// with `hw.n_nodes` nodes) under the policy of `ckpt` (or a fresh one),
/// writing one file per call plus the manifest into `out`.
pub fn plan_hw(cfg: &Config, ckpt: Option<&Checkpoint>, instance: Option<&Path>, out: &Path) -> Result<RunPlan> {
    let policy = match ckpt {
        Some(c) => c.policy()?,
        None => init_policy(cfg.policy_config(), cfg.seed)?,
    };
    let inst: Instance = match instance {
        Some(p) => load_instance(p)?,
        None => {
            let spec = GeneratorSpec {
                n_nodes: cfg.hw.n_nodes,
                ..cfg.generator_spec()
            };
            generate_instance(&spec, &mut spec.rng())?
        }
    };
    let graph = match cfg.hw.graph.as_str() {
        "" => ConnectivityGraph::octagonal_fixture(),
        p => {
            let text = std::fs::read_to_string(p).map_err(Error::io(p))?;
            ConnectivityGraph::parse(&text)?
        }
    };
    let placements = hwplan::enumerate_line_placements(&graph);
    if placements.len() < cfg.hw.slots {
        return Err(Error::Config(format!(
            "hw.slots = {} but the graph fits only {} disjoint placements",
            cfg.hw.slots,
            placements.len()
        )));
    }
    let heads: Vec<HeadAngles> = policy.circuit_angles(&inst)?;
    let angles = |c: &hwplan::CircuitId| {
        let h = heads
            .iter()
            .find(|h| (h.layer, h.head) == (c.layer + 1, c.head + 1))
            .expect("every head has angles");
        AngleSet::new(h.key[c.key_node], h.query[c.query_node])
    };
    let pc = &policy.config;
    let plan = hwplan::build_run_plan(
        inst.n(),
        pc.n_heads,
        pc.n_layers,
        &placements[..cfg.hw.slots],
        cfg.hw.shots,
        &angles,
    )?;
    create_dir(out)?;
    for call in &plan.schedule {
        let path = out.join(hwplan::call_file_name(call.index));
        let text = hwplan::render_call(call, &graph, plan.shots)?;
        std::fs::write(&path, text).map_err(Error::io(&path))?;
    }
    let manifest = out.join(MANIFEST_FILE);
    std::fs::write(&manifest, hwplan::render_manifest(&plan)).map_err(Error::io(&manifest))?;
    Ok(plan)
}
