use alloc::vec::Vec;

use super::*;
use crate::autodiff::ParameterStore;
use crate::env::{self, RouteState};
use crate::policy::PolicyConfig;

fn mini_policy(seed: u64) -> Policy {
    let cfg = PolicyConfig {
        d_h: 8,
        n_layers: 1,
        n_heads: 2,
        d_k: 4,
        d_ff: 8,
        decoder_heads: 2,
        ..PolicyConfig::default()
    };
    Policy::new(cfg, &mut stream(seed, &[])).unwrap()
}

fn mini_config() -> TrainConfig {
    TrainConfig {
        num_epochs: 1,
        batches_per_epoch: 1,
        batch_size: 3,
        instances: GeneratorSpec {
            n_nodes: 4,
            ..GeneratorSpec::default()
        },
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_schedule(0, &cfg), 2f64.powi(-11));
    assert!((lr_schedule(3, &cfg) - 2f64.powi(-11) * 0.96f64.powi(3)).abs() < 1e-18);
    assert_eq!(lr_schedule(90, &cfg), lr_schedule(140, &cfg));
    assert_eq!(lr_schedule(89, &cfg), lr_schedule(90, &cfg));
    assert!(lr_schedule(88, &cfg) > lr_schedule(89, &cfg));
    let flat = TrainConfig {
        lr_decay: 1.0,
        ..cfg
    };
    assert!((0..200).all(|n| lr_schedule(n, &flat) == flat.lr0));
}

#[test]
fn baseline_update_rule() {
    let t = |r: &[f64]| baseline_test(r, 0.7, 0.5, 10);
    assert!(t(&[0.71]));
    assert!(!t(&[0.7]));
    let mut streak = Vec::new();
    for k in 1..=10 {
        streak.push(0.55);
        assert_eq!(t(&streak), k == 10);
    }
    let mut broken = alloc::vec![0.55; 9];
    broken.push(0.45);
    assert!(!t(&broken));
    assert!(!t(&[]));
}

#[test]
fn discounting_is_inert_for_one_reward() {
    assert_eq!(discounted_return(&[-2.5], 0.3), -2.5);
    assert_eq!(discounted_return(&[1.0, 1.0], 0.5), 1.5);
}

fn grads(cfg: &TrainConfig, live: &Policy, baseline: &Policy) -> (ParameterStore, BatchOutcome) {
    let mut p = live.clone();
    let inst = batch_instances(cfg, 0, 0).unwrap();
    let out = reinforce_batch(cfg, &mut p, baseline, &inst, 0, 0).unwrap();
    (p.store, out)
}

#[test]
fn identical_baseline_gives_zero_gradient() {
    let cfg = TrainConfig {
        baseline_shares_streams: true,
        ..mini_config()
    };
    let p = mini_policy(1);
    let (store, out) = grads(&cfg, &p, &p);
    assert_eq!(out.costs, out.baseline_costs);
    assert!(store.flat_grads().iter().all(|&g| g == 0.0));
}

#[test]
fn no_baseline_gradient_is_cost_weighted_score() {
    let cfg = TrainConfig {
        batch_size: 1,
        algorithm: Algorithm::NoBaseline,
        ..mini_config()
    };
    let p = mini_policy(2);
    let (store, out) = grads(&cfg, &p, &p);
    // gradient of the route log-probability alone, same random streams
    let inst = batch_instances(&cfg, 0, 0).unwrap();
    let mut q = p.clone();
    let mut f = q.forward(false);
    let enc = f
        .encode(&inst, Mode::Train, &mut stream(cfg.seed, &[0, 0, u64::MAX, purpose::DROPOUT]))
        .unwrap();
    let ep = f.rollout(&enc, 0, &inst[0], Decode::Forced(&out.routes[0].nodes[1..])).unwrap();
    let mut g = f.into_graph();
    g.backward(ep.log_prob, &mut q.store).unwrap();
    for (a, b) in store.flat_grads().iter().zip(q.store.flat_grads()) {
        assert!((a - out.costs[0] * b).abs() < 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn gamma_never_changes_the_gradient() {
    let p = mini_policy(3);
    let base = mini_policy(4);
    let (a, _) = grads(&mini_config(), &p, &base);
    let (b, _) = grads(&TrainConfig { gamma: 0.3, ..mini_config() }, &p, &base);
    assert_eq!(a.flat_grads(), b.flat_grads());
}

#[test]
fn batch_gradient_matches_finite_differences() {
    let cfg = mini_config();
    let p = mini_policy(5);
    let base = mini_policy(6);
    let (store, out) = grads(&cfg, &p, &base);
    let names: Vec<alloc::string::String> = store.params().map(|(n, _)| n.into()).collect();
    let h = 1e-6;
    for name in &names {
        let len = store.get(name).unwrap().len();
        for i in (0..len).step_by(3) {
            let loss_at = |delta: f64| {
                let mut q = p.clone();
                q.store.get_mut(name).unwrap().values[i] += delta;
                let (_, o) = grads(&cfg, &q, &base);
                assert_eq!(o.routes, out.routes, "perturbation changed the sampled routes");
                o.loss
            };
            let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let a = store.get(name).unwrap().grad[i];
            assert!(
                (fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()) + 1e-9,
                "{name}[{i}]: fd {fd} tape {a}"
            );
        }
    }
}

#[test]
fn smoke_run_and_determinism() {
    let cfg = TrainConfig {
        batch_size: 2,
        ..mini_config()
    };
    let (_, m1) = train(cfg.clone(), mini_policy(7)).unwrap();
    assert_eq!(m1.len(), 1);
    assert_eq!(m1[0].epoch, 1);
    assert!((0.0..=1.0).contains(&m1[0].win_fraction));
    let (p2, m2) = train(cfg.clone(), mini_policy(7)).unwrap();
    assert_eq!(m1, m2);
    let (p3, _) = train(cfg, mini_policy(7)).unwrap();
    assert_eq!(p2, p3);
}

#[test]
fn baseline_changes_only_when_the_test_fires() {
    let cfg = TrainConfig {
        num_epochs: 4,
        batches_per_epoch: 2,
        batch_size: 4,
        baseline_streak: 2,
        ..mini_config()
    };
    let mut t = Trainer::new(cfg, mini_policy(8)).unwrap();
    let mut previous = t.baseline.policy.clone();
    while !t.is_finished() {
        let m = t.run_epoch(&mut |_| {}).unwrap();
        if m.baseline_updated {
            assert_eq!(t.baseline.policy, t.policy);
            assert!(t.baseline.recent.is_empty());
        } else {
            assert_eq!(t.baseline.policy, previous);
        }
        previous = t.baseline.policy.clone();
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let cfg = TrainConfig {
        batch_size: 0,
        lr_decay: 1.5,
        ..TrainConfig::default()
    };
    match cfg.validate() {
        Err(Error::Config(m)) => assert!(m.contains("batch_size") && m.contains("lr_decay")),
        other => panic!("{other:?}"),
    }
}

/// Every complete route of at most `depth` steps.
fn enumerate(inst: &Instance, depth: usize) -> Vec<Route> {
    fn go(inst: &Instance, s: RouteState, depth: usize, out: &mut Vec<Route>) {
        if env::is_complete(&s, inst) {
            out.push(s.route());
            return;
        }
        if s.step == depth {
            return;
        }
        for a in env::legal_mask(&s, inst).allowed() {
            go(inst, env::step(&s, a, inst).unwrap(), depth, out);
        }
    }
    let mut out = Vec::new();
    go(inst, RouteState::initial(inst), depth, &mut out);
    out
}

#[test]
fn greedy_evaluation() {
    let p = mini_policy(9);
    let spec = GeneratorSpec {
        n_nodes: 3,
        ..GeneratorSpec::default()
    };
    let insts: Vec<Instance> = (0..5)
        .map(|k| generate_instance(&spec, &mut stream(k, &[])).unwrap())
        .collect();
    let a = evaluate(&p, &insts, EvalMode::Greedy).unwrap();
    let b = evaluate(&p, &insts, EvalMode::Greedy).unwrap();
    assert_eq!(a, b);
    for (inst, cost) in insts.iter().zip(&a.costs) {
        let best = enumerate(inst, 12)
            .iter()
            .map(|r| env::route_cost(inst, r).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(*cost >= best - 1e-12);
    }
    assert!(a.min <= a.median && a.median <= a.costs.iter().copied().fold(0.0, f64::max));
    let s = evaluate(&p, &insts, EvalMode::Sample { seed: 1 }).unwrap();
    assert_eq!(s, evaluate(&p, &insts, EvalMode::Sample { seed: 1 }).unwrap());
    assert!(evaluate(&p, &[], EvalMode::Greedy).is_err());
}
