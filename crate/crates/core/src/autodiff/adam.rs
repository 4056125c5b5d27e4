use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::ParameterStore;
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every parameter in `store` using its
/// accumulated gradient, then clears the gradients. A non-finite gradient
/// aborts before anything is modified.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    for (name, t) in store.params() {
        if let Some(i) = t.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{i}] is {}", t.grad[i])));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - math::exp(t * math::ln(cfg.beta1));
    let bc2 = 1.0 - math::exp(t * math::ln(cfg.beta2));
    for (name, p) in store.params_mut() {
        let m = state.m.entry(name.into()).or_insert_with(|| vec![0.0; p.len()]);
        let v = state.v.entry(name.into()).or_insert_with(|| vec![0.0; p.len()]);
        if m.len() != p.len() || v.len() != p.len() {
            return Err(Error::Argument(format!("optimizer state for {name} has the wrong size")));
        }
        for i in 0..p.len() {
            let g = p.grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p.values[i] -= lr * mh / (math::sqrt(vh) + cfg.eps);
        }
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};

    fn one_param(w: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new((1, 1), vec![w]).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one_param(1.0);
        s.get_mut("w").unwrap().grad[0] = 0.37;
        let mut st = AdamState::new();
        adam_step(&mut s, &mut st, &AdamConfig::default(), 0.01).unwrap();
        let w = s.get("w").unwrap();
        assert!((w.values[0] - (1.0 - 0.01)).abs() < 1e-8);
        assert_eq!(w.grad[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = one_param(2.5);
        let mut st = AdamState::new();
        adam_step(&mut s, &mut st, &AdamConfig::default(), 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().values[0], 2.5);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = one_param(0.0);
        let mut st = AdamState::new();
        for _ in 0..200 {
            let mut g = Graph::new();
            let w = g.param(&s, "w").unwrap();
            let three = g.constant((1, 1), vec![3.0]).unwrap();
            let d = g.sub(w, three).unwrap();
            let loss = g.mul(d, d).unwrap();
            g.backward(loss, &mut s).unwrap();
            adam_step(&mut s, &mut st, &AdamConfig::default(), 0.1).unwrap();
        }
        assert!((s.get("w").unwrap().values[0] - 3.0).abs() < 0.05);
    }

    #[test]
    fn nan_gradient_is_reported_by_name() {
        let mut s = one_param(1.0);
        s.get_mut("w").unwrap().grad[0] = f64::NAN;
        let err = adam_step(&mut s, &mut AdamState::new(), &AdamConfig::default(), 0.1).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains('w')));
        assert_eq!(s.get("w").unwrap().values[0], 1.0);
    }
}
