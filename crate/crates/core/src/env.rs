//! Split-delivery vehicle routing environment.
//!
//! A single truck of capacity 1 starts at the depot (node 0) and serves
//! suppliers `1..n`. Demands are fractions of the truck capacity and may
//! exceed 1, in which case a supplier is served over several visits. The
//! truck always pulls as much as it can.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::math;
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

/// Residual demands and capacities below this are treated as exactly zero.
pub const DEMAND_EPS: f64 = 1e-12;

/// A problem instance: depot plus suppliers with normalised demands.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    depot: [f64; 2],
    suppliers: Vec<[f64; 2]>,
    demands: Vec<f64>,
}

impl Instance {
    pub fn new(depot: [f64; 2], suppliers: Vec<[f64; 2]>, demands: Vec<f64>) -> Result<Self> {
        if suppliers.is_empty() {
            return Err(Error::Argument("instance needs at least one supplier".into()));
        }
        if suppliers.len() != demands.len() {
            return Err(Error::Argument(format!(
                "{} suppliers but {} demands",
                suppliers.len(),
                demands.len()
            )));
        }
        let finite = |p: &[f64; 2]| p[0].is_finite() && p[1].is_finite();
        if !finite(&depot) || !suppliers.iter().all(finite) {
            return Err(Error::Argument("coordinates must be finite".into()));
        }
        if let Some((i, d)) = demands
            .iter()
            .enumerate()
            .find(|(_, d)| !(d.is_finite() && **d > 0.0))
        {
            return Err(Error::Argument(format!(
                "supplier {} has non-positive demand {d}",
                i + 1
            )));
        }
        Ok(Self {
            depot,
            suppliers,
            demands,
        })
    }

    /// Number of nodes including the depot.
    pub fn n(&self) -> usize {
        self.suppliers.len() + 1
    }

    pub fn depot(&self) -> [f64; 2] {
        self.depot
    }

    pub fn suppliers(&self) -> &[[f64; 2]] {
        &self.suppliers
    }

    /// Initial demands of suppliers `1..n` (index 0 of the slice is node 1).
    pub fn demands(&self) -> &[f64] {
        &self.demands
    }

    /// Coordinates of node `i` (0 = depot).
    pub fn coord(&self, i: usize) -> [f64; 2] {
        if i == 0 {
            self.depot
        } else {
            self.suppliers[i - 1]
        }
    }

    /// Initial demand of node `i`; the depot has none.
    pub fn demand(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.demands[i - 1]
        }
    }

    pub fn total_demand(&self) -> f64 {
        self.demands.iter().sum()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.coord(a), self.coord(b));
        math::hypot(p[0] - q[0], p[1] - q[1])
    }

    /// Same instance with suppliers reordered: new supplier `k` is old
    /// supplier `perm[k]` (both 0-based over suppliers).
    pub fn permute_suppliers(&self, perm: &[usize]) -> Result<Self> {
        let m = self.suppliers.len();
        let mut seen = alloc::vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::Argument("not a permutation of the suppliers".into()));
        }
        Ok(Self {
            depot: self.depot,
            suppliers: perm.iter().map(|&p| self.suppliers[p]).collect(),
            demands: perm.iter().map(|&p| self.demands[p]).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DemandKind {
    /// Integers uniform on `lo..=hi`, divided by `scale`.
    UniformIntegers { lo: u32, hi: u32, scale: f64 },
    /// Reals uniform on `(lo, hi]`.
    UniformReal { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub n_nodes: usize,
    pub demand: DemandKind,
    /// Side length of the square that coordinates are drawn from.
    pub box_size: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_nodes: 15,
            demand: DemandKind::UniformIntegers {
                lo: 1,
                hi: 23,
                scale: 10.0,
            },
            box_size: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::Config(format!("n_nodes must be >= 2, got {}", self.n_nodes)));
        }
        if !(self.box_size.is_finite() && self.box_size > 0.0) {
            return Err(Error::Config(format!("box_size must be positive, got {}", self.box_size)));
        }
        match self.demand {
            DemandKind::UniformIntegers { lo, hi, scale } => {
                if lo == 0 || lo > hi {
                    return Err(Error::Config(format!("integer demand range {lo}..={hi} invalid")));
                }
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(Error::Config(format!("demand scale must be positive, got {scale}")));
                }
            }
            DemandKind::UniformReal { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi && hi > 0.0) {
                    return Err(Error::Config(format!("real demand range ({lo}, {hi}] invalid")));
                }
            }
        }
        Ok(())
    }

    /// The generator seeded from `self.seed`.
    pub fn rng(&self) -> StreamRng {
        rng::stream(self.seed, &[])
    }
}

/// Draws a depot and `n - 1` suppliers uniformly on the box with demands
/// drawn per `spec.demand`.
pub fn generate_instance<R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Result<Instance> {
    spec.validate()?;
    let side = spec.box_size;
    let point = |rng: &mut R| [rng.gen::<f64>() * side, rng.gen::<f64>() * side];
    let depot = point(rng);
    let m = spec.n_nodes - 1;
    let mut suppliers = Vec::with_capacity(m);
    let mut demands = Vec::with_capacity(m);
    for _ in 0..m {
        suppliers.push(point(rng));
        let d = match spec.demand {
            DemandKind::UniformIntegers { lo, hi, scale } => rng.gen_range(lo..=hi) as f64 / scale,
            // hi - u (hi - lo) with u in [0, 1) lands in (lo, hi], never 0.
            DemandKind::UniformReal { lo, hi } => hi - rng.gen::<f64>() * (hi - lo),
        };
        demands.push(d);
    }
    Instance::new(depot, suppliers, demands)
}

/// Uniform sample of `k` suppliers (without replacement) from `pool`,
/// keeping the pool's depot and the pool's supplier order.
pub fn subsample<R: Rng + ?Sized>(pool: &Instance, k: usize, rng: &mut R) -> Result<Instance> {
    let m = pool.suppliers.len();
    if k == 0 || k > m {
        return Err(Error::Argument(format!("cannot sample {k} suppliers from a pool of {m}")));
    }
    let mut picked = index::sample(rng, m, k).into_vec();
    picked.sort_unstable();
    Instance::new(
        pool.depot,
        picked.iter().map(|&i| pool.suppliers[i]).collect(),
        picked.iter().map(|&i| pool.demands[i]).collect(),
    )
}

/// A route `ξ` as a sequence of node indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Route {
    pub nodes: Vec<usize>,
}

impl Route {
    pub fn new(nodes: Vec<usize>) -> Self {
        Self { nodes }
    }
}

/// Euclidean length of the route.
pub fn route_cost(instance: &Instance, route: &Route) -> Result<f64> {
    if route.nodes.len() < 2 {
        return Err(Error::Argument(format!(
            "route needs at least 2 nodes, got {}",
            route.nodes.len()
        )));
    }
    if let Some(&bad) = route.nodes.iter().find(|&&i| i >= instance.n()) {
        return Err(Error::Argument(format!("node {bad} out of range for n = {}", instance.n())));
    }
    Ok(route
        .nodes
        .windows(2)
        .map(|w| instance.distance(w[0], w[1]))
        .sum())
}

/// Nodes that may not be chosen at the current step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub forbidden: Vec<bool>,
}

impl Mask {
    pub fn allowed(&self) -> impl Iterator<Item = usize> + '_ {
        self.forbidden
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| (!f).then_some(i))
    }

    pub fn n_allowed(&self) -> usize {
        self.forbidden.iter().filter(|f| !**f).count()
    }
}

/// Dynamic state of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteState {
    pub current_node: usize,
    /// Remaining truck capacity `D_t`.
    pub capacity: f64,
    /// Residual demands of suppliers `1..n` (slice index 0 is node 1).
    pub residual_demands: Vec<f64>,
    pub step: usize,
    pub route_so_far: Vec<usize>,
}

impl RouteState {
    /// Truck full, at the depot, with all demands outstanding.
    pub fn initial(instance: &Instance) -> Self {
        Self {
            current_node: 0,
            capacity: 1.0,
            residual_demands: instance.demands.clone(),
            step: 0,
            route_so_far: alloc::vec![0],
        }
    }

    pub fn residual(&self, node: usize) -> f64 {
        if node == 0 {
            0.0
        } else {
            self.residual_demands[node - 1]
        }
    }

    pub fn total_residual(&self) -> f64 {
        self.residual_demands.iter().sum()
    }

    pub fn route(&self) -> Route {
        Route::new(self.route_so_far.clone())
    }

    /// In-place version of [`step`].
    pub fn advance(&mut self, action: usize, instance: &Instance) -> Result<()> {
        let mask = legal_mask(self, instance);
        if action >= mask.forbidden.len() || mask.forbidden[action] {
            return Err(Error::Contract(format!(
                "action {action} is masked at step {} (node {}, capacity {})",
                self.step, self.current_node, self.capacity
            )));
        }
        if action == 0 {
            self.capacity = 1.0;
        } else {
            let d = self.residual_demands[action - 1];
            let cap = self.capacity;
            self.capacity = snap(cap - d);
            self.residual_demands[action - 1] = snap(d - cap);
        }
        self.current_node = action;
        self.step += 1;
        self.route_so_far.push(action);
        Ok(())
    }
}

fn snap(x: f64) -> f64 {
    if x < DEMAND_EPS {
        0.0
    } else {
        x
    }
}

/// Forbidden nodes: the current node, exhausted suppliers, and every
/// supplier once the truck is empty.
pub fn legal_mask(state: &RouteState, instance: &Instance) -> Mask {
    let empty = state.capacity <= 0.0;
    let forbidden = (0..instance.n())
        .map(|i| i == state.current_node || (i != 0 && (state.residual(i) <= 0.0 || empty)))
        .collect();
    Mask { forbidden }
}

pub fn step(state: &RouteState, action: usize, instance: &Instance) -> Result<RouteState> {
    let mut next = state.clone();
    next.advance(action, instance)?;
    Ok(next)
}

pub fn is_complete(state: &RouteState, _instance: &Instance) -> bool {
    state.current_node == 0 && state.residual_demands.iter().all(|&d| d <= 0.0)
}

/// Upper bound on decoder steps for an instance; exceeding it means the
/// masking logic is broken.
pub fn step_limit(instance: &Instance) -> usize {
    let n = instance.n();
    10 * n * (1 + math::ceil(instance.total_demand()) as usize)
}
