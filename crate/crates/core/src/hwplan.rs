//! Mapping the attention circuit onto device connectivity without SWAPs,
//! packing several circuits per device call, and scheduling basis runs.
//!
//! Each circuit occupies a path of six physical qubits in the order of
//! [`crate::qsim::line`]. Placements in one call are vertex-disjoint, and
//! all circuits of a call are measured in the same Pauli basis.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::qsim::{self, line, AngleSet, Basis, Gate, PureState};
use crate::{Error, Result};

/// Default shots per call.
pub const DEFAULT_SHOTS: usize = 500;

/// Undirected device coupling graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityGraph {
    adjacency: BTreeMap<usize, BTreeSet<usize>>,
}

impl ConnectivityGraph {
    pub fn new(qubits: impl IntoIterator<Item = usize>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut adjacency: BTreeMap<usize, BTreeSet<usize>> = qubits.into_iter().map(|q| (q, BTreeSet::new())).collect();
        for (a, b) in edges {
            if a == b {
                return Err(Error::Argument(format!("self-loop on qubit {a}")));
            }
            for q in [a, b] {
                if !adjacency.contains_key(&q) {
                    return Err(Error::Argument(format!("edge ({a}, {b}) names unknown qubit {q}")));
                }
            }
            adjacency.get_mut(&a).expect("checked").insert(b);
            adjacency.get_mut(&b).expect("checked").insert(a);
        }
        Ok(Self { adjacency })
    }

    /// Parses the fixture format: `qubits <id> <id> ...` then one `a b`
    /// edge per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut qubits = Vec::new();
        let mut edges = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Argument(format!("line {}: cannot parse {raw:?}", no + 1));
            let mut tokens = line.split_whitespace();
            if line.starts_with("qubits") {
                tokens.next();
                for t in tokens {
                    qubits.push(t.parse().map_err(|_| bad())?);
                }
            } else {
                let a = tokens.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                let b = tokens.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                if tokens.next().is_some() {
                    return Err(bad());
                }
                edges.push((a, b));
            }
        }
        Self::new(qubits, edges)
    }

    /// The checked-in 30-qubit lattice of four octagonal rings.
    pub fn octagonal_fixture() -> Self {
        Self::parse(include_str!("../fixtures/octagon30.txt")).expect("valid fixture")
    }

    pub fn path(n: usize) -> Self {
        Self::new(0..n, (1..n).map(|i| (i - 1, i))).expect("valid path")
    }

    pub fn cycle(n: usize) -> Self {
        Self::new(0..n, (0..n).map(|i| (i, (i + 1) % n))).expect("valid cycle")
    }

    pub fn qubits(&self) -> impl Iterator<Item = usize> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn n_qubits(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .flat_map(|(&a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency.get(&a).is_some_and(|n| n.contains(&b))
    }

    pub fn neighbors(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency.get(&q).into_iter().flatten().copied()
    }
}

/// Physical qubits hosting line positions 0..6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinePlacement {
    pub qubits: [usize; 6],
}

impl LinePlacement {
    pub fn validate(&self, graph: &ConnectivityGraph) -> Result<()> {
        let distinct: BTreeSet<usize> = self.qubits.iter().copied().collect();
        if distinct.len() != 6 {
            return Err(Error::Argument(format!("placement {:?} repeats a qubit", self.qubits)));
        }
        for w in self.qubits.windows(2) {
            if !graph.has_edge(w[0], w[1]) {
                return Err(Error::Argument(format!("placement {:?}: no edge {}-{}", self.qubits, w[0], w[1])));
            }
        }
        Ok(())
    }

    pub fn physical(&self, position: usize) -> usize {
        self.qubits[position]
    }
}

fn simple_paths(graph: &ConnectivityGraph, free: &BTreeSet<usize>, len: usize) -> Vec<Vec<usize>> {
    fn extend(graph: &ConnectivityGraph, free: &BTreeSet<usize>, len: usize, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if path.len() == len {
            // each undirected path once
            if path[0] < path[len - 1] {
                out.push(path.clone());
            }
            return;
        }
        let last = *path.last().expect("non-empty");
        for next in graph.neighbors(last) {
            if free.contains(&next) && !path.contains(&next) {
                path.push(next);
                extend(graph, free, len, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    for &start in free {
        extend(graph, free, len, &mut alloc::vec![start], &mut out);
    }
    out
}

/// Free qubits left in connected components whose size is not a multiple
/// of six, i.e. qubits a later path can certainly not all reuse.
fn stranded(graph: &ConnectivityGraph, free: &BTreeSet<usize>) -> usize {
    let mut seen = BTreeSet::new();
    let mut total = 0;
    for &start in free {
        if !seen.insert(start) {
            continue;
        }
        let (mut stack, mut size) = (alloc::vec![start], 0);
        while let Some(q) = stack.pop() {
            size += 1;
            for n in graph.neighbors(q) {
                if free.contains(&n) && seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        total += size % 6;
    }
    total
}

/// Greedy packing of vertex-disjoint six-qubit paths. Each round takes the
/// path that strands the fewest free qubits, then the one with the fewest
/// edges into the remaining free qubits, then the lexicographically
/// smallest; stops when no path is left.
pub fn enumerate_line_placements(graph: &ConnectivityGraph) -> Vec<LinePlacement> {
    let mut free: BTreeSet<usize> = graph.qubits().collect();
    let mut placements = Vec::new();
    loop {
        let candidates = simple_paths(graph, &free, 6);
        let score = |p: &Vec<usize>| -> (usize, usize) {
            let rest: BTreeSet<usize> = free.iter().copied().filter(|q| !p.contains(q)).collect();
            let damage = p
                .iter()
                .flat_map(|&q| graph.neighbors(q))
                .filter(|n| rest.contains(n))
                .count();
            (stranded(graph, &rest), damage)
        };
        let Some((_, best)) = candidates
            .iter()
            .map(|p| (score(p), p))
            .min_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        else {
            break;
        };
        for q in best {
            free.remove(q);
        }
        let mut qubits = [0; 6];
        qubits.copy_from_slice(best);
        placements.push(LinePlacement { qubits });
    }
    placements
}

/// Identifies one circuit: the pair `(key node, query node)` of a head in a
/// layer. All indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CircuitId {
    pub layer: usize,
    pub head: usize,
    pub key_node: usize,
    pub query_node: usize,
}

impl CircuitId {
    pub fn label(&self) -> String {
        format!(
            "layer{}.head{}.key{}.query{}",
            self.layer + 1,
            self.head + 1,
            self.key_node,
            self.query_node
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotAssignment {
    pub slot: usize,
    pub placement: LinePlacement,
    pub circuit: CircuitId,
    pub angles: AngleSet,
}

/// One device call: every slot circuit measured in `basis`.
#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub index: usize,
    pub basis: Basis,
    pub slots: Vec<SlotAssignment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub n_nodes: usize,
    pub heads_per_layer: usize,
    pub n_layers: usize,
    pub parallel_slots: usize,
    pub shots: usize,
    pub circuit_count: usize,
    pub basis_run_count: usize,
    pub call_count: usize,
    pub schedule: Vec<Call>,
}

/// `(circuits, basis runs, calls)` for a configuration.
pub fn run_counts(n_nodes: usize, heads: usize, layers: usize, slots: usize) -> Result<(usize, usize, usize)> {
    if n_nodes == 0 || heads == 0 || layers == 0 {
        return Err(Error::Argument("nodes, heads and layers must be positive".into()));
    }
    if slots == 0 {
        return Err(Error::Argument("at least one parallel slot is needed".into()));
    }
    let circuits = n_nodes * n_nodes * heads * layers;
    Ok((circuits, 3 * circuits, circuits.div_ceil(slots) * 3))
}

/// Assigns every `(layer, head, key, query)` circuit to a slot; calls are
/// ordered basis-major (all X calls, then Y, then Z), and within a basis
/// the circuits run in `(layer, head, key, query)` order. `angles` supplies
/// each circuit's parameters.
pub fn build_run_plan(
    n_nodes: usize,
    heads: usize,
    layers: usize,
    placements: &[LinePlacement],
    shots: usize,
    angles: &dyn Fn(&CircuitId) -> AngleSet,
) -> Result<RunPlan> {
    let (circuit_count, basis_run_count, call_count) = run_counts(n_nodes, heads, layers, placements.len())?;
    if shots == 0 {
        return Err(Error::Argument("shots must be positive".into()));
    }
    let mut circuits = Vec::with_capacity(circuit_count);
    for layer in 0..layers {
        for head in 0..heads {
            for key_node in 0..n_nodes {
                for query_node in 0..n_nodes {
                    circuits.push(CircuitId {
                        layer,
                        head,
                        key_node,
                        query_node,
                    });
                }
            }
        }
    }
    let mut schedule = Vec::with_capacity(call_count);
    for basis in Basis::ALL {
        for chunk in circuits.chunks(placements.len()) {
            let slots = chunk
                .iter()
                .zip(placements)
                .enumerate()
                .map(|(slot, (c, p))| SlotAssignment {
                    slot,
                    placement: *p,
                    circuit: *c,
                    angles: angles(c),
                })
                .collect();
            schedule.push(Call {
                index: schedule.len(),
                basis,
                slots,
            });
        }
    }
    debug_assert_eq!(schedule.len(), call_count);
    Ok(RunPlan {
        n_nodes,
        heads_per_layer: heads,
        n_layers: layers,
        parallel_slots: placements.len(),
        shots,
        circuit_count,
        basis_run_count,
        call_count,
        schedule,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateName {
    Ry,
    Rx,
    ZxExp,
    Cnot,
}

impl GateName {
    pub fn as_str(self) -> &'static str {
        match self {
            GateName::Ry => "ry",
            GateName::Rx => "rx",
            GateName::ZxExp => "zx_exp",
            GateName::Cnot => "cnot",
        }
    }
}

/// One gate on physical qubits. For `zx_exp` the operands are `(z, x)`,
/// for `cnot` `(control, target)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IrGate {
    pub name: GateName,
    pub qubits: Vec<usize>,
    pub angle: Option<f64>,
}

/// A lowered circuit on physical qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitIR {
    pub gates: Vec<IrGate>,
    /// `(key, query)` physical pairs for the two observables.
    pub measured: [(usize, usize); 2],
    pub basis: Basis,
    pub shots: usize,
}

/// The six-qubit circuit for `angles` on `placement`, followed by the
/// rotations that read `basis` in the computational basis.
pub fn lower_circuit(
    angles: &AngleSet,
    placement: &LinePlacement,
    basis: Basis,
    graph: &ConnectivityGraph,
    shots: usize,
) -> Result<CircuitIR> {
    placement.validate(graph)?;
    let phys = |pos: usize| placement.physical(pos);
    let mut gates = Vec::new();
    for g in qsim::line6_gates(angles) {
        let ir = match g {
            Gate::Ry { qubit, angle } => IrGate {
                name: GateName::Ry,
                qubits: alloc::vec![phys(qubit)],
                angle: Some(angle),
            },
            Gate::Rx { qubit, angle } => IrGate {
                name: GateName::Rx,
                qubits: alloc::vec![phys(qubit)],
                angle: Some(angle),
            },
            Gate::ZxExp { z, x, angle } => IrGate {
                name: GateName::ZxExp,
                qubits: alloc::vec![phys(z), phys(x)],
                angle: Some(angle),
            },
            Gate::Cnot { control, target } => IrGate {
                name: GateName::Cnot,
                qubits: alloc::vec![phys(control), phys(target)],
                angle: None,
            },
        };
        if ir.qubits.len() == 2 && !graph.has_edge(ir.qubits[0], ir.qubits[1]) {
            return Err(Error::Contract(format!(
                "lowering needs a gate on unconnected qubits {:?}",
                ir.qubits
            )));
        }
        gates.push(ir);
    }
    let [(k1, q1), (k2, q2)] = line::MEASURED;
    for pos in [k1, q1, k2, q2] {
        if let Some(Gate::Ry { angle, .. }) | Some(Gate::Rx { angle, .. }) = basis.readout_rotation(pos) {
            let name = match basis {
                Basis::X => GateName::Ry,
                _ => GateName::Rx,
            };
            gates.push(IrGate {
                name,
                qubits: alloc::vec![phys(pos)],
                angle: Some(angle),
            });
        }
    }
    Ok(CircuitIR {
        gates,
        measured: [(phys(k1), phys(q1)), (phys(k2), phys(q2))],
        basis,
        shots,
    })
}

/// Runs `ir` on a statevector over `placement`'s six qubits.
pub fn simulate(ir: &CircuitIR, placement: &LinePlacement) -> Result<PureState> {
    let local = |q: usize| {
        placement
            .qubits
            .iter()
            .position(|&p| p == q)
            .ok_or_else(|| Error::Argument(format!("qubit {q} is outside the placement")))
    };
    let mut s = PureState::zero(6);
    for g in &ir.gates {
        let angle = g.angle.unwrap_or(0.0);
        let gate = match g.name {
            GateName::Ry => Gate::Ry {
                qubit: local(g.qubits[0])?,
                angle,
            },
            GateName::Rx => Gate::Rx {
                qubit: local(g.qubits[0])?,
                angle,
            },
            GateName::ZxExp => Gate::ZxExp {
                z: local(g.qubits[0])?,
                x: local(g.qubits[1])?,
                angle,
            },
            GateName::Cnot => Gate::Cnot {
                control: local(g.qubits[0])?,
                target: local(g.qubits[1])?,
            },
        };
        s.apply(&gate)?;
    }
    Ok(s)
}

/// `<Z_a Z_b>` of each measured pair of a simulated basis run.
pub fn measured_parities(ir: &CircuitIR, placement: &LinePlacement) -> Result<[f64; 2]> {
    let state = simulate(ir, placement)?;
    let probs = state.probabilities();
    let local = |q: usize| placement.qubits.iter().position(|&p| p == q).expect("measured qubit in placement");
    let mut out = [0.0; 2];
    for (k, &(a, b)) in ir.measured.iter().enumerate() {
        let (a, b) = (local(a), local(b));
        out[k] = probs
            .iter()
            .enumerate()
            .map(|(i, p)| if ((i >> a) ^ (i >> b)) & 1 == 1 { -p } else { *p })
            .sum();
    }
    Ok(out)
}

/// Text form of one circuit; see the repository docs for the grammar.
pub fn render_circuit(ir: &CircuitIR) -> String {
    let mut s = String::new();
    for g in &ir.gates {
        let _ = match g.name {
            GateName::Ry | GateName::Rx => writeln!(s, "{} q{} {:?}", g.name.as_str(), g.qubits[0], g.angle.unwrap_or(0.0)),
            GateName::ZxExp => writeln!(s, "zxexp q{} q{} {:?}", g.qubits[0], g.qubits[1], g.angle.unwrap_or(0.0)),
            GateName::Cnot => writeln!(s, "cnot q{} q{}", g.qubits[0], g.qubits[1]),
        };
    }
    for (a, b) in ir.measured {
        let _ = writeln!(s, "measure q{a} q{b} basis={}", ir.basis.as_char());
    }
    s
}

/// File name of call `index`.
pub fn call_file_name(index: usize) -> String {
    format!("call_{index:04}.txt")
}

/// Lowered text of every slot of a call, each preceded by a comment line
/// naming its slot, circuit and placement.
pub fn render_call(call: &Call, graph: &ConnectivityGraph, shots: usize) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "# call {} basis={} shots={shots}", call.index, call.basis.as_char());
    for slot in &call.slots {
        let ir = lower_circuit(&slot.angles, &slot.placement, call.basis, graph, shots)?;
        let _ = writeln!(
            s,
            "# slot {} circuit={} placement={}",
            slot.slot,
            slot.circuit.label(),
            placement_string(&slot.placement)
        );
        s.push_str(&render_circuit(&ir));
    }
    Ok(s)
}

fn placement_string(p: &LinePlacement) -> String {
    let parts: Vec<String> = p.qubits.iter().map(|q| format!("{q}")).collect();
    parts.join(",")
}

/// Flat `key=value` manifest of a plan.
pub fn render_manifest(plan: &RunPlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "format=qroute-run-plan");
    let _ = writeln!(s, "version=1");
    for (k, v) in [
        ("n_nodes", plan.n_nodes),
        ("heads_per_layer", plan.heads_per_layer),
        ("n_layers", plan.n_layers),
        ("parallel_slots", plan.parallel_slots),
        ("shots", plan.shots),
        ("circuit_count", plan.circuit_count),
        ("basis_run_count", plan.basis_run_count),
        ("call_count", plan.call_count),
    ] {
        let _ = writeln!(s, "{k}={v}");
    }
    for call in &plan.schedule {
        let i = call.index;
        let _ = writeln!(s, "call.{i}.file={}", call_file_name(i));
        let _ = writeln!(s, "call.{i}.basis={}", call.basis.as_char());
        let _ = writeln!(s, "call.{i}.shots={}", plan.shots);
        for slot in &call.slots {
            let _ = writeln!(
                s,
                "call.{i}.slot{}={} {}",
                slot.slot,
                slot.circuit.label(),
                placement_string(&slot.placement)
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::{expectation_pair, expectation_pair_line6, random_angles};
    use crate::rng::stream;

    #[test]
    fn packing_small_graphs() {
        assert_eq!(enumerate_line_placements(&ConnectivityGraph::path(12)).len(), 2);
        assert_eq!(enumerate_line_placements(&ConnectivityGraph::cycle(6)).len(), 1);
        assert!(enumerate_line_placements(&ConnectivityGraph::path(5)).is_empty());
    }

    #[test]
    fn packing_octagonal_fixture() {
        let g = ConnectivityGraph::octagonal_fixture();
        assert_eq!(g.n_qubits(), 30);
        let placements = enumerate_line_placements(&g);
        assert!(placements.len() >= 5, "{placements:?}");
        let mut used = BTreeSet::new();
        for p in &placements {
            p.validate(&g).unwrap();
            for q in p.qubits {
                assert!(used.insert(q), "qubit {q} reused");
            }
        }
        assert_eq!(placements, enumerate_line_placements(&g));
    }

    #[test]
    fn graph_validation() {
        assert!(ConnectivityGraph::new([0, 1], [(0, 2)]).is_err());
        assert!(ConnectivityGraph::new([0, 1], [(1, 1)]).is_err());
        assert!(ConnectivityGraph::parse("qubits 0 1\n0 x\n").is_err());
        let g = ConnectivityGraph::parse("qubits 0 1 2 # comment\n0 1\n1 2\n").unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), [(0, 1), (1, 2)]);
    }

    #[test]
    fn reference_configuration_counts() {
        assert_eq!(run_counts(5, 6, 3, 5).unwrap(), (450, 1350, 270));
        assert!(run_counts(5, 6, 3, 0).is_err());
        assert!(run_counts(0, 6, 3, 5).is_err());
        let g = ConnectivityGraph::octagonal_fixture();
        let placements = enumerate_line_placements(&g);
        let plan = build_run_plan(5, 6, 3, &placements[..5], 500, &|_| AngleSet::default()).unwrap();
        assert_eq!((plan.circuit_count, plan.basis_run_count, plan.call_count), (450, 1350, 270));
        assert_eq!(plan.schedule.len(), 270);
        let runs: usize = plan.schedule.iter().map(|c| c.slots.len()).sum();
        assert_eq!(runs, 1350);
        for call in &plan.schedule {
            let qubits: BTreeSet<usize> = call.slots.iter().flat_map(|s| s.placement.qubits).collect();
            assert_eq!(qubits.len(), 6 * call.slots.len());
        }
    }

    #[test]
    fn lowering_is_swap_free_and_faithful() {
        let g = ConnectivityGraph::octagonal_fixture();
        let placements = enumerate_line_placements(&g);
        let mut rng = stream(3, &[]);
        for k in 0..200 {
            let a = random_angles(&mut rng);
            let p = &placements[k % placements.len()];
            let mut e = [0.0; 2];
            for basis in Basis::ALL {
                let ir = lower_circuit(&a, p, basis, &g, 500).unwrap();
                for gate in &ir.gates {
                    if gate.qubits.len() == 2 {
                        assert!(g.has_edge(gate.qubits[0], gate.qubits[1]));
                    }
                }
                let text = render_circuit(&ir);
                assert!(!text.contains("swap"));
                if basis == Basis::Z {
                    assert_eq!(ir.gates.len(), qsim::line6_gates(&a).len());
                }
                let par = measured_parities(&ir, p).unwrap();
                e[0] += par[0] / 4.0;
                e[1] += par[1] / 4.0;
            }
            let (six, four) = (expectation_pair_line6(&a), expectation_pair(&a));
            assert!((e[0] - six.e13).abs() < 1e-10 && (e[1] - six.e24).abs() < 1e-10);
            assert!((e[0] - four.e13).abs() < 1e-10 && (e[1] - four.e24).abs() < 1e-10);
        }
    }

    #[test]
    fn lowering_rejects_invalid_placements() {
        let g = ConnectivityGraph::path(6);
        let bad = LinePlacement { qubits: [0, 2, 1, 3, 4, 5] };
        assert!(lower_circuit(&AngleSet::default(), &bad, Basis::Z, &g, 1).is_err());
    }

    #[test]
    fn text_format() {
        let g = ConnectivityGraph::path(6);
        let p = LinePlacement { qubits: [0, 1, 2, 3, 4, 5] };
        let a = AngleSet::new([0.5, 0.25, 0.125], [1.0, 2.0, 3.0]);
        let ir = lower_circuit(&a, &p, Basis::Y, &g, 500).unwrap();
        let text = render_circuit(&ir);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "ry q0 1.0");
        assert_eq!(lines[2], "zxexp q0 q1 3.0");
        assert!(lines.contains(&"cnot q3 q4"));
        assert!(lines.contains(&"rx q2 1.5707963267948966"));
        assert_eq!(lines[lines.len() - 2], "measure q2 q4 basis=Y");
        assert_eq!(lines[lines.len() - 1], "measure q3 q1 basis=Y");
    }
}
