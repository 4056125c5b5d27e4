//! Simulation of the 4-qubit key/query attention circuit.
//!
//! Qubits are numbered 0..4 in code: 0 and 1 carry the key state, 2 and 3
//! the query state. Both two-qubit states are prepared the same way,
//!
//! ```text
//! |K> = exp(-i α Z0 X1) Ry0(θ1) Ry1(θ2) |00>
//! |Q> = exp(-i β Z2 X3) Ry2(φ1) Ry3(φ2) |00>
//! ```
//!
//! and then mixed by the two CNOTs in [`MIXING_CNOTS`]: key qubit 1
//! controls query qubit 2, and query qubit 3 controls key qubit 0. This
//! orientation is the one for which the SWAP-free six-qubit line layout
//! (see [`line6_gates`]) reproduces the four-qubit expectations exactly;
//! with both controls on the key side the layout drifts by up to ~0.05.
//!
//! The compatibility observables are `<S0·S2>` and `<S1·S3>`.
//!
//! # Closed form
//!
//! Pushing the observables back through the CNOTs (Heisenberg picture):
//!
//! ```text
//! X0 X2 -> X0 ⊗ X2          Z0 Z2 -> Z0 Z1 ⊗ Z2 Z3     Y0 Y2 -> Y0 Z1 ⊗ Y2 Z3
//! X1 X3 -> X0 X1 ⊗ X2 X3    Z1 Z3 -> Z1 ⊗ Z3           Y1 Y3 -> X0 Y1 ⊗ X2 Y3
//! ```
//!
//! Every term factorises over the unentangled key and query states. For the
//! prepared state, a Pauli string `P` that commutes with `Z⊗X` keeps its
//! product-state value, one that anticommutes picks up `cos 2α` plus a
//! `sin 2α` cross term that vanishes for these strings. The product state
//! `Ry(θ1)|0> ⊗ Ry(θ2)|0>` has Bloch vectors `(sin θk, 0, cos θk)`, so
//!
//! ```text
//! <X0>    = cos2α sinθ1           <Z0 Z1> = cos2α cosθ1 cosθ2
//! <X0 X1> = cos2α sinθ1 sinθ2     <Z1>    = cos2α cosθ2
//! <Y0 Z1> = <X0 Y1> = 0
//! ```
//!
//! giving
//!
//! ```text
//! <S0·S2> = ¼ cos2α cos2β (sinθ1 sinφ1 + cosθ1 cosθ2 cosφ1 cosφ2)
//! <S1·S3> = ¼ cos2α cos2β (sinθ1 sinθ2 sinφ1 sinφ2 + cosθ2 cosφ2)
//! ```
//!
//! Both are a dot product of a 4-vector that depends only on the key angles
//! ([`key_features`]) with one that depends only on the query angles
//! ([`query_features`]), which is how the policy evaluates all `n²` pairs
//! of a head at once.

mod state;

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use rand::Rng;

pub use state::{Gate, PureState};

use crate::math;
use crate::{Error, Result};

/// `(control, target)` of the mixing layer, applied in this order.
pub const MIXING_CNOTS: [(usize, usize); 2] = [(1, 2), (3, 0)];

/// Measured qubit pairs of the 4-qubit circuit: `(S0·S2, S1·S3)`.
pub const MEASURED_PAIRS: [(usize, usize); 2] = [(0, 2), (1, 3)];

/// Angles of one key/query pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AngleSet {
    pub theta1: f64,
    pub theta2: f64,
    pub alpha: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub beta: f64,
}

impl AngleSet {
    pub fn new(key: [f64; 3], query: [f64; 3]) -> Self {
        Self {
            theta1: key[0],
            theta2: key[1],
            alpha: key[2],
            phi1: query[0],
            phi2: query[1],
            beta: query[2],
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.theta1, self.theta2, self.alpha, self.phi1, self.phi2, self.beta]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new([a[0], a[1], a[2]], [a[3], a[4], a[5]])
    }

    pub fn key(&self) -> [f64; 3] {
        [self.theta1, self.theta2, self.alpha]
    }

    pub fn query(&self) -> [f64; 3] {
        [self.phi1, self.phi2, self.beta]
    }
}

/// The two spin-spin expectations of a key/query circuit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExpectationPair {
    pub e13: f64,
    pub e24: f64,
}

impl ExpectationPair {
    pub fn sum(&self) -> f64 {
        self.e13 + self.e24
    }
}

/// Gates preparing a two-qubit key or query state on qubits `(a, b)`.
pub fn preparation_gates(a: usize, b: usize, angles: [f64; 3]) -> [Gate; 3] {
    [
        Gate::Ry { qubit: a, angle: angles[0] },
        Gate::Ry { qubit: b, angle: angles[1] },
        Gate::ZxExp { z: a, x: b, angle: angles[2] },
    ]
}

fn prepare(angles: [f64; 3]) -> PureState {
    let mut s = PureState::zero(2);
    // operands are in range by construction
    s.apply_all(&preparation_gates(0, 1, angles)).expect("2-qubit preparation");
    s
}

pub fn prepare_key(theta1: f64, theta2: f64, alpha: f64) -> PureState {
    prepare([theta1, theta2, alpha])
}

pub fn prepare_query(phi1: f64, phi2: f64, beta: f64) -> PureState {
    prepare([phi1, phi2, beta])
}

/// Key on qubits 0-1, query on 2-3, followed by the mixing CNOTs.
pub fn compose_and_entangle(key: &PureState, query: &PureState) -> Result<PureState> {
    if key.n_qubits() != 2 || query.n_qubits() != 2 {
        return Err(Error::Argument("key and query must be 2-qubit states".into()));
    }
    let mut s = key.tensor(query);
    for (control, target) in MIXING_CNOTS {
        s.apply(&Gate::Cnot { control, target })?;
    }
    Ok(s)
}

pub fn spin_spin_expectation(state: &PureState, pair: (usize, usize)) -> Result<f64> {
    state.spin_spin(pair.0, pair.1)
}

pub fn attention_state(angles: &AngleSet) -> PureState {
    let key = prepare_key(angles.theta1, angles.theta2, angles.alpha);
    let query = prepare_query(angles.phi1, angles.phi2, angles.beta);
    compose_and_entangle(&key, &query).expect("2-qubit inputs")
}

/// Statevector evaluation of the two expectations.
pub fn expectation_pair(angles: &AngleSet) -> ExpectationPair {
    let s = attention_state(angles);
    let [p13, p24] = MEASURED_PAIRS;
    ExpectationPair {
        e13: s.spin_spin(p13.0, p13.1).expect("valid pair"),
        e24: s.spin_spin(p24.0, p24.1).expect("valid pair"),
    }
}

/// Key-side factors `(a0, a1, a2, a3)` with
/// `e13 = ¼(a0 b0 + a1 b1)` and `e24 = ¼(a2 b2 + a3 b3)`.
pub fn key_features(theta1: f64, theta2: f64, alpha: f64) -> [f64; 4] {
    let c2a = math::cos(2.0 * alpha);
    let (s1, c1) = (math::sin(theta1), math::cos(theta1));
    let (s2, c2) = (math::sin(theta2), math::cos(theta2));
    [c2a * s1, c2a * c1 * c2, c2a * s1 * s2, c2a * c2]
}

/// Query-side factors; the circuit is symmetric so these have the same
/// form as [`key_features`].
pub fn query_features(phi1: f64, phi2: f64, beta: f64) -> [f64; 4] {
    key_features(phi1, phi2, beta)
}

/// Closed-form evaluation of [`expectation_pair`].
pub fn expectation_pair_closed_form(angles: &AngleSet) -> ExpectationPair {
    let a = key_features(angles.theta1, angles.theta2, angles.alpha);
    let b = query_features(angles.phi1, angles.phi2, angles.beta);
    ExpectationPair {
        e13: 0.25 * (a[0] * b[0] + a[1] * b[1]),
        e24: 0.25 * (a[2] * b[2] + a[3] * b[3]),
    }
}

/// Pauli basis for a readout run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Basis {
    X,
    Y,
    Z,
}

impl Basis {
    pub const ALL: [Basis; 3] = [Basis::X, Basis::Y, Basis::Z];

    /// Rotation taking this basis to the computational basis on `qubit`.
    pub fn readout_rotation(self, qubit: usize) -> Option<Gate> {
        match self {
            Basis::X => Some(Gate::Ry { qubit, angle: -FRAC_PI_2 }),
            Basis::Y => Some(Gate::Rx { qubit, angle: FRAC_PI_2 }),
            Basis::Z => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Basis::X => 'X',
            Basis::Y => 'Y',
            Basis::Z => 'Z',
        }
    }
}

/// Draws `shots` computational-basis outcomes from `state` as amplitude
/// indices.
pub fn sample_bitstrings<R: Rng + ?Sized>(state: &PureState, shots: usize, rng: &mut R) -> Vec<usize> {
    let probs = state.probabilities();
    (0..shots)
        .map(|_| crate::rng::sample_categorical(&probs, rng))
        .collect()
}

/// Mean of `(-1)^(bit a xor bit b)` over the outcomes.
pub fn parity_mean(outcomes: &[usize], a: usize, b: usize) -> f64 {
    let sum: f64 = outcomes
        .iter()
        .map(|&i| if ((i >> a) ^ (i >> b)) & 1 == 1 { -1.0 } else { 1.0 })
        .sum();
    sum / outcomes.len() as f64
}

/// Shot-based estimate of the expectation pair: one run of `shots` per
/// basis, both measured pairs read from the same shots.
pub fn sample_expectation<R: Rng + ?Sized>(
    angles: &AngleSet,
    shots: usize,
    rng: &mut R,
) -> Result<ExpectationPair> {
    if shots == 0 {
        return Err(Error::Argument("shots must be at least 1".into()));
    }
    let base = attention_state(angles);
    let [p13, p24] = MEASURED_PAIRS;
    let mut est = ExpectationPair::default();
    for basis in Basis::ALL {
        let mut s = base.clone();
        for q in 0..4 {
            if let Some(g) = basis.readout_rotation(q) {
                s.apply(&g)?;
            }
        }
        let outcomes = sample_bitstrings(&s, shots, rng);
        est.e13 += parity_mean(&outcomes, p13.0, p13.1) / 4.0;
        est.e24 += parity_mean(&outcomes, p24.0, p24.1) / 4.0;
    }
    Ok(est)
}

/// Positions on the six-qubit line, in order along the line.
pub mod line {
    /// Auxiliary copy of query qubit 1.
    pub const QUERY1_AUX: usize = 0;
    pub const QUERY2: usize = 1;
    pub const KEY1: usize = 2;
    pub const KEY2: usize = 3;
    pub const QUERY1: usize = 4;
    /// Auxiliary copy of query qubit 2.
    pub const QUERY2_AUX: usize = 5;
    /// Measured pairs `(S·S for e13, S·S for e24)`.
    pub const MEASURED: [(usize, usize); 2] = [(KEY1, QUERY1), (KEY2, QUERY2)];
}

/// The attention circuit laid out on a path of six qubits so that every
/// two-qubit gate acts on neighbours. The query is prepared twice, once on
/// each side of the key; each mixing CNOT uses the copy adjacent to its key
/// qubit, and the unused half of each copy is auxiliary.
pub fn line6_gates(angles: &AngleSet) -> Vec<Gate> {
    use line::*;
    let mut gates = Vec::with_capacity(11);
    gates.extend(preparation_gates(QUERY1_AUX, QUERY2, angles.query()));
    gates.extend(preparation_gates(KEY1, KEY2, angles.key()));
    gates.extend(preparation_gates(QUERY1, QUERY2_AUX, angles.query()));
    // same orientation as MIXING_CNOTS: key2 -> query1, query2 -> key1
    gates.push(Gate::Cnot { control: KEY2, target: QUERY1 });
    gates.push(Gate::Cnot { control: QUERY2, target: KEY1 });
    gates
}

pub fn line6_state(angles: &AngleSet) -> PureState {
    let mut s = PureState::zero(6);
    s.apply_all(&line6_gates(angles)).expect("6-qubit layout");
    s
}

/// Expectations read from the six-qubit layout.
pub fn expectation_pair_line6(angles: &AngleSet) -> ExpectationPair {
    let s = line6_state(angles);
    let [p13, p24] = line::MEASURED;
    ExpectationPair {
        e13: s.spin_spin(p13.0, p13.1).expect("valid pair"),
        e24: s.spin_spin(p24.0, p24.1).expect("valid pair"),
    }
}

/// Golden values checked in under `fixtures/qsim_golden.txt`.
pub fn golden_fixture() -> Vec<(AngleSet, ExpectationPair)> {
    include_str!("../../fixtures/qsim_golden.txt")
        .lines()
        .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse().expect("numeric fixture"))
                .collect();
            let mut a = [0.0; 6];
            a.copy_from_slice(&v[..6]);
            (AngleSet::from_array(a), ExpectationPair { e13: v[6], e24: v[7] })
        })
        .collect()
}

/// Two-point parameter-shift derivative of `f` along angle `index`.
///
/// Ry angles enter as `θ/2` (shift π/2, factor ½); the `Z⊗X` angle enters
/// with unit weight and a generator of eigenvalues ±1 (shift π/4, factor 1).
pub fn parameter_shift(f: impl Fn(&AngleSet) -> f64, angles: &AngleSet, index: usize) -> f64 {
    let (shift, factor) = if index == 2 || index == 5 {
        (core::f64::consts::FRAC_PI_4, 1.0)
    } else {
        (FRAC_PI_2, 0.5)
    };
    let mut plus = angles.to_array();
    let mut minus = plus;
    plus[index] += shift;
    minus[index] -= shift;
    factor * (f(&AngleSet::from_array(plus)) - f(&AngleSet::from_array(minus)))
}

/// Uniformly random angles in `[-2π, 2π)`.
pub fn random_angles<R: Rng + ?Sized>(rng: &mut R) -> AngleSet {
    let mut a = [0.0; 6];
    for v in &mut a {
        *v = (rng.gen::<f64>() - 0.5) * 4.0 * core::f64::consts::PI;
    }
    AngleSet::from_array(a)
}

/// Basis-state index of `|bits>` where `bits[q]` is qubit `q`.
pub fn basis_index(bits: &[u8]) -> usize {
    bits.iter().enumerate().map(|(q, &b)| (b as usize) << q).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use core::f64::consts::{PI, TAU};
    use num_complex::Complex64;

    fn close(a: Complex64, b: Complex64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn key_preparation() {
        let s = prepare_key(0.0, 0.0, 0.0);
        assert!(close(s.amplitudes()[0], 1.0.into()));
        let s = prepare_key(PI, 0.0, 0.0);
        assert!(close(s.amplitudes()[basis_index(&[1, 0])], 1.0.into()));
        let s = prepare_key(0.0, 0.0, PI / 2.0);
        assert!(close(s.amplitudes()[basis_index(&[0, 1])], Complex64::new(0.0, -1.0)));
    }

    #[test]
    fn query_preparation() {
        assert_eq!(prepare_query(0.0, 0.0, 0.0), PureState::zero(2));
        let h = core::f64::consts::FRAC_1_SQRT_2;
        let s = prepare_query(PI / 2.0, 0.0, 0.0);
        assert!(close(s.amplitudes()[0], h.into()));
        assert!(close(s.amplitudes()[basis_index(&[1, 0])], h.into()));
        let mut rng = stream(3, &[]);
        for _ in 0..10 {
            let a = random_angles(&mut rng);
            assert_eq!(prepare_query(a.phi1, a.phi2, a.beta), prepare_key(a.phi1, a.phi2, a.beta));
        }
    }

    #[test]
    fn mixing_layer_kets() {
        let ket = |bits: [u8; 2]| {
            let mut s = PureState::zero(2);
            for (q, b) in bits.iter().enumerate() {
                if *b == 1 {
                    s.apply(&Gate::Ry { qubit: q, angle: PI }).unwrap();
                }
            }
            s
        };
        let pop = |k, q| compose_and_entangle(&ket(k), &ket(q)).unwrap().probabilities();
        assert!((pop([0, 0], [0, 0])[basis_index(&[0, 0, 0, 0])] - 1.0).abs() < 1e-12);
        // key qubit 0 set, query empty: no control fires
        assert!((pop([1, 0], [0, 0])[basis_index(&[1, 0, 0, 0])] - 1.0).abs() < 1e-12);
        // key qubit 1 flips query qubit 2
        assert!((pop([0, 1], [0, 0])[basis_index(&[0, 1, 1, 0])] - 1.0).abs() < 1e-12);
        // query qubit 3 flips key qubit 0
        assert!((pop([0, 0], [0, 1])[basis_index(&[1, 0, 0, 1])] - 1.0).abs() < 1e-12);
        assert!(compose_and_entangle(&PureState::zero(3), &PureState::zero(2)).is_err());
    }

    #[test]
    fn unitarity_over_random_inputs() {
        let mut rng = stream(17, &[]);
        for _ in 0..1000 {
            let s = attention_state(&random_angles(&mut rng));
            assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_angles() {
        let z = AngleSet::default();
        for e in [expectation_pair(&z), expectation_pair_closed_form(&z), expectation_pair_line6(&z)] {
            assert_eq!(e, ExpectationPair { e13: 0.25, e24: 0.25 });
        }
    }

    #[test]
    fn golden_values() {
        let golden = golden_fixture();
        assert!(golden.len() >= 3);
        assert_eq!(golden[0].0.to_array(), [0.3, 0.7, 0.2, 0.5, 0.1, 0.4]);
        for (angles, want) in golden {
            for got in [expectation_pair(&angles), expectation_pair_closed_form(&angles)] {
                assert!((got.e13 - want.e13).abs() < 1e-12, "{got:?} vs {want:?}");
                assert!((got.e24 - want.e24).abs() < 1e-12, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn bounds_over_random_angles() {
        let mut rng = stream(23, &[]);
        for _ in 0..10_000 {
            let e = expectation_pair(&random_angles(&mut rng));
            assert!((-0.75..=0.25 + 1e-12).contains(&e.e13));
            assert!((-0.75..=0.25 + 1e-12).contains(&e.e24));
        }
    }

    #[test]
    fn closed_form_matches_statevector() {
        let mut rng = stream(29, &[]);
        for _ in 0..10_000 {
            let a = random_angles(&mut rng);
            let (s, c) = (expectation_pair(&a), expectation_pair_closed_form(&a));
            assert!((s.e13 - c.e13).abs() < 1e-10 && (s.e24 - c.e24).abs() < 1e-10);
        }
    }

    #[test]
    fn line_layout_matches_and_is_normalised() {
        let mut rng = stream(31, &[]);
        for _ in 0..1000 {
            let a = random_angles(&mut rng);
            let (four, six) = (expectation_pair(&a), expectation_pair_line6(&a));
            assert!((four.e13 - six.e13).abs() < 1e-10 && (four.e24 - six.e24).abs() < 1e-10);
            assert!((line6_state(&a).norm_sqr() - 1.0).abs() < 1e-12);
        }
        for g in line6_gates(&AngleSet::default()) {
            let pair = match g {
                Gate::ZxExp { z, x, .. } => Some((z, x)),
                Gate::Cnot { control, target } => Some((control, target)),
                _ => None,
            };
            if let Some((a, b)) = pair {
                assert_eq!(a.abs_diff(b), 1, "non-adjacent gate {g:?}");
            }
        }
    }

    #[test]
    fn periodicity() {
        let mut rng = stream(37, &[]);
        for _ in 0..200 {
            let a = random_angles(&mut rng);
            let base = expectation_pair(&a);
            for j in 0..6 {
                let mut v = a.to_array();
                v[j] += TAU;
                let e = expectation_pair(&AngleSet::from_array(v));
                assert!((e.e13 - base.e13).abs() < 1e-10 && (e.e24 - base.e24).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn parameter_shift_matches_finite_differences() {
        let mut rng = stream(41, &[]);
        let h = 1e-5;
        for _ in 0..50 {
            let a = random_angles(&mut rng);
            for j in 0..6 {
                for f in [
                    (|x: &AngleSet| expectation_pair(x).e13) as fn(&AngleSet) -> f64,
                    |x: &AngleSet| expectation_pair(x).e24,
                ] {
                    let mut p = a.to_array();
                    let mut m = p;
                    p[j] += h;
                    m[j] -= h;
                    let fd = (f(&AngleSet::from_array(p)) - f(&AngleSet::from_array(m))) / (2.0 * h);
                    let ps = parameter_shift(f, &a, j);
                    assert!((fd - ps).abs() < 1e-6, "angle {j}: fd {fd} ps {ps}");
                }
            }
        }
    }

    #[test]
    fn sampling_zero_angles_z_basis_is_deterministic() {
        let s = attention_state(&AngleSet::default());
        let outcomes = sample_bitstrings(&s, 100, &mut stream(1, &[]));
        assert!(outcomes.iter().all(|&i| i & 0b0101 == 0));
        let e = sample_expectation(&AngleSet::default(), 100, &mut stream(1, &[])).unwrap();
        // Z runs give +1 exactly; X and Y runs are random at zero angles
        assert!(e.e13 > -0.75 && e.e13 <= 0.25 + 1e-12);
    }

    #[test]
    fn sampling_rejects_zero_shots() {
        assert!(matches!(
            sample_expectation(&AngleSet::default(), 0, &mut stream(1, &[])),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn single_shot_estimator_is_unbiased() {
        let a = AngleSet::new([0.3, 0.7, 0.2], [0.5, 0.1, 0.4]);
        let exact = expectation_pair(&a);
        let mut rng = stream(43, &[]);
        let n = 10_000;
        let draws: Vec<ExpectationPair> = (0..n)
            .map(|_| sample_expectation(&a, 1, &mut rng).unwrap())
            .collect();
        for (get, want) in [
            ((|e: &ExpectationPair| e.e13) as fn(&ExpectationPair) -> f64, exact.e13),
            (|e: &ExpectationPair| e.e24, exact.e24),
        ] {
            let mean = draws.iter().map(get).sum::<f64>() / n as f64;
            let var = draws.iter().map(|e| (get(e) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - want).abs() < 3.0 * se, "mean {mean} want {want} se {se}");
        }
    }
}
