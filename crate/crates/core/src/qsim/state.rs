use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::math;
use crate::{Error, Result};

/// Gates used by the attention circuits. Qubit operands are 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    /// `exp(-i angle Y / 2)`
    Ry { qubit: usize, angle: f64 },
    /// `exp(-i angle X / 2)`; only used for Y-basis readout.
    Rx { qubit: usize, angle: f64 },
    /// `exp(-i angle Z_z X_x)`
    ZxExp { z: usize, x: usize, angle: f64 },
    Cnot { control: usize, target: usize },
}

/// A pure state of `m` qubits.
///
/// Amplitudes are little-endian: qubit `q` is bit `q` of the amplitude
/// index, so for two qubits the index of `|q0 q1>` is `q0 + 2 q1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    n_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl PureState {
    /// `|0...0>`
    pub fn zero(n_qubits: usize) -> Self {
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Self {
            n_qubits,
            amplitudes,
        }
    }

    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let len = amplitudes.len();
        if len == 0 || !len.is_power_of_two() {
            return Err(Error::Argument(format!("{len} amplitudes is not a power of two")));
        }
        let norm = amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::Argument(format!("state norm {norm} is not 1")));
        }
        Ok(Self {
            n_qubits: len.trailing_zeros() as usize,
            amplitudes,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// `self ⊗ other` with `self` on the low qubits.
    pub fn tensor(&self, other: &PureState) -> PureState {
        let low = self.amplitudes.len();
        let mut amplitudes = Vec::with_capacity(low * other.amplitudes.len());
        for b in &other.amplitudes {
            for a in &self.amplitudes {
                amplitudes.push(a * b);
            }
        }
        PureState {
            n_qubits: self.n_qubits + other.n_qubits,
            amplitudes,
        }
    }

    fn check_qubit(&self, q: usize) -> Result<()> {
        if q >= self.n_qubits {
            return Err(Error::Argument(format!(
                "qubit {q} out of range for a {}-qubit state",
                self.n_qubits
            )));
        }
        Ok(())
    }

    pub fn apply(&mut self, gate: &Gate) -> Result<()> {
        match *gate {
            Gate::Ry { qubit, angle } => {
                self.check_qubit(qubit)?;
                let (s, c) = (math::sin(angle / 2.0), math::cos(angle / 2.0));
                self.single_qubit(qubit, [[c.into(), (-s).into()], [s.into(), c.into()]]);
            }
            Gate::Rx { qubit, angle } => {
                self.check_qubit(qubit)?;
                let (s, c) = (math::sin(angle / 2.0), math::cos(angle / 2.0));
                let mis = Complex64::new(0.0, -s);
                self.single_qubit(qubit, [[c.into(), mis], [mis, c.into()]]);
            }
            Gate::ZxExp { z, x, angle } => {
                self.check_pair(z, x)?;
                let (s, c) = (math::sin(angle), math::cos(angle));
                let old = self.amplitudes.clone();
                for (i, amp) in self.amplitudes.iter_mut().enumerate() {
                    let sign = if i >> z & 1 == 1 { -1.0 } else { 1.0 };
                    *amp = old[i] * c + old[i ^ (1 << x)] * Complex64::new(0.0, -s * sign);
                }
            }
            Gate::Cnot { control, target } => {
                self.check_pair(control, target)?;
                for i in 0..self.amplitudes.len() {
                    if i >> control & 1 == 1 && i >> target & 1 == 0 {
                        self.amplitudes.swap(i, i | 1 << target);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn apply_all<'a>(&mut self, gates: impl IntoIterator<Item = &'a Gate>) -> Result<()> {
        gates.into_iter().try_for_each(|g| self.apply(g))
    }

    fn check_pair(&self, a: usize, b: usize) -> Result<()> {
        self.check_qubit(a)?;
        self.check_qubit(b)?;
        if a == b {
            return Err(Error::Argument(format!("two-qubit operation on qubit {a} twice")));
        }
        Ok(())
    }

    fn single_qubit(&mut self, q: usize, m: [[Complex64; 2]; 2]) {
        let bit = 1 << q;
        for i in 0..self.amplitudes.len() {
            if i & bit == 0 {
                let (a0, a1) = (self.amplitudes[i], self.amplitudes[i | bit]);
                self.amplitudes[i] = m[0][0] * a0 + m[0][1] * a1;
                self.amplitudes[i | bit] = m[1][0] * a0 + m[1][1] * a1;
            }
        }
    }

    /// `<P_a P_b>` for `P` in X, Y, Z.
    fn pauli_pair(&self, a: usize, b: usize) -> [f64; 3] {
        let flip = (1 << a) | (1 << b);
        let (mut xx, mut yy, mut zz) = (0.0, 0.0, 0.0);
        for (i, amp) in self.amplitudes.iter().enumerate() {
            let parity = if ((i >> a) ^ (i >> b)) & 1 == 1 { -1.0 } else { 1.0 };
            let partner = self.amplitudes[i ^ flip];
            let overlap = (amp.conj() * partner).re;
            zz += parity * amp.norm_sqr();
            xx += overlap;
            yy -= parity * overlap;
        }
        [xx, yy, zz]
    }

    /// `<S_a · S_b> = <X_a X_b + Y_a Y_b + Z_a Z_b> / 4`.
    pub fn spin_spin(&self, a: usize, b: usize) -> Result<f64> {
        self.check_pair(a, b)?;
        let [xx, yy, zz] = self.pauli_pair(a, b);
        Ok((xx + yy + zz) / 4.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;
    use std::vec::Vec;

    use rand::Rng;

    fn random_state(n: usize, seed: u64) -> PureState {
        let mut rng = crate::rng::stream(seed, &[]);
        let mut amps: Vec<Complex64> = (0..1 << n)
            .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect();
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        amps.iter_mut().for_each(|a| *a /= norm);
        PureState::from_amplitudes(amps).unwrap()
    }

    /// Dense `2^n x 2^n` matrix of `P_a P_b`.
    fn dense_pauli_pair(n: usize, a: usize, b: usize, p: u8) -> Vec<Vec<Complex64>> {
        let i = Complex64::new(0.0, 1.0);
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        let single = |p: u8| -> [[Complex64; 2]; 2] {
            match p {
                b'X' => [[zero, one], [one, zero]],
                b'Y' => [[zero, -i], [i, zero]],
                _ => [[one, zero], [zero, -one]],
            }
        };
        let dim = 1 << n;
        let mut m = std::vec![std::vec![zero; dim]; dim];
        for (row, mrow) in m.iter_mut().enumerate() {
            for (col, entry) in mrow.iter_mut().enumerate() {
                let mut v = one;
                for q in 0..n {
                    let (r, c) = (row >> q & 1, col >> q & 1);
                    v *= if q == a || q == b {
                        single(p)[r][c]
                    } else if r == c {
                        one
                    } else {
                        zero
                    };
                }
                *entry = v;
            }
        }
        m
    }

    fn dense_spin_spin(state: &PureState, a: usize, b: usize) -> f64 {
        let n = state.n_qubits();
        let psi = state.amplitudes();
        let mut total = 0.0;
        for p in [b'X', b'Y', b'Z'] {
            let m = dense_pauli_pair(n, a, b, p);
            for (r, row) in m.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    total += (psi[r].conj() * v * psi[c]).re;
                }
            }
        }
        total / 4.0
    }

    #[test]
    fn triplet_and_singlet() {
        let s = PureState::zero(2);
        assert!((s.spin_spin(0, 1).unwrap() - 0.25).abs() < 1e-15);
        let h = core::f64::consts::FRAC_1_SQRT_2;
        let singlet = PureState::from_amplitudes(std::vec![
            0.0.into(),
            h.into(),
            (-h).into(),
            0.0.into()
        ])
        .unwrap();
        assert!((singlet.spin_spin(0, 1).unwrap() + 0.75).abs() < 1e-15);
    }

    #[test]
    fn spin_spin_errors() {
        let s = PureState::zero(2);
        assert!(matches!(s.spin_spin(0, 2), Err(Error::Argument(_))));
        assert!(matches!(s.spin_spin(1, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn spin_spin_matches_dense_operator() {
        for seed in 0..20 {
            let s = random_state(4, seed);
            for (a, b) in [(0, 2), (1, 3), (0, 1), (3, 2)] {
                let fast = s.spin_spin(a, b).unwrap();
                let dense = dense_spin_spin(&s, a, b);
                assert!((fast - dense).abs() < 1e-12, "{fast} vs {dense}");
            }
        }
    }

    #[test]
    fn little_endian_ordering() {
        let mut s = PureState::zero(3);
        s.apply(&Gate::Ry { qubit: 1, angle: PI }).unwrap();
        // |0 1 0> -> index 2
        assert!((s.amplitudes()[2].norm_sqr() - 1.0).abs() < 1e-15);
        s.apply(&Gate::Cnot { control: 1, target: 2 }).unwrap();
        assert!((s.amplitudes()[6].norm_sqr() - 1.0).abs() < 1e-15);
        let t = PureState::zero(1).tensor(&s);
        assert!((t.amplitudes()[12].norm_sqr() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn readout_rotations() {
        // Ry(-pi/2) maps X to Z, Rx(pi/2) maps Y to Z (Heisenberg picture).
        let s = random_state(2, 99);
        let [xx, yy, _] = s.pauli_pair(0, 1);
        let mut x = s.clone();
        x.apply(&Gate::Ry { qubit: 0, angle: -PI / 2.0 }).unwrap();
        x.apply(&Gate::Ry { qubit: 1, angle: -PI / 2.0 }).unwrap();
        assert!((x.pauli_pair(0, 1)[2] - xx).abs() < 1e-12);
        let mut y = s.clone();
        y.apply(&Gate::Rx { qubit: 0, angle: PI / 2.0 }).unwrap();
        y.apply(&Gate::Rx { qubit: 1, angle: PI / 2.0 }).unwrap();
        assert!((y.pauli_pair(0, 1)[2] - yy).abs() < 1e-12);
    }

    #[test]
    fn gates_preserve_norm() {
        let mut s = random_state(4, 5);
        let gates = [
            Gate::Ry { qubit: 0, angle: 0.3 },
            Gate::Rx { qubit: 3, angle: -1.3 },
            Gate::ZxExp { z: 2, x: 0, angle: 0.77 },
            Gate::Cnot { control: 3, target: 1 },
        ];
        s.apply_all(&gates).unwrap();
        assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
        assert!(s.apply(&Gate::Cnot { control: 1, target: 1 }).is_err());
        assert!(s.apply(&Gate::Ry { qubit: 4, angle: 0.0 }).is_err());
    }
}
