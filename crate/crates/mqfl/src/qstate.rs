//! Dense statevector representation and exact gate kernels.
//!
//! A [`StateVector`] over `n` qubits holds all `2^n` complex amplitudes.
//! Qubit 0 is the least-significant bit of the amplitude index, so the basis
//! state with qubit `q` set lives at index `1 << q`. Gates are applied
//! in place with stride-based pair updates; the full `2^n x 2^n` matrix
//! route exists only as the [`dense_unitary`] test oracle.
//!
//! Rotation conventions: `RX(t) = exp(-i t X / 2)` and likewise for RY/RZ.
//! The half-turn generators are what make the +-pi/2 parameter-shift rule in
//! [`crate::autodiff`] exact, so a convention change must touch only
//! [`rotation_matrix`] and the kernels here.

use ndarray::linalg::kron;
use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Largest qubit count the dense oracle will accept.
pub const MAX_ORACLE_QUBITS: usize = 6;

/// The gate vocabulary. `Noop` is an identity placeholder used to keep a
/// missing modality's qubits untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Rx,
    Ry,
    Rz,
    Cnot,
    Noop,
}

/// One gate in a circuit program: a kind, its target qubit(s), and for
/// rotations the slot in the parameter vector holding the angle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateOp {
    kind: GateKind,
    targets: [usize; 2],
    num_targets: usize,
    param_slot: Option<usize>,
}

impl GateOp {
    pub fn rx(qubit: usize, param_slot: usize) -> Self {
        Self::rotation(GateKind::Rx, qubit, param_slot)
    }

    pub fn ry(qubit: usize, param_slot: usize) -> Self {
        Self::rotation(GateKind::Ry, qubit, param_slot)
    }

    pub fn rz(qubit: usize, param_slot: usize) -> Self {
        Self::rotation(GateKind::Rz, qubit, param_slot)
    }

    fn rotation(kind: GateKind, qubit: usize, param_slot: usize) -> Self {
        GateOp {
            kind,
            targets: [qubit, 0],
            num_targets: 1,
            param_slot: Some(param_slot),
        }
    }

    /// Controlled-NOT; control and target must be distinct.
    pub fn cnot(control: usize, target: usize) -> Result<Self> {
        if control == target {
            return Err(Error::structural(format!(
                "cnot control and target must differ, both are {control}"
            )));
        }
        Ok(GateOp {
            kind: GateKind::Cnot,
            targets: [control, target],
            num_targets: 2,
            param_slot: None,
        })
    }

    /// Identity placeholder on one qubit. Carries no parameter.
    pub fn noop(qubit: usize) -> Self {
        GateOp {
            kind: GateKind::Noop,
            targets: [qubit, 0],
            num_targets: 1,
            param_slot: None,
        }
    }

    pub fn kind(&self) -> GateKind {
        self.kind
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets[..self.num_targets]
    }

    pub fn param_slot(&self) -> Option<usize> {
        self.param_slot
    }

    pub fn is_rotation(&self) -> bool {
        matches!(self.kind, GateKind::Rx | GateKind::Ry | GateKind::Rz)
    }

    fn angle(&self, params: &[f64]) -> Result<f64> {
        let slot = self
            .param_slot
            .ok_or_else(|| Error::structural("rotation gate without a parameter slot"))?;
        let theta = *params.get(slot).ok_or_else(|| {
            Error::structural(format!(
                "parameter slot {slot} out of range for {} parameters",
                params.len()
            ))
        })?;
        if !theta.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite rotation angle {theta} in slot {slot}"
            )));
        }
        Ok(theta)
    }
}

/// Dense quantum state over `num_qubits` qubits.
///
/// Amplitudes are stored as double-precision complex numbers; every
/// constructor and unitary keeps the squared 2-norm at 1 within 1e-10.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    num_qubits: usize,
    amps: Vec<Complex64>,
}

impl StateVector {
    /// The all-zeros basis state |0...0>.
    pub fn zero(num_qubits: usize) -> Self {
        let mut amps = vec![ZERO; 1 << num_qubits];
        amps[0] = ONE;
        StateVector { num_qubits, amps }
    }

    /// A computational basis state by amplitude index.
    pub fn basis(num_qubits: usize, index: usize) -> Result<Self> {
        let dim = 1usize << num_qubits;
        if index >= dim {
            return Err(Error::structural(format!(
                "basis index {index} out of range for {num_qubits} qubits"
            )));
        }
        let mut amps = vec![ZERO; dim];
        amps[index] = ONE;
        Ok(StateVector { num_qubits, amps })
    }

    /// Builds a state from raw amplitudes; the length must be `2^num_qubits`
    /// and the squared norm must already be 1 within 1e-10.
    pub fn from_amplitudes(num_qubits: usize, amps: Vec<Complex64>) -> Result<Self> {
        if amps.len() != 1 << num_qubits {
            return Err(Error::structural(format!(
                "expected {} amplitudes for {num_qubits} qubits, got {}",
                1usize << num_qubits,
                amps.len()
            )));
        }
        let state = StateVector { num_qubits, amps };
        let norm = state.norm_sqr();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-10 {
            return Err(Error::numeric(format!(
                "amplitudes are not normalized: |psi|^2 = {norm}"
            )));
        }
        Ok(state)
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    /// Squared 2-norm of the amplitude vector.
    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit >= self.num_qubits {
            return Err(Error::structural(format!(
                "qubit {qubit} out of range for {}-qubit state",
                self.num_qubits
            )));
        }
        Ok(())
    }

    /// Applies one gate in place. `params` supplies rotation angles by slot.
    /// `Noop` leaves the state untouched.
    pub fn apply_gate(&mut self, gate: &GateOp, params: &[f64]) -> Result<()> {
        for &t in gate.targets() {
            self.check_qubit(t)?;
        }
        match gate.kind {
            GateKind::Rx => {
                let theta = gate.angle(params)?;
                let (c, s) = half_angle(theta);
                let m_is = Complex64::new(0.0, -s);
                self.single_qubit_update(gate.targets[0], |a, b| (c * a + m_is * b, m_is * a + c * b));
            }
            GateKind::Ry => {
                let theta = gate.angle(params)?;
                let (c, s) = half_angle(theta);
                self.single_qubit_update(gate.targets[0], |a, b| (c * a - s * b, s * a + c * b));
            }
            GateKind::Rz => {
                let theta = gate.angle(params)?;
                let phase = Complex64::from_polar(1.0, theta / 2.0);
                let conj = phase.conj();
                self.single_qubit_update(gate.targets[0], |a, b| (conj * a, phase * b));
            }
            GateKind::Cnot => {
                let (control, target) = (gate.targets[0], gate.targets[1]);
                let cbit = 1usize << control;
                let tbit = 1usize << target;
                for i in 0..self.amps.len() {
                    if i & cbit != 0 && i & tbit == 0 {
                        self.amps.swap(i, i | tbit);
                    }
                }
            }
            GateKind::Noop => {}
        }
        debug_assert!(
            (self.norm_sqr() - 1.0).abs() < 1e-10,
            "norm drifted after {:?}",
            gate.kind
        );
        Ok(())
    }

    /// Applies `f` to every amplitude pair differing only in bit `qubit`,
    /// with the bit-0 amplitude first.
    fn single_qubit_update<F>(&mut self, qubit: usize, f: F)
    where
        F: Fn(Complex64, Complex64) -> (Complex64, Complex64),
    {
        let step = 1usize << qubit;
        let dim = self.amps.len();
        let mut base = 0;
        while base < dim {
            for offset in base..base + step {
                let lo = offset;
                let hi = offset + step;
                let (a, b) = (self.amps[lo], self.amps[hi]);
                let (na, nb) = f(a, b);
                self.amps[lo] = na;
                self.amps[hi] = nb;
            }
            base += 2 * step;
        }
    }

    /// Pauli-X on one qubit. Used by the stochastic noise trajectory.
    pub fn apply_pauli_x(&mut self, qubit: usize) -> Result<()> {
        self.check_qubit(qubit)?;
        self.single_qubit_update(qubit, |a, b| (b, a));
        Ok(())
    }

    /// Pauli-Y on one qubit.
    pub fn apply_pauli_y(&mut self, qubit: usize) -> Result<()> {
        self.check_qubit(qubit)?;
        let i = Complex64::new(0.0, 1.0);
        let m_i = Complex64::new(0.0, -1.0);
        self.single_qubit_update(qubit, |a, b| (m_i * b, i * a));
        Ok(())
    }

    /// Pauli-Z on one qubit.
    pub fn apply_pauli_z(&mut self, qubit: usize) -> Result<()> {
        self.check_qubit(qubit)?;
        self.single_qubit_update(qubit, |a, b| (a, -b));
        Ok(())
    }

    /// Expectation of the Pauli-Z observable on `qubit`: the signed sum of
    /// squared amplitudes, +1 where the qubit's bit is 0 and -1 where it is 1.
    pub fn expect_pauli_z(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        let bit = 1usize << qubit;
        let mut acc = 0.0;
        for (i, amp) in self.amps.iter().enumerate() {
            let p = amp.norm_sqr();
            if i & bit == 0 {
                acc += p;
            } else {
                acc -= p;
            }
        }
        Ok(acc)
    }
}

fn half_angle(theta: f64) -> (f64, f64) {
    ((theta / 2.0).cos(), (theta / 2.0).sin())
}

/// Tensor product of two states. The second factor occupies the low qubits
/// of the result: `out[i * 2^nb + j] = a[i] * b[j]`.
pub fn tensor_product(a: &StateVector, b: &StateVector) -> StateVector {
    let nb_dim = b.amps.len();
    let mut amps = vec![ZERO; a.amps.len() * nb_dim];
    for (i, &ai) in a.amps.iter().enumerate() {
        if ai == ZERO {
            continue;
        }
        for (j, &bj) in b.amps.iter().enumerate() {
            amps[i * nb_dim + j] = ai * bj;
        }
    }
    StateVector {
        num_qubits: a.num_qubits + b.num_qubits,
        amps,
    }
}

/// Tensor product of a list of registers, with `states[0]` in the lowest
/// qubits and each later register stacked above the previous ones.
pub fn tensor_all(states: &[StateVector]) -> Result<StateVector> {
    let mut iter = states.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::structural("tensor_all needs at least one state"))?;
    let mut acc = first.clone();
    for state in iter {
        acc = tensor_product(state, &acc);
    }
    Ok(acc)
}

/// 2x2 matrix of a rotation gate in the conventions documented at module
/// level. Only meaningful for `Rx`, `Ry`, `Rz`.
pub fn rotation_matrix(kind: GateKind, theta: f64) -> [[Complex64; 2]; 2] {
    let (c, s) = half_angle(theta);
    match kind {
        GateKind::Rx => [
            [Complex64::new(c, 0.0), Complex64::new(0.0, -s)],
            [Complex64::new(0.0, -s), Complex64::new(c, 0.0)],
        ],
        GateKind::Ry => [
            [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
            [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
        ],
        GateKind::Rz => [
            [Complex64::from_polar(1.0, -theta / 2.0), ZERO],
            [ZERO, Complex64::from_polar(1.0, theta / 2.0)],
        ],
        GateKind::Cnot | GateKind::Noop => {
            panic!("rotation_matrix called on non-rotation gate")
        }
    }
}

/// Dense-matrix oracle: multiplies out every gate of the program as an
/// explicit `2^n x 2^n` unitary built from Kronecker embeddings, in circuit
/// order. Kept deliberately independent of the stride kernels so the two
/// routes can check each other. Refuses more than [`MAX_ORACLE_QUBITS`]
/// qubits.
pub fn dense_unitary(
    num_qubits: usize,
    gates: &[GateOp],
    params: &[f64],
) -> Result<Array2<Complex64>> {
    if num_qubits > MAX_ORACLE_QUBITS {
        return Err(Error::structural(format!(
            "dense oracle supports at most {MAX_ORACLE_QUBITS} qubits, got {num_qubits}"
        )));
    }
    let dim = 1usize << num_qubits;
    let mut total = Array2::<Complex64>::eye(dim);
    for gate in gates {
        for &t in gate.targets() {
            if t >= num_qubits {
                return Err(Error::structural(format!(
                    "qubit {t} out of range for {num_qubits}-qubit oracle"
                )));
            }
        }
        let full = match gate.kind() {
            GateKind::Noop => continue,
            GateKind::Cnot => cnot_matrix(num_qubits, gate.targets[0], gate.targets[1]),
            kind => embed_single_qubit(
                num_qubits,
                gate.targets[0],
                rotation_matrix(kind, gate.angle(params)?),
            ),
        };
        total = full.dot(&total);
    }
    Ok(total)
}

/// Embeds a 2x2 unitary acting on bit position `qubit` into the full space:
/// `I_high (x) U (x) I_low` with `I_low` of dimension `2^qubit`.
fn embed_single_qubit(num_qubits: usize, qubit: usize, u: [[Complex64; 2]; 2]) -> Array2<Complex64> {
    let u2 = Array2::from_shape_vec((2, 2), vec![u[0][0], u[0][1], u[1][0], u[1][1]])
        .expect("2x2 shape");
    let low = Array2::<Complex64>::eye(1 << qubit);
    let high = Array2::<Complex64>::eye(1 << (num_qubits - 1 - qubit));
    kron(&high, &kron(&u2, &low))
}

fn cnot_matrix(num_qubits: usize, control: usize, target: usize) -> Array2<Complex64> {
    let dim = 1usize << num_qubits;
    let cbit = 1usize << control;
    let tbit = 1usize << target;
    let mut m = Array2::<Complex64>::zeros((dim, dim));
    for col in 0..dim {
        let row = if col & cbit != 0 { col ^ tbit } else { col };
        m[(row, col)] = ONE;
    }
    m
}
