//! Dense state-vector simulator used to check the symbolic measurement and
//! EPR semantics numerically.
//!
//! Wire 0 is the most significant bit of a basis index.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

pub const TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("gate matrix is not unitary")]
    NonUnitary,
    #[error("wire {wire} out of range for {wires} wires")]
    WireOutOfRange { wire: usize, wires: usize },
    #[error("measurement operators do not satisfy completeness")]
    IncompleteOperators,
    #[error("state is not normalized (norm² = {0})")]
    NotNormalized(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("validation failed: {0}")]
    ValidationFailure(String),
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Square complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<Complex64>,
}

impl Matrix {
    pub fn new(dim: usize, data: Vec<Complex64>) -> Result<Self, OracleError> {
        if data.len() != dim * dim {
            return Err(OracleError::DimensionMismatch {
                expected: dim * dim,
                got: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn real(dim: usize, data: &[f64]) -> Result<Self, OracleError> {
        Self::new(dim, data.iter().map(|&x| c(x, 0.0)).collect())
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![c(0.0, 0.0); dim * dim];
        for i in 0..dim {
            data[i * dim + i] = c(1.0, 0.0);
        }
        Self { dim, data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![c(0.0, 0.0); dim * dim],
        }
    }

    /// `|v⟩⟨v|`.
    pub fn projector(v: &[Complex64]) -> Self {
        let dim = v.len();
        let mut data = Vec::with_capacity(dim * dim);
        for a in v {
            for b in v {
                data.push(a * b.conj());
            }
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, r: usize, col: usize) -> Complex64 {
        self.data[r * self.dim + col]
    }

    pub fn adjoint(&self) -> Self {
        let n = self.dim;
        let mut data = vec![c(0.0, 0.0); n * n];
        for r in 0..n {
            for col in 0..n {
                data[col * n + r] = self.data[r * n + col].conj();
            }
        }
        Self { dim: n, data }
    }

    pub fn mul(&self, other: &Matrix) -> Self {
        let n = self.dim;
        let mut data = vec![c(0.0, 0.0); n * n];
        for r in 0..n {
            for k in 0..n {
                let a = self.data[r * n + k];
                if a == c(0.0, 0.0) {
                    continue;
                }
                for col in 0..n {
                    data[r * n + col] += a * other.data[k * n + col];
                }
            }
        }
        Self { dim: n, data }
    }

    pub fn add(&self, other: &Matrix) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.dim)
            .map(|r| (0..self.dim).map(|k| self.data[r * self.dim + k] * v[k]).sum())
            .collect()
    }

    pub fn approx_eq(&self, other: &Matrix, tol: f64) -> bool {
        self.dim == other.dim && self.data.iter().zip(&other.data).all(|(a, b)| (a - b).norm() <= tol)
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.adjoint().mul(self).approx_eq(&Matrix::identity(self.dim), tol)
    }

    /// Embeds a single-wire operator acting on `wire` of a `wires`-wire system.
    pub fn on_wire(op: &Matrix, wire: usize, wires: usize) -> Result<Matrix, OracleError> {
        if wire >= wires {
            return Err(OracleError::WireOutOfRange { wire, wires });
        }
        let dim = 1usize << wires;
        let shift = wires - 1 - wire;
        let mut out = Matrix::zeros(dim);
        for r in 0..dim {
            for col in 0..dim {
                if (r & !(1 << shift)) != (col & !(1 << shift)) {
                    continue;
                }
                let rb = (r >> shift) & 1;
                let cb = (col >> shift) & 1;
                out.data[r * dim + col] = op.get(rb, cb);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    wires: usize,
    amplitudes: Vec<Complex64>,
}

impl StateVector {
    pub fn basis(wires: usize, index: usize) -> Self {
        let mut amplitudes = vec![c(0.0, 0.0); 1 << wires];
        amplitudes[index] = c(1.0, 0.0);
        Self { wires, amplitudes }
    }

    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self, OracleError> {
        let len = amplitudes.len();
        if !len.is_power_of_two() || len < 2 {
            return Err(OracleError::DimensionMismatch {
                expected: len.next_power_of_two().max(2),
                got: len,
            });
        }
        let s = Self {
            wires: len.trailing_zeros() as usize,
            amplitudes,
        };
        let n = s.norm_sqr();
        if (n - 1.0).abs() > TOLERANCE {
            return Err(OracleError::NotNormalized(n));
        }
        Ok(s)
    }

    pub fn real(amps: &[f64]) -> Result<Self, OracleError> {
        Self::from_amplitudes(amps.iter().map(|&x| c(x, 0.0)).collect())
    }

    pub fn wires(&self) -> usize {
        self.wires
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn inner(&self, other: &StateVector) -> Complex64 {
        self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| a.conj() * b).sum()
    }

    /// `|⟨self|other⟩|²`.
    pub fn overlap(&self, other: &StateVector) -> f64 {
        self.inner(other).norm_sqr()
    }

    pub fn approx_eq(&self, other: &StateVector, tol: f64) -> bool {
        self.wires == other.wires
            && self
                .amplitudes
                .iter()
                .zip(&other.amplitudes)
                .all(|(a, b)| (a - b).norm() <= tol)
    }

    /// Equal up to a global phase.
    pub fn same_ray(&self, other: &StateVector, tol: f64) -> bool {
        self.wires == other.wires && (self.overlap(other) - 1.0).abs() <= tol
    }
}

impl fmt::Display for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (i, a) in self.amplitudes.iter().enumerate() {
            if a.norm() <= TOLERANCE {
                continue;
            }
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            let ket: String = (0..self.wires)
                .map(|w| if i >> (self.wires - 1 - w) & 1 == 1 { '1' } else { '0' })
                .collect();
            if a.im.abs() <= TOLERANCE {
                write!(f, "{:.6}|{ket}⟩", a.re)?;
            } else {
                write!(f, "({:.6}{:+.6}i)|{ket}⟩", a.re, a.im)?;
            }
        }
        if first {
            write!(f, "0")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    matrix: Matrix,
    wires: Vec<usize>,
}

impl Gate {
    pub fn new(matrix: Matrix, wires: Vec<usize>) -> Result<Self, OracleError> {
        let expected = 1usize << wires.len();
        if matrix.dim() != expected {
            return Err(OracleError::DimensionMismatch {
                expected,
                got: matrix.dim(),
            });
        }
        if !matrix.is_unitary(TOLERANCE) {
            return Err(OracleError::NonUnitary);
        }
        Ok(Self { matrix, wires })
    }

    pub fn hadamard(wire: usize) -> Self {
        let h = FRAC_1_SQRT_2;
        Self {
            matrix: Matrix::real(2, &[h, h, h, -h]).unwrap(),
            wires: vec![wire],
        }
    }

    pub fn pauli_x(wire: usize) -> Self {
        Self {
            matrix: Matrix::real(2, &[0.0, 1.0, 1.0, 0.0]).unwrap(),
            wires: vec![wire],
        }
    }

    pub fn pauli_z(wire: usize) -> Self {
        Self {
            matrix: Matrix::real(2, &[1.0, 0.0, 0.0, -1.0]).unwrap(),
            wires: vec![wire],
        }
    }

    pub fn phase(wire: usize, theta: f64) -> Self {
        Self {
            matrix: Matrix::new(
                2,
                vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), Complex64::from_polar(1.0, theta)],
            )
            .unwrap(),
            wires: vec![wire],
        }
    }

    pub fn cnot(control: usize, target: usize) -> Self {
        let mut m = [0.0; 16];
        m[0] = 1.0;
        m[5] = 1.0;
        m[11] = 1.0;
        m[14] = 1.0;
        Self {
            matrix: Matrix::real(4, &m).unwrap(),
            wires: vec![control, target],
        }
    }

    pub fn wires(&self) -> &[usize] {
        &self.wires
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

pub fn apply_gate(s: &StateVector, g: &Gate) -> Result<StateVector, OracleError> {
    for &w in &g.wires {
        if w >= s.wires {
            return Err(OracleError::WireOutOfRange { wire: w, wires: s.wires });
        }
    }
    if !g.matrix.is_unitary(TOLERANCE) {
        return Err(OracleError::NonUnitary);
    }
    let k = g.wires.len();
    let shifts: Vec<usize> = g.wires.iter().map(|w| s.wires - 1 - w).collect();
    let mask: usize = shifts.iter().map(|sh| 1usize << sh).sum();
    let mut out = vec![c(0.0, 0.0); s.amplitudes.len()];
    for (i, amp) in s.amplitudes.iter().enumerate() {
        if amp.norm() == 0.0 {
            continue;
        }
        let local_in = shifts
            .iter()
            .fold(0usize, |acc, sh| (acc << 1) | ((i >> sh) & 1));
        for local_out in 0..(1usize << k) {
            let m = g.matrix.get(local_out, local_in);
            if m.norm() == 0.0 {
                continue;
            }
            let mut j = i & !mask;
            for (pos, sh) in shifts.iter().enumerate() {
                if (local_out >> (k - 1 - pos)) & 1 == 1 {
                    j |= 1 << sh;
                }
            }
            out[j] += m * amp;
        }
    }
    Ok(StateVector {
        wires: s.wires,
        amplitudes: out,
    })
}

pub fn apply_circuit(s: &StateVector, gates: &[Gate]) -> Result<StateVector, OracleError> {
    gates.iter().try_fold(s.clone(), |acc, g| apply_gate(&acc, g))
}

/// Measurement operator on the full state space, labelled by its outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    pub outcome: String,
    pub matrix: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub probability: f64,
    /// Absent for zero-probability outcomes.
    pub post_state: Option<StateVector>,
}

pub fn measure_outcome_distribution(
    s: &StateVector,
    operators: &[MeasurementOperator],
) -> Result<BTreeMap<String, Outcome>, OracleError> {
    let dim = s.amplitudes.len();
    let mut sum = Matrix::zeros(dim);
    for op in operators {
        if op.matrix.dim() != dim {
            return Err(OracleError::DimensionMismatch {
                expected: dim,
                got: op.matrix.dim(),
            });
        }
        sum = sum.add(&op.matrix.adjoint().mul(&op.matrix));
    }
    if !sum.approx_eq(&Matrix::identity(dim), TOLERANCE) {
        return Err(OracleError::IncompleteOperators);
    }
    let mut out = BTreeMap::new();
    for op in operators {
        let v = op.matrix.apply(&s.amplitudes);
        let p: f64 = v.iter().map(|a| a.norm_sqr()).sum();
        let post_state = (p > TOLERANCE).then(|| StateVector {
            wires: s.wires,
            amplitudes: v.iter().map(|a| a / p.sqrt()).collect(),
        });
        let entry = out.entry(op.outcome.clone()).or_insert(Outcome {
            probability: 0.0,
            post_state: None,
        });
        entry.probability += p;
        if entry.post_state.is_none() {
            entry.post_state = post_state;
        }
    }
    Ok(out)
}

/// A single-qubit orthonormal basis with outcome labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Basis {
    Computational,
    Hadamard,
}

impl Basis {
    pub const BOTH: [Basis; 2] = [Basis::Computational, Basis::Hadamard];

    /// `|0⟩, |1⟩` or `|+⟩, |−⟩`.
    pub fn vector(self, bit: usize) -> [Complex64; 2] {
        let h = FRAC_1_SQRT_2;
        match (self, bit) {
            (Basis::Computational, 0) => [c(1.0, 0.0), c(0.0, 0.0)],
            (Basis::Computational, _) => [c(0.0, 0.0), c(1.0, 0.0)],
            (Basis::Hadamard, 0) => [c(h, 0.0), c(h, 0.0)],
            (Basis::Hadamard, _) => [c(h, 0.0), c(-h, 0.0)],
        }
    }

    pub fn encode(self, bit: usize) -> StateVector {
        StateVector {
            wires: 1,
            amplitudes: self.vector(bit).to_vec(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Basis::Computational => "+",
            Basis::Hadamard => "x",
        }
    }

    /// Projective measurement of `wire` in this basis, outcomes "0" and "1".
    pub fn operators(self, wire: usize, wires: usize) -> Result<Vec<MeasurementOperator>, OracleError> {
        (0..2)
            .map(|bit| {
                let p = Matrix::projector(&self.vector(bit));
                Ok(MeasurementOperator {
                    outcome: bit.to_string(),
                    matrix: Matrix::on_wire(&p, wire, wires)?,
                })
            })
            .collect()
    }
}

/// Hadamard on wire 0 then CNOT(0 → 1) applied to `|input⟩`, `input` in 0..4.
pub fn bell_circuit(input: usize) -> StateVector {
    let s = StateVector::basis(2, input & 3);
    apply_circuit(&s, &[Gate::hadamard(0), Gate::cnot(0, 1)]).expect("fixed two-wire circuit")
}

/// Expected Bell-basis images as `(input, label, amplitudes over |00⟩..|11⟩)`.
pub fn bell_mappings() -> [(usize, &'static str, [f64; 4]); 4] {
    let h = FRAC_1_SQRT_2;
    [
        (0b00, "Psi+", [h, 0.0, 0.0, h]),
        (0b01, "Phi+", [0.0, h, h, 0.0]),
        (0b10, "Psi-", [h, 0.0, 0.0, -h]),
        (0b11, "Phi-", [0.0, h, -h, 0.0]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn into_result(self) -> Result<ValidationReport, OracleError> {
        match self.checks.iter().find(|c| !c.passed) {
            Some(c) => Err(OracleError::ValidationFailure(c.name.clone())),
            None => Ok(self),
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "[{}] {}: {}",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}

fn prob(dist: &BTreeMap<String, Outcome>, outcome: &str) -> f64 {
    dist.get(outcome).map_or(0.0, |o| o.probability)
}

/// Checks the three facts the symbolic semantics rests on.
pub fn validate_symbolic_semantics() -> Result<ValidationReport, OracleError> {
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for basis in Basis::BOTH {
        for bit in 0..2 {
            let dist = measure_outcome_distribution(&basis.encode(bit), &basis.operators(0, 1)?)?;
            worst = worst.max((prob(&dist, &bit.to_string()) - 1.0).abs());
        }
    }
    checks.push(Check {
        name: "matching-basis determinism".into(),
        passed: worst <= TOLERANCE,
        detail: format!("max |p(d) - 1| = {worst:.3e}"),
    });

    let mut worst = 0.0f64;
    for basis in Basis::BOTH {
        let other = match basis {
            Basis::Computational => Basis::Hadamard,
            Basis::Hadamard => Basis::Computational,
        };
        for bit in 0..2 {
            let dist = measure_outcome_distribution(&basis.encode(bit), &other.operators(0, 1)?)?;
            for o in ["0", "1"] {
                worst = worst.max((prob(&dist, o) - 0.5).abs());
            }
        }
    }
    checks.push(Check {
        name: "wrong-basis uniformity".into(),
        passed: worst <= TOLERANCE,
        detail: format!("max |p - 1/2| = {worst:.3e}"),
    });

    let bell = bell_circuit(0b11);
    let mut worst = 0.0f64;
    for basis in Basis::BOTH {
        let alice = measure_outcome_distribution(&bell, &basis.operators(0, 2)?)?;
        for (a, outcome) in &alice {
            let Some(post) = &outcome.post_state else {
                continue;
            };
            let bob = measure_outcome_distribution(post, &basis.operators(1, 2)?)?;
            let opposite = if a == "0" { "1" } else { "0" };
            worst = worst.max((prob(&bob, opposite) - 1.0).abs());
        }
    }
    checks.push(Check {
        name: "EPR anti-correlation".into(),
        passed: worst <= TOLERANCE,
        detail: format!("max |p(opposite | a) - 1| = {worst:.3e}"),
    });

    Ok(ValidationReport { checks })
}

/// Joint outcome distribution of measuring both wires of a two-wire state in
/// the computational basis.
pub fn joint_distribution(s: &StateVector) -> BTreeMap<(usize, usize), f64> {
    let mut out = BTreeMap::new();
    for (i, a) in s.amplitudes.iter().enumerate() {
        let p = a.norm_sqr();
        if p > TOLERANCE {
            out.insert((i >> 1 & 1, i & 1), p);
        }
    }
    out
}

/// True when no single protocol basis identifies all four BB84 states with
/// certainty.
pub fn bb84_states_indistinguishable() -> Result<bool, OracleError> {
    let states: Vec<StateVector> = Basis::BOTH
        .iter()
        .flat_map(|b| (0..2).map(move |bit| b.encode(bit)))
        .collect();
    for basis in Basis::BOTH {
        let ops = basis.operators(0, 1)?;
        let mut outcomes = Vec::new();
        let mut all_certain = true;
        for s in &states {
            let dist = measure_outcome_distribution(s, &ops)?;
            match dist.iter().find(|(_, o)| (o.probability - 1.0).abs() <= TOLERANCE) {
                Some((label, _)) => outcomes.push(label.clone()),
                None => all_certain = false,
            }
        }
        outcomes.sort();
        outcomes.dedup();
        if all_certain && outcomes.len() == states.len() {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hadamard_examples() {
        let h = FRAC_1_SQRT_2;
        let plus = apply_gate(&StateVector::basis(1, 0), &Gate::hadamard(0)).unwrap();
        assert!(plus.approx_eq(&StateVector::real(&[h, h]).unwrap(), TOLERANCE));
        let minus = apply_gate(&StateVector::basis(1, 1), &Gate::hadamard(0)).unwrap();
        assert!(minus.approx_eq(&StateVector::real(&[h, -h]).unwrap(), TOLERANCE));
        let back = apply_gate(&plus, &Gate::hadamard(0)).unwrap();
        assert!(back.approx_eq(&StateVector::basis(1, 0), TOLERANCE));
    }

    #[test]
    fn gate_errors() {
        assert_eq!(
            apply_gate(&StateVector::basis(1, 0), &Gate::hadamard(1)),
            Err(OracleError::WireOutOfRange { wire: 1, wires: 1 })
        );
        let m = Matrix::real(2, &[1.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(Gate::new(m, vec![0]), Err(OracleError::NonUnitary));
    }

    #[test]
    fn measurement_examples() {
        let plus = Basis::Hadamard.encode(0);
        let dist = measure_outcome_distribution(&plus, &Basis::Computational.operators(0, 1).unwrap()).unwrap();
        assert!((prob(&dist, "0") - 0.5).abs() <= TOLERANCE);
        assert!((prob(&dist, "1") - 0.5).abs() <= TOLERANCE);

        let zero = StateVector::basis(1, 0);
        let dist = measure_outcome_distribution(&zero, &Basis::Computational.operators(0, 1).unwrap()).unwrap();
        assert!((prob(&dist, "0") - 1.0).abs() <= TOLERANCE);
    }

    #[test]
    fn incomplete_operators_rejected() {
        let ops = &Basis::Computational.operators(0, 1).unwrap()[..1];
        assert_eq!(
            measure_outcome_distribution(&StateVector::basis(1, 0), ops),
            Err(OracleError::IncompleteOperators)
        );
    }

    #[test]
    fn bell_state_alice_measurement() {
        let bell = bell_circuit(0b11);
        let dist = measure_outcome_distribution(&bell, &Basis::Computational.operators(0, 2).unwrap()).unwrap();
        assert!((dist["0"].probability - 0.5).abs() <= TOLERANCE);
        assert!((dist["1"].probability - 0.5).abs() <= TOLERANCE);
        let post0 = dist["0"].post_state.as_ref().unwrap();
        let post1 = dist["1"].post_state.as_ref().unwrap();
        assert!(post0.same_ray(&StateVector::basis(2, 0b01), TOLERANCE));
        assert!(post1.same_ray(&StateVector::basis(2, 0b10), TOLERANCE));
    }

    #[test]
    fn bell_joint_distribution() {
        let joint = joint_distribution(&bell_circuit(0b11));
        assert_eq!(joint.len(), 2);
        assert!((joint[&(0, 1)] - 0.5).abs() <= TOLERANCE);
        assert!((joint[&(1, 0)] - 0.5).abs() <= TOLERANCE);
    }

    #[test]
    fn basis_encodings_round_trip() {
        let one_x = Basis::Hadamard.encode(1);
        let dist = measure_outcome_distribution(&one_x, &Basis::Hadamard.operators(0, 1).unwrap()).unwrap();
        assert!((prob(&dist, "1") - 1.0).abs() <= TOLERANCE);
        let zero_plus = Basis::Computational.encode(0);
        let dist = measure_outcome_distribution(&zero_plus, &Basis::Hadamard.operators(0, 1).unwrap()).unwrap();
        assert!((prob(&dist, "0") - 0.5).abs() <= TOLERANCE);
    }

    #[test]
    fn gram_and_indistinguishability() {
        let overlap = Basis::Hadamard.encode(0).overlap(&Basis::Computational.encode(0));
        assert!((overlap - 0.5).abs() <= TOLERANCE);
        assert!(bb84_states_indistinguishable().unwrap());
    }
}
