//! Dense Fock-space statevector engine.
//!
//! Stands in for the quantum processor at desk scale: prepares trial
//! superposition states, applies fermionic Gaussian unitaries defined by
//! orthogonal Majorana rotations, samples computational-basis
//! measurements, and provides the exact-diagonalization oracle used by
//! the acceptance tests.
//!
//! Bit conventions, shared by every module: qubit j is bit j of the
//! integer basis index (orbital 0 = least significant bit); printed
//! bitstrings put orbital 0 leftmost. Basis kets are ordered creation
//! strings |b⟩ = (a†_0)^{b_0}(a†_1)^{b_1}···|vac⟩. Majorana operators are
//! γ_{2j} = a_j + a†_j and γ_{2j+1} = -i(a_j - a†_j).

use crate::integrals::{interleave_spin, CholeskyHamiltonian, IntegralSet};
use crate::{CMat, Complex64, RMat};
use rand::Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FocksimError {
    #[error("state is not normalized: |norm - 1| = {0:.3e}")]
    NotNormalized(f64),
    #[error("amplitude support outside the {eta}-electron sector at basis state {bitstring}")]
    SectorViolation { eta: usize, bitstring: String },
    #[error("matrix is not orthogonal: residual {0:.3e}")]
    InvalidRotation(f64),
    #[error("determinant is -1; improper rotations are not matchgate circuits")]
    UnsupportedParity,
    #[error("system too large for the dense oracle: {n_qubits} qubits exceeds {max}")]
    Capacity { n_qubits: usize, max: usize },
    #[error("invalid electron sector: {0}")]
    Sector(String),
    #[error("malformed amplitude file at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Dense maximum for exact diagonalization and unitary construction.
pub const DENSE_QUBIT_BUDGET: usize = 14;

/// A state vector over 2^N bitstrings.
#[derive(Debug, Clone)]
pub struct FockState {
    pub n_qubits: usize,
    pub amps: Vec<Complex64>,
}

impl FockState {
    pub fn new(n_qubits: usize, amps: Vec<Complex64>) -> Result<Self, FocksimError> {
        assert_eq!(amps.len(), 1 << n_qubits);
        let state = FockState { n_qubits, amps };
        let norm = state.norm();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(FocksimError::NotNormalized((norm - 1.0).abs()));
        }
        Ok(state)
    }

    /// Unnormalized construction for intermediate vectors.
    pub fn raw(n_qubits: usize, amps: Vec<Complex64>) -> Self {
        assert_eq!(amps.len(), 1 << n_qubits);
        FockState { n_qubits, amps }
    }

    pub fn vacuum(n_qubits: usize) -> Self {
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amps[0] = Complex64::new(1.0, 0.0);
        FockState { n_qubits, amps }
    }

    pub fn basis_state(n_qubits: usize, index: u64) -> Self {
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amps[index as usize] = Complex64::new(1.0, 0.0);
        FockState { n_qubits, amps }
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn normalize(&mut self) {
        let n = self.norm();
        if n > 0.0 {
            for a in &mut self.amps {
                *a /= n;
            }
        }
    }

    /// ⟨self|other⟩.
    pub fn inner(&self, other: &FockState) -> Complex64 {
        debug_assert_eq!(self.n_qubits, other.n_qubits);
        self.amps
            .iter()
            .zip(other.amps.iter())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// Samples a bitstring with Born probabilities |⟨b|ψ⟩|².
    pub fn measure<R: Rng>(&self, rng: &mut R) -> u64 {
        let x: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, a) in self.amps.iter().enumerate() {
            acc += a.norm_sqr();
            if x < acc {
                return i as u64;
            }
        }
        (self.amps.len() - 1) as u64
    }
}

/// Formats a basis index with orbital 0 as the leftmost character.
pub fn bitstring_to_string(index: u64, n_qubits: usize) -> String {
    (0..n_qubits)
        .map(|j| if index >> j & 1 == 1 { '1' } else { '0' })
        .collect()
}

/// Parses a bitstring with orbital 0 leftmost.
pub fn parse_bitstring(s: &str) -> Result<(u64, usize), String> {
    let mut index = 0u64;
    let mut n = 0usize;
    for (j, c) in s.chars().enumerate() {
        match c {
            '0' => {}
            '1' => index |= 1 << j,
            _ => return Err(format!("invalid bitstring character '{c}'")),
        }
        n = j + 1;
    }
    if n == 0 {
        return Err("empty bitstring".into());
    }
    Ok((index, n))
}

pub mod ops {
    //! Sparse second-quantized operator applications on dense state vectors.

    use super::*;

    /// JW sign (-1)^(number of occupied orbitals below j).
    #[inline]
    fn jw_sign(index: u64, j: usize) -> f64 {
        let mask = (1u64 << j) - 1;
        if (index & mask).count_ones().is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }

    /// out += coeff * a†_j |state⟩
    pub fn add_creation(out: &mut [Complex64], state: &[Complex64], j: usize, coeff: Complex64) {
        let bit = 1u64 << j;
        for (i, &a) in state.iter().enumerate() {
            if a == Complex64::new(0.0, 0.0) {
                continue;
            }
            let i = i as u64;
            if i & bit == 0 {
                out[(i | bit) as usize] += coeff * jw_sign(i, j) * a;
            }
        }
    }

    /// out += coeff * a_j |state⟩
    pub fn add_annihilation(
        out: &mut [Complex64],
        state: &[Complex64],
        j: usize,
        coeff: Complex64,
    ) {
        let bit = 1u64 << j;
        for (i, &a) in state.iter().enumerate() {
            if a == Complex64::new(0.0, 0.0) {
                continue;
            }
            let i = i as u64;
            if i & bit != 0 {
                out[(i & !bit) as usize] += coeff * jw_sign(i, j) * a;
            }
        }
    }

    /// γ_μ |state⟩ with γ_{2j} = a_j + a†_j, γ_{2j+1} = -i(a_j - a†_j).
    pub fn apply_majorana(state: &FockState, mu: usize) -> FockState {
        let j = mu / 2;
        let mut out = vec![Complex64::new(0.0, 0.0); state.amps.len()];
        if mu.is_multiple_of(2) {
            add_annihilation(&mut out, &state.amps, j, Complex64::new(1.0, 0.0));
            add_creation(&mut out, &state.amps, j, Complex64::new(1.0, 0.0));
        } else {
            add_annihilation(&mut out, &state.amps, j, Complex64::new(0.0, -1.0));
            add_creation(&mut out, &state.amps, j, Complex64::new(0.0, 1.0));
        }
        FockState::raw(state.n_qubits, out)
    }

    /// Σ_pq M_pq a†_p a_q |state⟩ over spin-orbital indices.
    pub fn apply_one_body(state: &FockState, m: &CMat) -> FockState {
        let n = state.n_qubits;
        debug_assert_eq!(m.nrows(), n);
        let mut out = vec![Complex64::new(0.0, 0.0); state.amps.len()];
        for q in 0..n {
            let bq = 1u64 << q;
            // scratch = a_q |state⟩
            let mut scratch = vec![Complex64::new(0.0, 0.0); state.amps.len()];
            let mut any = false;
            for (i, &a) in state.amps.iter().enumerate() {
                let i = i as u64;
                if a != Complex64::new(0.0, 0.0) && i & bq != 0 {
                    scratch[(i & !bq) as usize] = jw_sign(i, q) * a;
                    any = true;
                }
            }
            if !any {
                continue;
            }
            for p in 0..n {
                let c = m[(p, q)];
                if c != Complex64::new(0.0, 0.0) {
                    add_creation(&mut out, &scratch, p, c);
                }
            }
        }
        FockState::raw(state.n_qubits, out)
    }

    /// Builds the determinant state of an N×ζ column matrix:
    /// |φ⟩ = c†(v_1) ··· c†(v_ζ) |0⟩, multilinear in the columns.
    pub fn walker_to_fock(n_qubits: usize, v: &CMat) -> FockState {
        debug_assert_eq!(v.nrows(), n_qubits);
        let mut state = FockState::vacuum(n_qubits).amps;
        for col in (0..v.ncols()).rev() {
            let mut out = vec![Complex64::new(0.0, 0.0); state.len()];
            for k in 0..n_qubits {
                let c = v[(k, col)];
                if c != Complex64::new(0.0, 0.0) {
                    add_creation(&mut out, &state, k, c);
                }
            }
            state = out;
        }
        FockState::raw(n_qubits, state)
    }

    /// Dense 2^N × 2^N matrix of γ_μ, for small-N contract checks.
    pub fn majorana_matrix(n_qubits: usize, mu: usize) -> CMat {
        let dim = 1usize << n_qubits;
        let mut m = CMat::zeros(dim, dim);
        for col in 0..dim {
            let basis = FockState::basis_state(n_qubits, col as u64);
            let res = apply_majorana(&basis, mu);
            for row in 0..dim {
                m[(row, col)] = res.amps[row];
            }
        }
        m
    }
}

/// Trial state |Ψ_T⟩ with its cached superposition (|0…0⟩ + |Ψ_T⟩)/√2.
#[derive(Debug, Clone)]
pub struct TrialState {
    pub psi_t: FockState,
    pub eta: usize,
    pub superposition: FockState,
}

/// Validates the η-sector support and caches the superposition state.
pub fn build_trial(psi_t: FockState, eta: usize) -> Result<TrialState, FocksimError> {
    if eta == 0 {
        return Err(FocksimError::Sector("eta must be at least 1".into()));
    }
    let norm = psi_t.norm();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(FocksimError::NotNormalized((norm - 1.0).abs()));
    }
    for (i, a) in psi_t.amps.iter().enumerate() {
        if a.norm() > 1e-12 && (i as u64).count_ones() as usize != eta {
            return Err(FocksimError::SectorViolation {
                eta,
                bitstring: bitstring_to_string(i as u64, psi_t.n_qubits),
            });
        }
    }
    let mut amps = psi_t.amps.clone();
    let root_half = std::f64::consts::FRAC_1_SQRT_2;
    for a in &mut amps {
        *a *= root_half;
    }
    amps[0] += Complex64::new(root_half, 0.0);
    let superposition = FockState::new(psi_t.n_qubits, amps)?;
    Ok(TrialState {
        psi_t,
        eta,
        superposition,
    })
}

/// One elementary factor of a Gaussian unitary.
#[derive(Debug, Clone, Copy)]
enum Gate {
    /// exp(θ/2 γ_a γ_b): rotates γ_a → cos θ γ_a + sin θ γ_b.
    Rotation { a: usize, b: usize, theta: f64 },
    /// γ_a γ_b: flips the signs of γ_a and γ_b.
    ReflectionPair { a: usize, b: usize },
}

/// Fermionic Gaussian unitary U_Q for an orthogonal Q with det +1,
/// satisfying U_Q† γ_μ U_Q = Σ_ν Q_μν γ_ν.
///
/// Held as a Givens/reflection gate sequence; states are transformed
/// gate-by-gate so the dense 2^N×2^N matrix is only ever materialized for
/// small-N contract checks.
#[derive(Debug, Clone)]
pub struct MajoranaRotation {
    pub n_qubits: usize,
    pub q: RMat,
    gates: Vec<Gate>,
    global_phase: Complex64,
}

/// Decomposes Q into plane rotations and paired axis reflections and fixes
/// the global phase so the first nonzero entry of U_Q|0…0⟩ is positive real.
pub fn majorana_unitary(q: RMat) -> Result<MajoranaRotation, FocksimError> {
    let dim = q.nrows();
    if dim != q.ncols() || !dim.is_multiple_of(2) {
        return Err(FocksimError::InvalidRotation(f64::INFINITY));
    }
    let n_qubits = dim / 2;
    let residual = (q.transpose() * &q - RMat::identity(dim, dim))
        .iter()
        .map(|x| x.abs())
        .fold(0.0f64, f64::max);
    if residual > 1e-10 {
        return Err(FocksimError::InvalidRotation(residual));
    }

    // Givens reduction: G_m ··· G_1 Q = D with D diagonal ±1, so
    // Q = G_1ᵀ ··· G_mᵀ D and U_Q = U(G_1ᵀ) ··· U(G_mᵀ) U(D).
    let mut m = q.clone();
    let mut givens: Vec<(usize, usize, f64)> = Vec::new();
    for col in 0..dim {
        for row in col + 1..dim {
            let x = m[(col, col)];
            let y = m[(row, col)];
            if y.abs() < 1e-15 {
                continue;
            }
            let r = x.hypot(y);
            let (c, s) = (x / r, y / r);
            givens.push((col, row, s.atan2(c)));
            for k in 0..dim {
                let top = m[(col, k)];
                let bot = m[(row, k)];
                m[(col, k)] = c * top + s * bot;
                m[(row, k)] = -s * top + c * bot;
            }
        }
    }
    let mut flipped: Vec<usize> = (0..dim).filter(|&i| m[(i, i)] < 0.0).collect();
    if !flipped.len().is_multiple_of(2) {
        return Err(FocksimError::UnsupportedParity);
    }
    let mut gates: Vec<Gate> = Vec::with_capacity(givens.len() + flipped.len() / 2);
    // Application order: U(D) first, then the transposed rotations in
    // reverse discovery order.
    while let (Some(b), Some(a)) = (flipped.pop(), flipped.pop()) {
        gates.push(Gate::ReflectionPair { a, b });
    }
    for &(a, b, theta) in givens.iter().rev() {
        gates.push(Gate::Rotation {
            a,
            b,
            theta: -theta,
        });
    }

    let mut rot = MajoranaRotation {
        n_qubits,
        q,
        gates,
        global_phase: Complex64::new(1.0, 0.0),
    };
    // Phase convention: first nonzero amplitude of U|0…0⟩ in bitstring
    // order is positive real.
    let probe = rot.apply(&FockState::vacuum(n_qubits));
    let first = probe
        .amps
        .iter()
        .find(|a| a.norm() > 1e-12)
        .copied()
        .unwrap_or(Complex64::new(1.0, 0.0));
    rot.global_phase = first.conj() / first.norm();
    Ok(rot)
}

impl MajoranaRotation {
    /// U_Q |state⟩ by sequential gate application.
    pub fn apply(&self, state: &FockState) -> FockState {
        let mut cur = state.clone();
        for gate in &self.gates {
            cur = match *gate {
                Gate::Rotation { a, b, theta } => {
                    let gb = ops::apply_majorana(&cur, b);
                    let gab = ops::apply_majorana(&gb, a);
                    let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
                    let mut amps = cur.amps;
                    for (x, y) in amps.iter_mut().zip(gab.amps.iter()) {
                        *x = c * *x + s * y;
                    }
                    FockState::raw(cur.n_qubits, amps)
                }
                Gate::ReflectionPair { a, b } => {
                    let gb = ops::apply_majorana(&cur, b);
                    ops::apply_majorana(&gb, a)
                }
            };
        }
        for a in &mut cur.amps {
            *a *= self.global_phase;
        }
        cur
    }

    /// Dense unitary, for small-N verification only.
    pub fn dense_unitary(&self) -> Result<CMat, FocksimError> {
        if self.n_qubits > 8 {
            return Err(FocksimError::Capacity {
                n_qubits: self.n_qubits,
                max: 8,
            });
        }
        let dim = 1usize << self.n_qubits;
        let mut u = CMat::zeros(dim, dim);
        for col in 0..dim {
            let res = self.apply(&FockState::basis_state(self.n_qubits, col as u64));
            for row in 0..dim {
                u[(row, col)] = res.amps[row];
            }
        }
        Ok(u)
    }
}

/// Determinant basis of a fixed (n_alpha, n_beta) sector over interleaved
/// spin-orbitals.
pub fn sector_basis(n_orb: usize, n_alpha: usize, n_beta: usize) -> Vec<u64> {
    fn subsets(n: usize, k: usize) -> Vec<u64> {
        let mut out = Vec::new();
        for mask in 0u64..(1 << n) {
            if mask.count_ones() as usize == k {
                out.push(mask);
            }
        }
        out
    }
    let beta_sets = subsets(n_orb, n_beta);
    let mut basis = Vec::new();
    for a in subsets(n_orb, n_alpha) {
        for b in beta_sets.iter() {
            let mut idx = 0u64;
            for p in 0..n_orb {
                if a >> p & 1 == 1 {
                    idx |= 1 << (2 * p);
                }
                if b >> p & 1 == 1 {
                    idx |= 1 << (2 * p + 1);
                }
            }
            basis.push(idx);
        }
    }
    basis.sort_unstable();
    basis
}

/// Applies the full second-quantized Hamiltonian of an integral set to a
/// dense state (interleaved spin-orbitals, e_core not included).
pub fn apply_hamiltonian(ints: &IntegralSet, state: &FockState) -> FockState {
    let n = ints.n_orb;
    debug_assert_eq!(state.n_qubits, 2 * n);
    let mut t_so = CMat::zeros(2 * n, 2 * n);
    for p in 0..n {
        for q in 0..n {
            let v = Complex64::new(ints.t[(p, q)], 0.0);
            t_so[(2 * p, 2 * q)] = v;
            t_so[(2 * p + 1, 2 * q + 1)] = v;
        }
    }
    let mut out = ops::apply_one_body(state, &t_so);
    // ½ Σ (pq|rs) a†_{pσ} a†_{rτ} a_{sτ} a_{qσ}
    let dim = state.amps.len();
    let mut acc = vec![Complex64::new(0.0, 0.0); dim];
    for p in 0..n {
        for q in 0..n {
            for r in 0..n {
                for s in 0..n {
                    let gv = ints.g(p, q, r, s);
                    if gv.abs() < 1e-14 {
                        continue;
                    }
                    let half_g = Complex64::new(0.5 * gv, 0.0);
                    for sig in 0..2usize {
                        for tau in 0..2usize {
                            let (pp, qq) = (2 * p + sig, 2 * q + sig);
                            let (rr, ss) = (2 * r + tau, 2 * s + tau);
                            apply_two_body_term(&mut acc, &state.amps, pp, rr, ss, qq, half_g);
                        }
                    }
                }
            }
        }
    }
    for (o, a) in out.amps.iter_mut().zip(acc.iter()) {
        *o += a;
    }
    out
}

/// acc += coeff · a†_p a†_r a_s a_q |state⟩
fn apply_two_body_term(
    acc: &mut [Complex64],
    state: &[Complex64],
    p: usize,
    r: usize,
    s: usize,
    q: usize,
    coeff: Complex64,
) {
    if p == r || s == q {
        return;
    }
    let (bp, br, bs, bq) = (1u64 << p, 1u64 << r, 1u64 << s, 1u64 << q);
    for (i, &amp) in state.iter().enumerate() {
        if amp == Complex64::new(0.0, 0.0) {
            continue;
        }
        let mut idx = i as u64;
        if idx & bq == 0 {
            continue;
        }
        let mut sign = jw_parity(idx, q);
        idx &= !bq;
        if idx & bs == 0 {
            continue;
        }
        sign *= jw_parity(idx, s);
        idx &= !bs;
        if idx & br != 0 {
            continue;
        }
        sign *= jw_parity(idx, r);
        idx |= br;
        if idx & bp != 0 {
            continue;
        }
        sign *= jw_parity(idx, p);
        idx |= bp;
        acc[idx as usize] += coeff * sign * amp;
    }
}

#[inline]
fn jw_parity(index: u64, j: usize) -> f64 {
    let mask = (1u64 << j) - 1;
    if (index & mask).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Lowest eigenpair of H in the (n_alpha, n_beta) sector, by dense
/// diagonalization. Energy includes e_core.
pub fn fci_ground_state(
    ints: &IntegralSet,
    n_alpha: usize,
    n_beta: usize,
) -> Result<(f64, FockState), FocksimError> {
    let n_qubits = 2 * ints.n_orb;
    if n_qubits > DENSE_QUBIT_BUDGET {
        return Err(FocksimError::Capacity {
            n_qubits,
            max: DENSE_QUBIT_BUDGET,
        });
    }
    if n_alpha > ints.n_orb || n_beta > ints.n_orb {
        return Err(FocksimError::Sector(format!(
            "({n_alpha},{n_beta}) electrons do not fit in {} orbitals",
            ints.n_orb
        )));
    }
    let basis = sector_basis(ints.n_orb, n_alpha, n_beta);
    let dim = basis.len();
    let mut pos = std::collections::HashMap::with_capacity(dim);
    for (i, &b) in basis.iter().enumerate() {
        pos.insert(b, i);
    }
    let mut h = RMat::zeros(dim, dim);
    for (col, &ket) in basis.iter().enumerate() {
        let ket_state = FockState::basis_state(n_qubits, ket);
        let h_ket = apply_hamiltonian(ints, &ket_state);
        for (i, a) in h_ket.amps.iter().enumerate() {
            if a.norm() > 0.0 {
                if let Some(&row) = pos.get(&(i as u64)) {
                    h[(row, col)] = a.re;
                }
            }
        }
    }
    let eig = h.symmetric_eigen();
    let (mut best, mut best_val) = (0usize, f64::INFINITY);
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
    let evec = eig.eigenvectors.column(best);
    for (i, &b) in basis.iter().enumerate() {
        amps[b as usize] = Complex64::new(evec[i], 0.0);
    }
    let mut state = FockState::raw(n_qubits, amps);
    state.normalize();
    // Sign convention: largest-magnitude amplitude positive real.
    let mut largest = Complex64::new(0.0, 0.0);
    for a in &state.amps {
        if a.norm() > largest.norm() {
            largest = *a;
        }
    }
    if largest.norm() > 0.0 {
        let phase = largest.conj() / largest.norm();
        for a in &mut state.amps {
            *a *= phase;
        }
    }
    Ok((best_val + ints.e_core, state))
}

/// FCI on the factorized Hamiltonian (the tensor Σ_γ L^γ ⊗ L^γ).
///
/// This is the ground truth matched by the shadow estimators, which
/// measure the factorized H rather than the raw integrals.
pub fn fci_of_cholesky(
    ham: &CholeskyHamiltonian,
    n_alpha: usize,
    n_beta: usize,
) -> Result<(f64, FockState), FocksimError> {
    let n = ham.n_orb;
    let mut g = vec![0.0f64; n.pow(4)];
    for p in 0..n {
        for q in 0..n {
            for r in 0..n {
                for s in 0..n {
                    g[((p * n + q) * n + r) * n + s] =
                        ham.l_vectors.iter().map(|l| l[(p, q)] * l[(r, s)]).sum();
                }
            }
        }
    }
    let ints = IntegralSet::new(n, ham.e_core, ham.t.clone(), g, n_alpha, n_beta)
        .map_err(|e| FocksimError::Sector(format!("factorized tensor invalid: {e}")))?;
    fci_ground_state(&ints, n_alpha, n_beta)
}

/// Spin-orbital lift of a real spatial one-body matrix, as complex.
pub fn one_body_spin_matrix(m: &RMat) -> CMat {
    let so = interleave_spin(m);
    CMat::from_fn(so.nrows(), so.ncols(), |i, j| {
        Complex64::new(so[(i, j)], 0.0)
    })
}

/// Loads a trial amplitude file: lines of "bitstring re im"; unlisted
/// bitstrings are zero, '#' starts a comment.
pub fn load_amplitudes(path: &Path) -> Result<FockState, FocksimError> {
    let text = std::fs::read_to_string(path).map_err(|source| FocksimError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut entries: Vec<(u64, Complex64)> = Vec::new();
    let mut n_qubits = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let body = line.split('#').next().unwrap().trim();
        if body.is_empty() {
            continue;
        }
        let mut parts = body.split_whitespace();
        let bits = parts.next().unwrap();
        let (index, n) =
            parse_bitstring(bits).map_err(|msg| FocksimError::Malformed { line: line_no, msg })?;
        let re: f64 = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or(FocksimError::Malformed {
                line: line_no,
                msg: "expected real part".into(),
            })?;
        let im: f64 = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or(FocksimError::Malformed {
                line: line_no,
                msg: "expected imaginary part".into(),
            })?;
        if n_qubits == 0 {
            n_qubits = n;
        } else if n != n_qubits {
            return Err(FocksimError::Malformed {
                line: line_no,
                msg: format!("bitstring length {n} != {n_qubits}"),
            });
        }
        entries.push((index, Complex64::new(re, im)));
    }
    if entries.is_empty() {
        return Err(FocksimError::Malformed {
            line: 1,
            msg: "no amplitudes".into(),
        });
    }
    let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
    for (index, a) in entries {
        amps[index as usize] = a;
    }
    let mut state = FockState::raw(n_qubits, amps);
    state.normalize();
    Ok(state)
}

/// Writes a trial amplitude file (entries above 1e-14 only).
pub fn save_amplitudes(state: &FockState, path: &Path) -> Result<(), FocksimError> {
    let mut text = String::new();
    for (i, a) in state.amps.iter().enumerate() {
        if a.norm() > 1e-14 {
            text.push_str(&format!(
                "{}  {:.17e}  {:.17e}\n",
                bitstring_to_string(i as u64, state.n_qubits),
                a.re,
                a.im
            ));
        }
    }
    std::fs::write(path, text).map_err(|source| FocksimError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrals::{cholesky_factorize, load_fcidump};
    use crate::testutil::{
        h2_fixture_path, random_orthogonal, random_orthonormal_walker, synthetic_ints,
    };
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn trial_two_term_superposition() {
        let (idx, n) = parse_bitstring("1100").unwrap();
        let psi = FockState::basis_state(n, idx);
        let trial = build_trial(psi, 2).unwrap();
        let amps = &trial.superposition.amps;
        let rh = std::f64::consts::FRAC_1_SQRT_2;
        assert!((amps[0] - c(rh, 0.0)).norm() < 1e-14);
        assert!((amps[idx as usize] - c(rh, 0.0)).norm() < 1e-14);
        let rest: f64 = amps
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 0 && *i != idx as usize)
            .map(|(_, a)| a.norm())
            .sum();
        assert!(rest < 1e-14);
    }

    #[test]
    fn trial_normalization_arithmetic() {
        let (i1, n) = parse_bitstring("1100").unwrap();
        let (i2, _) = parse_bitstring("0011").unwrap();
        let rh = std::f64::consts::FRAC_1_SQRT_2;
        let mut amps = vec![c(0.0, 0.0); 1 << n];
        amps[i1 as usize] = c(rh, 0.0);
        amps[i2 as usize] = c(rh, 0.0);
        let trial = build_trial(FockState::new(n, amps).unwrap(), 2).unwrap();
        let s = &trial.superposition.amps;
        assert!((s[0] - c(rh, 0.0)).norm() < 1e-14);
        assert!((s[i1 as usize] - c(0.5, 0.0)).norm() < 1e-14);
        assert!((s[i2 as usize] - c(0.5, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn trial_sector_violation_detected() {
        let (idx, n) = parse_bitstring("1000").unwrap();
        let psi = FockState::basis_state(n, idx);
        assert!(matches!(
            build_trial(psi, 2),
            Err(FocksimError::SectorViolation { .. })
        ));
    }

    #[test]
    fn measure_basis_state_is_deterministic() {
        let (idx, n) = parse_bitstring("0110").unwrap();
        let state = FockState::basis_state(n, idx);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..32 {
            assert_eq!(state.measure(&mut rng), idx);
        }
    }

    #[test]
    fn measure_bell_state_frequencies() {
        let rh = std::f64::consts::FRAC_1_SQRT_2;
        let mut amps = vec![c(0.0, 0.0); 4];
        amps[0b00] = c(rh, 0.0);
        amps[0b11] = c(rh, 0.0);
        let state = FockState::new(2, amps).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let n = 100_000;
        let mut zeros = 0usize;
        for _ in 0..n {
            if state.measure(&mut rng) == 0 {
                zeros += 1;
            }
        }
        let freq = zeros as f64 / n as f64;
        assert!((0.49..=0.51).contains(&freq), "freq {freq}");
    }

    #[test]
    fn measurement_frequencies_chi_squared() {
        // Born-rule convergence: χ² over all 8 outcomes of a random
        // 3-qubit state at 10⁵ samples.
        let mut rng = ChaCha12Rng::seed_from_u64(35);
        let mut amps: Vec<Complex64> = (0..8)
            .map(|_| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect();
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        for a in &mut amps {
            *a /= norm;
        }
        let state = FockState::new(3, amps).unwrap();
        let n = 100_000usize;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            counts[state.measure(&mut rng) as usize] += 1;
        }
        let chi2: f64 = (0..8)
            .map(|i| {
                let expect = state.amps[i].norm_sqr() * n as f64;
                (counts[i] as f64 - expect).powi(2) / expect
            })
            .sum();
        // 7 degrees of freedom: mean 7, σ = √14.
        assert!(chi2 < 7.0 + 4.0 * 14f64.sqrt(), "chi2 {chi2:.1}");
    }

    #[test]
    fn measure_seed_reproducibility() {
        let rh = std::f64::consts::FRAC_1_SQRT_2;
        let mut amps = vec![c(0.0, 0.0); 4];
        amps[0b01] = c(rh, 0.0);
        amps[0b10] = c(0.0, rh);
        let state = FockState::new(2, amps).unwrap();
        let seq1: Vec<u64> = {
            let mut rng = ChaCha12Rng::seed_from_u64(3);
            (0..64).map(|_| state.measure(&mut rng)).collect()
        };
        let seq2: Vec<u64> = {
            let mut rng = ChaCha12Rng::seed_from_u64(3);
            (0..64).map(|_| state.measure(&mut rng)).collect()
        };
        assert_eq!(seq1, seq2);
    }

    #[test]
    fn identity_rotation_is_identity() {
        let n = 3;
        let rot = majorana_unitary(RMat::identity(2 * n, 2 * n)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut amps: Vec<Complex64> = (0..1 << n)
            .map(|_| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect();
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        for a in &mut amps {
            *a /= norm;
        }
        let state = FockState::new(n, amps).unwrap();
        let out = rot.apply(&state);
        for (a, b) in out.amps.iter().zip(state.amps.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    fn conjugation_residual(rot: &MajoranaRotation) -> f64 {
        let n = rot.n_qubits;
        let u = rot.dense_unitary().unwrap();
        let udag = u.adjoint();
        let mut worst = 0.0f64;
        for mu in 0..2 * n {
            let gamma = ops::majorana_matrix(n, mu);
            let lhs = &udag * &gamma * &u;
            let mut rhs = CMat::zeros(1 << n, 1 << n);
            for nu in 0..2 * n {
                if rot.q[(mu, nu)].abs() > 1e-15 {
                    rhs += ops::majorana_matrix(n, nu) * c(rot.q[(mu, nu)], 0.0);
                }
            }
            let diff = (&lhs - &rhs)
                .iter()
                .map(|z| z.norm())
                .fold(0.0f64, f64::max);
            worst = worst.max(diff);
        }
        worst
    }

    #[test]
    fn pair_flip_conjugation_contract() {
        // Flip the last Majorana pair: diag(1,…,1,-1,-1), det +1.
        let n = 3;
        let mut q = RMat::identity(2 * n, 2 * n);
        q[(2 * n - 2, 2 * n - 2)] = -1.0;
        q[(2 * n - 1, 2 * n - 1)] = -1.0;
        let rot = majorana_unitary(q).unwrap();
        assert!(conjugation_residual(&rot) < 1e-9);
    }

    #[test]
    fn random_signed_permutation_conjugation() {
        let n = 3;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..6 {
            let q = crate::shadows::sample_signed_permutation(&mut rng, 2 * n).to_matrix();
            let rot = majorana_unitary(q).unwrap();
            assert!(conjugation_residual(&rot) < 1e-9);
        }
    }

    #[test]
    fn random_orthogonal_conjugation_and_unitarity() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for n in [2usize, 3, 4] {
            let q = random_orthogonal(2 * n, &mut rng);
            let rot = majorana_unitary(q).unwrap();
            assert!(conjugation_residual(&rot) < 1e-9, "n={n}");
            let u = rot.dense_unitary().unwrap();
            let resid = (u.adjoint() * &u - CMat::identity(1 << n, 1 << n))
                .iter()
                .map(|z| z.norm())
                .fold(0.0f64, f64::max);
            assert!(resid < 1e-9, "n={n} unitarity {resid:.3e}");
        }
    }

    #[test]
    fn improper_rotation_rejected() {
        let n = 2;
        let mut q = RMat::identity(2 * n, 2 * n);
        q[(0, 0)] = -1.0;
        assert!(matches!(
            majorana_unitary(q),
            Err(FocksimError::UnsupportedParity)
        ));
    }

    #[test]
    fn group_homomorphism_up_to_phase() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 3;
        let q1 = random_orthogonal(2 * n, &mut rng);
        let q2 = random_orthogonal(2 * n, &mut rng);
        let r1 = majorana_unitary(q1.clone()).unwrap();
        let r2 = majorana_unitary(q2.clone()).unwrap();
        let r12 = majorana_unitary(&q1 * &q2).unwrap();
        let mut amps: Vec<Complex64> = (0..1 << n)
            .map(|_| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect();
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        for a in &mut amps {
            *a /= norm;
        }
        let psi = FockState::new(n, amps).unwrap();
        let seq = r1.apply(&r2.apply(&psi));
        let fused = r12.apply(&psi);
        let ratio = seq.inner(&fused).norm();
        assert!((ratio - 1.0).abs() < 1e-9, "overlap magnitude {ratio}");
    }

    #[test]
    fn mode_permutation_preserves_particle_number() {
        // Permutation of whole Majorana pairs = orbital relabeling.
        let n = 3;
        let perm = [2usize, 0, 1];
        let mut q = RMat::zeros(2 * n, 2 * n);
        for (j, &pj) in perm.iter().enumerate() {
            q[(2 * pj, 2 * j)] = 1.0;
            q[(2 * pj + 1, 2 * j + 1)] = 1.0;
        }
        assert!((q.determinant() - 1.0).abs() < 1e-12);
        let rot = majorana_unitary(q).unwrap();
        let (idx, _) = parse_bitstring("110").unwrap();
        let out = rot.apply(&FockState::basis_state(n, idx));
        for (i, a) in out.amps.iter().enumerate() {
            if a.norm() > 1e-12 {
                assert_eq!((i as u64).count_ones(), 2, "support moved sectors");
            }
        }
    }

    #[test]
    fn h2_fci_matches_two_level_formula() {
        let ints = load_fcidump(&h2_fixture_path()).unwrap();
        let (e, _) = fci_ground_state(&ints, 1, 1).unwrap();
        // Independent oracle: the closed-shell two-determinant CI closed form.
        let h11 = 2.0 * ints.t[(0, 0)] + ints.g(0, 0, 0, 0);
        let h22 = 2.0 * ints.t[(1, 1)] + ints.g(1, 1, 1, 1);
        let k = ints.g(0, 1, 0, 1);
        let mid = 0.5 * (h11 + h22);
        let gap = 0.5 * (h11 - h22);
        let analytic = mid - (gap * gap + k * k).sqrt() + ints.e_core;
        assert!(
            (e - analytic).abs() < 1e-10,
            "fci {e} vs analytic {analytic}"
        );
        // Literature value at the 0.7414 Å equilibrium geometry.
        assert!((e - -1.1372702).abs() < 1e-6, "fci {e}");
    }

    #[test]
    fn noninteracting_ground_energy_is_orbital_sum() {
        let n = 3usize;
        let eps = [-1.5, -0.3, 0.8];
        let t = RMat::from_fn(n, n, |i, j| if i == j { eps[i] } else { 0.0 });
        let g = vec![0.0; n.pow(4)];
        let ints = IntegralSet::new(n, 0.1, t, g, 2, 1).unwrap();
        let (e, _) = fci_ground_state(&ints, 2, 1).unwrap();
        let expect = 0.1 + (eps[0] + eps[1]) + eps[0];
        assert!((e - expect).abs() < 1e-10);
    }

    #[test]
    fn oversized_sector_rejected() {
        let ints = synthetic_ints(2, 2, 1, 1, 21);
        assert!(matches!(
            fci_ground_state(&ints, 3, 0),
            Err(FocksimError::Sector(_))
        ));
    }

    #[test]
    fn walker_inner_product_is_determinant() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..5 {
            let u = random_orthonormal_walker(5, 2, &mut rng);
            let v = random_orthonormal_walker(5, 2, &mut rng);
            let fu = ops::walker_to_fock(5, &u);
            let fv = ops::walker_to_fock(5, &v);
            let lhs = fu.inner(&fv);
            let rhs = (u.adjoint() * &v).determinant();
            assert!((lhs - rhs).norm() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn cholesky_fci_matches_raw_fci_at_tight_tolerance() {
        let ints = load_fcidump(&h2_fixture_path()).unwrap();
        let ham = cholesky_factorize(&ints, 1e-12).unwrap();
        let (e_raw, _) = fci_ground_state(&ints, 1, 1).unwrap();
        let (e_fac, _) = fci_of_cholesky(&ham, 1, 1).unwrap();
        assert!((e_raw - e_fac).abs() < 1e-10);
    }

    #[test]
    fn factorization_idempotence_preserves_fci() {
        let ints = synthetic_ints(3, 4, 2, 1, 22);
        let ham = cholesky_factorize(&ints, 1e-10).unwrap();
        // Re-factorize the reconstructed tensor.
        let n = 3usize;
        let mut g = vec![0.0; n.pow(4)];
        for p in 0..n {
            for q in 0..n {
                for r in 0..n {
                    for s in 0..n {
                        g[((p * n + q) * n + r) * n + s] =
                            ham.l_vectors.iter().map(|l| l[(p, q)] * l[(r, s)]).sum();
                    }
                }
            }
        }
        let ints2 = IntegralSet::new(n, ints.e_core, ints.t.clone(), g, 2, 1).unwrap();
        let ham2 = cholesky_factorize(&ints2, 1e-10).unwrap();
        let (e1, _) = fci_of_cholesky(&ham, 2, 1).unwrap();
        let (e2, _) = fci_of_cholesky(&ham2, 2, 1).unwrap();
        assert!((e1 - e2).abs() < 1e-10, "{e1} vs {e2}");
    }

    #[test]
    fn frozen_core_embedding_matches_constrained_fci() {
        // 3-orbital synthetic system, core={0}, active={1,2}: active-space
        // FCI energy equals full FCI restricted to the core-frozen sector.
        let ints = synthetic_ints(3, 3, 2, 2, 23);
        let emb = crate::integrals::build_embedded(&ints, &[0], &[1, 2], 1e-10).unwrap();
        let (e_active, _) = fci_ground_state(&emb.active_ints, 1, 1).unwrap();

        // Constrained full FCI: diagonalize in the sector where orbital 0
        // holds both an α and a β electron.
        let n_qubits = 2 * ints.n_orb;
        let basis: Vec<u64> = sector_basis(ints.n_orb, 2, 2)
            .into_iter()
            .filter(|b| b & 0b11 == 0b11)
            .collect();
        let mut pos = std::collections::HashMap::new();
        for (i, &b) in basis.iter().enumerate() {
            pos.insert(b, i);
        }
        let dim = basis.len();
        let mut h = RMat::zeros(dim, dim);
        for (col, &ket) in basis.iter().enumerate() {
            let h_ket = apply_hamiltonian(&ints, &FockState::basis_state(n_qubits, ket));
            for (i, a) in h_ket.amps.iter().enumerate() {
                if a.norm() > 0.0 {
                    if let Some(&row) = pos.get(&(i as u64)) {
                        h[(row, col)] = a.re;
                    }
                }
            }
        }
        let eig = h.symmetric_eigen();
        let e_constrained = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
            + ints.e_core;
        assert!(
            (e_active - e_constrained).abs() < 1e-10,
            "{e_active} vs {e_constrained}"
        );
    }

    #[test]
    fn amplitude_file_round_trip() {
        let rh = std::f64::consts::FRAC_1_SQRT_2;
        let mut amps = vec![c(0.0, 0.0); 16];
        amps[0b0011] = c(rh, 0.0);
        amps[0b1100] = c(0.0, -rh);
        let state = FockState::new(4, amps).unwrap();
        let dir = std::env::temp_dir().join("mgafqmc_amps");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trial.txt");
        save_amplitudes(&state, &path).unwrap();
        let back = load_amplitudes(&path).unwrap();
        assert_eq!(back.n_qubits, 4);
        for (a, b) in back.amps.iter().zip(state.amps.iter()) {
            assert!((a - b).norm() < 1e-15);
        }
    }
}
