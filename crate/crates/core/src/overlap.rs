//! Matchgate-shadow estimator core.
//!
//! Each shadow sample (Q, b) contributes a Pfaffian polynomial: the walker
//! and the rotated measurement covariance combine into an antisymmetric
//! matrix A(z) = C⁽ˢ⁾ + z·B⁽ˢ⁾, the Pfaffian is evaluated at Chebyshev
//! nodes, and interpolation recovers the coefficients whose binomial-
//! weighted sum inverts the shadow channel. Overlap derivatives (force
//! bias, local energy) reuse the per-node Pfaffian and inverse through the
//! trace formulas, so each additional one-body direction costs dense
//! matrix products only.
//!
//! Conventions, pinned by the dense channel-inverse oracle in the tests:
//! the walker's occupied columns are completed to an orthonormal frame;
//! the retained rows of B = W* M_φ Qᵀ C_b Q M_φᵀ W† are the η creation
//! rows followed by both Majorana rows of every completion mode (2N - η
//! rows); C⁽ˢ⁾ is the vacuum covariance on the completion block and zero
//! elsewhere. The polynomial degree is ℓ = N - η/2 and the per-sample
//! estimate is o_p = 2 (i^{η/2} / 2^{N-η/2}) Σ_x c_x C(2N,2x)/C(N,x).
//!
//! Derivatives: the frame matrix enters through both V and V̄ slots; the
//! on-manifold identity extends holomorphically off the unitary group
//! along V̄ ↦ (Vᵀ)⁻¹. A direction dV therefore perturbs the creation rows
//! by dV directly and the completion Majorana rows through
//! d(c̄) = -(dV V†)ᵀ c̄, which is what `direction_rows` assembles. This
//! makes the analytic derivatives equal to derivatives of the exact
//! multilinear overlap functional, sample by sample.

use crate::integrals::CholeskyHamiltonian;
use crate::pfaffian::{pfaffian_in_place, pfaffian_small, small_antisymmetric_inverse};
use crate::shadows::{ShadowSample, ShadowSet};
use crate::util::{binomial, MeanAccumulator};
use crate::{CMat, Complex64, RMat};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OverlapError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("walker columns are not orthonormal: residual {0:.3e}")]
    NotOrthonormal(f64),
    #[error("walker matrix is rank deficient")]
    RankDeficient,
    #[error("odd electron count {0} is not supported by the overlap estimator")]
    OddElectronCount(usize),
    #[error("shadow set is empty")]
    NoSamples,
    #[error(
        "overlap magnitude {overlap:.3e} below guard {guard:.3e}; walker should be zero-weighted"
    )]
    VanishingOverlap { overlap: f64, guard: f64 },
}

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Orbital-coefficient matrix of a ζ-electron walker over N interleaved
/// spin-orbitals, with its orthonormal frame completion cached.
#[derive(Debug, Clone)]
pub struct WalkerMatrix {
    pub n_qubits: usize,
    pub zeta: usize,
    pub v: CMat,
    /// Orthonormal completion: N×(N-ζ), spanning the orthogonal
    /// complement of the occupied space.
    completion: CMat,
}

impl WalkerMatrix {
    /// Requires orthonormal columns (within 1e-8; stored bit-for-bit).
    pub fn new(v: CMat) -> Result<Self, OverlapError> {
        let (n, zeta) = (v.nrows(), v.ncols());
        if zeta == 0 || zeta > n {
            return Err(OverlapError::Dimension(format!(
                "walker shape {n}x{zeta} invalid"
            )));
        }
        let gram = v.adjoint() * &v;
        let mut resid = 0.0f64;
        for i in 0..zeta {
            for j in 0..zeta {
                let expect = if i == j { 1.0 } else { 0.0 };
                resid = resid.max((gram[(i, j)] - c64(expect, 0.0)).norm());
            }
        }
        if resid > 1e-8 {
            return Err(OverlapError::NotOrthonormal(resid));
        }
        let completion = orthonormal_completion(&v)?;
        Ok(WalkerMatrix {
            n_qubits: n,
            zeta,
            v,
            completion,
        })
    }

    /// Orthonormalizes arbitrary full-rank columns by QR with nonnegative
    /// R diagonal, returning det(R); the determinant state satisfies
    /// |φ(v)⟩ = det(R) |φ(normalized)⟩.
    pub fn from_columns(v: CMat) -> Result<(Self, Complex64), OverlapError> {
        let zeta = v.ncols();
        let qr = v.qr();
        let mut q = qr.q();
        let r = qr.r();
        let mut det_r = c64(1.0, 0.0);
        for j in 0..zeta {
            let d = r[(j, j)];
            if d.norm() < 1e-12 {
                return Err(OverlapError::RankDeficient);
            }
            let phase = d / d.norm();
            det_r *= d;
            for k in 0..q.nrows() {
                q[(k, j)] *= phase;
            }
        }
        Ok((WalkerMatrix::new(q)?, det_r))
    }

    pub fn completion(&self) -> &CMat {
        &self.completion
    }
}

/// Orthonormal basis of the orthogonal complement of span(v), by greedy
/// deflation of the complement projector.
fn orthonormal_completion(v: &CMat) -> Result<CMat, OverlapError> {
    let (n, zeta) = (v.nrows(), v.ncols());
    if zeta == n {
        return Ok(CMat::zeros(n, 0));
    }
    let proj = CMat::identity(n, n) - v * v.adjoint();
    let mut cols: Vec<nalgebra::DVector<Complex64>> = Vec::with_capacity(n - zeta);
    let mut work = proj.clone();
    for _ in 0..n - zeta {
        let (mut best, mut best_norm) = (0usize, -1.0f64);
        for j in 0..n {
            let nj = work.column(j).norm();
            if nj > best_norm {
                best_norm = nj;
                best = j;
            }
        }
        if best_norm < 1e-10 {
            return Err(OverlapError::RankDeficient);
        }
        let mut col = work.column(best).into_owned();
        col /= c64(col.norm(), 0.0);
        for j in 0..n {
            let overlap: Complex64 = col.dotc(&work.column(j).into_owned());
            for k in 0..n {
                let upd = col[k] * overlap;
                work[(k, j)] -= upd;
            }
        }
        cols.push(col);
    }
    let mut out = CMat::zeros(n, n - zeta);
    for (j, col) in cols.iter().enumerate() {
        out.set_column(j, col);
    }
    Ok(out)
}

/// The W matrix: ⊕_{j<η} (1/√2)[[1,-i],[1,i]] ⊕ identity blocks.
pub fn w_matrix(n_qubits: usize, eta: usize) -> CMat {
    let dim = 2 * n_qubits;
    let mut w = CMat::zeros(dim, dim);
    let rh = std::f64::consts::FRAC_1_SQRT_2;
    for j in 0..n_qubits {
        if j < eta {
            w[(2 * j, 2 * j)] = c64(rh, 0.0);
            w[(2 * j, 2 * j + 1)] = c64(0.0, -rh);
            w[(2 * j + 1, 2 * j)] = c64(rh, 0.0);
            w[(2 * j + 1, 2 * j + 1)] = c64(0.0, rh);
        } else {
            w[(2 * j, 2 * j)] = c64(1.0, 0.0);
            w[(2 * j + 1, 2 * j + 1)] = c64(1.0, 0.0);
        }
    }
    w
}

/// The real 2N×2N Majorana rotation of the completed frame [V | completion]
/// with blocks R_jk = [[Re, -Im], [Im, Re]] of the conjugated frame columns.
pub fn frame_m_matrix(walker: &WalkerMatrix) -> RMat {
    let n = walker.n_qubits;
    let mut m = RMat::zeros(2 * n, 2 * n);
    let col = |j: usize, k: usize| -> Complex64 {
        if j < walker.zeta {
            walker.v[(k, j)].conj()
        } else {
            walker.completion[(k, j - walker.zeta)].conj()
        }
    };
    for j in 0..n {
        for k in 0..n {
            let v = col(j, k);
            m[(2 * j, 2 * k)] = v.re;
            m[(2 * j, 2 * k + 1)] = -v.im;
            m[(2 * j + 1, 2 * k)] = v.im;
            m[(2 * j + 1, 2 * k + 1)] = v.re;
        }
    }
    m
}

/// Full 2N×2N matrix W* M_φ Qᵀ C_b Q M_φᵀ W† by chained dense products,
/// for the elementwise verification tests; the kernel only ever forms the
/// selected submatrix.
pub fn build_b(sample: &ShadowSample, walker: &WalkerMatrix, eta: usize) -> CMat {
    let n = walker.n_qubits;
    let w = w_matrix(n, eta);
    let m = frame_m_matrix(walker);
    let m_c = CMat::from_fn(2 * n, 2 * n, |i, j| c64(m[(i, j)], 0.0));
    let q = sample.q.to_matrix();
    let q_c = CMat::from_fn(2 * n, 2 * n, |i, j| c64(q[(i, j)], 0.0));
    let cov = crate::shadows::covariance_of(sample.b, n);
    let cov_c = CMat::from_fn(2 * n, 2 * n, |i, j| c64(cov[(i, j)], 0.0));
    let w_conj = w.map(|z| z.conj());
    let w_dag = w.adjoint();
    &w_conj * &m_c * q_c.transpose() * cov_c * q_c * m_c.transpose() * w_dag
}

/// Overlap polynomial coefficients c_x, x = 0..ℓ with ℓ = N - η/2.
#[derive(Debug, Clone)]
pub struct OverlapPolynomial {
    pub coeffs: Vec<Complex64>,
}

/// Shadow-averaged overlap with running per-sample scatter.
#[derive(Debug, Clone, Copy)]
pub struct OverlapEstimate {
    pub value: Complex64,
    pub n_samples: usize,
    /// Per-sample variance E|o_p - ō|².
    pub variance: f64,
}

impl OverlapEstimate {
    pub fn std_err(&self) -> f64 {
        (self.variance / self.n_samples as f64).sqrt()
    }
}

/// Precomputed row-differential of the retained frame rows along one
/// overlap-derivative direction.
#[derive(Debug, Clone)]
pub struct DirectionRows {
    rows: CMat,
}

/// Accumulated shadow averages for one walker over identical samples.
#[derive(Debug, Clone)]
pub struct ShadowSums {
    pub overlap: MeanAccumulator,
    pub first: Vec<MeanAccumulator>,
    pub second: Vec<MeanAccumulator>,
    /// Samples where a singular node matrix forced the finite-difference
    /// fallback.
    pub fallbacks: usize,
}

impl ShadowSums {
    fn empty(n_first: usize, n_second: usize) -> Self {
        ShadowSums {
            overlap: MeanAccumulator::default(),
            first: vec![MeanAccumulator::default(); n_first],
            second: vec![MeanAccumulator::default(); n_second],
            fallbacks: 0,
        }
    }

    fn merge(&mut self, other: &ShadowSums) {
        self.overlap.merge(&other.overlap);
        for (t, s) in self.first.iter_mut().zip(other.first.iter()) {
            t.merge(s);
        }
        for (t, s) in self.second.iter_mut().zip(other.second.iter()) {
            t.merge(s);
        }
        self.fallbacks += other.fallbacks;
    }

    pub fn overlap_estimate(&self) -> OverlapEstimate {
        OverlapEstimate {
            value: self.overlap.mean(),
            n_samples: self.overlap.count,
            variance: self.overlap.variance(),
        }
    }
}

/// Per-walker estimator state: retained frame rows, Chebyshev nodes,
/// interpolation weights, channel prefactor.
pub struct ShadowKernel<'a> {
    set: &'a ShadowSet,
    pub n_qubits: usize,
    pub eta: usize,
    pub ell: usize,
    walker_v: CMat,
    completion: CMat,
    /// Retained rows of W*M: η creation rows then completion Majorana
    /// pairs; (2N-η) × 2N.
    y: CMat,
    /// Vacuum covariance on the retained set.
    c_s: CMat,
    /// Chebyshev nodes z_k = cos((2k+1)π/(2N)), k = 0..ℓ.
    pub nodes: Vec<f64>,
    /// Interpolation weights: o_p = κ Σ_k α_k Pf(A(z_k)).
    alpha: Vec<f64>,
    /// Channel prefactor κ = 2 i^{η/2} / 2^{N-η/2}.
    kappa: Complex64,
}

/// Reusable per-thread buffers for the sample loop.
struct Scratch {
    x: Vec<(usize, f64)>,
    b: CMat,
    a: CMat,
    pf_buf: CMat,
    a_inv: CMat,
    xyt: CMat,
    g_first: Vec<CMat>,
    g_second: Vec<(CMat, CMat, CMat, CMat)>,
    /// d1 ≡ d2 per second-direction (the per-γ energy case), detected once.
    symmetric: Vec<bool>,
    m1: CMat,
    m2: CMat,
    q2: CMat,
    acc1: Vec<Complex64>,
    acc2: Vec<Complex64>,
}

impl Scratch {
    fn new(kernel: &ShadowKernel, n_first: usize, n_second: usize) -> Self {
        let dim_s = 2 * kernel.n_qubits - kernel.eta;
        let zero = || CMat::zeros(dim_s, dim_s);
        Scratch {
            x: Vec::with_capacity(2 * kernel.n_qubits),
            b: zero(),
            a: zero(),
            pf_buf: zero(),
            a_inv: zero(),
            xyt: CMat::zeros(2 * kernel.n_qubits, dim_s),
            g_first: (0..n_first).map(|_| zero()).collect(),
            g_second: (0..n_second)
                .map(|_| (zero(), zero(), zero(), zero()))
                .collect(),
            symmetric: Vec::new(),
            m1: zero(),
            m2: zero(),
            q2: zero(),
            acc1: Vec::new(),
            acc2: Vec::new(),
        }
    }
}

impl<'a> ShadowKernel<'a> {
    pub fn new(set: &'a ShadowSet, walker: &WalkerMatrix) -> Result<Self, OverlapError> {
        let n = set.n_qubits;
        if walker.n_qubits != n {
            return Err(OverlapError::Dimension(format!(
                "walker has {} qubits, shadow set {}",
                walker.n_qubits, n
            )));
        }
        let eta = set.eta;
        if !eta.is_multiple_of(2) {
            return Err(OverlapError::OddElectronCount(eta));
        }
        if walker.zeta != eta {
            return Err(OverlapError::Dimension(format!(
                "walker has {} electrons, trial has {eta}",
                walker.zeta
            )));
        }
        if set.is_empty() {
            return Err(OverlapError::NoSamples);
        }
        let ell = n - eta / 2;
        let dim_s = 2 * n - eta;

        let mut y = CMat::zeros(dim_s, 2 * n);
        let rh = std::f64::consts::FRAC_1_SQRT_2;
        for j in 0..eta {
            for k in 0..n {
                let v = walker.v[(k, j)] * rh;
                y[(j, 2 * k)] = v;
                y[(j, 2 * k + 1)] = v * (-I);
            }
        }
        for m in 0..n - eta {
            let row0 = eta + 2 * m;
            for k in 0..n {
                let v = walker.completion[(k, m)];
                y[(row0, 2 * k)] = c64(v.re, 0.0);
                y[(row0, 2 * k + 1)] = c64(v.im, 0.0);
                y[(row0 + 1, 2 * k)] = c64(-v.im, 0.0);
                y[(row0 + 1, 2 * k + 1)] = c64(v.re, 0.0);
            }
        }
        let mut c_s = CMat::zeros(dim_s, dim_s);
        for m in 0..n - eta {
            let r = eta + 2 * m;
            c_s[(r, r + 1)] = c64(1.0, 0.0);
            c_s[(r + 1, r)] = c64(-1.0, 0.0);
        }

        let nodes: Vec<f64> = (0..=ell)
            .map(|k| ((2 * k + 1) as f64 * std::f64::consts::PI / (2.0 * n as f64)).cos())
            .collect();
        let vand_t = RMat::from_fn(ell + 1, ell + 1, |x, k| nodes[k].powi(x as i32));
        let w_vec =
            nalgebra::DVector::from_fn(ell + 1, |x, _| binomial(2 * n, 2 * x) / binomial(n, x));
        let alpha_vec = vand_t
            .lu()
            .solve(&w_vec)
            .ok_or_else(|| OverlapError::Dimension("interpolation system singular".into()))?;
        let alpha: Vec<f64> = alpha_vec.iter().cloned().collect();

        Ok(ShadowKernel {
            set,
            n_qubits: n,
            eta,
            ell,
            walker_v: walker.v.clone(),
            completion: walker.completion.clone(),
            y,
            c_s,
            nodes,
            alpha,
            kappa: channel_prefactor(n, eta),
        })
    }

    pub fn set(&self) -> &ShadowSet {
        self.set
    }

    /// Row differential of the retained frame rows along an occupied-column
    /// direction dV. The creation rows move by dV; the conjugate slots of
    /// the completion rows move by d(c̄) = -(dV V†)ᵀ c̄, the tangent of the
    /// analytic continuation V̄ ↦ (Vᵀ)⁻¹ off the unitary frame group.
    pub fn direction_rows(&self, dv: &CMat) -> DirectionRows {
        let dc = CMat::zeros(self.n_qubits, self.completion.ncols());
        let dcbar = self.continuation_dcbar(dv);
        DirectionRows {
            rows: self.rows_from_parts(dv, &dc, &dcbar),
        }
    }

    /// Row differentials for a second-derivative request (dV₁, dV₂, d²V):
    /// returns (d₁Y, d₂Y, d₁₂Y) along the two-parameter continuation path.
    pub fn second_direction_rows(
        &self,
        d1: &CMat,
        d2: &CMat,
        d12: &CMat,
    ) -> (DirectionRows, DirectionRows, DirectionRows) {
        let n = self.n_qubits;
        let n_comp = self.completion.ncols();
        let zero_c = CMat::zeros(n, n_comp);
        let d1bar = self.continuation_dcbar(d1);
        let d2bar = self.continuation_dcbar(d2);
        // d₁₂c̄ = V̄ dV₁ᵀ V̄ dV₂ᵀ c̄ + V̄ dV₂ᵀ V̄ dV₁ᵀ c̄ - V̄ (d²V)ᵀ c̄
        let mut d12bar = CMat::zeros(n, n_comp);
        if n_comp > 0 {
            let cbar = self.completion.map(|z| z.conj());
            let vbar = self.walker_v.map(|z| z.conj());
            let term1 = &vbar * (d12.transpose() * &cbar);
            let w1 = &vbar * (d1.transpose() * &cbar); // V̄ dV₁ᵀ c̄
            let w2 = &vbar * (d2.transpose() * &cbar); // V̄ dV₂ᵀ c̄
            let cross_a = &vbar * (d1.transpose() * &w2);
            let cross_b = &vbar * (d2.transpose() * &w1);
            d12bar = cross_a + cross_b - term1;
        }
        (
            DirectionRows {
                rows: self.rows_from_parts(d1, &zero_c, &d1bar),
            },
            DirectionRows {
                rows: self.rows_from_parts(d2, &zero_c, &d2bar),
            },
            DirectionRows {
                rows: self.rows_from_parts(d12, &zero_c, &d12bar),
            },
        )
    }

    /// -V̄ dVᵀ c̄ for every completion column.
    fn continuation_dcbar(&self, dv: &CMat) -> CMat {
        let n = self.n_qubits;
        let n_comp = self.completion.ncols();
        if n_comp == 0 {
            return CMat::zeros(n, 0);
        }
        let cbar = self.completion.map(|z| z.conj());
        let vbar = self.walker_v.map(|z| z.conj());
        let t = dv.transpose() * &cbar; // η × n_comp
        -(&vbar * t)
    }

    /// Assembles retained-row differentials from the occupied-column part
    /// and the (dc, dc̄) parts of each completion mode.
    fn rows_from_parts(&self, dv: &CMat, dc: &CMat, dcbar: &CMat) -> CMat {
        let n = self.n_qubits;
        let eta = self.eta;
        let dim_s = 2 * n - eta;
        let rh = std::f64::consts::FRAC_1_SQRT_2;
        let mut rows = CMat::zeros(dim_s, 2 * n);
        for j in 0..eta {
            for k in 0..n {
                let v = dv[(k, j)] * rh;
                rows[(j, 2 * k)] = v;
                rows[(j, 2 * k + 1)] = v * (-I);
            }
        }
        let half = c64(0.5, 0.0);
        let half_i = c64(0.0, 0.5);
        for m in 0..n - eta {
            let r0 = eta + 2 * m;
            for k in 0..n {
                let dck = dc[(k, m)];
                let dbk = dcbar[(k, m)];
                // Re-slot: (dc + dc̄)/2, Im-slot: (dc - dc̄)/(2i)
                let re_slot = (dck + dbk) * half;
                let im_slot = (dck - dbk) * half * (-I);
                rows[(r0, 2 * k)] = re_slot;
                rows[(r0, 2 * k + 1)] = im_slot;
                rows[(r0 + 1, 2 * k)] = -im_slot;
                rows[(r0 + 1, 2 * k + 1)] = re_slot;
                let _ = half_i;
            }
        }
        rows
    }

    /// B⁽ˢ⁾-type sandwich rows · X · rowsᵀ with X = Qᵀ C_b Q applied
    /// through its one-nonzero-per-row sparsity.
    fn sandwich(rows_l: &CMat, rows_r: &CMat, x: &[(usize, f64)]) -> CMat {
        let mut b = CMat::zeros(rows_l.nrows(), rows_r.nrows());
        Self::sandwich_into(rows_l, rows_r, x, &mut b);
        b
    }

    /// Allocation-free sandwich into a preallocated output, accumulating
    /// per column so the inner loops run over contiguous storage.
    fn sandwich_into(rows_l: &CMat, rows_r: &CMat, x: &[(usize, f64)], b: &mut CMat) {
        let (nl, nr) = (rows_l.nrows(), rows_r.nrows());
        debug_assert_eq!(b.nrows(), nl);
        debug_assert_eq!(b.ncols(), nr);
        b.fill(c64(0.0, 0.0));
        let l_slice = rows_l.as_slice();
        let r_slice = rows_r.as_slice();
        let b_slice = b.as_mut_slice();
        let two_n = rows_l.ncols();
        for mu in 0..two_n {
            let (nu, val) = x[mu];
            if val == 0.0 {
                continue;
            }
            // column μ of rows_l and column ν of rows_r are contiguous
            let lcol = &l_slice[mu * nl..(mu + 1) * nl];
            let rcol = &r_slice[nu * nr..(nu + 1) * nr];
            for rp in 0..nr {
                let scaled = rcol[rp] * val;
                if scaled == c64(0.0, 0.0) {
                    continue;
                }
                let out = &mut b_slice[rp * nl..(rp + 1) * nl];
                for r in 0..nl {
                    out[r] += lcol[r] * scaled;
                }
            }
        }
    }

    fn selected_b(&self, sample: &ShadowSample) -> CMat {
        let x = sample.q.conjugated_covariance(sample.b);
        Self::sandwich(&self.y, &self.y, &x)
    }

    /// Per-sample channel-inverted overlap estimate o_p.
    pub fn sample_estimate(&self, sample: &ShadowSample) -> Complex64 {
        let b = self.selected_b(sample);
        let mut acc = c64(0.0, 0.0);
        for (k, &z) in self.nodes.iter().enumerate() {
            let mut a = &self.c_s + &b * c64(z, 0.0);
            let pf = pfaffian_in_place(&mut a).to_complex();
            acc += self.alpha[k] * pf;
        }
        self.kappa * acc
    }

    /// Polynomial coefficients of Pf(C⁽ˢ⁾ + z B⁽ˢ⁾) by interpolation at the
    /// Chebyshev nodes.
    pub fn polynomial(&self, sample: &ShadowSample) -> OverlapPolynomial {
        let b = self.selected_b(sample);
        let pf_values: Vec<Complex64> = self
            .nodes
            .iter()
            .map(|&z| {
                let mut a = &self.c_s + &b * c64(z, 0.0);
                pfaffian_in_place(&mut a).to_complex()
            })
            .collect();
        let vand = CMat::from_fn(self.ell + 1, self.ell + 1, |k, x| {
            c64(self.nodes[k].powi(x as i32), 0.0)
        });
        let rhs = nalgebra::DVector::from_fn(self.ell + 1, |k, _| pf_values[k]);
        let coeffs = vand
            .lu()
            .solve(&rhs)
            .expect("distinct Chebyshev nodes give a nonsingular system");
        OverlapPolynomial {
            coeffs: coeffs.iter().cloned().collect(),
        }
    }

    /// Direct Pf(A(z)), used by the held-out-node audits.
    pub fn pfaffian_at(&self, sample: &ShadowSample, z: f64) -> Complex64 {
        let b = self.selected_b(sample);
        let mut a = &self.c_s + &b * c64(z, 0.0);
        pfaffian_in_place(&mut a).to_complex()
    }

    /// κ times the binomial-weighted coefficient sum; equals o_p when fed
    /// `polynomial()` output.
    pub fn weighted_sum(&self, poly: &OverlapPolynomial) -> Complex64 {
        let n = self.n_qubits;
        let sum: Complex64 = poly
            .coeffs
            .iter()
            .enumerate()
            .map(|(x, &cx)| cx * (binomial(2 * n, 2 * x) / binomial(n, x)))
            .sum();
        self.kappa * sum
    }

    /// Streams every sample once, accumulating the overlap and requested
    /// derivative means. Chunked in fixed order so the reduction is
    /// deterministic regardless of thread scheduling.
    pub fn accumulate(
        &self,
        first: &[DirectionRows],
        second: &[(DirectionRows, DirectionRows, DirectionRows)],
    ) -> ShadowSums {
        const CHUNK: usize = 256;
        let chunks: Vec<ShadowSums> = self
            .set
            .samples
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut sums = ShadowSums::empty(first.len(), second.len());
                let mut scratch = Scratch::new(self, first.len(), second.len());
                scratch.symmetric = second
                    .iter()
                    .map(|(d1, d2, _)| d1.rows == d2.rows)
                    .collect();
                for sample in chunk {
                    self.accumulate_one(sample, first, second, &mut sums, &mut scratch);
                }
                sums
            })
            .collect();
        let mut total = ShadowSums::empty(first.len(), second.len());
        for sums in &chunks {
            total.merge(sums);
        }
        total
    }

    fn accumulate_one(
        &self,
        sample: &ShadowSample,
        first: &[DirectionRows],
        second: &[(DirectionRows, DirectionRows, DirectionRows)],
        sums: &mut ShadowSums,
        ws: &mut Scratch,
    ) {
        let need_derivs = !first.is_empty() || !second.is_empty();
        let Scratch {
            x,
            b,
            a,
            pf_buf,
            a_inv,
            xyt,
            g_first,
            g_second,
            symmetric,
            m1,
            m2,
            q2,
            acc1,
            acc2,
        } = ws;
        sample.q.conjugated_covariance_into(sample.b, x);
        Self::sandwich_into(&self.y, &self.y, x, b);
        let dim_s = b.nrows();

        // X Yᵀ, shared by every direction: G_i = dY_i (X Yᵀ).
        if need_derivs {
            let y_slice = self.y.as_slice();
            for mu in 0..2 * self.n_qubits {
                let (nu, val) = x[mu];
                let ycol = &y_slice[nu * dim_s..(nu + 1) * dim_s];
                for r in 0..dim_s {
                    xyt[(mu, r)] = ycol[r] * val;
                }
            }
            for (i, d) in first.iter().enumerate() {
                matmul_into(&d.rows, xyt, &mut g_first[i]);
            }
            for (i, (d1, d2, d12)) in second.iter().enumerate() {
                matmul_into(&d1.rows, xyt, &mut g_second[i].0);
                if !symmetric.get(i).copied().unwrap_or(false) {
                    matmul_into(&d2.rows, xyt, &mut g_second[i].1);
                }
                matmul_into(&d12.rows, xyt, &mut g_second[i].2);
                Self::sandwich_into(&d1.rows, &d2.rows, x, &mut g_second[i].3);
            }
        }

        let mut o_p = c64(0.0, 0.0);
        acc1.clear();
        acc1.resize(first.len(), c64(0.0, 0.0));
        acc2.clear();
        acc2.resize(second.len(), c64(0.0, 0.0));
        for (k, &z) in self.nodes.iter().enumerate() {
            let zc = c64(z, 0.0);
            // A(z) = C_s + z B into the reusable buffer.
            {
                let cs = self.c_s.as_slice();
                let bs = b.as_slice();
                let avs = a.as_mut_slice();
                for idx in 0..avs.len() {
                    avs[idx] = cs[idx] + bs[idx] * zc;
                }
            }
            let pf = if dim_s <= 6 {
                pfaffian_small(a)
            } else {
                pf_buf.as_mut_slice().copy_from_slice(a.as_slice());
                pfaffian_in_place(pf_buf).to_complex()
            };
            o_p += self.alpha[k] * pf;
            if !need_derivs {
                continue;
            }
            let scale = a.iter().map(|v| v.norm()).fold(1e-300, f64::max);
            let have_inverse = if pf.norm() > 1e-12 * scale.powi(dim_s as i32 / 2) {
                if dim_s <= 6 {
                    small_antisymmetric_inverse(a, pf, a_inv)
                } else {
                    match a.clone().try_inverse() {
                        Some(inv) => {
                            a_inv.copy_from(&inv);
                            true
                        }
                        None => false,
                    }
                }
            } else {
                false
            };
            if !have_inverse {
                // A(z_k) numerically singular: finite differences on the
                // node Pfaffian keep the sample usable.
                sums.fallbacks += 1;
                for (i, g) in g_first.iter().enumerate() {
                    let db = g - g.transpose();
                    acc1[i] += self.alpha[k] * Self::node_fd(a, &db, zc);
                }
                for (i, (g1, g2, g12, hx)) in g_second.iter().enumerate() {
                    let sym = symmetric.get(i).copied().unwrap_or(false);
                    let db1 = g1 - g1.transpose();
                    let db2 = if sym {
                        db1.clone()
                    } else {
                        g2 - g2.transpose()
                    };
                    let db12 = (g12 - g12.transpose()) + (hx - hx.transpose());
                    acc2[i] += self.alpha[k] * Self::node_fd2(a, &db1, &db2, &db12, zc);
                }
                continue;
            }
            for (i, g) in g_first.iter().enumerate() {
                // dPf = (Pf/2) Tr(A⁻¹ z (G - Gᵀ)) = Pf z Tr(A⁻¹ G)
                let tr = trace_prod(a_inv, g);
                acc1[i] += self.alpha[k] * pf * zc * tr;
            }
            for (i, (g1, g2_raw, g12, hx)) in g_second.iter().enumerate() {
                let sym = symmetric.get(i).copied().unwrap_or(false);
                let g2 = if sym { g1 } else { g2_raw };
                let tr1 = trace_prod(a_inv, g1) * 2.0 * zc;
                let tr2 = if sym {
                    tr1
                } else {
                    trace_prod(a_inv, g2) * 2.0 * zc
                };
                let tr_d2a = zc * 2.0 * (trace_prod(a_inv, g12) + trace_prod(a_inv, hx));
                matmul_into(a_inv, g1, m1);
                if sym {
                    m2.copy_from(m1);
                } else {
                    matmul_into(a_inv, g2, m2);
                }
                // Tr(A⁻¹(G₁-G₁ᵀ)A⁻¹(G₂-G₂ᵀ)) = 2[Tr(A⁻¹G₁A⁻¹G₂) - Tr(A⁻¹G₁A⁻¹G₂ᵀ)]
                // with A⁻¹G₂ᵀ = -(G₂A⁻¹)ᵀ, so the second trace is the
                // negated elementwise product of A⁻¹G₁ with G₂A⁻¹.
                let t_a = trace_prod(m1, m2);
                matmul_into(g2, a_inv, q2);
                let mut t_b = c64(0.0, 0.0);
                {
                    let ms = m1.as_slice();
                    let qs = q2.as_slice();
                    for idx in 0..ms.len() {
                        t_b += ms[idx] * qs[idx];
                    }
                }
                let middle = zc * zc * 2.0 * (t_a + t_b);
                let second_val = pf * 0.5 * (tr_d2a - middle + 0.5 * tr1 * tr2);
                acc2[i] += self.alpha[k] * second_val;
            }
        }
        sums.overlap.push(self.kappa * o_p);
        for (acc, v) in sums.first.iter_mut().zip(acc1.iter()) {
            acc.push(self.kappa * v);
        }
        for (acc, v) in sums.second.iter_mut().zip(acc2.iter()) {
            acc.push(self.kappa * v);
        }
    }

    fn node_fd(a: &CMat, db: &CMat, z: Complex64) -> Complex64 {
        let h = 1e-6;
        let mut plus = a + db * (z * h);
        let mut minus = a - db * (z * h);
        (pfaffian_in_place(&mut plus).to_complex() - pfaffian_in_place(&mut minus).to_complex())
            / (2.0 * h)
    }

    fn node_fd2(a: &CMat, db1: &CMat, db2: &CMat, db12: &CMat, z: Complex64) -> Complex64 {
        let h = 1e-4;
        let eval = |l1: f64, l2: f64| {
            let mut m = a + db1 * (z * l1) + db2 * (z * l2) + db12 * (z * l1 * l2);
            pfaffian_in_place(&mut m).to_complex()
        };
        (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h)
    }
}

/// out = a · b for small dense complex matrices, on raw column-major
/// slices (measurably faster than the generic path at these sizes).
fn matmul_into(a: &CMat, b: &CMat, out: &mut CMat) {
    let (m, kk, n) = (a.nrows(), a.ncols(), b.ncols());
    debug_assert_eq!(b.nrows(), kk);
    debug_assert_eq!((out.nrows(), out.ncols()), (m, n));
    let a_s = a.as_slice();
    let b_s = b.as_slice();
    let o = out.as_mut_slice();
    o.fill(c64(0.0, 0.0));
    for j in 0..n {
        let ocol = &mut o[j * m..(j + 1) * m];
        for k in 0..kk {
            let coef = b_s[j * kk + k];
            if coef == c64(0.0, 0.0) {
                continue;
            }
            let acol = &a_s[k * m..(k + 1) * m];
            for i in 0..m {
                ocol[i] += acol[i] * coef;
            }
        }
    }
}

/// Tr(X Y) where both are square of equal size.
fn trace_prod(x: &CMat, y: &CMat) -> Complex64 {
    let n = x.nrows();
    let mut acc = c64(0.0, 0.0);
    for r in 0..n {
        for c in 0..n {
            acc += x[(r, c)] * y[(c, r)];
        }
    }
    acc
}

/// Channel prefactor κ(N, η) = 2 i^{η/2} / 2^{N-η/2}; the factor 2
/// converts superposition-state estimates into ⟨Ψ_T|φ⟩. Pinned against the
/// dense channel-inverse oracle.
fn channel_prefactor(n: usize, eta: usize) -> Complex64 {
    let i_pow = match (eta / 2) % 4 {
        0 => c64(1.0, 0.0),
        1 => c64(0.0, 1.0),
        2 => c64(-1.0, 0.0),
        _ => c64(0.0, -1.0),
    };
    let scale = 2.0 / 2f64.powi(n as i32 - eta as i32 / 2);
    i_pow * scale
}

/// Shadow estimate of ⟨Ψ_T|φ⟩.
pub fn estimate_overlap(
    set: &ShadowSet,
    walker: &WalkerMatrix,
) -> Result<OverlapEstimate, OverlapError> {
    let kernel = ShadowKernel::new(set, walker)?;
    let sums = kernel.accumulate(&[], &[]);
    Ok(sums.overlap_estimate())
}

/// Overlap polynomial of one sample (spec surface; the batched kernel uses
/// precomputed interpolation weights instead).
pub fn overlap_polynomial(
    sample: &ShadowSample,
    walker: &WalkerMatrix,
    set: &ShadowSet,
) -> Result<OverlapPolynomial, OverlapError> {
    let kernel = ShadowKernel::new(set, walker)?;
    Ok(kernel.polynomial(sample))
}

/// Force-bias ratios ⟨Ψ_T|v_γ|φ⟩ / ⟨Ψ_T|φ⟩ with v_γ = i L̂_γ, one per
/// Cholesky vector, by analytic differentiation on the shared samples.
pub fn force_bias(
    set: &ShadowSet,
    walker: &WalkerMatrix,
    ham: &CholeskyHamiltonian,
    overlap: &OverlapEstimate,
) -> Result<Vec<Complex64>, OverlapError> {
    let guard = 1e-12 * overlap.std_err();
    if overlap.value.norm() <= guard {
        return Err(OverlapError::VanishingOverlap {
            overlap: overlap.value.norm(),
            guard,
        });
    }
    let kernel = ShadowKernel::new(set, walker)?;
    let dirs: Vec<DirectionRows> = ham
        .l_vectors
        .iter()
        .map(|l| {
            let l_so = crate::focksim::one_body_spin_matrix(l);
            kernel.direction_rows(&(&l_so * &walker.v))
        })
        .collect();
    let sums = kernel.accumulate(&dirs, &[]);
    let denom = sums.overlap.mean();
    Ok(sums
        .first
        .iter()
        .map(|acc| I * acc.mean() / denom)
        .collect())
}

/// Local energy E_L = e_core + ⟨v0⟩ + ½ Σ_γ ⟨L̂_γ²⟩, every ratio taken
/// against ⟨Ψ_T|φ⟩ over the same shadow samples.
pub fn local_energy(
    set: &ShadowSet,
    walker: &WalkerMatrix,
    ham: &CholeskyHamiltonian,
    overlap: &OverlapEstimate,
) -> Result<Complex64, OverlapError> {
    let guard = 1e-12 * overlap.std_err();
    if overlap.value.norm() <= guard {
        return Err(OverlapError::VanishingOverlap {
            overlap: overlap.value.norm(),
            guard,
        });
    }
    let kernel = ShadowKernel::new(set, walker)?;
    let v0_so = crate::focksim::one_body_spin_matrix(&ham.v0);
    let first = vec![kernel.direction_rows(&(&v0_so * &walker.v))];
    let second: Vec<(DirectionRows, DirectionRows, DirectionRows)> = ham
        .l_vectors
        .iter()
        .map(|l| {
            let l_so = crate::focksim::one_body_spin_matrix(l);
            let lv = &l_so * &walker.v;
            let llv = &l_so * &lv;
            kernel.second_direction_rows(&lv, &lv, &llv)
        })
        .collect();
    let sums = kernel.accumulate(&first, &second);
    let denom = sums.overlap.mean();
    let one_body = sums.first[0].mean() / denom;
    let two_body: Complex64 = sums
        .second
        .iter()
        .map(|acc| acc.mean() / denom)
        .sum::<Complex64>()
        * 0.5;
    Ok(Complex64::new(ham.e_core, 0.0) + one_body + two_body)
}
