//! Virtual correlation energy embedding.
//!
//! A walker living in the full orbital space is reduced, per spin, through
//! an SVD of its core-row block: the core contributes determinant factors,
//! the virtual rows drop out entirely, and what remains is a renormalized
//! active-space walker whose overlap with the active trial is delegated to
//! an active-space estimator. Derivatives for force bias and local energy
//! run through the same factorization with the core frame frozen at the
//! base point, so every term is a trace identity plus an active-space
//! directional derivative.

use crate::estimator::{Estimator, EstimatorError, EvalRequest, WalkerEstimates};
use crate::focksim::{ops, FockState};
use crate::integrals::{CholeskyHamiltonian, EmbeddedSystem};
use crate::overlap::{DirectionRows, ShadowKernel, WalkerMatrix};
use crate::shadows::ShadowSet;
use crate::{CMat, Complex64};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VceError {
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("core overlap is rank deficient (singular value {0:.3e}); walker decoupled from the core sector")]
    DecoupledCore(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Orbital-space partition for the embedding. Blocks must be ordered
/// core < active < virtual in the global spatial numbering so the
/// tensor-product trial carries no occupation-dependent reordering signs.
#[derive(Debug, Clone)]
pub struct CorePartition {
    pub n_spatial: usize,
    pub core: Vec<usize>,
    pub active: Vec<usize>,
    pub virtuals: Vec<usize>,
}

impl CorePartition {
    pub fn new(n_spatial: usize, core: Vec<usize>, active: Vec<usize>) -> Result<Self, VceError> {
        let mut seen = vec![false; n_spatial];
        for &i in core.iter().chain(active.iter()) {
            if i >= n_spatial {
                return Err(VceError::Partition(format!("orbital {i} out of range")));
            }
            if seen[i] {
                return Err(VceError::Partition(format!("orbital {i} repeated")));
            }
            seen[i] = true;
        }
        let virtuals: Vec<usize> = (0..n_spatial).filter(|i| !seen[*i]).collect();
        for w in [&core, &active] {
            if w.windows(2).any(|p| p[0] >= p[1]) {
                return Err(VceError::Partition("blocks must be ascending".into()));
            }
        }
        if let (Some(&cmax), Some(&amin)) = (core.last(), active.first()) {
            if cmax >= amin {
                return Err(VceError::Partition(
                    "core orbitals must precede active orbitals; relabel the basis".into(),
                ));
            }
        }
        if let (Some(&amax), Some(&vmin)) = (active.last(), virtuals.first()) {
            if amax >= vmin {
                return Err(VceError::Partition(
                    "active orbitals must precede virtual orbitals; relabel the basis".into(),
                ));
            }
        }
        Ok(CorePartition {
            n_spatial,
            core,
            active,
            virtuals,
        })
    }

    pub fn from_embedded(emb: &EmbeddedSystem) -> Result<Self, VceError> {
        CorePartition::new(emb.n_orb_full, emb.core.clone(), emb.active.clone())
    }

    pub fn n_core(&self) -> usize {
        self.core.len()
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }
}

/// Per-spin factorization of a full-space walker block at the base point.
struct SpinEmbed {
    /// Right-singular block of the core overlap, η×N_c.
    v_c: CMat,
    /// Orthonormal completion of v_c, η×(η-N_c).
    v_prime: CMat,
    /// A₀ = φ_c V_c and its inverse.
    a0_inv: CMat,
    det_a0: Complex64,
    det_v_full: Complex64,
    /// Active rows of the walker.
    phi_a: CMat,
    /// Renormalized active walker φ_a V'.
    phi_active: CMat,
}

fn select_rows(m: &CMat, rows: &[usize]) -> CMat {
    let mut out = CMat::zeros(rows.len(), m.ncols());
    for (i, &r) in rows.iter().enumerate() {
        for c in 0..m.ncols() {
            out[(i, c)] = m[(r, c)];
        }
    }
    out
}

/// Orthonormal completion of a set of orthonormal columns (η×k → η×(η-k)).
fn completion_columns(v: &CMat) -> Result<CMat, VceError> {
    let (n, k) = (v.nrows(), v.ncols());
    if k == n {
        return Ok(CMat::zeros(n, 0));
    }
    let mut work = CMat::identity(n, n) - v * v.adjoint();
    let mut cols = Vec::with_capacity(n - k);
    for _ in 0..n - k {
        let (mut best, mut best_norm) = (0usize, -1.0f64);
        for j in 0..n {
            let nj = work.column(j).norm();
            if nj > best_norm {
                best_norm = nj;
                best = j;
            }
        }
        if best_norm < 1e-10 {
            return Err(VceError::Dimension("completion rank deficiency".into()));
        }
        let mut col = work.column(best).into_owned();
        col /= c64(col.norm(), 0.0);
        for j in 0..n {
            let ov: Complex64 = col.dotc(&work.column(j).into_owned());
            for r in 0..n {
                let upd = col[r] * ov;
                work[(r, j)] -= upd;
            }
        }
        cols.push(col);
    }
    let mut out = CMat::zeros(n, n - k);
    for (j, col) in cols.iter().enumerate() {
        out.set_column(j, col);
    }
    Ok(out)
}

fn spin_embed(phi: &CMat, part: &CorePartition) -> Result<SpinEmbed, VceError> {
    let eta = phi.ncols();
    let n_c = part.n_core();
    if eta < n_c {
        return Err(VceError::Dimension(format!(
            "walker has {eta} electrons of one spin, fewer than {n_c} core orbitals"
        )));
    }
    let phi_c = select_rows(phi, &part.core);
    let phi_a = select_rows(phi, &part.active);
    if n_c == 0 {
        return Ok(SpinEmbed {
            v_c: CMat::zeros(eta, 0),
            v_prime: CMat::identity(eta, eta),
            a0_inv: CMat::zeros(0, 0),
            det_a0: c64(1.0, 0.0),
            det_v_full: c64(1.0, 0.0),
            phi_active: phi_a.clone(),
            phi_a,
        });
    }
    // SVD of the core block: φ_c = U Σ V_c†.
    let svd = phi_c.clone().svd(true, true);
    let min_sv = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_sv < 1e-10 {
        return Err(VceError::DecoupledCore(min_sv));
    }
    let v_c = svd.v_t.as_ref().unwrap().adjoint(); // η × N_c
    let v_prime = completion_columns(&v_c)?;
    let mut v_full = CMat::zeros(eta, eta);
    for j in 0..n_c {
        v_full.set_column(j, &v_c.column(j));
    }
    for j in 0..eta - n_c {
        v_full.set_column(n_c + j, &v_prime.column(j));
    }
    let a0 = &phi_c * &v_c;
    let det_a0 = a0.clone().determinant();
    let a0_inv = a0.try_inverse().ok_or(VceError::DecoupledCore(min_sv))?;
    let det_v_full = v_full.determinant();
    let phi_active = &phi_a * &v_prime;
    Ok(SpinEmbed {
        v_c,
        v_prime,
        a0_inv,
        det_a0,
        det_v_full,
        phi_a,
        phi_active,
    })
}

/// Splits an interleaved full-space walker into spin blocks, requiring
/// spin-pure columns ordered α block then β block.
pub fn split_spin_columns(full: &CMat) -> Result<(CMat, CMat), VceError> {
    let n_so = full.nrows();
    if !n_so.is_multiple_of(2) {
        return Err(VceError::Dimension("odd spin-orbital count".into()));
    }
    let n = n_so / 2;
    let mut alpha_cols: Vec<usize> = Vec::new();
    let mut beta_cols: Vec<usize> = Vec::new();
    for j in 0..full.ncols() {
        let mut a_norm = 0.0;
        let mut b_norm = 0.0;
        for k in 0..n {
            a_norm += full[(2 * k, j)].norm_sqr();
            b_norm += full[(2 * k + 1, j)].norm_sqr();
        }
        if a_norm > 1e-20 && b_norm > 1e-20 {
            return Err(VceError::Dimension(format!(
                "column {j} mixes spin sectors"
            )));
        }
        if a_norm >= b_norm {
            alpha_cols.push(j);
        } else {
            beta_cols.push(j);
        }
    }
    if alpha_cols.iter().max().unwrap_or(&0) > beta_cols.iter().min().unwrap_or(&usize::MAX) {
        return Err(VceError::Dimension(
            "columns must be ordered alpha block then beta block".into(),
        ));
    }
    let mut a = CMat::zeros(n, alpha_cols.len());
    for (jj, &j) in alpha_cols.iter().enumerate() {
        for k in 0..n {
            a[(k, jj)] = full[(2 * k, j)];
        }
    }
    let mut b = CMat::zeros(n, beta_cols.len());
    for (jj, &j) in beta_cols.iter().enumerate() {
        for k in 0..n {
            b[(k, jj)] = full[(2 * k + 1, j)];
        }
    }
    Ok((a, b))
}

/// Interleaves per-spin active walkers into a single matrix over active
/// spin-orbitals with α columns first.
fn assemble_active(phi_alpha: &CMat, phi_beta: &CMat) -> CMat {
    let n_act = phi_alpha.nrows();
    debug_assert_eq!(phi_beta.nrows(), n_act);
    let (na, nb) = (phi_alpha.ncols(), phi_beta.ncols());
    let mut out = CMat::zeros(2 * n_act, na + nb);
    for j in 0..na {
        for k in 0..n_act {
            out[(2 * k, j)] = phi_alpha[(k, j)];
        }
    }
    for j in 0..nb {
        for k in 0..n_act {
            out[(2 * k + 1, na + j)] = phi_beta[(k, j)];
        }
    }
    out
}

/// Global fermionic reordering sign between the interleaved full-space
/// determinant and the per-spin factorized form: the β-core creations move
/// past the higher α-core creations (N_c(N_c-1)/2 crossings) and past the
/// α-active block (N_c·η_aα crossings); the pattern-dependent crossings
/// inside the active block cancel against the interleaved active-space
/// evaluation.
fn embedding_sign(n_core: usize, eta_a_alpha: usize) -> f64 {
    if n_core == 0 {
        return 1.0;
    }
    let crossings = n_core * (n_core - 1) / 2 + n_core * eta_a_alpha;
    if crossings.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Full-space trial-walker overlap through the active-space functional:
/// per spin, SVD the core block, fold the determinant factors, and hand
/// the renormalized active walker to `active_overlap`, which must be the
/// multilinear overlap functional ⟨Ψ_T,a|φ_a⟩ (QR normalization is applied
/// here, with det R tracked).
pub fn embed_overlap<F>(
    phi_alpha: &CMat,
    phi_beta: &CMat,
    part: &CorePartition,
    active_overlap: F,
) -> Result<Complex64, VceError>
where
    F: FnOnce(&WalkerMatrix) -> Result<Complex64, EstimatorError>,
{
    let ea = spin_embed(phi_alpha, part)?;
    let eb = spin_embed(phi_beta, part)?;
    let assembled = assemble_active(&ea.phi_active, &eb.phi_active);
    if assembled.ncols() == 0 {
        return Err(VceError::Dimension("no active electrons".into()));
    }
    let (walker, det_r) =
        WalkerMatrix::from_columns(assembled).map_err(|e| VceError::Dimension(e.to_string()))?;
    let g = active_overlap(&walker)?;
    let sign = embedding_sign(part.n_core(), ea.phi_active.ncols());
    Ok(sign * ea.det_a0 / ea.det_v_full * eb.det_a0 / eb.det_v_full * det_r * g)
}

/// Embeds an active-space state into the full Fock space with doubly
/// occupied core and empty virtuals (ordered partitions carry no extra
/// reordering signs).
pub fn embed_trial(part: &CorePartition, active_state: &FockState) -> FockState {
    let n_act = part.n_active();
    debug_assert_eq!(active_state.n_qubits, 2 * n_act);
    let n_full = 2 * part.n_spatial;
    let mut core_bits = 0u64;
    for &c in &part.core {
        core_bits |= 1 << (2 * c);
        core_bits |= 1 << (2 * c + 1);
    }
    let mut amps = vec![c64(0.0, 0.0); 1 << n_full];
    for (s, &amp) in active_state.amps.iter().enumerate() {
        if amp == c64(0.0, 0.0) {
            continue;
        }
        let mut bits = core_bits;
        for k in 0..n_act {
            for sp in 0..2usize {
                if s >> (2 * k + sp) & 1 == 1 {
                    bits |= 1 << (2 * part.active[k] + sp);
                }
            }
        }
        amps[bits as usize] = amp;
    }
    FockState::raw(n_full, amps)
}

/// Active-space overlap backend used by the VCE estimator: the overlap of
/// the active trial with an orthonormal active walker plus directional
/// derivatives, all over a shared sample set when shadow-based.
pub trait ActiveModel: Sync {
    fn n_qubits(&self) -> usize;
    fn eta(&self) -> usize;
    fn batch(
        &self,
        walker: &WalkerMatrix,
        first: &[CMat],
        second: &[(CMat, CMat, CMat)],
    ) -> Result<ActiveBatch, EstimatorError>;
}

#[derive(Debug, Clone)]
pub struct ActiveBatch {
    pub overlap: Complex64,
    pub std_err: f64,
    pub first: Vec<Complex64>,
    pub second: Vec<Complex64>,
}

/// Dense active-space backend: exact multilinear derivatives by column
/// replacement.
pub struct DenseActiveModel {
    pub trial: FockState,
    pub eta: usize,
}

impl ActiveModel for DenseActiveModel {
    fn n_qubits(&self) -> usize {
        self.trial.n_qubits
    }

    fn eta(&self) -> usize {
        self.eta
    }

    fn batch(
        &self,
        walker: &WalkerMatrix,
        first: &[CMat],
        second: &[(CMat, CMat, CMat)],
    ) -> Result<ActiveBatch, EstimatorError> {
        let n = walker.n_qubits;
        let zeta = walker.zeta;
        let value = |cols: &CMat| -> Complex64 { self.trial.inner(&ops::walker_to_fock(n, cols)) };
        let overlap = value(&walker.v);
        let d_first: Vec<Complex64> = first
            .iter()
            .map(|dv| {
                let mut acc = c64(0.0, 0.0);
                for j in 0..zeta {
                    let mut cols = walker.v.clone();
                    cols.set_column(j, &dv.column(j));
                    acc += value(&cols);
                }
                acc
            })
            .collect();
        let d_second: Vec<Complex64> = second
            .iter()
            .map(|(d1, d2, d12)| {
                let mut acc = c64(0.0, 0.0);
                for j in 0..zeta {
                    let mut cols = walker.v.clone();
                    cols.set_column(j, &d12.column(j));
                    acc += value(&cols);
                }
                for j in 0..zeta {
                    for jp in 0..zeta {
                        if j == jp {
                            continue;
                        }
                        let mut cols = walker.v.clone();
                        cols.set_column(j, &d1.column(j));
                        cols.set_column(jp, &d2.column(jp));
                        acc += value(&cols);
                    }
                }
                acc
            })
            .collect();
        Ok(ActiveBatch {
            overlap,
            std_err: 0.0,
            first: d_first,
            second: d_second,
        })
    }
}

/// Shadow-backed active model over a fixed sample set.
pub struct ShadowActiveModel {
    pub set: ShadowSet,
}

impl ActiveModel for ShadowActiveModel {
    fn n_qubits(&self) -> usize {
        self.set.n_qubits
    }

    fn eta(&self) -> usize {
        self.set.eta
    }

    fn batch(
        &self,
        walker: &WalkerMatrix,
        first: &[CMat],
        second: &[(CMat, CMat, CMat)],
    ) -> Result<ActiveBatch, EstimatorError> {
        let kernel = ShadowKernel::new(&self.set, walker)?;
        let f: Vec<DirectionRows> = first.iter().map(|d| kernel.direction_rows(d)).collect();
        let s: Vec<_> = second
            .iter()
            .map(|(d1, d2, d12)| kernel.second_direction_rows(d1, d2, d12))
            .collect();
        let sums = kernel.accumulate(&f, &s);
        let est = sums.overlap_estimate();
        Ok(ActiveBatch {
            overlap: est.value,
            std_err: est.std_err(),
            first: sums.first.iter().map(|a| a.mean()).collect(),
            second: sums.second.iter().map(|a| a.mean()).collect(),
        })
    }
}

/// Full-space estimator routing overlap, force bias, and local energy
/// through the embedding onto an active-space model, with propagation
/// quantities taken from the full-space Hamiltonian.
pub struct VceEstimator<M: ActiveModel> {
    pub ham: CholeskyHamiltonian,
    pub partition: CorePartition,
    pub model: M,
    pub eta_total: usize,
}

impl<M: ActiveModel> VceEstimator<M> {
    pub fn new(
        ham: CholeskyHamiltonian,
        partition: CorePartition,
        model: M,
        eta_total: usize,
    ) -> Result<Self, VceError> {
        if ham.n_orb != partition.n_spatial {
            return Err(VceError::Dimension(format!(
                "hamiltonian has {} orbitals, partition {}",
                ham.n_orb, partition.n_spatial
            )));
        }
        Ok(VceEstimator {
            ham,
            partition,
            model,
            eta_total,
        })
    }
}

struct SpinDirection {
    d_a: Complex64,
    d_phi: CMat,
    // second-order pieces (same L twice)
    d2_a: Complex64,
    d2_phi: CMat,
    tr_da_sq: Complex64,
}

fn spin_direction(
    emb: &SpinEmbed,
    l: &crate::RMat,
    part: &CorePartition,
    phi: &CMat,
    with_second: bool,
) -> SpinDirection {
    let lc = CMat::from_fn(l.nrows(), l.ncols(), |i, j| c64(l[(i, j)], 0.0));
    let dphi = &lc * phi;
    let dphi_c = select_rows(&dphi, &part.core);
    let dphi_a = select_rows(&dphi, &part.active);
    let n_c = part.n_core();
    if n_c == 0 {
        let d_phi = &dphi_a * &emb.v_prime;
        let (d2_a, d2_phi, tr_da_sq) = if with_second {
            let d2phi = &lc * &dphi;
            let d2phi_a = select_rows(&d2phi, &part.active);
            (c64(0.0, 0.0), &d2phi_a * &emb.v_prime, c64(0.0, 0.0))
        } else {
            (c64(0.0, 0.0), CMat::zeros(0, 0), c64(0.0, 0.0))
        };
        return SpinDirection {
            d_a: c64(0.0, 0.0),
            d_phi,
            d2_a,
            d2_phi,
            tr_da_sq,
        };
    }
    let da = &dphi_c * &emb.v_c;
    let ainv_da = &emb.a0_inv * &da;
    let d_a: Complex64 = (0..n_c).map(|i| ainv_da[(i, i)]).sum();
    // ∂h = A₀⁻¹ dφ_c V'
    let dh = &emb.a0_inv * (&dphi_c * &emb.v_prime);
    let d_phi = &dphi_a * &emb.v_prime - (&emb.phi_a * &emb.v_c) * &dh;
    if !with_second {
        return SpinDirection {
            d_a,
            d_phi,
            d2_a: c64(0.0, 0.0),
            d2_phi: CMat::zeros(0, 0),
            tr_da_sq: c64(0.0, 0.0),
        };
    }
    let d2phi = &lc * &dphi;
    let d2phi_c = select_rows(&d2phi, &part.core);
    let d2phi_a = select_rows(&d2phi, &part.active);
    let d2a = &d2phi_c * &emb.v_c;
    let ainv_d2a = &emb.a0_inv * &d2a;
    let d2_a: Complex64 = (0..n_c).map(|i| ainv_d2a[(i, i)]).sum();
    let prod = &ainv_da * &ainv_da;
    let tr_da_sq: Complex64 = (0..n_c).map(|i| prod[(i, i)]).sum();
    // ∂²h = -2 A₀⁻¹ dA ∂h + A₀⁻¹ d²φ_c V'
    let d2h = &emb.a0_inv * (&d2phi_c * &emb.v_prime) - (&ainv_da * &dh) * c64(2.0, 0.0);
    let d2_phi = &d2phi_a * &emb.v_prime
        - (&dphi_a * &emb.v_c) * &dh * c64(2.0, 0.0)
        - (&emb.phi_a * &emb.v_c) * &d2h;
    SpinDirection {
        d_a,
        d_phi,
        d2_a,
        d2_phi,
        tr_da_sq,
    }
}

impl<M: ActiveModel> Estimator for VceEstimator<M> {
    fn n_qubits(&self) -> usize {
        2 * self.partition.n_spatial
    }

    fn eta(&self) -> usize {
        self.eta_total
    }

    fn n_fields(&self) -> usize {
        self.ham.l_vectors.len()
    }

    fn evaluate(
        &self,
        walker: &WalkerMatrix,
        req: EvalRequest,
    ) -> Result<WalkerEstimates, EstimatorError> {
        let to_est = |e: VceError| EstimatorError::Dimension(e.to_string());
        let (phi_a, phi_b) = split_spin_columns(&walker.v).map_err(to_est)?;
        let part = &self.partition;
        let ea = spin_embed(&phi_a, part).map_err(to_est)?;
        let eb = spin_embed(&phi_b, part).map_err(to_est)?;
        let assembled = assemble_active(&ea.phi_active, &eb.phi_active);
        let qr = assembled.clone().qr();
        let mut q = qr.q();
        let r = qr.r();
        let k_act = assembled.ncols();
        let mut det_r = c64(1.0, 0.0);
        let mut r_pos = r.clone();
        for j in 0..k_act {
            let d = r[(j, j)];
            if d.norm() < 1e-12 {
                return Err(EstimatorError::Dimension(
                    "active walker rank deficient".into(),
                ));
            }
            let phase = d / d.norm();
            det_r *= d;
            for kk in 0..q.nrows() {
                q[(kk, j)] *= phase;
            }
            for cc in 0..k_act {
                r_pos[(j, cc)] *= phase.conj();
            }
        }
        let active_walker = WalkerMatrix::new(q).map_err(EstimatorError::Overlap)?;
        let r_inv = r_pos
            .try_inverse()
            .ok_or_else(|| EstimatorError::Dimension("R not invertible".into()))?;

        // Assemble direction requests for the active model.
        let mut first_dirs: Vec<CMat> = Vec::new();
        let mut second_dirs: Vec<(CMat, CMat, CMat)> = Vec::new();
        let mut spin_dirs: Vec<(SpinDirection, SpinDirection)> = Vec::new();
        let mut v0_dir: Option<(SpinDirection, SpinDirection)> = None;
        if req.force_bias || req.local_energy {
            for l in &self.ham.l_vectors {
                let da = spin_direction(&ea, l, part, &phi_a, req.local_energy);
                let db = spin_direction(&eb, l, part, &phi_b, req.local_energy);
                let assembled_d = assemble_active(&da.d_phi, &db.d_phi) * &r_inv;
                first_dirs.push(assembled_d.clone());
                if req.local_energy {
                    let assembled_d2 = assemble_active(&da.d2_phi, &db.d2_phi) * &r_inv;
                    second_dirs.push((assembled_d.clone(), assembled_d, assembled_d2));
                }
                spin_dirs.push((da, db));
            }
        }
        if req.local_energy {
            let da = spin_direction(&ea, &self.ham.v0, part, &phi_a, false);
            let db = spin_direction(&eb, &self.ham.v0, part, &phi_b, false);
            first_dirs.push(assemble_active(&da.d_phi, &db.d_phi) * &r_inv);
            v0_dir = Some((da, db));
        }

        let batch = self
            .model
            .batch(&active_walker, &first_dirs, &second_dirs)?;
        let g = batch.overlap;
        let sign = embedding_sign(part.n_core(), ea.phi_active.ncols());
        let scalar = sign * ea.det_a0 / ea.det_v_full * eb.det_a0 / eb.det_v_full * det_r;
        let overlap = scalar * g;

        let force_bias = if req.force_bias {
            Some(
                spin_dirs
                    .iter()
                    .zip(first_dirs.iter())
                    .enumerate()
                    .map(|(i, ((da, db), _))| {
                        let dg_over_g = batch.first[i] / g;
                        Complex64::new(0.0, 1.0) * (da.d_a + db.d_a + dg_over_g)
                    })
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };

        let local_energy = if req.local_energy {
            let (v0a, v0b) = v0_dir.as_ref().unwrap();
            let v0_g = batch.first[self.ham.l_vectors.len()] / g;
            let one_body = v0a.d_a + v0b.d_a + v0_g;
            let mut two_body = c64(0.0, 0.0);
            for (i, (da, db)) in spin_dirs.iter().enumerate() {
                let dg = batch.first[i] / g;
                let d2g = batch.second[i] / g;
                let t_a = da.d_a;
                let t_b = db.d_a;
                let u2_a = da.d2_a - da.tr_da_sq + t_a * t_a;
                let u2_b = db.d2_a - db.tr_da_sq + t_b * t_b;
                let total = u2_a + u2_b + d2g + 2.0 * t_a * t_b + 2.0 * (t_a + t_b) * dg;
                two_body += total;
            }
            Some(Complex64::new(self.ham.e_core, 0.0) + one_body + 0.5 * two_body)
        } else {
            None
        };

        Ok(WalkerEstimates {
            overlap,
            overlap_std_err: batch.std_err * scalar.norm(),
            force_bias,
            local_energy,
        })
    }
}
