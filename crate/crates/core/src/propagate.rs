//! Phaseless AFQMC driver: imaginary-time propagation of a walker
//! ensemble with force-bias importance sampling, phaseless weights,
//! stochastic-reconfiguration population control, block energy
//! accumulation, outlier filtering, reblocking, and checkpoint/restart.

use crate::estimator::{Estimator, EvalRequest};
use crate::integrals::CholeskyHamiltonian;
use crate::overlap::WalkerMatrix;
use crate::util::{expm, io, Fnv64};
use crate::{CMat, Complex64, RMat};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PropagateError {
    #[error("total walker weight collapsed to zero at block {0}")]
    PopulationCollapse(u64),
    #[error("trace too short: {have} blocks, need more than {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid run setup: {0}")]
    Setup(String),
}

/// Per-spin orbital blocks of a walker; columns are ordered α then β when
/// interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinWalker {
    pub alpha: CMat,
    pub beta: CMat,
}

impl SpinWalker {
    /// Interleaved spin-orbital matrix (row 2k = α orbital k, 2k+1 = β).
    pub fn interleaved(&self) -> CMat {
        let n = self.alpha.nrows();
        let (na, nb) = (self.alpha.ncols(), self.beta.ncols());
        let mut out = CMat::zeros(2 * n, na + nb);
        for j in 0..na {
            for k in 0..n {
                out[(2 * k, j)] = self.alpha[(k, j)];
            }
        }
        for j in 0..nb {
            for k in 0..n {
                out[(2 * k + 1, na + j)] = self.beta[(k, j)];
            }
        }
        out
    }
}

/// Mean-field determinant: lowest eigenvectors of the one-body matrix,
/// the standard starting ensemble when the canonical basis is not already
/// the mean-field one.
pub fn mean_field_walker(ham: &CholeskyHamiltonian, n_alpha: usize, n_beta: usize) -> SpinWalker {
    let eig = ham.t.clone().symmetric_eigen();
    let n = ham.n_orb;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let build = |count: usize| {
        let mut m = CMat::zeros(n, count);
        for (j, &k) in order.iter().take(count).enumerate() {
            for i in 0..n {
                m[(i, j)] = Complex64::new(eig.eigenvectors[(i, k)], 0.0);
            }
        }
        m
    };
    SpinWalker {
        alpha: build(n_alpha),
        beta: build(n_beta),
    }
}

/// Determinant walker on the trial state's largest-amplitude
/// configuration; guaranteed to overlap the trial, including for
/// open-shell ground states that are orthogonal to every restricted
/// determinant.
pub fn dominant_determinant_walker(trial: &crate::focksim::FockState) -> SpinWalker {
    let n_orb = trial.n_qubits / 2;
    let (mut best, mut best_mag) = (0usize, -1.0f64);
    for (i, a) in trial.amps.iter().enumerate() {
        if a.norm() > best_mag {
            best_mag = a.norm();
            best = i;
        }
    }
    let mut alpha_occ = Vec::new();
    let mut beta_occ = Vec::new();
    for p in 0..n_orb {
        if best >> (2 * p) & 1 == 1 {
            alpha_occ.push(p);
        }
        if best >> (2 * p + 1) & 1 == 1 {
            beta_occ.push(p);
        }
    }
    let build = |occ: &[usize]| {
        let mut m = CMat::zeros(n_orb, occ.len());
        for (j, &p) in occ.iter().enumerate() {
            m[(p, j)] = Complex64::new(1.0, 0.0);
        }
        m
    };
    SpinWalker {
        alpha: build(&alpha_occ),
        beta: build(&beta_occ),
    }
}

/// Hartree-Fock-style determinant: identity columns on the lowest
/// orbitals of each spin.
pub fn hartree_fock_walker(n_orb: usize, n_alpha: usize, n_beta: usize) -> SpinWalker {
    let mut alpha = CMat::zeros(n_orb, n_alpha);
    for j in 0..n_alpha {
        alpha[(j, j)] = Complex64::new(1.0, 0.0);
    }
    let mut beta = CMat::zeros(n_orb, n_beta);
    for j in 0..n_beta {
        beta[(j, j)] = Complex64::new(1.0, 0.0);
    }
    SpinWalker { alpha, beta }
}

/// One walker with its weight and cached estimator state.
#[derive(Debug, Clone)]
pub struct WalkerState {
    pub spin: SpinWalker,
    pub weight: f64,
    pub overlap: Complex64,
    /// Held local energy (refreshed every `energy_every` steps).
    pub energy: Complex64,
}

/// Per-block energy record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockRecord {
    pub block: u64,
    pub energy: Complex64,
    pub total_weight: f64,
    pub n_walkers: usize,
}

/// Block energy series with run metadata.
#[derive(Debug, Clone, Default)]
pub struct EnergyTrace {
    pub records: Vec<BlockRecord>,
}

impl EnergyTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,energy_re,energy_im,total_weight\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.block, r.energy.re, r.energy.im, r.total_weight
            ));
        }
        out
    }
}

/// Static propagation parameters.
#[derive(Debug, Clone)]
pub struct RunParams {
    pub dtau: f64,
    pub steps_per_block: usize,
    pub n_blocks: usize,
    pub n_equil: usize,
    /// Local-energy refresh interval in steps (1 = every step).
    pub energy_every: usize,
    /// Cap on |x̄_γ|; oversized biases are clamped.
    pub force_bias_cap: f64,
    pub n_walkers: usize,
    pub seed: u64,
}

impl RunParams {
    pub fn defaults(n_walkers: usize, seed: u64) -> Self {
        RunParams {
            dtau: 0.01,
            steps_per_block: 10,
            n_blocks: 150,
            n_equil: 50,
            energy_every: 1,
            force_bias_cap: (2.0 / 0.01f64).sqrt(),
            n_walkers,
            seed,
        }
    }

    fn hash(&self) -> u64 {
        let mut h = Fnv64::new();
        h.update_f64(self.dtau);
        h.update_u64(self.steps_per_block as u64);
        h.update_u64(self.n_blocks as u64);
        h.update_u64(self.n_equil as u64);
        h.update_u64(self.energy_every as u64);
        h.update_f64(self.force_bias_cap);
        h.update_u64(self.n_walkers as u64);
        h.update_u64(self.seed);
        h.finish()
    }
}

/// The full propagation state: ensemble, rng streams, trace so far.
pub struct Afqmc<'a, E: Estimator> {
    pub params: RunParams,
    pub ham: &'a CholeskyHamiltonian,
    pub estimator: &'a E,
    pub walkers: Vec<WalkerState>,
    rngs: Vec<ChaCha12Rng>,
    control_rng: ChaCha12Rng,
    pub trace: EnergyTrace,
    pub block_index: u64,
    exp_half_v0: RMat,
}

/// Standard normal via Box-Muller on the walker's own stream.
fn draw_normals<R: Rng>(rng: &mut R, count: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        if out.len() < count {
            out.push(r * theta.sin());
        }
    }
    out
}

/// QR with nonnegative real diagonal; returns (Q, det R).
fn qr_positive(m: &CMat) -> (CMat, Complex64) {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    let mut det = Complex64::new(1.0, 0.0);
    for j in 0..r.ncols() {
        let d = r[(j, j)];
        det *= d;
        if d.norm() > 0.0 {
            let phase = d / d.norm();
            for k in 0..q.nrows() {
                q[(k, j)] *= phase;
            }
        }
    }
    (q, det)
}

/// Phaseless weight factor: exp(-Δτ Re E_L) · max(0, cos arg(overlap ratio)).
fn phaseless_factor(ratio: Complex64, e_local: Complex64, e_shift: f64, dtau: f64) -> f64 {
    if ratio.norm() == 0.0 {
        return 0.0;
    }
    let cos_arg = (ratio.arg()).cos().max(0.0);
    ((-dtau) * (e_local.re - e_shift)).exp() * cos_arg
}

impl<'a, E: Estimator> Afqmc<'a, E> {
    pub fn new(
        params: RunParams,
        ham: &'a CholeskyHamiltonian,
        estimator: &'a E,
        initial: &SpinWalker,
    ) -> Result<Self, PropagateError> {
        if params.n_walkers == 0 || params.steps_per_block == 0 {
            return Err(PropagateError::Setup("counts must be positive".into()));
        }
        // exp(-Δτ/2 v0) through the symmetric eigendecomposition.
        let eig = ham.v0.clone().symmetric_eigen();
        let n = ham.n_orb;
        let mut exp_half_v0 = RMat::zeros(n, n);
        for k in 0..n {
            let scale = (-0.5 * params.dtau * eig.eigenvalues[k]).exp();
            let col = eig.eigenvectors.column(k);
            for i in 0..n {
                for j in 0..n {
                    exp_half_v0[(i, j)] += scale * col[i] * col[j];
                }
            }
        }
        let mut walkers = Vec::with_capacity(params.n_walkers);
        let mut rngs = Vec::with_capacity(params.n_walkers);
        let walker_matrix = WalkerMatrix::new(initial.interleaved())
            .map_err(|e| PropagateError::Setup(e.to_string()))?;
        let est = estimator
            .evaluate(
                &walker_matrix,
                EvalRequest {
                    force_bias: false,
                    local_energy: true,
                },
            )
            .map_err(|e| PropagateError::Setup(e.to_string()))?;
        if est.overlap.norm() < 1e-10 {
            return Err(PropagateError::Setup(format!(
                "initial walker is orthogonal to the trial (|overlap| = {:.3e})",
                est.overlap.norm()
            )));
        }
        for i in 0..params.n_walkers {
            walkers.push(WalkerState {
                spin: initial.clone(),
                weight: 1.0,
                overlap: est.overlap,
                energy: est.local_energy.unwrap(),
            });
            rngs.push(ChaCha12Rng::seed_from_u64(crate::util::derive_seed(
                params.seed,
                i as u64,
            )));
        }
        let control_rng =
            ChaCha12Rng::seed_from_u64(crate::util::derive_seed(params.seed, u64::MAX / 2));
        Ok(Afqmc {
            params,
            ham,
            estimator,
            walkers,
            rngs,
            control_rng,
            trace: EnergyTrace::default(),
            block_index: 0,
            exp_half_v0,
        })
    }

    /// One imaginary-time step of every walker.
    ///
    /// The weight update uses the held local energy (refreshed at the end
    /// of each scheduled step) and the phase of the overlap ratio across
    /// the propagation, so each step costs one force-bias pass at the old
    /// walker and one overlap(+energy) pass at the new walker.
    pub fn step(&mut self, step_in_run: u64) -> Result<(), PropagateError> {
        let need_energy = (step_in_run + 1).is_multiple_of(self.params.energy_every as u64);
        let dtau = self.params.dtau;
        let sqrt_dtau = dtau.sqrt();
        let cap = self.params.force_bias_cap;
        let ham = self.ham;
        let estimator = self.estimator;
        let exp_half_v0 = &self.exp_half_v0;
        let n_fields = ham.l_vectors.len();
        // The weight rule references the running mixed energy as its zero
        // point; a global shift cancels in every weighted mean.
        let e_shift = {
            let mut wsum = 0.0;
            let mut esum = 0.0;
            for w in &self.walkers {
                wsum += w.weight;
                esum += w.weight * w.energy.re;
            }
            if wsum > 0.0 {
                esum / wsum
            } else {
                0.0
            }
        };

        self.walkers
            .par_iter_mut()
            .zip(self.rngs.par_iter_mut())
            .for_each(|(walker, rng)| {
                if walker.weight <= 0.0 {
                    return;
                }
                // Vanishing-overlap guard on the cached estimate.
                if walker.overlap.norm() == 0.0 {
                    walker.weight = 0.0;
                    return;
                }
                let xbar: Vec<Complex64> = if n_fields > 0 {
                    let matrix = match WalkerMatrix::new(walker.spin.interleaved()) {
                        Ok(m) => m,
                        Err(_) => {
                            walker.weight = 0.0;
                            return;
                        }
                    };
                    let est = match estimator.evaluate(
                        &matrix,
                        EvalRequest {
                            force_bias: true,
                            local_energy: false,
                        },
                    ) {
                        Ok(e) => e,
                        Err(_) => {
                            walker.weight = 0.0;
                            return;
                        }
                    };
                    est.force_bias
                        .unwrap()
                        .iter()
                        .map(|v| {
                            let x = -sqrt_dtau * v;
                            if x.norm() > cap {
                                x / x.norm() * cap
                            } else {
                                x
                            }
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                let normals = draw_normals(rng, n_fields);
                let n_orb = ham.n_orb;
                let e0 = CMat::from_fn(n_orb, n_orb, |i, j| {
                    Complex64::new(exp_half_v0[(i, j)], 0.0)
                });
                let prop = if n_fields > 0 {
                    let mut field = CMat::zeros(n_orb, n_orb);
                    for (g, l) in ham.l_vectors.iter().enumerate() {
                        let coef = Complex64::new(0.0, sqrt_dtau) * (normals[g] - xbar[g]);
                        for i in 0..n_orb {
                            for j in 0..n_orb {
                                field[(i, j)] += coef * l[(i, j)];
                            }
                        }
                    }
                    &e0 * expm(&field) * &e0
                } else {
                    &e0 * &e0
                };
                let alpha_new = &prop * &walker.spin.alpha;
                let beta_new = &prop * &walker.spin.beta;
                let (qa, det_a) = qr_positive(&alpha_new);
                let (qb, det_b) = qr_positive(&beta_new);
                if det_a.norm() == 0.0 || det_b.norm() == 0.0 {
                    walker.weight = 0.0;
                    return;
                }
                let new_spin = SpinWalker {
                    alpha: qa,
                    beta: qb,
                };
                let new_matrix = match WalkerMatrix::new(new_spin.interleaved()) {
                    Ok(m) => m,
                    Err(_) => {
                        walker.weight = 0.0;
                        return;
                    }
                };
                let est_new = match estimator.evaluate(
                    &new_matrix,
                    EvalRequest {
                        force_bias: false,
                        local_energy: need_energy,
                    },
                ) {
                    Ok(e) => e,
                    Err(_) => {
                        walker.weight = 0.0;
                        return;
                    }
                };
                if est_new.overlap.norm() <= 1e-12 * est_new.overlap_std_err.max(1e-300)
                    || est_new.overlap.norm() == 0.0
                {
                    walker.weight = 0.0;
                    return;
                }
                let ratio = det_a * det_b * est_new.overlap / walker.overlap;
                walker.weight *= phaseless_factor(ratio, walker.energy, e_shift, dtau);
                walker.spin = new_spin;
                walker.overlap = est_new.overlap;
                if let Some(e) = est_new.local_energy {
                    walker.energy = e;
                }
            });
        Ok(())
    }

    /// Weighted block energy from the held per-walker local energies.
    pub fn energy_block(&self) -> BlockRecord {
        let mut wsum = 0.0;
        let mut esum = Complex64::new(0.0, 0.0);
        let mut alive = 0usize;
        for w in &self.walkers {
            if w.weight > 0.0 {
                wsum += w.weight;
                esum += w.weight * w.energy;
                alive += 1;
            }
        }
        BlockRecord {
            block: self.block_index,
            energy: if wsum > 0.0 {
                esum / wsum
            } else {
                Complex64::new(f64::NAN, 0.0)
            },
            total_weight: wsum,
            n_walkers: alive,
        }
    }

    /// Stochastic reconfiguration (comb resampling): restores the target
    /// walker count with equal weights, preserving total weight; rng
    /// streams stay with their slots.
    pub fn population_control(&mut self) -> Result<(), PropagateError> {
        let n = self.walkers.len();
        let total: f64 = self.walkers.iter().map(|w| w.weight).sum();
        if total <= 0.0 {
            return Err(PropagateError::PopulationCollapse(self.block_index));
        }
        let step = total / n as f64;
        let offset: f64 = self.control_rng.gen::<f64>() * step;
        let mut new_walkers = Vec::with_capacity(n);
        let mut cum = 0.0;
        let mut src = 0usize;
        for k in 0..n {
            let target = offset + k as f64 * step;
            while cum + self.walkers[src].weight <= target && src + 1 < n {
                cum += self.walkers[src].weight;
                src += 1;
            }
            let mut w = self.walkers[src].clone();
            w.weight = step;
            new_walkers.push(w);
        }
        self.walkers = new_walkers;
        Ok(())
    }

    /// Runs one block: steps, records the energy, applies population
    /// control, and renormalizes the total weight back to the walker
    /// count (a global factor that cancels in every weighted mean but
    /// keeps long runs away from underflow).
    pub fn run_block(&mut self) -> Result<BlockRecord, PropagateError> {
        let steps = self.params.steps_per_block as u64;
        for s in 0..steps {
            self.step(self.block_index * steps + s)?;
        }
        let record = self.energy_block();
        self.trace.records.push(record);
        self.block_index += 1;
        self.population_control()?;
        let total: f64 = self.walkers.iter().map(|w| w.weight).sum();
        if total > 0.0 {
            let scale = self.walkers.len() as f64 / total;
            for w in &mut self.walkers {
                w.weight *= scale;
            }
        }
        Ok(record)
    }

    /// Runs to `n_blocks`, invoking the hook after every block (for
    /// checkpointing and progress reporting).
    pub fn run<F: FnMut(&Self, &BlockRecord)>(
        &mut self,
        mut hook: F,
    ) -> Result<(), PropagateError> {
        while (self.block_index as usize) < self.params.n_blocks {
            let record = self.run_block()?;
            hook(self, &record);
        }
        Ok(())
    }

    const CHECKPOINT_MAGIC: &'static [u8; 4] = b"MGCK";
    const CHECKPOINT_VERSION: u16 = 1;

    /// Full snapshot: walkers, weights, cached estimates, every rng
    /// stream, and the trace so far. Writes to a temp file and renames so
    /// a crash cannot corrupt an existing checkpoint.
    pub fn checkpoint(&self, path: &Path) -> Result<(), PropagateError> {
        let tmp = path.with_extension("tmp");
        let io_err = |source: std::io::Error| PropagateError::Io {
            path: tmp.display().to_string(),
            source,
        };
        {
            let file = File::create(&tmp).map_err(io_err)?;
            let mut w = BufWriter::new(file);
            let res: std::io::Result<()> = (|| {
                w.write_all(Self::CHECKPOINT_MAGIC)?;
                io::write_u16(&mut w, Self::CHECKPOINT_VERSION)?;
                io::write_u64(&mut w, self.ham.content_hash())?;
                io::write_u64(&mut w, self.params.hash())?;
                io::write_u64(&mut w, self.block_index)?;
                io::write_u64(&mut w, self.trace.records.len() as u64)?;
                for r in &self.trace.records {
                    io::write_u64(&mut w, r.block)?;
                    io::write_f64(&mut w, r.energy.re)?;
                    io::write_f64(&mut w, r.energy.im)?;
                    io::write_f64(&mut w, r.total_weight)?;
                    io::write_u64(&mut w, r.n_walkers as u64)?;
                }
                io::write_u64(&mut w, self.walkers.len() as u64)?;
                for walker in &self.walkers {
                    for m in [&walker.spin.alpha, &walker.spin.beta] {
                        io::write_u64(&mut w, m.nrows() as u64)?;
                        io::write_u64(&mut w, m.ncols() as u64)?;
                        for v in m.iter() {
                            io::write_f64(&mut w, v.re)?;
                            io::write_f64(&mut w, v.im)?;
                        }
                    }
                    io::write_f64(&mut w, walker.weight)?;
                    io::write_f64(&mut w, walker.overlap.re)?;
                    io::write_f64(&mut w, walker.overlap.im)?;
                    io::write_f64(&mut w, walker.energy.re)?;
                    io::write_f64(&mut w, walker.energy.im)?;
                }
                let write_rng =
                    |w: &mut BufWriter<File>, rng: &ChaCha12Rng| -> std::io::Result<()> {
                        w.write_all(&rng.get_seed())?;
                        let pos = rng.get_word_pos();
                        io::write_u64(w, (pos & u128::from(u64::MAX)) as u64)?;
                        io::write_u64(w, (pos >> 64) as u64)?;
                        Ok(())
                    };
                for rng in &self.rngs {
                    write_rng(&mut w, rng)?;
                }
                write_rng(&mut w, &self.control_rng)?;
                w.flush()
            })();
            res.map_err(io_err)?;
        }
        std::fs::rename(&tmp, path).map_err(|source| PropagateError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Restores a run; the Hamiltonian and parameters must match the
    /// checkpoint's fingerprints.
    pub fn restore(
        path: &Path,
        params: RunParams,
        ham: &'a CholeskyHamiltonian,
        estimator: &'a E,
    ) -> Result<Self, PropagateError> {
        let file = File::open(path).map_err(|source| PropagateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut r = BufReader::new(file);
        let corrupt = |msg: &str| PropagateError::Corrupt(msg.to_string());
        let trunc = |_: std::io::Error| PropagateError::Corrupt("truncated checkpoint".into());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != Self::CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = io::read_u16(&mut r).map_err(trunc)?;
        if version != Self::CHECKPOINT_VERSION {
            return Err(PropagateError::IncompatibleCheckpoint(format!(
                "version {version}"
            )));
        }
        let ham_hash = io::read_u64(&mut r).map_err(trunc)?;
        if ham_hash != ham.content_hash() {
            return Err(PropagateError::IncompatibleCheckpoint(
                "hamiltonian fingerprint differs".into(),
            ));
        }
        let params_hash = io::read_u64(&mut r).map_err(trunc)?;
        if params_hash != params.hash() {
            return Err(PropagateError::IncompatibleCheckpoint(
                "run parameters differ".into(),
            ));
        }
        let block_index = io::read_u64(&mut r).map_err(trunc)?;
        let n_records = io::read_u64(&mut r).map_err(trunc)? as usize;
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let block = io::read_u64(&mut r).map_err(trunc)?;
            let re = io::read_f64(&mut r).map_err(trunc)?;
            let im = io::read_f64(&mut r).map_err(trunc)?;
            let total_weight = io::read_f64(&mut r).map_err(trunc)?;
            let n_walkers = io::read_u64(&mut r).map_err(trunc)? as usize;
            records.push(BlockRecord {
                block,
                energy: Complex64::new(re, im),
                total_weight,
                n_walkers,
            });
        }
        let n_walkers = io::read_u64(&mut r).map_err(trunc)? as usize;
        let mut walkers = Vec::with_capacity(n_walkers);
        for _ in 0..n_walkers {
            let mut mats = Vec::with_capacity(2);
            for _ in 0..2 {
                let rows = io::read_u64(&mut r).map_err(trunc)? as usize;
                let cols = io::read_u64(&mut r).map_err(trunc)? as usize;
                if rows > 64 || cols > 64 {
                    return Err(corrupt("implausible walker dimensions"));
                }
                let mut m = CMat::zeros(rows, cols);
                for j in 0..cols {
                    for i in 0..rows {
                        let re = io::read_f64(&mut r).map_err(trunc)?;
                        let im = io::read_f64(&mut r).map_err(trunc)?;
                        m[(i, j)] = Complex64::new(re, im);
                    }
                }
                mats.push(m);
            }
            let beta = mats.pop().unwrap();
            let alpha = mats.pop().unwrap();
            let weight = io::read_f64(&mut r).map_err(trunc)?;
            let ov_re = io::read_f64(&mut r).map_err(trunc)?;
            let ov_im = io::read_f64(&mut r).map_err(trunc)?;
            let e_re = io::read_f64(&mut r).map_err(trunc)?;
            let e_im = io::read_f64(&mut r).map_err(trunc)?;
            walkers.push(WalkerState {
                spin: SpinWalker { alpha, beta },
                weight,
                overlap: Complex64::new(ov_re, ov_im),
                energy: Complex64::new(e_re, e_im),
            });
        }
        let read_rng = |r: &mut BufReader<File>| -> Result<ChaCha12Rng, PropagateError> {
            let mut seed = [0u8; 32];
            r.read_exact(&mut seed).map_err(trunc)?;
            let lo = io::read_u64(r).map_err(trunc)?;
            let hi = io::read_u64(r).map_err(trunc)?;
            let mut rng = ChaCha12Rng::from_seed(seed);
            rng.set_word_pos(u128::from(hi) << 64 | u128::from(lo));
            Ok(rng)
        };
        let mut rngs = Vec::with_capacity(n_walkers);
        for _ in 0..n_walkers {
            rngs.push(read_rng(&mut r)?);
        }
        let control_rng = read_rng(&mut r)?;
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(trunc)? != 0 {
            return Err(corrupt("trailing bytes"));
        }

        let eig = ham.v0.clone().symmetric_eigen();
        let n = ham.n_orb;
        let mut exp_half_v0 = RMat::zeros(n, n);
        for k in 0..n {
            let scale = (-0.5 * params.dtau * eig.eigenvalues[k]).exp();
            let col = eig.eigenvectors.column(k);
            for i in 0..n {
                for j in 0..n {
                    exp_half_v0[(i, j)] += scale * col[i] * col[j];
                }
            }
        }
        Ok(Afqmc {
            params,
            ham,
            estimator,
            walkers,
            rngs,
            control_rng,
            trace: EnergyTrace { records },
            block_index,
            exp_half_v0,
        })
    }
}

/// Outcome of the trace analysis.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub mean: f64,
    pub std_err: f64,
    pub n_kept: usize,
    pub n_outliers: usize,
    pub reblock_level: usize,
}

/// Equilibration drop, adjacent-point outlier filter (±200 mHa against
/// both neighbors), then reblocking by successive pairwise averaging with
/// plateau detection.
pub fn analyze(trace: &EnergyTrace, n_equil: usize) -> Result<Analysis, PropagateError> {
    if trace.records.len() <= n_equil + 2 {
        return Err(PropagateError::InsufficientData {
            have: trace.records.len(),
            need: n_equil + 2,
        });
    }
    let series: Vec<f64> = trace.records[n_equil..]
        .iter()
        .map(|r| r.energy.re)
        .collect();
    const OUTLIER: f64 = 0.2;
    let mut keep = vec![true; series.len()];
    for i in 0..series.len() {
        let lower = if i > 0 {
            (series[i] - series[i - 1]).abs() > OUTLIER
        } else {
            true
        };
        let upper = if i + 1 < series.len() {
            (series[i] - series[i + 1]).abs() > OUTLIER
        } else {
            true
        };
        if lower && upper && series.len() > 1 {
            keep[i] = false;
        }
    }
    let filtered: Vec<f64> = series
        .iter()
        .zip(keep.iter())
        .filter(|(_, &k)| k)
        .map(|(&x, _)| x)
        .collect();
    let n_outliers = series.len() - filtered.len();
    if filtered.len() < 2 {
        return Err(PropagateError::InsufficientData {
            have: filtered.len(),
            need: 2,
        });
    }
    let mean = filtered.iter().sum::<f64>() / filtered.len() as f64;

    let std_err_of = |data: &[f64]| -> f64 {
        let n = data.len() as f64;
        let m = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    let mut level_data = filtered.clone();
    let mut level = 0usize;
    let mut se = std_err_of(&level_data);
    loop {
        if level_data.len() < 4 {
            break;
        }
        let next: Vec<f64> = level_data
            .chunks_exact(2)
            .map(|c| 0.5 * (c[0] + c[1]))
            .collect();
        if next.len() < 2 {
            break;
        }
        let se_next = std_err_of(&next);
        // Grow while the increase is significant against the estimator's
        // own sampling noise; stop at the plateau.
        let gate = se * (1.0 + 1.0 / (2.0 * (next.len() as f64 - 1.0)).sqrt());
        if se_next > gate {
            level_data = next;
            level += 1;
            se = se_next;
        } else {
            break;
        }
    }
    Ok(Analysis {
        mean,
        std_err: se,
        n_kept: filtered.len(),
        n_outliers,
        reblock_level: level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::DenseEstimator;
    use crate::focksim::{fci_ground_state, fci_of_cholesky};
    use crate::integrals::{cholesky_factorize, load_fcidump, IntegralSet};
    use crate::testutil::h2_fixture_path;

    fn one_body_system(n: usize) -> IntegralSet {
        let t = RMat::from_fn(
            n,
            n,
            |i, j| {
                if i == j {
                    -1.0 - i as f64 * 0.4
                } else {
                    0.15
                }
            },
        );
        IntegralSet::new(n, 0.3, t, vec![0.0; n.pow(4)], 1, 1).unwrap()
    }

    #[test]
    fn noninteracting_propagation_is_exact() {
        // g = 0: no auxiliary fields, propagation is deterministic and the
        // weighted energy equals the ground energy at every block.
        let ints = one_body_system(3);
        let ham = cholesky_factorize(&ints, 1e-12).unwrap();
        let (e0, ground) = fci_ground_state(&ints, 1, 1).unwrap();
        let est = DenseEstimator::new(ground, 2, ham.clone());
        let mut params = RunParams::defaults(4, 11);
        params.n_blocks = 8;
        params.steps_per_block = 5;
        let initial = hartree_fock_walker(3, 1, 1);
        let mut run = Afqmc::new(params, &ham, &est, &initial).unwrap();
        run.run(|_, _| {}).unwrap();
        for r in &run.trace.records {
            assert!(
                (r.energy.re - e0).abs() < 1e-8,
                "block {} energy {} vs {e0}",
                r.block,
                r.energy.re
            );
            assert!(r.energy.im.abs() < 1e-10);
        }
    }

    #[test]
    fn weights_stay_nonnegative_and_phase_flip_kills() {
        assert_eq!(
            phaseless_factor(
                Complex64::new(-1.0, 0.0),
                Complex64::new(0.0, 0.0),
                0.0,
                0.01
            ),
            0.0
        );
        assert!(
            phaseless_factor(
                Complex64::new(1.0, 0.1),
                Complex64::new(-1.0, 0.0),
                -1.0,
                0.01
            ) > 0.0
        );
        assert_eq!(
            phaseless_factor(
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
                0.0,
                0.01
            ),
            0.0
        );
    }

    #[test]
    fn h2_exact_trial_reproduces_fci() {
        let ints = load_fcidump(&h2_fixture_path()).unwrap();
        let ham = cholesky_factorize(&ints, 1e-8).unwrap();
        let (e_fci, ground) = fci_of_cholesky(&ham, 1, 1).unwrap();
        let est = DenseEstimator::new(ground, 2, ham.clone());
        let mut params = RunParams::defaults(24, 7);
        params.n_blocks = 40;
        params.n_equil = 10;
        let initial = hartree_fock_walker(2, 1, 1);
        let mut run = Afqmc::new(params, &ham, &est, &initial).unwrap();
        run.run(|_, _| {}).unwrap();
        let analysis = analyze(&run.trace, 10).unwrap();
        let err = (analysis.mean - e_fci).abs();
        assert!(
            err < (3.0 * analysis.std_err).max(1e-3),
            "mean {} vs FCI {e_fci} (err {err:.2e}, se {:.2e})",
            analysis.mean,
            analysis.std_err
        );
        // Weight positivity after every step is implied by the factor; the
        // ensemble must also still be alive.
        assert!(run.walkers.iter().all(|w| w.weight >= 0.0));
        assert!(run.walkers.iter().any(|w| w.weight > 0.0));
    }

    #[test]
    fn population_control_preserves_weight_and_uniform_case() {
        let ints = one_body_system(2);
        let ham = cholesky_factorize(&ints, 1e-12).unwrap();
        let (_, ground) = fci_ground_state(&ints, 1, 1).unwrap();
        let est = DenseEstimator::new(ground, 2, ham.clone());
        let params = RunParams::defaults(8, 3);
        let initial = hartree_fock_walker(2, 1, 1);
        let mut run = Afqmc::new(params, &ham, &est, &initial).unwrap();
        // Uniform weights: resampling keeps every walker exactly once.
        run.population_control().unwrap();
        assert!(run.walkers.iter().all(|w| (w.weight - 1.0).abs() < 1e-12));
        // Unequal weights with one zero: zero-weight walker never selected.
        for (i, w) in run.walkers.iter_mut().enumerate() {
            w.weight = if i == 0 { 0.0 } else { 1.0 };
            w.energy = Complex64::new(i as f64, 0.0);
        }
        let total_before: f64 = run.walkers.iter().map(|w| w.weight).sum();
        run.population_control().unwrap();
        let total_after: f64 = run.walkers.iter().map(|w| w.weight).sum();
        assert!((total_before - total_after).abs() < 1e-12);
        assert!(run.walkers.iter().all(|w| w.energy.re > 0.0));
    }

    #[test]
    fn resampling_is_unbiased() {
        // Weighted mean of an observable is preserved in expectation.
        let ints = one_body_system(2);
        let ham = cholesky_factorize(&ints, 1e-12).unwrap();
        let (_, ground) = fci_ground_state(&ints, 1, 1).unwrap();
        let est = DenseEstimator::new(ground, 2, ham.clone());
        let params = RunParams::defaults(16, 5);
        let initial = hartree_fock_walker(2, 1, 1);
        let mut run = Afqmc::new(params, &ham, &est, &initial).unwrap();
        let weights: Vec<f64> = (0..16).map(|i| 0.1 + (i as f64 * 0.37).fract()).collect();
        let values: Vec<f64> = (0..16).map(|i| (i as f64 * 1.7).sin()).collect();
        let target: f64 = weights
            .iter()
            .zip(values.iter())
            .map(|(w, v)| w * v)
            .sum::<f64>()
            / weights.iter().sum::<f64>();
        let trials = 20_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            for (i, w) in run.walkers.iter_mut().enumerate() {
                w.weight = weights[i];
                w.energy = Complex64::new(values[i], 0.0);
            }
            run.population_control().unwrap();
            let wsum: f64 = run.walkers.iter().map(|w| w.weight).sum();
            let esum: f64 = run.walkers.iter().map(|w| w.weight * w.energy.re).sum();
            acc += esum / wsum;
        }
        let mean = acc / trials as f64;
        assert!(
            (mean - target).abs() < 5e-3,
            "resampled mean {mean} vs target {target}"
        );
    }

    #[test]
    fn analysis_recovers_iid_sigma() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let sigma = 0.004;
        let n = 256;
        let records: Vec<BlockRecord> = (0..n)
            .map(|i| {
                let g: f64 = draw_normals(&mut rng, 1)[0];
                BlockRecord {
                    block: i as u64,
                    energy: Complex64::new(-1.0 + sigma * g, 0.0),
                    total_weight: 1.0,
                    n_walkers: 1,
                }
            })
            .collect();
        let trace = EnergyTrace { records };
        let analysis = analyze(&trace, 0).unwrap();
        let expect = sigma / (n as f64).sqrt();
        assert!(
            (analysis.std_err - expect).abs() < 0.2 * expect,
            "stderr {:.3e} vs σ/√n {:.3e}",
            analysis.std_err,
            expect
        );
    }

    #[test]
    fn analysis_removes_injected_spike() {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let sigma = 0.002;
        let n = 150;
        let mut records: Vec<BlockRecord> = (0..n)
            .map(|i| {
                let g: f64 = draw_normals(&mut rng, 1)[0];
                BlockRecord {
                    block: i as u64,
                    energy: Complex64::new(-2.0 + sigma * g, 0.0),
                    total_weight: 1.0,
                    n_walkers: 1,
                }
            })
            .collect();
        let clean = analyze(
            &EnergyTrace {
                records: records.clone(),
            },
            50,
        )
        .unwrap();
        records[70].energy += Complex64::new(2.0, 0.0);
        let spiked = analyze(&EnergyTrace { records }, 50).unwrap();
        assert_eq!(spiked.n_outliers, 1, "spike must be filtered");
        assert!(
            (spiked.mean - clean.mean).abs() < clean.std_err,
            "mean shifted {} vs {}",
            spiked.mean,
            clean.mean
        );
    }

    #[test]
    fn analysis_reblocked_error_grows_for_correlated_series() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let n = 512;
        let rho = 0.9f64;
        let mut x = 0.0f64;
        let records: Vec<BlockRecord> = (0..n)
            .map(|i| {
                let g: f64 = draw_normals(&mut rng, 1)[0];
                x = rho * x + (1.0 - rho * rho).sqrt() * g;
                BlockRecord {
                    block: i as u64,
                    energy: Complex64::new(x * 0.001, 0.0),
                    total_weight: 1.0,
                    n_walkers: 1,
                }
            })
            .collect();
        let trace = EnergyTrace { records };
        let analysis = analyze(&trace, 0).unwrap();
        let naive = {
            let data: Vec<f64> = trace.records.iter().map(|r| r.energy.re).collect();
            let m = data.iter().sum::<f64>() / n as f64;
            let var = data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        };
        assert!(
            analysis.std_err >= naive,
            "reblocked {:.3e} < naive {:.3e}",
            analysis.std_err,
            naive
        );
        assert!(analysis.reblock_level > 0);
    }

    #[test]
    fn too_few_blocks_rejected() {
        let trace = EnergyTrace {
            records: (0..5)
                .map(|i| BlockRecord {
                    block: i,
                    energy: Complex64::new(0.0, 0.0),
                    total_weight: 1.0,
                    n_walkers: 1,
                })
                .collect(),
        };
        assert!(matches!(
            analyze(&trace, 4),
            Err(PropagateError::InsufficientData { .. })
        ));
    }

    #[test]
    fn fixed_seed_gives_identical_traces() {
        let ints = load_fcidump(&h2_fixture_path()).unwrap();
        let ham = cholesky_factorize(&ints, 1e-8).unwrap();
        let (_, ground) = fci_of_cholesky(&ham, 1, 1).unwrap();
        let est = DenseEstimator::new(ground, 2, ham.clone());
        let mut params = RunParams::defaults(6, 99);
        params.n_blocks = 6;
        let initial = hartree_fock_walker(2, 1, 1);
        let mut run1 = Afqmc::new(params.clone(), &ham, &est, &initial).unwrap();
        run1.run(|_, _| {}).unwrap();
        let mut run2 = Afqmc::new(params, &ham, &est, &initial).unwrap();
        run2.run(|_, _| {}).unwrap();
        assert_eq!(run1.trace.to_csv(), run2.trace.to_csv());
    }

    #[test]
    fn checkpoint_restart_is_bit_identical() {
        let ints = load_fcidump(&h2_fixture_path()).unwrap();
        let ham = cholesky_factorize(&ints, 1e-8).unwrap();
        let (_, ground) = fci_of_cholesky(&ham, 1, 1).unwrap();
        let est = DenseEstimator::new(ground, 2, ham.clone());
        let mut params = RunParams::defaults(6, 42);
        params.n_blocks = 12;
        let initial = hartree_fock_walker(2, 1, 1);

        let mut uninterrupted = Afqmc::new(params.clone(), &ham, &est, &initial).unwrap();
        uninterrupted.run(|_, _| {}).unwrap();

        let dir = std::env::temp_dir().join("mgafqmc_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.ckpt");
        let mut first = Afqmc::new(params.clone(), &ham, &est, &initial).unwrap();
        for _ in 0..5 {
            first.run_block().unwrap();
        }
        first.checkpoint(&path).unwrap();
        drop(first);
        let mut resumed = Afqmc::restore(&path, params.clone(), &ham, &est).unwrap();
        resumed.run(|_, _| {}).unwrap();
        assert_eq!(uninterrupted.trace.to_csv(), resumed.trace.to_csv());

        // Mismatched Hamiltonian is rejected.
        let other_ints = one_body_system(2);
        let other_ham = cholesky_factorize(&other_ints, 1e-8).unwrap();
        assert!(matches!(
            Afqmc::restore(&path, params.clone(), &other_ham, &est),
            Err(PropagateError::IncompatibleCheckpoint(_))
        ));

        // Corruption is detected and the original file stays intact.
        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.join("bad.ckpt");
        std::fs::write(&bad, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            Afqmc::restore(&bad, params, &ham, &est),
            Err(PropagateError::Corrupt(_))
        ));
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    use rand_chacha::ChaCha12Rng;
}
