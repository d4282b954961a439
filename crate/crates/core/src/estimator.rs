//! Estimator backends for the propagator: an exact dense oracle and the
//! matchgate-shadow estimator, behind one interface.
//!
//! Both provide, for an orthonormal walker, the trial overlap, the
//! force-bias ratios ⟨Ψ_T|v_γ|φ⟩/⟨Ψ_T|φ⟩, and the local energy
//! E_L = ⟨Ψ_T|H|φ⟩/⟨Ψ_T|φ⟩ of the factorized Hamiltonian.

use crate::focksim::{one_body_spin_matrix, ops, FockState};
use crate::integrals::CholeskyHamiltonian;
use crate::overlap::{DirectionRows, OverlapError, ShadowKernel, WalkerMatrix};
use crate::shadows::ShadowSet;
use crate::{CMat, Complex64};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("estimator failure: {0}")]
    Overlap(#[from] OverlapError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// What a propagation step needs from the estimator.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalRequest {
    pub force_bias: bool,
    pub local_energy: bool,
}

/// Estimator outputs for one walker.
#[derive(Debug, Clone)]
pub struct WalkerEstimates {
    pub overlap: Complex64,
    /// Standard error of the overlap (0 for the exact oracle).
    pub overlap_std_err: f64,
    /// ⟨Ψ_T|v_γ|φ⟩/⟨Ψ_T|φ⟩ with v_γ = i L̂_γ.
    pub force_bias: Option<Vec<Complex64>>,
    pub local_energy: Option<Complex64>,
}

pub trait Estimator: Sync {
    fn n_qubits(&self) -> usize;
    fn eta(&self) -> usize;
    fn n_fields(&self) -> usize;
    fn evaluate(
        &self,
        walker: &WalkerMatrix,
        req: EvalRequest,
    ) -> Result<WalkerEstimates, EstimatorError>;
}

/// Exact oracle backed by dense Fock-space vectors. The heavy operators
/// are applied to the trial once at construction; per-walker work is a
/// handful of inner products.
pub struct DenseEstimator {
    pub ham: CholeskyHamiltonian,
    eta: usize,
    trial: FockState,
    /// L̂_γ |Ψ_T⟩ for every Cholesky vector.
    l_trial: Vec<FockState>,
    /// (v0 + ½ Σ_γ L̂_γ²) |Ψ_T⟩.
    h_trial: FockState,
}

impl DenseEstimator {
    pub fn new(trial: FockState, eta: usize, ham: CholeskyHamiltonian) -> Self {
        let l_so: Vec<CMat> = ham.l_vectors.iter().map(one_body_spin_matrix).collect();
        let l_trial: Vec<FockState> = l_so
            .iter()
            .map(|l| ops::apply_one_body(&trial, l))
            .collect();
        let v0_so = one_body_spin_matrix(&ham.v0);
        let mut h_trial = ops::apply_one_body(&trial, &v0_so);
        for (l, l_psi) in l_so.iter().zip(l_trial.iter()) {
            let ll = ops::apply_one_body(l_psi, l);
            for (a, b) in h_trial.amps.iter_mut().zip(ll.amps.iter()) {
                *a += 0.5 * b;
            }
        }
        DenseEstimator {
            ham,
            eta,
            trial,
            l_trial,
            h_trial,
        }
    }

    pub fn trial(&self) -> &FockState {
        &self.trial
    }
}

impl Estimator for DenseEstimator {
    fn n_qubits(&self) -> usize {
        self.trial.n_qubits
    }

    fn eta(&self) -> usize {
        self.eta
    }

    fn n_fields(&self) -> usize {
        self.ham.l_vectors.len()
    }

    fn evaluate(
        &self,
        walker: &WalkerMatrix,
        req: EvalRequest,
    ) -> Result<WalkerEstimates, EstimatorError> {
        if walker.n_qubits != self.trial.n_qubits {
            return Err(EstimatorError::Dimension(format!(
                "walker {} qubits vs trial {}",
                walker.n_qubits, self.trial.n_qubits
            )));
        }
        let phi = ops::walker_to_fock(walker.n_qubits, &walker.v);
        let overlap = self.trial.inner(&phi);
        let force_bias = if req.force_bias {
            Some(
                self.l_trial
                    .iter()
                    .map(|l_psi| Complex64::new(0.0, 1.0) * l_psi.inner(&phi) / overlap)
                    .collect(),
            )
        } else {
            None
        };
        let local_energy = if req.local_energy {
            Some(self.h_trial.inner(&phi) / overlap + Complex64::new(self.ham.e_core, 0.0))
        } else {
            None
        };
        Ok(WalkerEstimates {
            overlap,
            overlap_std_err: 0.0,
            force_bias,
            local_energy,
        })
    }
}

/// Shadow-backed estimator. Force bias may run on a prefix of the sample
/// set: any x̄ leaves the importance-sampled propagator unbiased, so a
/// cheaper bias estimate costs variance, not correctness. Energies always
/// use the full set.
pub struct ShadowEstimator {
    pub ham: CholeskyHamiltonian,
    pub set: ShadowSet,
    pub force_bias_samples: Option<usize>,
    l_so: Vec<CMat>,
    v0_so: CMat,
}

impl ShadowEstimator {
    pub fn new(set: ShadowSet, ham: CholeskyHamiltonian) -> Self {
        let l_so = ham.l_vectors.iter().map(one_body_spin_matrix).collect();
        let v0_so = one_body_spin_matrix(&ham.v0);
        ShadowEstimator {
            ham,
            set,
            force_bias_samples: None,
            l_so,
            v0_so,
        }
    }

    pub fn with_force_bias_samples(mut self, n: usize) -> Self {
        self.force_bias_samples = Some(n);
        self
    }
}

impl Estimator for ShadowEstimator {
    fn n_qubits(&self) -> usize {
        self.set.n_qubits
    }

    fn eta(&self) -> usize {
        self.set.eta
    }

    fn n_fields(&self) -> usize {
        self.ham.l_vectors.len()
    }

    fn evaluate(
        &self,
        walker: &WalkerMatrix,
        req: EvalRequest,
    ) -> Result<WalkerEstimates, EstimatorError> {
        // Force-bias-only requests honor the subsample cap; the reported
        // overlap then also comes from the subsample (callers that need
        // full-set overlaps track them through their own caches).
        if req.force_bias && !req.local_energy {
            if let Some(limit) = self.force_bias_samples {
                if limit < self.set.len() {
                    let sub = ShadowSet {
                        n_qubits: self.set.n_qubits,
                        eta: self.set.eta,
                        samples: self.set.samples[..limit].to_vec(),
                        seed: self.set.seed,
                        source: self.set.source,
                    };
                    let kernel = ShadowKernel::new(&sub, walker)?;
                    let dirs: Vec<DirectionRows> = self
                        .l_so
                        .iter()
                        .map(|l| kernel.direction_rows(&(l * &walker.v)))
                        .collect();
                    let sums = kernel.accumulate(&dirs, &[]);
                    let est = sums.overlap_estimate();
                    let fb = sums
                        .first
                        .iter()
                        .map(|acc| Complex64::new(0.0, 1.0) * acc.mean() / est.value)
                        .collect();
                    return Ok(WalkerEstimates {
                        overlap: est.value,
                        overlap_std_err: est.std_err(),
                        force_bias: Some(fb),
                        local_energy: None,
                    });
                }
            }
        }
        let kernel = ShadowKernel::new(&self.set, walker)?;
        let mut first: Vec<DirectionRows> = Vec::new();
        let mut second = Vec::new();
        let mut fb_slots = 0;
        if req.force_bias {
            fb_slots = self.l_so.len();
            for l in &self.l_so {
                first.push(kernel.direction_rows(&(l * &walker.v)));
            }
        }
        if req.local_energy {
            first.push(kernel.direction_rows(&(&self.v0_so * &walker.v)));
            for l in &self.l_so {
                let lv = l * &walker.v;
                let llv = l * &lv;
                second.push(kernel.second_direction_rows(&lv, &lv, &llv));
            }
        }
        let sums = kernel.accumulate(&first, &second);
        let est = sums.overlap_estimate();
        let denom = est.value;
        let force_bias = if req.force_bias {
            Some(
                sums.first[..fb_slots]
                    .iter()
                    .map(|acc| Complex64::new(0.0, 1.0) * acc.mean() / denom)
                    .collect(),
            )
        } else {
            None
        };
        let local_energy = if req.local_energy {
            let one_body = sums.first[fb_slots].mean() / denom;
            let two_body: Complex64 = sums
                .second
                .iter()
                .map(|acc| acc.mean() / denom)
                .sum::<Complex64>()
                * 0.5;
            Some(Complex64::new(self.ham.e_core, 0.0) + one_body + two_body)
        } else {
            None
        };
        Ok(WalkerEstimates {
            overlap: est.value,
            overlap_std_err: est.std_err(),
            force_bias,
            local_energy,
        })
    }
}
