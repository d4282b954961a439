//! Quantum-classical auxiliary-field quantum Monte Carlo at desk scale.
//!
//! A dense Fock-space simulator stands in for the quantum processor: it
//! prepares trial superposition states, applies matchgate (fermionic
//! Gaussian) circuits, and samples single-shot measurements. Overlaps,
//! force bias, and local energies of Slater-determinant walkers are then
//! recovered from those samples through Pfaffian polynomial estimators,
//! and fed into a phaseless imaginary-time propagator. Everything is
//! cross-checked against brute-force exact diagonalization, which the
//! crate also provides.
//!
//! Module map:
//! - [`integrals`]: FCIDUMP ingestion, Cholesky factorization of the
//!   two-electron tensor, frozen-core embedding.
//! - [`focksim`]: dense statevector engine (trial states, Majorana
//!   rotations, measurement, exact diagonalization).
//! - [`shadows`]: signed-permutation matchgate sampling and archives.
//! - [`pfaffian`]: Parlett-Reid Pfaffian kernel with derivatives.
//! - [`overlap`]: the matchgate-shadow overlap/force-bias/local-energy
//!   estimator core.
//! - [`vce`]: virtual correlation energy embedding of full-space walkers
//!   onto active-space estimators.
//! - [`propagate`]: phaseless AFQMC driver with population control,
//!   reblocking analysis, and checkpoint/restart.
//! - [`rdm`]: one-particle reduced density matrices from shadows.

pub mod estimator;
pub mod focksim;
pub mod integrals;
pub mod overlap;
pub mod pfaffian;
pub mod propagate;
pub mod rdm;
pub mod shadows;
pub mod util;
pub mod vce;

#[cfg(test)]
pub(crate) mod testutil;

pub use num_complex::Complex64;

/// Complex matrix type used throughout the estimator kernels.
pub type CMat = nalgebra::DMatrix<Complex64>;
/// Real matrix type used for integrals and orthogonal rotations.
pub type RMat = nalgebra::DMatrix<f64>;
