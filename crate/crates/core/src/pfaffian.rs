//! Pfaffian kernel for complex antisymmetric matrices.
//!
//! The Pfaffian is computed by Parlett-Reid skew-symmetric
//! tridiagonalization with partial pivoting: congruence by unit Gauss
//! transforms leaves the Pfaffian invariant, row/column swaps flip its
//! sign, and the reduced tridiagonal contributes the product of its
//! superdiagonal pair entries. Magnitude is accumulated in log form so
//! the kernel stays finite when downstream formulas divide by 2^(N-η/2).

use crate::CMat;
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfaffianError {
    #[error("matrix must be square with even dimension, got {rows}x{cols}")]
    OddDimension { rows: usize, cols: usize },
    #[error("antisymmetry residual {residual:.3e} exceeds guard {guard:.3e}")]
    NotAntisymmetric { residual: f64, guard: f64 },
    #[error("singular pfaffian: smallest pivot magnitude {pivot:.3e}")]
    Singular { pivot: f64 },
}

/// Dense complex antisymmetric matrix of even order.
///
/// Construction projects the input onto (A - Aᵀ)/2 and rejects inputs whose
/// antisymmetry residual exceeds 1e-12 relative to the largest entry.
#[derive(Debug, Clone)]
pub struct AntisymmetricMatrix {
    mat: CMat,
}

const ANTISYM_GUARD: f64 = 1e-12;

impl AntisymmetricMatrix {
    pub fn new(mat: CMat) -> Result<Self, PfaffianError> {
        if mat.nrows() != mat.ncols() || !mat.nrows().is_multiple_of(2) {
            return Err(PfaffianError::OddDimension {
                rows: mat.nrows(),
                cols: mat.ncols(),
            });
        }
        let scale = mat.iter().map(|z| z.norm()).fold(1.0f64, f64::max);
        let mut residual = 0.0f64;
        for i in 0..mat.nrows() {
            for j in i..mat.ncols() {
                residual = residual.max((mat[(i, j)] + mat[(j, i)]).norm());
            }
        }
        if residual > ANTISYM_GUARD * scale {
            return Err(PfaffianError::NotAntisymmetric {
                residual,
                guard: ANTISYM_GUARD * scale,
            });
        }
        Ok(Self::project(mat))
    }

    /// Projects onto the antisymmetric part without a residual check. For
    /// matrices that are antisymmetric by construction.
    pub fn project(mat: CMat) -> Self {
        debug_assert!(mat.nrows() == mat.ncols() && mat.nrows().is_multiple_of(2));
        let proj = (&mat - mat.transpose()) * Complex64::new(0.5, 0.0);
        AntisymmetricMatrix { mat: proj }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn as_matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn into_matrix(self) -> CMat {
        self.mat
    }
}

/// Pfaffian in (log-magnitude, unit phase) form.
#[derive(Debug, Clone, Copy)]
pub struct PfaffianValue {
    pub ln_mag: f64,
    pub phase: Complex64,
}

impl PfaffianValue {
    pub fn zero() -> Self {
        PfaffianValue {
            ln_mag: f64::NEG_INFINITY,
            phase: Complex64::new(0.0, 0.0),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.ln_mag == f64::NEG_INFINITY
    }

    pub fn to_complex(self) -> Complex64 {
        if self.is_zero() {
            Complex64::new(0.0, 0.0)
        } else {
            self.phase * self.ln_mag.exp()
        }
    }
}

/// Parlett-Reid reduction on a scratch copy; the workhorse entry point.
///
/// The matrix is destroyed in place. Callers that still need the input
/// should clone first (the typed wrappers below do).
pub fn pfaffian_in_place(a: &mut CMat) -> PfaffianValue {
    let n = a.nrows();
    debug_assert!(n.is_multiple_of(2) && a.ncols() == n);
    if n == 0 {
        return PfaffianValue {
            ln_mag: 0.0,
            phase: Complex64::new(1.0, 0.0),
        };
    }
    let mut ln_mag = 0.0f64;
    let mut phase = Complex64::new(1.0, 0.0);
    let mut k = 0usize;
    while k + 1 < n {
        // Partial pivot: bring the largest entry of column k below the
        // diagonal into position (k+1, k).
        let mut kp = k + 1;
        let mut best = a[(k + 1, k)].norm();
        for j in k + 2..n {
            let m = a[(j, k)].norm();
            if m > best {
                best = m;
                kp = j;
            }
        }
        if best == 0.0 {
            return PfaffianValue::zero();
        }
        if kp != k + 1 {
            a.swap_rows(k + 1, kp);
            a.swap_columns(k + 1, kp);
            phase = -phase;
        }
        let pivot = a[(k + 1, k)];
        ln_mag += pivot.norm().ln();
        phase *= -pivot / pivot.norm(); // Pf factor is A[k, k+1] = -A[k+1, k]
        if k + 2 < n {
            // Congruence update of the trailing block:
            // A[j,l] -= t_j A[k+1,l] - t_l A[k+1,j],  t_j = A[j,k] / A[k+1,k].
            debug_assert!(n <= 64);
            let mut tau_buf = [Complex64::new(0.0, 0.0); 64];
            for (jj, j) in (k + 2..n).enumerate() {
                tau_buf[jj] = a[(j, k)] / pivot;
            }
            let taus = &tau_buf[..n - k - 2];
            for (jj, &tj) in taus.iter().enumerate() {
                let j = k + 2 + jj;
                for (ll, &tl) in taus.iter().enumerate() {
                    let l = k + 2 + ll;
                    if l <= j {
                        continue;
                    }
                    let upd = tj * a[(k + 1, l)] - tl * a[(k + 1, j)];
                    let v = a[(j, l)] - upd;
                    a[(j, l)] = v;
                    a[(l, j)] = -v;
                }
                a[(j, k)] = Complex64::new(0.0, 0.0);
                a[(k, j)] = Complex64::new(0.0, 0.0);
            }
        }
        k += 2;
    }
    PfaffianValue { ln_mag, phase }
}

/// Closed-form Pfaffian for small even dimensions (recursive expansion
/// along the first retained row); no pivoting, no scratch copy. Intended
/// for the estimator hot loop where dim ≤ 6.
pub fn pfaffian_small(a: &CMat) -> Complex64 {
    let n = a.nrows();
    debug_assert!(n.is_multiple_of(2) && n <= 8);
    let mut idx = [0usize; 8];
    for (i, slot) in idx.iter_mut().take(n).enumerate() {
        *slot = i;
    }
    pf_expand(a, &idx[..n])
}

fn pf_expand(a: &CMat, idx: &[usize]) -> Complex64 {
    match idx.len() {
        0 => Complex64::new(1.0, 0.0),
        2 => a[(idx[0], idx[1])],
        n => {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut sub = [0usize; 8];
            for j in 1..n {
                let entry = a[(idx[0], idx[j])];
                if entry == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let mut m = 0;
                for (k, &v) in idx.iter().enumerate().skip(1) {
                    if k != j {
                        sub[m] = v;
                        m += 1;
                    }
                }
                let term = entry * pf_expand(a, &sub[..m]);
                if j % 2 == 1 {
                    acc += term;
                } else {
                    acc -= term;
                }
            }
            acc
        }
    }
}

/// Closed-form inverse of a small antisymmetric matrix through Pfaffian
/// minors: (A⁻¹)_{ij} = (-1)^{i+j} Pf(A with rows/cols i,j removed) / Pf(A)
/// for i < j, antisymmetric completion elsewhere. Returns None when Pf is
/// numerically zero. Intended for dim ≤ 6 hot paths.
pub fn small_antisymmetric_inverse(a: &CMat, pf: Complex64, out: &mut CMat) -> bool {
    let n = a.nrows();
    debug_assert!(n.is_multiple_of(2) && n <= 8);
    if pf == Complex64::new(0.0, 0.0) {
        return false;
    }
    let inv_pf = Complex64::new(1.0, 0.0) / pf;
    let mut sub = [0usize; 8];
    for i in 0..n {
        out[(i, i)] = Complex64::new(0.0, 0.0);
        for j in i + 1..n {
            let mut m = 0;
            for k in 0..n {
                if k != i && k != j {
                    sub[m] = k;
                    m += 1;
                }
            }
            let minor = pf_expand(a, &sub[..m]);
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            let val = sign * minor * inv_pf;
            out[(i, j)] = val;
            out[(j, i)] = -val;
        }
    }
    true
}

/// Pf(A) as a complex number.
pub fn pfaffian(a: &AntisymmetricMatrix) -> Complex64 {
    let mut scratch = a.as_matrix().clone();
    pfaffian_in_place(&mut scratch).to_complex()
}

/// Pf(A) in log form, for magnitudes outside the f64 range.
pub fn pfaffian_log(a: &AntisymmetricMatrix) -> PfaffianValue {
    let mut scratch = a.as_matrix().clone();
    pfaffian_in_place(&mut scratch)
}

/// Pfaffian together with the matrix inverse needed by derivative formulas.
///
/// The inverse is projected back onto antisymmetric form to keep the trace
/// identities exact in floating point.
pub fn pfaffian_with_inverse(a: &AntisymmetricMatrix) -> Result<(Complex64, CMat), PfaffianError> {
    let mut scratch = a.as_matrix().clone();
    let pf = pfaffian_in_place(&mut scratch);
    // ln_mag is per the whole Pfaffian; guard against effectively singular
    // inputs before attempting inversion.
    let dim_scale = a
        .as_matrix()
        .iter()
        .map(|z| z.norm())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let m = a.dim() / 2;
    let rel_ln = pf.ln_mag - (m as f64) * dim_scale.ln();
    if pf.is_zero() || rel_ln < (1e-280f64).ln() {
        return Err(PfaffianError::Singular {
            pivot: pf.ln_mag.exp(),
        });
    }
    let inv = a
        .as_matrix()
        .clone()
        .try_inverse()
        .ok_or(PfaffianError::Singular { pivot: 0.0 })?;
    let inv = (&inv - inv.transpose()) * Complex64::new(0.5, 0.0);
    Ok((pf.to_complex(), inv))
}

/// Directional derivative of the Pfaffian: (Pf/2) Tr(A⁻¹ dA).
pub fn pfaffian_derivative(pf: Complex64, a_inv: &CMat, da: &CMat) -> Complex64 {
    pf * 0.5 * trace_product(a_inv, da)
}

/// Second directional derivative of the Pfaffian:
/// (Pf/2) [Tr(A⁻¹ d²A) - Tr(A⁻¹ dA₁ A⁻¹ dA₂) + ½ Tr(A⁻¹ dA₁) Tr(A⁻¹ dA₂)].
pub fn pfaffian_second_derivative(
    pf: Complex64,
    a_inv: &CMat,
    da1: &CMat,
    da2: &CMat,
    d2a: &CMat,
) -> Complex64 {
    let t1 = trace_product(a_inv, da1);
    let t2 = trace_product(a_inv, da2);
    let cross = (a_inv * da1 * a_inv * da2).trace();
    pf * 0.5 * (trace_product(a_inv, d2a) - cross + 0.5 * t1 * t2)
}

/// Tr(X Y) without forming the product.
pub fn trace_product(x: &CMat, y: &CMat) -> Complex64 {
    debug_assert_eq!(x.ncols(), y.nrows());
    debug_assert_eq!(x.nrows(), y.ncols());
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            acc += x[(i, j)] * y[(j, i)];
        }
    }
    acc
}
