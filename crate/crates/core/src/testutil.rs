//! Shared fixtures and random generators for the unit tests.

use crate::integrals::IntegralSet;
use crate::{CMat, Complex64, RMat};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

pub fn h2_fixture_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata/h2_sto3g.fcidump")
}

/// Random synthetic integral set whose two-electron tensor is built from
/// `rank` known symmetric Cholesky factors.
pub fn synthetic_ints(
    n: usize,
    rank: usize,
    n_alpha: usize,
    n_beta: usize,
    seed: u64,
) -> IntegralSet {
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let ls: Vec<RMat> = (0..rank)
        .map(|_| {
            let m = RMat::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
            (&m + m.transpose()) * 0.5
        })
        .collect();
    let mut g = vec![0.0f64; n.pow(4)];
    for p in 0..n {
        for q in 0..n {
            for r in 0..n {
                for s in 0..n {
                    g[((p * n + q) * n + r) * n + s] =
                        ls.iter().map(|l| l[(p, q)] * l[(r, s)]).sum();
                }
            }
        }
    }
    let t = {
        let m = RMat::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
        (&m + m.transpose()) * 0.5
    };
    IntegralSet::new(n, 0.37, t, g, n_alpha, n_beta).unwrap()
}

/// Random real orthogonal matrix with det = +1.
pub fn random_orthogonal(dim: usize, rng: &mut ChaCha12Rng) -> RMat {
    let m = RMat::from_fn(dim, dim, |_, _| rng.gen::<f64>() - 0.5);
    let qr = m.qr();
    let mut q = qr.q();
    let r = qr.r();
    for i in 0..dim {
        if r[(i, i)] < 0.0 {
            for k in 0..dim {
                q[(k, i)] = -q[(k, i)];
            }
        }
    }
    if q.determinant() < 0.0 {
        for k in 0..dim {
            q[(k, 0)] = -q[(k, 0)];
        }
    }
    q
}

/// Random complex matrix with orthonormal columns.
pub fn random_orthonormal_walker(n: usize, zeta: usize, rng: &mut ChaCha12Rng) -> CMat {
    let m = CMat::from_fn(n, zeta, |_, _| {
        Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    });
    m.qr().q()
}

/// Random complex matrix without orthonormality.
pub fn random_complex_matrix(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> CMat {
    CMat::from_fn(rows, cols, |_, _| {
        Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    })
}
