//! Matchgate shadow sampling: random signed-permutation bases, single-shot
//! measurements of the trial superposition state, and binary archives.

use crate::focksim::{majorana_unitary, FocksimError, TrialState};
use crate::util::{derive_seed, io};
use crate::RMat;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShadowError {
    #[error("simulator error: {0}")]
    Simulator(#[from] FocksimError),
    #[error("archive error on {path}: {msg}")]
    Archive { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("shadow set is empty")]
    Empty,
}

/// A signed permutation matrix Q with Q[perm(μ), μ] = signs(μ), det = +1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedPermutation {
    pub perm: Vec<u16>,
    /// true means -1 on that coordinate.
    pub neg: Vec<bool>,
}

impl SignedPermutation {
    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn to_matrix(&self) -> RMat {
        let n = self.dim();
        let mut q = RMat::zeros(n, n);
        for mu in 0..n {
            q[(self.perm[mu] as usize, mu)] = if self.neg[mu] { -1.0 } else { 1.0 };
        }
        q
    }

    /// Permutation parity times the product of signs; ±1 exactly.
    pub fn det(&self) -> i32 {
        let mut seen = vec![false; self.dim()];
        let mut parity = 1i32;
        for start in 0..self.dim() {
            if seen[start] {
                continue;
            }
            let mut len = 0;
            let mut cur = start;
            while !seen[cur] {
                seen[cur] = true;
                cur = self.perm[cur] as usize;
                len += 1;
            }
            if len % 2 == 0 {
                parity = -parity;
            }
        }
        for &n in &self.neg {
            if n {
                parity = -parity;
            }
        }
        parity
    }

    /// Row-sparse Qᵀ C_{|b⟩} Q: for each row μ the unique nonzero column
    /// and value. The conjugation of a pair-block matrix by a signed
    /// permutation stays one-sparse per row.
    pub fn conjugated_covariance(&self, b: u64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        self.conjugated_covariance_into(b, &mut out);
        out
    }

    /// Allocation-free variant for hot loops; `out` is cleared and filled.
    pub fn conjugated_covariance_into(&self, b: u64, out: &mut Vec<(usize, f64)>) {
        let dim = self.dim();
        debug_assert!(dim <= 64);
        let mut inv = [0u16; 64];
        for mu in 0..dim {
            inv[self.perm[mu] as usize] = mu as u16;
        }
        out.clear();
        for (mu, &perm_mu) in self.perm.iter().enumerate() {
            let p = perm_mu as usize;
            let nu = inv[p ^ 1] as usize;
            let j = p / 2;
            let occ_sign = if b >> j & 1 == 1 { -1.0 } else { 1.0 };
            let orient = if p.is_multiple_of(2) { 1.0 } else { -1.0 };
            let s_mu = if self.neg[mu] { -1.0 } else { 1.0 };
            let s_nu = if self.neg[nu] { -1.0 } else { 1.0 };
            out.push((nu, s_mu * s_nu * orient * occ_sign));
        }
    }
}

/// Uniform sample from the det = +1 signed permutations: uniform
/// permutation and signs, then one sign flip on the last coordinate if the
/// determinant came out -1.
pub fn sample_signed_permutation<R: Rng>(rng: &mut R, n: usize) -> SignedPermutation {
    assert!(n >= 2 && n.is_multiple_of(2), "dimension must be even and >= 2");
    let mut perm: Vec<u16> = (0..n as u16).collect();
    perm.shuffle(rng);
    let neg: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
    let mut sp = SignedPermutation { perm, neg };
    if sp.det() < 0 {
        let last = sp.neg.len() - 1;
        sp.neg[last] = !sp.neg[last];
    }
    sp
}

/// The covariance matrix of a computational basis state: block-diagonal
/// with blocks [[0, (-1)^{b_j}], [-(-1)^{b_j}, 0]]. Integer-valued.
pub fn covariance_of(b: u64, n_qubits: usize) -> RMat {
    let mut c = RMat::zeros(2 * n_qubits, 2 * n_qubits);
    for j in 0..n_qubits {
        let s = if b >> j & 1 == 1 { -1.0 } else { 1.0 };
        c[(2 * j, 2 * j + 1)] = s;
        c[(2 * j + 1, 2 * j)] = -s;
    }
    c
}

/// One shadow: the sampled basis rotation and the measured bitstring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowSample {
    pub q: SignedPermutation,
    pub b: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShadowSource {
    Simulator,
    File,
}

/// A collection of shadow samples with provenance.
#[derive(Debug, Clone)]
pub struct ShadowSet {
    pub n_qubits: usize,
    pub eta: usize,
    pub samples: Vec<ShadowSample>,
    pub seed: u64,
    pub source: ShadowSource,
}

impl ShadowSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Collects `count` single-shot matchgate shadows of the trial
/// superposition state. Each sample owns a derived rng stream, so the
/// result is independent of thread scheduling.
pub fn collect(trial: &TrialState, count: usize, seed: u64) -> Result<ShadowSet, ShadowError> {
    collect_state(&trial.superposition, trial.eta, count, seed)
}

/// Collects shadows of an arbitrary normalized state (the trial path wraps
/// this with the superposition construction).
pub fn collect_state(
    state: &crate::focksim::FockState,
    eta: usize,
    count: usize,
    seed: u64,
) -> Result<ShadowSet, ShadowError> {
    let n = state.n_qubits;
    let samples: Result<Vec<ShadowSample>, FocksimError> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, i as u64));
            let q = sample_signed_permutation(&mut rng, 2 * n);
            let rot = majorana_unitary(q.to_matrix())?;
            let rotated = rot.apply(state);
            let b = rotated.measure(&mut rng);
            Ok(ShadowSample { q, b })
        })
        .collect();
    Ok(ShadowSet {
        n_qubits: n,
        eta,
        samples: samples?,
        seed,
        source: ShadowSource::Simulator,
    })
}

/// Extends a set in place with samples at indices [set.len(), target), so a
/// rerun with a larger count appends only the delta.
pub fn extend(set: &mut ShadowSet, trial: &TrialState, target: usize) -> Result<(), ShadowError> {
    if target <= set.len() {
        return Ok(());
    }
    let n = set.n_qubits;
    let seed = set.seed;
    let extra: Result<Vec<ShadowSample>, FocksimError> = (set.len()..target)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, i as u64));
            let q = sample_signed_permutation(&mut rng, 2 * n);
            let rot = majorana_unitary(q.to_matrix())?;
            let rotated = rot.apply(&trial.superposition);
            let b = rotated.measure(&mut rng);
            Ok(ShadowSample { q, b })
        })
        .collect();
    set.samples.extend(extra?);
    Ok(())
}

/// Ideal-simulator shadow budget per system used by the reference
/// hardware demonstrations this pipeline mirrors; desk-scale runs default
/// to 10⁵.
pub const REFERENCE_SHADOW_BUDGET: usize = 58_482;

const ARCHIVE_MAGIC: &[u8; 4] = b"MGSH";
const ARCHIVE_VERSION: u16 = 1;

/// Writes the versioned little-endian binary archive.
pub fn save(set: &ShadowSet, path: &Path) -> Result<(), ShadowError> {
    let file = File::create(path).map_err(|source| ShadowError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        w.write_all(ARCHIVE_MAGIC)?;
        io::write_u16(&mut w, ARCHIVE_VERSION)?;
        io::write_u16(&mut w, set.n_qubits as u16)?;
        io::write_u16(&mut w, set.eta as u16)?;
        w.write_all(&[match set.source {
            ShadowSource::Simulator => 0u8,
            ShadowSource::File => 1u8,
        }])?;
        io::write_u64(&mut w, set.seed)?;
        io::write_u64(&mut w, set.samples.len() as u64)?;
        let dim = 2 * set.n_qubits;
        let sign_bytes = dim.div_ceil(8);
        let bit_bytes = set.n_qubits.div_ceil(8);
        for s in &set.samples {
            for &p in &s.q.perm {
                io::write_u16(&mut w, p)?;
            }
            let mut packed = vec![0u8; sign_bytes];
            for (j, &n) in s.q.neg.iter().enumerate() {
                if n {
                    packed[j / 8] |= 1 << (j % 8);
                }
            }
            w.write_all(&packed)?;
            let mut bits = vec![0u8; bit_bytes];
            for j in 0..set.n_qubits {
                if s.b >> j & 1 == 1 {
                    bits[j / 8] |= 1 << (j % 8);
                }
            }
            w.write_all(&bits)?;
        }
        w.flush()
    })();
    res.map_err(|source| ShadowError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an archive; truncated or mismatched files produce an archive
/// error and no partial set.
pub fn load(path: &Path) -> Result<ShadowSet, ShadowError> {
    let file = File::open(path).map_err(|source| ShadowError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = BufReader::new(file);
    let archive_err = |msg: &str| ShadowError::Archive {
        path: path.display().to_string(),
        msg: msg.into(),
    };
    let inner = |r: &mut BufReader<File>| -> Result<ShadowSet, ShadowError> {
        let trunc = |_: std::io::Error| archive_err("truncated archive");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(archive_err("bad magic"));
        }
        let version = io::read_u16(r).map_err(trunc)?;
        if version != ARCHIVE_VERSION {
            return Err(archive_err(&format!("unsupported version {version}")));
        }
        let n_qubits = io::read_u16(r).map_err(trunc)? as usize;
        let eta = io::read_u16(r).map_err(trunc)? as usize;
        let mut src = [0u8; 1];
        r.read_exact(&mut src).map_err(trunc)?;
        let source = match src[0] {
            0 => ShadowSource::Simulator,
            1 => ShadowSource::File,
            _ => return Err(archive_err("bad source byte")),
        };
        let seed = io::read_u64(r).map_err(trunc)?;
        let count = io::read_u64(r).map_err(trunc)? as usize;
        let dim = 2 * n_qubits;
        let sign_bytes = dim.div_ceil(8);
        let bit_bytes = n_qubits.div_ceil(8);
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let mut perm = Vec::with_capacity(dim);
            for _ in 0..dim {
                let p = io::read_u16(r).map_err(trunc)?;
                if p as usize >= dim {
                    return Err(archive_err("permutation index out of range"));
                }
                perm.push(p);
            }
            let mut packed = vec![0u8; sign_bytes];
            r.read_exact(&mut packed).map_err(trunc)?;
            let neg: Vec<bool> = (0..dim)
                .map(|j| packed[j / 8] >> (j % 8) & 1 == 1)
                .collect();
            let mut bits = vec![0u8; bit_bytes];
            r.read_exact(&mut bits).map_err(trunc)?;
            let mut b = 0u64;
            for j in 0..n_qubits {
                if bits[j / 8] >> (j % 8) & 1 == 1 {
                    b |= 1 << j;
                }
            }
            samples.push(ShadowSample {
                q: SignedPermutation { perm, neg },
                b,
            });
        }
        // Trailing garbage means the file does not match its header.
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(trunc)? != 0 {
            return Err(archive_err("trailing bytes after last sample"));
        }
        Ok(ShadowSet {
            n_qubits,
            eta,
            samples,
            seed,
            source,
        })
    };
    inner(&mut r)
}
