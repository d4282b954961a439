//! Electronic-structure integrals, Hamiltonian assembly, and the Cholesky
//! factorization of the two-electron tensor.
//!
//! Conventions: integrals are spatial and real, stored in chemists'
//! notation, so `g(p,q,r,s)` is (pq|rs) and the second-quantized
//! Hamiltonian reads H = Σ t_pq a†_p a_q + ½ Σ (pq|rs) a†_p a†_r a_s a_q.
//! Cholesky vectors satisfy (pq|rs) = Σ_γ L^γ_pq L^γ_rs with each L^γ
//! symmetric. Spin-orbitals are interleaved (α,β,α,β,…), orbital p spin σ
//! at index 2p+σ.

use crate::util::{io, Fnv64};
use crate::RMat;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IntegralError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed input at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("inconsistent integrals: {0}")]
    Inconsistent(String),
    #[error("two-electron tensor not positive semidefinite: pivot {pivot:.3e}")]
    NotPsd { pivot: f64 },
    #[error("invalid orbital partition: {0}")]
    Partition(String),
    #[error("incompatible cache file: {0}")]
    Cache(String),
}

/// Raw one- and two-electron integrals over spatial orbitals.
#[derive(Debug, Clone)]
pub struct IntegralSet {
    pub n_orb: usize,
    pub e_core: f64,
    /// One-electron integrals t_pq, symmetric.
    pub t: RMat,
    /// Two-electron integrals (pq|rs), flat with index ((p*n+q)*n+r)*n+s.
    g: Vec<f64>,
    pub n_elec_alpha: usize,
    pub n_elec_beta: usize,
}

impl IntegralSet {
    pub fn new(
        n_orb: usize,
        e_core: f64,
        t: RMat,
        g: Vec<f64>,
        n_elec_alpha: usize,
        n_elec_beta: usize,
    ) -> Result<Self, IntegralError> {
        assert_eq!(t.nrows(), n_orb);
        assert_eq!(g.len(), n_orb.pow(4));
        let set = IntegralSet {
            n_orb,
            e_core,
            t,
            g,
            n_elec_alpha,
            n_elec_beta,
        };
        set.validate()?;
        Ok(set)
    }

    #[inline]
    pub fn g(&self, p: usize, q: usize, r: usize, s: usize) -> f64 {
        let n = self.n_orb;
        self.g[((p * n + q) * n + r) * n + s]
    }

    pub fn n_elec(&self) -> usize {
        self.n_elec_alpha + self.n_elec_beta
    }

    /// Checks t symmetry, the 8-fold permutational symmetry of g, and
    /// positive semidefiniteness of the pair-index matrix.
    pub fn validate(&self) -> Result<(), IntegralError> {
        let n = self.n_orb;
        for p in 0..n {
            for q in 0..p {
                if (self.t[(p, q)] - self.t[(q, p)]).abs() > 1e-12 {
                    return Err(IntegralError::Inconsistent(format!(
                        "t[{p},{q}] != t[{q},{p}]"
                    )));
                }
            }
        }
        for p in 0..n {
            for q in 0..n {
                for r in 0..n {
                    for s in 0..n {
                        let v = self.g(p, q, r, s);
                        for w in [self.g(q, p, r, s), self.g(p, q, s, r), self.g(r, s, p, q)] {
                            if (v - w).abs() > 1e-12 {
                                return Err(IntegralError::Inconsistent(format!(
                                    "g symmetry violated near ({p},{q},{r},{s})"
                                )));
                            }
                        }
                    }
                }
            }
        }
        // PSD of the (pq),(rs) pair matrix; needed for the Cholesky step.
        let pair = self.pair_matrix();
        let eigs = pair.symmetric_eigen().eigenvalues;
        let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -1e-8 {
            return Err(IntegralError::Inconsistent(format!(
                "pair-index matrix has negative eigenvalue {min:.3e}"
            )));
        }
        Ok(())
    }

    /// The n²×n² matrix over pair indices (pq),(rs).
    pub fn pair_matrix(&self) -> RMat {
        let n = self.n_orb;
        RMat::from_fn(n * n, n * n, |i, j| self.g(i / n, i % n, j / n, j % n))
    }
}

/// Hamiltonian in Cholesky-factorized form: e_core, one-body t, modified
/// one-body v0, and the Cholesky matrices L^γ.
#[derive(Debug, Clone)]
pub struct CholeskyHamiltonian {
    pub n_orb: usize,
    pub e_core: f64,
    pub t: RMat,
    /// Modified one-body term: v0_pq = t_pq - ½ Σ_γ (L^γ L^γ)_pq.
    pub v0: RMat,
    pub l_vectors: Vec<RMat>,
    pub chol_tol: f64,
}

impl CholeskyHamiltonian {
    pub fn n_fields(&self) -> usize {
        self.l_vectors.len()
    }

    /// Reconstruction residual max |Σ_γ L^γ_pq L^γ_rs - (pq|rs)|, by full
    /// enumeration.
    pub fn reconstruction_residual(&self, ints: &IntegralSet) -> f64 {
        let n = self.n_orb;
        let mut worst = 0.0f64;
        for p in 0..n {
            for q in 0..n {
                for r in 0..n {
                    for s in 0..n {
                        let mut acc = 0.0;
                        for l in &self.l_vectors {
                            acc += l[(p, q)] * l[(r, s)];
                        }
                        worst = worst.max((acc - ints.g(p, q, r, s)).abs());
                    }
                }
            }
        }
        worst
    }

    /// Fingerprint for checkpoint compatibility checks.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        h.update_u64(self.n_orb as u64);
        h.update_f64(self.e_core);
        h.update_f64(self.chol_tol);
        for m in std::iter::once(&self.t)
            .chain(std::iter::once(&self.v0))
            .chain(self.l_vectors.iter())
        {
            for v in m.iter() {
                h.update_f64(*v);
            }
        }
        h.finish()
    }

    pub fn save(&self, path: &Path) -> Result<(), IntegralError> {
        let file = File::create(path).map_err(|source| IntegralError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        let res: std::io::Result<()> = (|| {
            w.write_all(b"MGCH")?;
            io::write_u16(&mut w, 1)?;
            io::write_u16(&mut w, self.n_orb as u16)?;
            io::write_u16(&mut w, self.l_vectors.len() as u16)?;
            io::write_f64(&mut w, self.e_core)?;
            io::write_f64(&mut w, self.chol_tol)?;
            for m in std::iter::once(&self.t)
                .chain(std::iter::once(&self.v0))
                .chain(self.l_vectors.iter())
            {
                for i in 0..self.n_orb {
                    for j in 0..self.n_orb {
                        io::write_f64(&mut w, m[(i, j)])?;
                    }
                }
            }
            w.flush()
        })();
        res.map_err(|source| IntegralError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IntegralError> {
        let file = File::open(path).map_err(|source| IntegralError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut r = BufReader::new(file);
        let inner = |r: &mut BufReader<File>| -> std::io::Result<Result<Self, IntegralError>> {
            let mut magic = [0u8; 4];
            r.read_exact(&mut magic)?;
            if &magic != b"MGCH" {
                return Ok(Err(IntegralError::Cache("bad magic".into())));
            }
            let version = io::read_u16(r)?;
            if version != 1 {
                return Ok(Err(IntegralError::Cache(format!(
                    "unsupported version {version}"
                ))));
            }
            let n_orb = io::read_u16(r)? as usize;
            let n_chol = io::read_u16(r)? as usize;
            let e_core = io::read_f64(r)?;
            let chol_tol = io::read_f64(r)?;
            let read_mat = |r: &mut BufReader<File>| -> std::io::Result<RMat> {
                let mut m = RMat::zeros(n_orb, n_orb);
                for i in 0..n_orb {
                    for j in 0..n_orb {
                        m[(i, j)] = io::read_f64(r)?;
                    }
                }
                Ok(m)
            };
            let t = read_mat(r)?;
            let v0 = read_mat(r)?;
            let mut l_vectors = Vec::with_capacity(n_chol);
            for _ in 0..n_chol {
                l_vectors.push(read_mat(r)?);
            }
            Ok(Ok(CholeskyHamiltonian {
                n_orb,
                e_core,
                t,
                v0,
                l_vectors,
                chol_tol,
            }))
        };
        match inner(&mut r) {
            Ok(res) => res,
            Err(source) => Err(IntegralError::Io {
                path: path.display().to_string(),
                source,
            }),
        }
    }
}

/// Expands a spatial one-body matrix to interleaved spin-orbitals.
pub fn interleave_spin(m: &RMat) -> RMat {
    let n = m.nrows();
    let mut out = RMat::zeros(2 * n, 2 * n);
    for p in 0..n {
        for q in 0..n {
            out[(2 * p, 2 * q)] = m[(p, q)];
            out[(2 * p + 1, 2 * q + 1)] = m[(p, q)];
        }
    }
    out
}

/// Parses an FCIDUMP file: header with NORB/NELEC/MS2, then
/// "value p q r s" records with 1-based indices in chemists' notation.
pub fn load_fcidump(path: &Path) -> Result<IntegralSet, IntegralError> {
    let file = File::open(path).map_err(|source| IntegralError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let mut header = String::new();
    let mut header_end = 0usize;
    for (idx, line) in &mut lines {
        let line = line.map_err(|source| IntegralError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let trimmed = line.trim().to_uppercase();
        header.push_str(&trimmed);
        header.push(' ');
        header_end = idx + 1;
        if trimmed.contains("&END") || trimmed.ends_with('/') || trimmed == "/" {
            break;
        }
    }
    if !header.contains("&FCIDUMP") {
        return Err(IntegralError::Malformed {
            line: 1,
            msg: "missing &FCIDUMP header".into(),
        });
    }
    let grab = |key: &str| -> Option<i64> {
        let pos = header.find(key)?;
        let rest = &header[pos + key.len()..];
        let rest = rest.trim_start().strip_prefix('=')?.trim_start();
        let num: String = rest
            .chars()
            .take_while(|c| c.is_ascii_digit() || *c == '-' || *c == '+')
            .collect();
        num.parse().ok()
    };
    let n_orb = grab("NORB").ok_or(IntegralError::Malformed {
        line: header_end,
        msg: "NORB missing".into(),
    })? as usize;
    let n_elec = grab("NELEC").ok_or(IntegralError::Malformed {
        line: header_end,
        msg: "NELEC missing".into(),
    })? as usize;
    let ms2 = grab("MS2").unwrap_or(0);
    if (n_elec as i64 + ms2) % 2 != 0 || ms2.unsigned_abs() as usize > n_elec {
        return Err(IntegralError::Malformed {
            line: header_end,
            msg: format!("inconsistent NELEC={n_elec} MS2={ms2}"),
        });
    }
    let n_alpha = ((n_elec as i64 + ms2) / 2) as usize;
    let n_beta = n_elec - n_alpha;

    let mut e_core = 0.0f64;
    let mut t = RMat::zeros(n_orb, n_orb);
    let mut t_set = vec![false; n_orb * n_orb];
    let mut g = vec![0.0f64; n_orb.pow(4)];
    let mut g_set = vec![false; n_orb.pow(4)];
    let flat = |p: usize, q: usize, r: usize, s: usize| ((p * n_orb + q) * n_orb + r) * n_orb + s;

    for (idx, line) in lines {
        let line = line.map_err(|source| IntegralError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let val_str = parts.next().unwrap().replace(['D', 'd'], "E");
        let value: f64 = val_str.parse().map_err(|_| IntegralError::Malformed {
            line: line_no,
            msg: format!("cannot parse value '{val_str}'"),
        })?;
        let mut idx4 = [0usize; 4];
        for slot in &mut idx4 {
            let tok = parts.next().ok_or(IntegralError::Malformed {
                line: line_no,
                msg: "expected 4 orbital indices".into(),
            })?;
            *slot = tok.parse().map_err(|_| IntegralError::Malformed {
                line: line_no,
                msg: format!("cannot parse index '{tok}'"),
            })?;
        }
        let [p, q, r, s] = idx4;
        for &i in &idx4 {
            if i > n_orb {
                return Err(IntegralError::Malformed {
                    line: line_no,
                    msg: format!("orbital index {i} exceeds NORB={n_orb}"),
                });
            }
        }
        if p == 0 && q == 0 && r == 0 && s == 0 {
            e_core = value;
        } else if r == 0 && s == 0 && p > 0 && q > 0 {
            let (p, q) = (p - 1, q - 1);
            for (a, b) in [(p, q), (q, p)] {
                if t_set[a * n_orb + b] && (t[(a, b)] - value).abs() > 1e-10 {
                    return Err(IntegralError::Inconsistent(format!(
                        "conflicting one-electron record at line {line_no}"
                    )));
                }
                t[(a, b)] = value;
                t_set[a * n_orb + b] = true;
            }
        } else if p > 0 && q > 0 && r > 0 && s > 0 {
            let (p, q, r, s) = (p - 1, q - 1, r - 1, s - 1);
            for (a, b, c, d) in [
                (p, q, r, s),
                (q, p, r, s),
                (p, q, s, r),
                (q, p, s, r),
                (r, s, p, q),
                (s, r, p, q),
                (r, s, q, p),
                (s, r, q, p),
            ] {
                let i = flat(a, b, c, d);
                if g_set[i] && (g[i] - value).abs() > 1e-10 {
                    return Err(IntegralError::Inconsistent(format!(
                        "conflicting two-electron record at line {line_no}"
                    )));
                }
                g[i] = value;
                g_set[i] = true;
            }
        } else if q == 0 && r == 0 && s == 0 {
            // Orbital-energy record; carried by some dumps, not used here.
            continue;
        } else {
            return Err(IntegralError::Malformed {
                line: line_no,
                msg: format!("unrecognized index pattern {p} {q} {r} {s}"),
            });
        }
    }

    IntegralSet::new(n_orb, e_core, t, g, n_alpha, n_beta)
}

/// Pivoted incomplete Cholesky of the two-electron pair matrix.
///
/// Stops when the largest remaining diagonal residual drops below `tol`;
/// a pivot below `-tol` means the tensor is not PSD. Ties within 1e-14
/// resolve to the lower pair index so runs are reproducible.
pub fn cholesky_factorize(
    ints: &IntegralSet,
    tol: f64,
) -> Result<CholeskyHamiltonian, IntegralError> {
    let n = ints.n_orb;
    let np = n * n;
    let pair = ints.pair_matrix();
    let mut diag: Vec<f64> = (0..np).map(|i| pair[(i, i)]).collect();
    let mut vectors: Vec<Vec<f64>> = Vec::new();

    loop {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (i, &d) in diag.iter().enumerate() {
            if d > best_val + 1e-14 {
                best_val = d;
                best = i;
            }
        }
        if best_val < -tol {
            return Err(IntegralError::NotPsd { pivot: best_val });
        }
        if best_val < tol {
            break;
        }
        let norm = best_val.sqrt();
        let mut col = vec![0.0f64; np];
        for (i, c) in col.iter_mut().enumerate() {
            *c = pair[(i, best)];
        }
        for v in &vectors {
            let vb = v[best];
            for (c, &vi) in col.iter_mut().zip(v.iter()) {
                *c -= vi * vb;
            }
        }
        for c in col.iter_mut() {
            *c /= norm;
        }
        for (d, &c) in diag.iter_mut().zip(col.iter()) {
            *d -= c * c;
        }
        vectors.push(col);
        if vectors.len() >= np {
            break;
        }
    }

    let l_vectors: Vec<RMat> = vectors
        .iter()
        .map(|v| RMat::from_fn(n, n, |p, q| v[p * n + q]))
        .collect();
    let mut v0 = ints.t.clone();
    for l in &l_vectors {
        v0 -= 0.5 * (l * l);
    }
    let ham = CholeskyHamiltonian {
        n_orb: n,
        e_core: ints.e_core,
        t: ints.t.clone(),
        v0,
        l_vectors,
        chol_tol: tol,
    };
    let residual = ham.reconstruction_residual(ints);
    if residual > 10.0 * tol {
        return Err(IntegralError::Inconsistent(format!(
            "cholesky reconstruction residual {residual:.3e} exceeds 10*tol"
        )));
    }
    Ok(ham)
}

/// Active-space embedding with a frozen doubly-occupied core.
#[derive(Debug, Clone)]
pub struct EmbeddedSystem {
    pub n_orb_full: usize,
    pub core: Vec<usize>,
    pub active: Vec<usize>,
    pub virtuals: Vec<usize>,
    /// Active-space integrals with the core mean field folded in.
    pub active_ints: IntegralSet,
    /// Full-space Hamiltonian used for propagation in VCE mode.
    pub full_ham: CholeskyHamiltonian,
}

/// Builds the frozen-core active-space integrals and retains the full-space
/// factorized Hamiltonian.
pub fn build_embedded(
    ints: &IntegralSet,
    core: &[usize],
    active: &[usize],
    chol_tol: f64,
) -> Result<EmbeddedSystem, IntegralError> {
    let n = ints.n_orb;
    let mut seen = vec![false; n];
    for &i in core.iter().chain(active.iter()) {
        if i >= n {
            return Err(IntegralError::Partition(format!(
                "orbital index {i} out of range for {n} orbitals"
            )));
        }
        if seen[i] {
            return Err(IntegralError::Partition(format!(
                "orbital {i} appears in more than one partition"
            )));
        }
        seen[i] = true;
    }
    for w in [core, active] {
        if w.windows(2).any(|p| p[0] >= p[1]) {
            return Err(IntegralError::Partition(
                "partition lists must be strictly ascending".into(),
            ));
        }
    }
    if ints.n_elec_alpha < core.len() || ints.n_elec_beta < core.len() {
        return Err(IntegralError::Partition(format!(
            "not enough electrons to doubly occupy {} core orbitals",
            core.len()
        )));
    }
    let virtuals: Vec<usize> = (0..n).filter(|i| !seen[*i]).collect();

    // Frozen-core fold: core energy plus Coulomb/exchange mean field.
    let mut e_core_eff = ints.e_core;
    for &i in core {
        e_core_eff += 2.0 * ints.t[(i, i)];
        for &j in core {
            e_core_eff += 2.0 * ints.g(i, i, j, j) - ints.g(i, j, j, i);
        }
    }
    let na = active.len();
    let mut t_eff = RMat::zeros(na, na);
    for (u_idx, &u) in active.iter().enumerate() {
        for (v_idx, &v) in active.iter().enumerate() {
            let mut val = ints.t[(u, v)];
            for &i in core {
                val += 2.0 * ints.g(u, v, i, i) - ints.g(u, i, i, v);
            }
            t_eff[(u_idx, v_idx)] = val;
        }
    }
    let mut g_eff = vec![0.0f64; na.pow(4)];
    for (pi, &p) in active.iter().enumerate() {
        for (qi, &q) in active.iter().enumerate() {
            for (ri, &r) in active.iter().enumerate() {
                for (si, &s) in active.iter().enumerate() {
                    g_eff[((pi * na + qi) * na + ri) * na + si] = ints.g(p, q, r, s);
                }
            }
        }
    }
    let active_ints = IntegralSet::new(
        na,
        e_core_eff,
        t_eff,
        g_eff,
        ints.n_elec_alpha - core.len(),
        ints.n_elec_beta - core.len(),
    )?;
    let full_ham = cholesky_factorize(ints, chol_tol)?;
    Ok(EmbeddedSystem {
        n_orb_full: n,
        core: core.to_vec(),
        active: active.to_vec(),
        virtuals,
        active_ints,
        full_ham,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{h2_fixture_path, synthetic_ints};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn h2_fcidump_echoes_records() {
        let ints = load_fcidump(&h2_fixture_path()).unwrap();
        assert_eq!(ints.n_orb, 2);
        assert_eq!(ints.n_elec_alpha, 1);
        assert_eq!(ints.n_elec_beta, 1);
        assert!((ints.e_core - 0.713_753_993_664_688_4).abs() < 1e-15);
        assert!((ints.t[(0, 0)] - -1.2524635666725858).abs() < 1e-15);
        assert!((ints.t[(1, 1)] - -0.475_948_702_522_045).abs() < 1e-15);
        assert!((ints.g(0, 0, 0, 0) - 0.674_488_758_944_350_9).abs() < 1e-15);
        assert!((ints.g(0, 0, 1, 1) - 0.663_468_075_052_904_6).abs() < 1e-15);
        // (12|12) record fills all 8 permutations.
        assert!((ints.g(1, 0, 1, 0) - 0.181_288_802_374_557_1).abs() < 1e-15);
        assert!((ints.g(0, 1, 0, 1) - 0.181_288_802_374_557_1).abs() < 1e-15);
        assert!((ints.g(1, 0, 0, 1) - 0.181_288_802_374_557_1).abs() < 1e-15);
    }

    #[test]
    fn symmetry_fill_from_single_record() {
        let dir = std::env::temp_dir().join("mgafqmc_sym_fill");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.fcidump");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "&FCIDUMP NORB=2,NELEC=2,MS2=0,").unwrap();
        writeln!(f, "/").unwrap();
        writeln!(f, "0.5 1 1 2 2").unwrap();
        writeln!(f, "0.9 1 1 1 1").unwrap();
        writeln!(f, "0.9 2 2 2 2").unwrap();
        writeln!(f, "-1.0 1 1 0 0").unwrap();
        writeln!(f, "-0.5 2 2 0 0").unwrap();
        drop(f);
        let ints = load_fcidump(&path).unwrap();
        assert_eq!(ints.g(0, 0, 1, 1), 0.5);
        assert_eq!(ints.g(1, 1, 0, 0), 0.5);
    }

    #[test]
    fn negative_pair_eigenvalue_rejected() {
        // Start from a valid rank-2 tensor and push one pair-diagonal down
        // until the pair matrix picks up a negative eigenvalue.
        let base = synthetic_ints(2, 2, 1, 1, 5);
        let n = 2usize;
        let mut g = vec![0.0; n.pow(4)];
        for p in 0..n {
            for q in 0..n {
                for r in 0..n {
                    for s in 0..n {
                        g[((p * n + q) * n + r) * n + s] = base.g(p, q, r, s);
                    }
                }
            }
        }
        // Perturb (01|01)-type entries downward, keeping the 8-fold
        // symmetry intact.
        for (a, b, c, d) in [(0, 1, 0, 1), (1, 0, 0, 1), (0, 1, 1, 0), (1, 0, 1, 0)] {
            g[((a * n + b) * n + c) * n + d] -= 2.0;
        }
        let err = IntegralSet::new(n, 0.0, base.t.clone(), g, 1, 1);
        match err {
            Err(IntegralError::Inconsistent(msg)) => {
                assert!(msg.contains("negative eigenvalue"), "{msg}");
            }
            other => panic!("expected inconsistent-integrals error, got {other:?}"),
        }
    }

    #[test]
    fn rank_one_product_tensor_gives_single_vector() {
        // g_pqrs = δ_pq δ_rs: pair matrix is a rank-1 projector, so the
        // factorization returns exactly one Cholesky vector, the identity.
        let n = 3usize;
        let mut g = vec![0.0; n.pow(4)];
        for p in 0..n {
            for r in 0..n {
                g[((p * n + p) * n + r) * n + r] = 1.0;
            }
        }
        let ints = IntegralSet::new(n, 0.0, RMat::zeros(n, n), g, 1, 1).unwrap();
        let ham = cholesky_factorize(&ints, 1e-10).unwrap();
        assert_eq!(ham.l_vectors.len(), 1);
        let l = &ham.l_vectors[0];
        for p in 0..n {
            for q in 0..n {
                let expect = if p == q { 1.0 } else { 0.0 };
                assert!((l[(p, q)].abs() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn h2_reconstruction_residual() {
        let ints = load_fcidump(&h2_fixture_path()).unwrap();
        let ham = cholesky_factorize(&ints, 1e-8).unwrap();
        assert!(ham.reconstruction_residual(&ints) < 1e-7);
    }

    #[test]
    fn exact_rank_recovery() {
        let ints = synthetic_ints(4, 3, 2, 2, 7);
        let ham = cholesky_factorize(&ints, 1e-12).unwrap();
        assert_eq!(ham.l_vectors.len(), 3);
        assert!(ham.reconstruction_residual(&ints) < 1e-11);
    }

    #[test]
    fn reconstruction_residual_scales_with_tol() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let n = 4usize;
        // Full-rank random PSD tensor with 8-fold orbital symmetry: build
        // it from a complete basis of random symmetric L matrices.
        let mut g = vec![0.0f64; n.pow(4)];
        for _ in 0..n * (n + 1) / 2 + 4 {
            let m = RMat::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
            let l = (&m + m.transpose()) * 0.5;
            for p in 0..n {
                for q in 0..n {
                    for r in 0..n {
                        for s in 0..n {
                            g[((p * n + q) * n + r) * n + s] += l[(p, q)] * l[(r, s)];
                        }
                    }
                }
            }
        }
        let ints = IntegralSet::new(n, 0.0, RMat::zeros(n, n), g, 2, 2).unwrap();
        for tol in [1e-4, 1e-8] {
            let ham = cholesky_factorize(&ints, tol).unwrap();
            assert!(
                ham.reconstruction_residual(&ints) <= 10.0 * tol,
                "tol {tol:.0e}"
            );
        }
    }

    #[test]
    fn identity_embedding_is_bit_exact() {
        let ints = synthetic_ints(3, 4, 2, 1, 9);
        let emb = build_embedded(&ints, &[], &[0, 1, 2], 1e-8).unwrap();
        assert_eq!(emb.active_ints.e_core, ints.e_core);
        assert_eq!(emb.active_ints.t, ints.t);
        for p in 0..3 {
            for q in 0..3 {
                for r in 0..3 {
                    for s in 0..3 {
                        assert_eq!(emb.active_ints.g(p, q, r, s), ints.g(p, q, r, s));
                    }
                }
            }
        }
        assert!(emb.virtuals.is_empty());
    }

    #[test]
    fn overlapping_partition_rejected() {
        let ints = synthetic_ints(3, 2, 1, 1, 10);
        assert!(matches!(
            build_embedded(&ints, &[0], &[0, 1], 1e-8),
            Err(IntegralError::Partition(_))
        ));
    }

    #[test]
    fn cholesky_cache_round_trip() {
        let ints = synthetic_ints(3, 4, 2, 1, 11);
        let ham = cholesky_factorize(&ints, 1e-9).unwrap();
        let dir = std::env::temp_dir().join("mgafqmc_chol_cache");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ham.bin");
        ham.save(&path).unwrap();
        let back = CholeskyHamiltonian::load(&path).unwrap();
        assert_eq!(back.content_hash(), ham.content_hash());
        assert_eq!(back.n_orb, ham.n_orb);
        assert_eq!(back.l_vectors.len(), ham.l_vectors.len());
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = std::env::temp_dir().join("mgafqmc_malformed");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.fcidump");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "&FCIDUMP NORB=2,NELEC=2,MS2=0,").unwrap();
        writeln!(f, "/").unwrap();
        writeln!(f, "0.5 1 1 two 2").unwrap();
        drop(f);
        match load_fcidump(&path) {
            Err(IntegralError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn interleaved_spin_lift() {
        let m = RMat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]);
        let so = interleave_spin(&m);
        assert_eq!(so[(0, 0)], 1.0);
        assert_eq!(so[(1, 1)], 1.0);
        assert_eq!(so[(0, 2)], 2.0);
        assert_eq!(so[(1, 3)], 2.0);
        assert_eq!(so[(0, 1)], 0.0);
        assert_eq!(so[(2, 3)], 0.0);
    }
}
