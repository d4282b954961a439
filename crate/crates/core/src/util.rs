//! Small shared helpers: binomials, hashing, byte I/O, seed derivation,
//! and a dense matrix exponential.

use crate::CMat;
use num_complex::Complex64;

/// Binomial coefficient as f64. Exact for the desk-scale arguments used here.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

/// FNV-1a 64-bit hash, used for content fingerprints in binary headers.
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn update_f64(&mut self, x: f64) {
        self.update(&x.to_le_bytes());
    }

    pub fn update_u64(&mut self, x: u64) {
        self.update(&x.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

/// Derives an independent 64-bit stream seed from a master seed and an index
/// (splitmix64 over the pair). Used to give every shadow sample and every
/// walker its own reproducible rng stream.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mean and standard error of |per-sample| scatter for a complex-valued
/// sample mean: accumulates Σx and Σ|x|² in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAccumulator {
    pub sum: Complex64,
    pub sum_sq: f64,
    pub count: usize,
}

impl MeanAccumulator {
    pub fn push(&mut self, x: Complex64) {
        self.sum += x;
        self.sum_sq += x.norm_sqr();
        self.count += 1;
    }

    pub fn merge(&mut self, other: &MeanAccumulator) {
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self.count += other.count;
    }

    pub fn mean(&self) -> Complex64 {
        self.sum / self.count as f64
    }

    /// Per-sample variance E|x - x̄|² with the n-1 correction.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        ((self.sum_sq - self.sum.norm_sqr() / n) / (n - 1.0)).max(0.0)
    }

    /// Standard error of the mean.
    pub fn std_err(&self) -> f64 {
        if self.count == 0 {
            return f64::INFINITY;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Dense matrix exponential by Padé(13) scaling and squaring.
pub fn expm(a: &CMat) -> CMat {
    let n = a.nrows();
    debug_assert_eq!(a.ncols(), n);
    // 1-norm (max column sum)
    let mut norm = 0.0f64;
    for j in 0..n {
        let col: f64 = (0..n).map(|i| a[(i, j)].norm()).sum();
        norm = norm.max(col);
    }
    let theta13 = 5.371_920_351_148_152;
    let s = if norm > theta13 {
        (norm / theta13).log2().ceil() as i32
    } else {
        0
    };
    let scale = Complex64::new(2f64.powi(-s), 0.0);
    let a1 = a * scale;
    let b: [f64; 14] = [
        64_764_752_532_480_000.0,
        32_382_376_266_240_000.0,
        7_771_770_303_897_600.0,
        1_187_353_796_428_800.0,
        129_060_195_264_000.0,
        10_559_470_521_600.0,
        670_442_572_800.0,
        33_522_128_640.0,
        1_323_241_920.0,
        40_840_800.0,
        960_960.0,
        16_380.0,
        182.0,
        1.0,
    ];
    let id = CMat::identity(n, n);
    let a2 = &a1 * &a1;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let c = |x: f64| Complex64::new(x, 0.0);
    let u_inner = &a6 * c(b[13]) + &a4 * c(b[11]) + &a2 * c(b[9]);
    let u = &a1 * (&a6 * &u_inner + &a6 * c(b[7]) + &a4 * c(b[5]) + &a2 * c(b[3]) + &id * c(b[1]));
    let v_inner = &a6 * c(b[12]) + &a4 * c(b[10]) + &a2 * c(b[8]);
    let v = &a6 * &v_inner + &a6 * c(b[6]) + &a4 * c(b[4]) + &a2 * c(b[2]) + &id * c(b[0]);
    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut x = lhs
        .lu()
        .solve(&rhs)
        .expect("Padé denominator is nonsingular for scaled input");
    for _ in 0..s {
        x = &x * &x;
    }
    x
}

pub mod io {
    //! Little-endian primitive readers/writers for the binary formats.

    use std::io::{self, Read, Write};

    pub fn write_u16<W: Write>(w: &mut W, x: u16) -> io::Result<()> {
        w.write_all(&x.to_le_bytes())
    }

    pub fn write_u64<W: Write>(w: &mut W, x: u64) -> io::Result<()> {
        w.write_all(&x.to_le_bytes())
    }

    pub fn write_f64<W: Write>(w: &mut W, x: f64) -> io::Result<()> {
        w.write_all(&x.to_le_bytes())
    }

    pub fn read_u16<R: Read>(r: &mut R) -> io::Result<u16> {
        let mut b = [0u8; 2];
        r.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}
