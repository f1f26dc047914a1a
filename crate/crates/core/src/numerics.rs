//! Deterministic random streams and the small dense linear algebra used by
//! the codec and the metrics.
//!
//! Everything here is a pure function of its inputs. The Gaussian stream in
//! particular is part of the wire contract: both endpoints regenerate basis
//! vectors from seeds with it, so its draw order and rounding are fixed.

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 counter state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngState(pub u64);

/// One SplitMix64 step: returns the output word and the advanced state.
pub fn splitmix64_next(state: RngState) -> (u64, RngState) {
    let next = state.0.wrapping_add(GOLDEN_GAMMA);
    let mut z = next;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31), RngState(next))
}

/// Stateful wrapper over [`splitmix64_next`] for callers that draw many
/// values in sequence.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: RngState,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            state: RngState(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let (v, next) = splitmix64_next(self.state);
        self.state = next;
        v
    }

    /// Uniform in (0, 1], 53 bits.
    pub fn next_unit(&mut self) -> f64 {
        unit_from_raw(self.next_u64())
    }

    /// Uniform integer in `[0, bound)`. `bound` must be positive.
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        // Multiply-shift; bias is below 2^-64 * bound and irrelevant here.
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Uniform real in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (1.0 - self.next_unit())
    }
}

#[inline]
fn unit_from_raw(raw: u64) -> f64 {
    ((raw >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derives an independent stream seed from a base seed and a salt.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let (s, _) = splitmix64_next(RngState(salt));
    splitmix64_next(RngState(base ^ s)).0
}

/// Standard normal samples from a SplitMix64 stream via Box-Muller.
///
/// Each pair of raw words yields `(z0, z1)`, appended in that order; an odd
/// `count` discards the last `z1`. Math is done in f64 and each sample is
/// rounded once to f32, so a shorter stream is always a prefix of a longer
/// one for the same seed.
pub fn gaussian_stream(seed: u64, count: usize) -> Result<Vec<f32>> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "gaussian_stream count must be at least 1".into(),
        ));
    }
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(count + 1);
    while out.len() < count {
        let u1 = rng.next_unit();
        let u2 = rng.next_unit();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        out.push((radius * angle.cos()) as f32);
        out.push((radius * angle.sin()) as f32);
    }
    out.truncate(count);
    Ok(out)
}

/// Dense symmetric matrix, stored in full and mirrored on every write.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "SymMatrix dimension must be positive");
        Self {
            dim,
            entries: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Builds from the lower triangle of `f(i, j)` (`j <= i`).
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..=i {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Builds from row-major data; fails unless the data is exactly symmetric.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::InvalidArgument(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                data.len()
            )));
        }
        for i in 0..dim {
            for j in 0..i {
                if data[i * dim + j] != data[j * dim + i] {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { dim, entries: data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.entries[i * self.dim + j] = value;
        self.entries[j * self.dim + i] = value;
    }

    pub fn as_row_major(&self) -> &[f64] {
        &self.entries
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        self.entries
            .chunks_exact(self.dim)
            .map(|row| dot(row, x))
            .collect()
    }

    /// Adds `value` to every diagonal entry.
    pub fn add_ridge(&mut self, value: f64) {
        for i in 0..self.dim {
            self.entries[i * self.dim + i] += value;
        }
    }

    /// `A * B` for symmetric `A` and `B`, returned as a plain row-major
    /// product (generally not symmetric).
    pub fn matmul(&self, other: &SymMatrix) -> Vec<f64> {
        matmul_square(&self.entries, &other.entries, self.dim)
    }
}

/// Row-major square product.
pub fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let row = &b[k * n..(k + 1) * n];
            for (o, &bkj) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// Dot product with four independent accumulators so the loop vectorizes.
/// The reduction order is fixed, so results are reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &SymMatrix) -> Result<Self> {
        let n = a.dim();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s = a.get(i, j) - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::SingularMatrix { row: i, pivot: s });
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Self { dim: n, lower: l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        assert_eq!(b.len(), n);
        let l = &self.lower;
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = (b[i] - dot(&l[i * n..i * n + i], &y[..i])) / l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k];
            }
            x[i] = s / l[i * n + i];
        }
        x
    }
}

/// Solves `G w = b` for symmetric positive definite `G` by Cholesky.
pub fn solve_spd(g: &SymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != g.dim() {
        return Err(Error::InvalidArgument(format!(
            "right-hand side has length {}, matrix is {}x{}",
            b.len(),
            g.dim(),
            g.dim()
        )));
    }
    Ok(Cholesky::factor(g)?.solve(b))
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Row-major `dim x dim`; column `j` is the eigenvector for `values[j]`.
    pub vectors: Vec<f64>,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V diag(f(lambda)) V^T`.
    pub fn reassemble(&self, mut f: impl FnMut(f64) -> f64) -> SymMatrix {
        let n = self.dim();
        let mapped: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        SymMatrix::from_fn(n, |i, j| {
            (0..n)
                .map(|k| self.vectors[i * n + k] * mapped[k] * self.vectors[j * n + k])
                .sum()
        })
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver.
pub fn symmetric_eig(a: &SymMatrix) -> SymEigen {
    let n = a.dim();
    let mut m = a.as_row_major().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let threshold = 1e-12 * a.frobenius_norm();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut max_off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                max_off = max_off.max(m[p * n + q].abs());
            }
        }
        if max_off <= threshold {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;

                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    SymEigen {
        values: (0..n).map(|i| m[i * n + i]).collect(),
        vectors: v,
    }
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues within
/// `1e-10 * ||A||_F` below zero are clamped; anything lower is rejected.
pub fn sqrtm_psd(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = symmetric_eig(a);
    let floor = -1e-10 * a.frobenius_norm();
    if let Some(&bad) = eig.values.iter().find(|&&v| v < floor) {
        return Err(Error::NotPsd { eigenvalue: bad });
    }
    Ok(eig.reassemble(|v| v.max(0.0).sqrt()))
}
