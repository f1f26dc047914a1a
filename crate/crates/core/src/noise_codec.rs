//! The quantized noise space: a basis of Gaussian vectors regenerated from
//! shared seeds, least-squares projection of a terminal latent onto it,
//! top-k sparsification, and bit-exact reconstruction.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian_stream, norm, Cholesky, SymMatrix};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64 over `dim` (u64, little-endian) followed by each seed.
pub fn basis_fingerprint(dim: usize, seeds: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut feed = |bytes: [u8; 8]| {
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    feed((dim as u64).to_le_bytes());
    for s in seeds {
        feed(s.to_le_bytes());
    }
    h
}

struct GramCache {
    gram: SymMatrix,
    factor: std::result::Result<Cholesky, ()>,
}

/// `n` seeds and the `n x dim` Gaussian vectors they expand to.
pub struct SeedBasis {
    seeds: Vec<u64>,
    dim: usize,
    vectors: Vec<f32>,
    fingerprint: u64,
    gram: OnceLock<GramCache>,
}

impl std::fmt::Debug for SeedBasis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SeedBasis")
            .field("n", &self.seeds.len())
            .field("dim", &self.dim)
            .field("fingerprint", &format_args!("{:#018x}", self.fingerprint))
            .finish()
    }
}

impl Clone for SeedBasis {
    fn clone(&self) -> Self {
        Self {
            seeds: self.seeds.clone(),
            dim: self.dim,
            vectors: self.vectors.clone(),
            fingerprint: self.fingerprint,
            gram: OnceLock::new(),
        }
    }
}

impl SeedBasis {
    /// Expands each seed with [`gaussian_stream`]. Seeds must be distinct.
    pub fn build(seeds: &[u64], dim: usize) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::InvalidArgument("basis needs at least one seed".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("basis dimension must be positive".into()));
        }
        let mut sorted = seeds.to_vec();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!("duplicate basis seed {}", w[0])));
        }
        if dim < seeds.len() {
            log::warn!(
                "basis has {} vectors in dimension {dim}; the Gram matrix will be singular",
                seeds.len()
            );
        }
        let mut vectors = Vec::with_capacity(seeds.len() * dim);
        for &s in seeds {
            vectors.extend(gaussian_stream(s, dim)?);
        }
        Ok(Self {
            seeds: seeds.to_vec(),
            dim,
            vectors,
            fingerprint: basis_fingerprint(dim, seeds),
            gram: OnceLock::new(),
        })
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn vector_f64(&self, i: usize) -> Vec<f64> {
        self.vector(i).iter().map(|&v| v as f64).collect()
    }

    fn gram_cache(&self) -> &GramCache {
        self.gram.get_or_init(|| {
            let rows: Vec<Vec<f64>> = (0..self.len()).map(|i| self.vector_f64(i)).collect();
            let gram = SymMatrix::from_fn(self.len(), |i, j| dot(&rows[i], &rows[j]));
            let factor = Cholesky::factor(&gram).map_err(|_| ());
            GramCache { gram, factor }
        })
    }

    /// `G_ij = <N_i, N_j>`, computed once and cached.
    pub fn gram(&self) -> &SymMatrix {
        &self.gram_cache().gram
    }

    /// `b_i = <N_i, x>`.
    pub fn correlations(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        Ok((0..self.len())
            .map(|i| dot(&self.vector_f64(i), &xf))
            .collect())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::InvalidArgument(format!(
                "latent has dimension {len}, basis dimension is {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Sparse weights over a basis of size `n`; indices strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    n: usize,
    entries: Vec<(u32, f32)>,
}

impl WeightVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    /// Keeps the nonzero entries of a dense vector.
    pub fn from_dense(values: &[f32]) -> Self {
        Self {
            n: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, &v)| (i as u32, v))
                .collect(),
        }
    }

    /// Validates index bounds and strict ordering.
    pub fn from_entries(n: usize, entries: Vec<(u32, f32)>) -> Result<Self> {
        for pair in entries.windows(2) {
            if pair[0].0 >= pair[1].0 {
                return Err(Error::InvalidArgument(format!(
                    "weight indices must be strictly increasing ({} then {})",
                    pair[0].0, pair[1].0
                )));
            }
        }
        if let Some(&(last, _)) = entries.last() {
            if last as usize >= n {
                return Err(Error::InvalidArgument(format!(
                    "weight index {last} out of range for basis size {n}"
                )));
            }
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    /// Number of stored (nonzero) entries.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.n];
        for &(i, v) in &self.entries {
            out[i as usize] = v;
        }
        out
    }
}

/// Closed-form least squares via the normal equations.
pub fn project_exact(x: &[f32], basis: &SeedBasis) -> Result<WeightVector> {
    let b = basis.correlations(x)?;
    let factor = basis
        .gram_cache()
        .factor
        .as_ref()
        .map_err(|_| Error::DegenerateBasis)?;
    let w = factor.solve(&b);
    Ok(WeightVector::from_dense(
        &w.iter().map(|&v| v as f32).collect::<Vec<_>>(),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GdConfig {
    /// Step size; `None` uses `0.5 / lambda_max(G)` from power iteration.
    pub lr: Option<f64>,
    /// Stop once `||G w - b|| <= tol * ||b||`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self {
            lr: None,
            tol: 1e-7,
            max_iters: 5000,
        }
    }
}

const POWER_ITERATIONS: usize = 20;

/// Largest eigenvalue of an SPD matrix by power iteration from the all-ones
/// vector (Rayleigh quotient of the last iterate).
pub fn power_lambda_max(g: &SymMatrix) -> f64 {
    let mut v = vec![1.0 / (g.dim() as f64).sqrt(); g.dim()];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let gv = g.mul_vec(&v);
        lambda = dot(&v, &gv);
        let n = norm(&gv);
        if n == 0.0 {
            return 0.0;
        }
        v = gv.into_iter().map(|x| x / n).collect();
    }
    lambda.max(dot(&v, &g.mul_vec(&v)))
}

/// Gradient descent on `||x - sum_i w_i N_i||^2` from `w = 0`.
pub fn project_gd(x: &[f32], basis: &SeedBasis, cfg: &GdConfig) -> Result<WeightVector> {
    let b = basis.correlations(x)?;
    let g = basis.gram();
    let lr = match cfg.lr {
        Some(lr) => lr,
        None => {
            let lambda = power_lambda_max(g);
            if lambda <= 0.0 {
                return Err(Error::DegenerateBasis);
            }
            0.5 / lambda
        }
    };
    let b_norm = norm(&b);
    let target = cfg.tol * b_norm;
    let mut w = vec![0.0f64; basis.len()];
    let mut iterations = 0;
    loop {
        let grad: Vec<f64> = g.mul_vec(&w).iter().zip(&b).map(|(gw, bi)| gw - bi).collect();
        let r = norm(&grad);
        if r <= target {
            break;
        }
        if iterations == cfg.max_iters || !r.is_finite() {
            return Err(Error::Convergence {
                iterations,
                relative_residual: r / b_norm,
                last: Box::new(to_weights(&w)),
            });
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= lr * 2.0 * gi;
        }
        iterations += 1;
    }
    Ok(to_weights(&w))
}

fn to_weights(w: &[f64]) -> WeightVector {
    WeightVector::from_dense(&w.iter().map(|&v| v as f32).collect::<Vec<_>>())
}

/// Keeps the `k` entries of largest magnitude; ties go to the lower index.
pub fn truncate_topk(w: &WeightVector, k: usize) -> Result<WeightVector> {
    if k == 0 || k > w.n {
        return Err(Error::InvalidArgument(format!(
            "k must be in [1, {}], got {k}",
            w.n
        )));
    }
    let mut order: Vec<(u32, f32)> = w.entries.iter().copied().filter(|e| e.1 != 0.0).collect();
    order.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    order.truncate(k);
    order.sort_by_key(|e| e.0);
    Ok(WeightVector {
        n: w.n,
        entries: order,
    })
}

/// `sum_i w_i N_i`, accumulated in f64 in ascending index order and rounded
/// once to f32 per element. Identical inputs give identical bits everywhere.
pub fn reconstruct(w: &WeightVector, basis: &SeedBasis) -> Result<Vec<f32>> {
    if w.n != basis.len() {
        return Err(Error::InvalidArgument(format!(
            "weight vector has n = {}, basis has {} vectors",
            w.n,
            basis.len()
        )));
    }
    let mut acc = vec![0.0f64; basis.dim()];
    for &(i, v) in &w.entries {
        let v = v as f64;
        for (a, &nd) in acc.iter_mut().zip(basis.vector(i as usize)) {
            *a += v * nd as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Like [`reconstruct`], but first checks that `fingerprint` names `basis`.
pub fn reconstruct_checked(
    w: &WeightVector,
    fingerprint: u64,
    basis: &SeedBasis,
) -> Result<Vec<f32>> {
    if fingerprint != basis.fingerprint() {
        return Err(Error::BasisMismatch {
            message: fingerprint,
            local: basis.fingerprint(),
        });
    }
    reconstruct(w, basis)
}

/// `||x - x_hat||` in f64.
pub fn residual_norm(x: &[f32], x_hat: &[f32]) -> f64 {
    x.iter()
        .zip(x_hat)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}
