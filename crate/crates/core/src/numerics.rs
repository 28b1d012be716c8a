//! Deterministic randomness and the dense linear algebra behind the sensing
//! operators.
//!
//! [`RngStream`] is ChaCha20 keyed by SHA-256 digests: the root key is
//! `SHA-256("scvamp-rng-v1" || seed_le)` and a labeled child is
//! `SHA-256("scvamp-split" || parent_key || label)`. Splitting never consumes
//! parent state, so sub-streams are order-insensitive. Uniform doubles take
//! the top 53 bits of a `u64`; Gaussians use the Marsaglia polar method and
//! cache the second variate of each accepted pair.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatMut, MatRef, Par};
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

use crate::error::{dimension, domain, Result};

#[derive(Clone, Debug)]
pub struct RngStream {
    key: [u8; 32],
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn seeded(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"scvamp-rng-v1");
        h.update(seed.to_le_bytes());
        Self::from_key(h.finalize().into())
    }

    fn from_key(key: [u8; 32]) -> Self {
        Self {
            key,
            inner: ChaCha20Rng::from_seed(key),
            spare_normal: None,
        }
    }

    /// Independent child stream identified by `label`.
    pub fn split(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"scvamp-split");
        h.update(self.key);
        h.update(label.as_bytes());
        Self::from_key(h.finalize().into())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * f);
                return u * f;
            }
        }
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.standard_normal();
        }
    }

    /// `rows x cols` matrix of i.i.d. `N(0, var)` entries, filled column by column.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, var: f64) -> Mat<f64> {
        let sd = var.sqrt();
        let mut m = Mat::zeros(rows, cols);
        for j in 0..cols {
            for x in m.col_as_slice_mut(j) {
                *x = sd * self.standard_normal();
            }
        }
        m
    }
}

/// `n` i.i.d. draws from `N(mean, var)`.
pub fn sample_gaussian_vector(rng: &mut RngStream, n: usize, mean: f64, var: f64) -> Result<Vec<f64>> {
    if !(var >= 0.0) {
        return Err(domain(format!("variance must be non-negative, got {var}")));
    }
    if var == 0.0 {
        return Ok(vec![mean; n]);
    }
    let sd = var.sqrt();
    Ok((0..n).map(|_| mean + sd * rng.standard_normal()).collect())
}

/// Pairwise (cascade) summation. The reduction tree depends only on the
/// length of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let prods: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&prods)
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `dst = lhs * rhs` on the calling thread.
pub fn matmul_into(dst: MatMut<'_, f64>, lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>) {
    matmul(dst, Accum::Replace, lhs, rhs, 1.0, Par::Seq);
    clear_upper_vector_state();
}

/// `lhs * rhs`, single-threaded so results do not depend on the worker count.
pub fn mul(lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(lhs.nrows(), rhs.ncols());
    matmul_into(out.as_mut(), lhs, rhs);
    out
}

/// The AVX matmul kernels can return with dirty upper vector registers,
/// after which SSE-encoded libm calls (`exp`, `ln`) run tens of times slower.
#[inline]
pub(crate) fn clear_upper_vector_state() {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: `vzeroupper` only zeroes the upper halves of the vector
            // registers, which hold no live values between Rust statements.
            unsafe { std::arch::asm!("vzeroupper", options(nomem, nostack, preserves_flags)) };
        }
    }
}

/// Dense `n x n` orthogonal matrix.
#[derive(Clone, Debug)]
pub struct OrthogonalMatrix {
    q: Mat<f64>,
}

impl OrthogonalMatrix {
    pub fn identity(n: usize) -> Self {
        Self { q: Mat::identity(n, n) }
    }

    /// Wraps `q` without checking orthogonality.
    pub fn from_mat_unchecked(q: Mat<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() {
            return Err(dimension(format!(
                "orthogonal matrix must be square, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        Ok(Self { q })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn as_ref(&self) -> MatRef<'_, f64> {
        self.q.as_ref()
    }

    pub fn into_mat(self) -> Mat<f64> {
        self.q
    }

    /// Frobenius norm of `QᵀQ - I`.
    pub fn orthogonality_defect(&self) -> f64 {
        gram_defect(self.q.as_ref())
    }
}

pub(crate) fn gram_defect(q: MatRef<'_, f64>) -> f64 {
    let g = mul(q.transpose(), q);
    let mut acc = 0.0;
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            let e = g[(i, j)] - if i == j { 1.0 } else { 0.0 };
            acc += e * e;
        }
    }
    acc.sqrt()
}

/// Haar-distributed orthogonal matrix: QR of an i.i.d. Gaussian matrix with
/// the columns of `Q` flipped so that `diag(R) > 0`.
pub fn random_orthogonal(rng: &mut RngStream, n: usize) -> Result<OrthogonalMatrix> {
    if n == 0 {
        return Err(domain("orthogonal dimension must be at least 1"));
    }
    let g = rng.gaussian_matrix(n, n, 1.0);
    let qr = g.qr();
    let r = qr.R();
    let mut q = qr.compute_Q();
    clear_upper_vector_state();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for x in q.col_as_slice_mut(j) {
                *x = -*x;
            }
        }
    }
    Ok(OrthogonalMatrix { q })
}

/// `A = U diag(d) Vᵀ` kept in factored form.
#[derive(Clone, Debug)]
pub struct SensingMatrix {
    u: Mat<f64>,
    d: Vec<f64>,
    v: Mat<f64>,
}

impl SensingMatrix {
    pub fn from_factors(u: OrthogonalMatrix, d: Vec<f64>, v: OrthogonalMatrix) -> Result<Self> {
        let (m, n) = (u.dim(), v.dim());
        if d.len() != m.min(n) {
            return Err(dimension(format!(
                "expected {} singular values for a {m}x{n} matrix, got {}",
                m.min(n),
                d.len()
            )));
        }
        if let Some(bad) = d.iter().find(|s| !(**s >= 0.0)) {
            return Err(domain(format!("singular values must be non-negative, got {bad}")));
        }
        Ok(Self { u: u.q, d, v: v.q })
    }

    /// The `1 x 1` matrix `[s]`.
    pub fn scalar(s: f64) -> Result<Self> {
        Self::from_factors(OrthogonalMatrix::identity(1), vec![s], OrthogonalMatrix::identity(1))
    }

    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    pub fn cols(&self) -> usize {
        self.v.nrows()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.d
    }

    pub fn left(&self) -> MatRef<'_, f64> {
        self.u.as_ref()
    }

    pub fn right(&self) -> MatRef<'_, f64> {
        self.v.as_ref()
    }

    /// `A X` for a batch `X` with one instance per column.
    pub fn apply_batch(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        let mut t = mul(self.v.transpose(), x);
        let k = self.d.len();
        let mut scaled = Mat::zeros(self.rows(), x.ncols());
        for j in 0..x.ncols() {
            let src = t.col_as_slice_mut(j);
            let dst = scaled.col_as_slice_mut(j);
            for i in 0..k {
                dst[i] = self.d[i] * src[i];
            }
        }
        mul(self.u.as_ref(), scaled.as_ref())
    }

    /// `Aᵀ Y` for a batch `Y` with one instance per column.
    pub fn apply_transpose_batch(&self, y: MatRef<'_, f64>) -> Mat<f64> {
        let mut t = mul(self.u.transpose(), y);
        let k = self.d.len();
        let mut scaled = Mat::zeros(self.cols(), y.ncols());
        for j in 0..y.ncols() {
            let src = t.col_as_slice_mut(j);
            let dst = scaled.col_as_slice_mut(j);
            for i in 0..k {
                dst[i] = self.d[i] * src[i];
            }
        }
        mul(self.v.as_ref(), scaled.as_ref())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols() {
            return Err(dimension(format!(
                "apply: expected length {}, got {}",
                self.cols(),
                x.len()
            )));
        }
        let out = self.apply_batch(MatRef::from_column_major_slice(x, x.len(), 1));
        Ok(out.col_as_slice(0).to_vec())
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows() {
            return Err(dimension(format!(
                "apply_transpose: expected length {}, got {}",
                self.rows(),
                y.len()
            )));
        }
        let out = self.apply_transpose_batch(MatRef::from_column_major_slice(y, y.len(), 1));
        Ok(out.col_as_slice(0).to_vec())
    }

    /// Materializes `A`. Only meant for small matrices and tests.
    pub fn dense(&self) -> Mat<f64> {
        let k = self.d.len();
        let mut us = Mat::zeros(self.rows(), k);
        for j in 0..k {
            for i in 0..self.rows() {
                us[(i, j)] = self.u[(i, j)] * self.d[j];
            }
        }
        mul(us.as_ref(), self.v.as_ref().subcols(0, k).transpose())
    }

    /// Eigenvalues of `AᵀA` (length `n`, zero-padded).
    pub fn gram_eigenvalues(&self) -> Vec<f64> {
        let mut e: Vec<f64> = self.d.iter().map(|s| s * s).collect();
        e.resize(self.cols(), 0.0);
        e
    }

    /// `A Ξ`, represented by replacing `V` with `Ξᵀ V`.
    pub fn modulate_with(&self, xi: &OrthogonalMatrix) -> Result<Self> {
        if xi.dim() != self.cols() {
            return Err(dimension(format!(
                "modulation matrix has dimension {}, expected {}",
                xi.dim(),
                self.cols()
            )));
        }
        Ok(Self {
            u: self.u.clone(),
            d: self.d.clone(),
            v: mul(xi.as_ref().transpose(), self.v.as_ref()),
        })
    }
}

/// Right-rotationally invariant matrix `U diag(d) Vᵀ` with independent Haar
/// `U` (drawn first) and `V`.
pub fn build_rri_matrix(rng: &mut RngStream, m: usize, n: usize, singular_values: &[f64]) -> Result<SensingMatrix> {
    if m == 0 || n == 0 {
        return Err(domain("matrix dimensions must be positive"));
    }
    if singular_values.len() != m.min(n) {
        return Err(dimension(format!(
            "expected {} singular values for a {m}x{n} matrix, got {}",
            m.min(n),
            singular_values.len()
        )));
    }
    let u = random_orthogonal(rng, m)?;
    let v = random_orthogonal(rng, n)?;
    SensingMatrix::from_factors(u, singular_values.to_vec(), v)
}

/// `A Ξ` with a fresh Haar `Ξ`. Singular values are unchanged.
pub fn random_modulate(a: &SensingMatrix, rng: &mut RngStream) -> Result<SensingMatrix> {
    let xi = random_orthogonal(rng, a.cols())?;
    a.modulate_with(&xi)
}
