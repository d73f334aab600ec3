//! Singular-value machinery: warm-started power iteration, a one-sided Jacobi
//! SVD for small matrices, and the spectrum summaries logged during training
//! (effective rank, condition number, stable rank).

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::seed;
use crate::tensor::{dot, norm2, Matrix, TensorError};

/// Largest `min(rows, cols)` accepted by [`full_svd_small`].
pub const SVD_MAX_DIM: usize = 512;

/// Singular values below `RANK_THRESHOLD · σ₁` count as zero.
pub const RANK_THRESHOLD: f64 = 1e-10;

/// `σ_min < CONDITION_THRESHOLD · σ_max` reports an infinite condition number.
pub const CONDITION_THRESHOLD: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 80;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("matrix {rows}x{cols} exceeds the small-SVD limit of {SVD_MAX_DIM}")]
    TooLarge { rows: usize, cols: usize },
    #[error("convolution weight needs 4 axes [d_out, d_in, k, k], got {0}")]
    WrongAxisCount(usize),
    #[error("convolution weight has {len} values, shape implies {expected}")]
    ConvDataLength { len: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ── Power iteration ────────────────────────────────────────────────

/// Left/right singular-vector estimates carried across optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerIterState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub last_sigma: f64,
    seed: u64,
    reseeds: u64,
}

impl PowerIterState {
    /// Unit vectors drawn uniformly from the spheres, keyed by `seed`.
    pub fn new(rows: usize, cols: usize, seed: u64) -> Self {
        let mut state = Self {
            u: Vec::new(),
            v: Vec::new(),
            last_sigma: 0.0,
            seed,
            reseeds: 0,
        };
        state.reinit(rows, cols);
        state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_compatible(&self, m: &Matrix) -> bool {
        self.u.len() == m.rows() && self.v.len() == m.cols()
    }

    fn reinit(&mut self, rows: usize, cols: usize) {
        let mut rng = seed::rng(self.seed, seed::tag::POWER, self.reseeds);
        self.reseeds += 1;
        self.u = random_unit(rows, &mut rng);
        self.v = random_unit(cols, &mut rng);
        self.last_sigma = 0.0;
    }
}

fn random_unit(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    loop {
        let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = norm2(&x);
        if norm > 1e-300 {
            x.iter_mut().for_each(|e| *e /= norm);
            return x;
        }
    }
}

/// Alternating power iteration for the top singular triple of `m`.
///
/// Each iteration sets `v ← normalize(mᵀu)`, `u ← normalize(m v)` and
/// `σ ← uᵀ m v`. Stops once `|Δσ| < tol · σ` (the previous σ is the state's
/// `last_sigma`, so a warm state can stop after one pass) or after
/// `max_iters`. A zero matrix returns `0` and leaves the state untouched.
pub fn power_iteration(m: &Matrix, state: &mut PowerIterState, max_iters: usize, tol: f64) -> f64 {
    if m.max_abs() == 0.0 {
        return 0.0;
    }
    if !state.is_compatible(m) {
        state.reinit(m.rows(), m.cols());
    }
    let mut prev = state.last_sigma;
    let mut sigma = prev;
    for _ in 0..max_iters.max(1) {
        let mut v = m.tmul_vec(&state.u);
        let mut nv = norm2(&v);
        if nv == 0.0 {
            // u is orthogonal to the range of m
            state.reinit(m.rows(), m.cols());
            v = m.tmul_vec(&state.u);
            nv = norm2(&v);
            if nv == 0.0 {
                return 0.0;
            }
        }
        v.iter_mut().for_each(|e| *e /= nv);
        let mut u = m.mul_vec(&v);
        let nu = norm2(&u);
        u.iter_mut().for_each(|e| *e /= nu);
        sigma = dot(&u, &m.mul_vec(&v));
        state.u = u;
        state.v = v;
        let converged = (sigma - prev).abs() < tol * sigma;
        prev = sigma;
        if converged {
            break;
        }
    }
    state.last_sigma = sigma;
    sigma
}

// ── Small dense SVD ────────────────────────────────────────────────

/// Thin SVD `m = U Σ Vᵀ` with `k = min(rows, cols)` singular values in
/// descending order. Columns of `u` paired with a zero singular value are zero.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let (rows, k) = self.u.shape();
        let cols = self.v.rows();
        Matrix::from_fn(rows, cols, |i, j| {
            (0..k)
                .map(|p| self.u.get(i, p) * self.sigma[p] * self.v.get(j, p))
                .sum()
        })
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn full_svd_small(m: &Matrix) -> Result<Svd, SpectralError> {
    let (rows, cols) = m.shape();
    if rows.min(cols) > SVD_MAX_DIM {
        return Err(SpectralError::TooLarge { rows, cols });
    }
    if rows < cols {
        let t = jacobi_tall(&m.transpose());
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    Ok(jacobi_tall(m))
}

fn jacobi_tall(m: &Matrix) -> Svd {
    let (rows, cols) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut norms: Vec<f64> = a.iter().map(|c| dot(c, c)).collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = norms[p];
                let beta = norms[q];
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
                norms[p] = dot(&a[p], &a[p]);
                norms[q] = dot(&a[q], &a[q]);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let sig: Vec<f64> = a.iter().map(|c| norm2(c)).collect();
    order.sort_by(|&i, &j| sig[j].total_cmp(&sig[i]));

    let mut u = Matrix::zeros(rows, cols);
    let mut vm = Matrix::zeros(cols, cols);
    let mut sigma = Vec::with_capacity(cols);
    for (k, &j) in order.iter().enumerate() {
        let s = sig[j];
        sigma.push(s);
        if s > 0.0 {
            for i in 0..rows {
                u.set(i, k, a[j][i] / s);
            }
        }
        for i in 0..cols {
            vm.set(i, k, v[j][i]);
        }
    }
    Svd { u, sigma, v: vm }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Descending singular values of `m`.
///
/// Strongly rectangular inputs are first reduced to the triangular factor of
/// a Householder QR, which has the same singular values.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>, SpectralError> {
    let (rows, cols) = m.shape();
    if rows.min(cols) > SVD_MAX_DIM {
        return Err(SpectralError::TooLarge { rows, cols });
    }
    if rows > 2 * cols {
        return Ok(jacobi_tall(&householder_r(m)).sigma);
    }
    if cols > 2 * rows {
        return Ok(jacobi_tall(&householder_r(&m.transpose())).sigma);
    }
    Ok(full_svd_small(m)?.sigma)
}

/// Upper-triangular `R` (cols × cols) of `m = QR`, for `rows ≥ cols`.
fn householder_r(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    for k in 0..cols {
        let x = &a[k][k..];
        let norm = norm2(x);
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = x.to_vec();
        v[0] -= alpha;
        let vv = dot(&v, &v);
        if vv == 0.0 {
            continue;
        }
        for col in a.iter_mut().skip(k) {
            let tail = &mut col[k..];
            let f = 2.0 * dot(&v, tail) / vv;
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= f * vi;
            }
        }
    }
    debug_assert!(rows >= cols);
    Matrix::from_fn(cols, cols, |i, j| if i <= j { a[j][i] } else { 0.0 })
}

// ── Spectrum summaries ─────────────────────────────────────────────

/// Exponentiated Shannon entropy of the normalized spectrum `σᵢ / Σσ`.
///
/// Lies in `[1, #nonzero]`; an all-zero spectrum gives `0`.
pub fn effective_rank(sigmas: &[f64]) -> f64 {
    let positive: Vec<f64> = sigmas.iter().copied().filter(|s| *s > 0.0).collect();
    if positive.is_empty() {
        return 0.0;
    }
    let first = positive[0];
    if positive.iter().all(|s| *s == first) {
        // uniform spectra are exact
        return positive.len() as f64;
    }
    let total: f64 = positive.iter().sum();
    let entropy: f64 = positive
        .iter()
        .map(|s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

/// `σ_max / σ_min`, or `f64::INFINITY` when `σ_min < 1e-12 · σ_max`.
pub fn condition_number(sigma_max: f64, sigma_min: f64) -> f64 {
    if sigma_max == 0.0 || sigma_min < CONDITION_THRESHOLD * sigma_max {
        f64::INFINITY
    } else {
        sigma_max / sigma_min
    }
}

/// Count of singular values above `1e-10 · σ₁`.
pub fn numeric_rank(sigmas: &[f64]) -> usize {
    let top = sigmas.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sigmas.iter().filter(|s| **s > RANK_THRESHOLD * top).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralSummary {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub erank: f64,
    pub condition: f64,
    pub stable_rank: f64,
    pub frobenius: f64,
    pub rank: usize,
}

impl SpectralSummary {
    pub fn of(m: &Matrix) -> Result<Self, SpectralError> {
        let sigma = singular_values(m)?;
        Ok(Self::from_parts(&sigma, m.frobenius_norm()))
    }

    pub fn from_parts(sigma: &[f64], frobenius: f64) -> Self {
        let sigma_max = sigma.first().copied().unwrap_or(0.0);
        let sigma_min = sigma.last().copied().unwrap_or(0.0);
        let stable_rank = if sigma_max > 0.0 {
            frobenius * frobenius / (sigma_max * sigma_max)
        } else {
            0.0
        };
        Self {
            sigma_max,
            sigma_min,
            erank: effective_rank(sigma),
            condition: condition_number(sigma_max, sigma_min),
            stable_rank,
            frobenius,
            rank: numeric_rank(sigma),
        }
    }
}

// ── Convolution reshape ────────────────────────────────────────────

/// Flattens a `[d_out, d_in, kh, kw]` convolution kernel into a
/// `d_out × (d_in·kh·kw)` matrix, one row per output filter.
pub fn conv_reshape_bound(shape: &[usize], data: &[f64]) -> Result<Matrix, SpectralError> {
    let &[d_out, d_in, kh, kw] = shape else {
        return Err(SpectralError::WrongAxisCount(shape.len()));
    };
    let expected = d_out * d_in * kh * kw;
    if data.len() != expected {
        return Err(SpectralError::ConvDataLength {
            len: data.len(),
            expected,
        });
    }
    Ok(Matrix::new(d_out, d_in * kh * kw, data.to_vec())?)
}

/// Inverse of [`conv_reshape_bound`]: returns the `[d_out, d_in, kh, kw]` shape and values.
pub fn conv_unreshape(
    m: &Matrix,
    d_in: usize,
    kh: usize,
    kw: usize,
) -> Result<([usize; 4], Vec<f64>), SpectralError> {
    let expected = d_in * kh * kw;
    if m.cols() != expected {
        return Err(SpectralError::ConvDataLength {
            len: m.cols(),
            expected,
        });
    }
    Ok(([m.rows(), d_in, kh, kw], m.as_slice().to_vec()))
}

/// `√(kh·kw) · σ₁(reshaped)`: an operator-norm bound for a stride-1
/// convolution, where each input pixel is touched by `kh·kw` kernel taps.
pub fn conv_operator_norm_bound(shape: &[usize], data: &[f64]) -> Result<f64, SpectralError> {
    let m = conv_reshape_bound(shape, data)?;
    let sigma = singular_values(&m)?;
    Ok(((shape[2] * shape[3]) as f64).sqrt() * sigma[0])
}
