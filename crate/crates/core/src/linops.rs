//! Dense linear-algebra utilities shared by every other module.
//!
//! Rank decisions use one rule everywhere: a singular value `s` counts as
//! nonzero when `s > RANK_REL_TOL * s_max * max(rows, cols)`.

use alloc::vec::Vec;

use nalgebra::{linalg::Schur, Complex, DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative singular-value cutoff used by [`pinv`], [`proj_range`] and [`rank`].
pub const RANK_REL_TOL: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 80;
const SCHUR_MAX_ITER: usize = 10_000;

pub fn ensure_finite(m: &Matrix, context: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

pub fn ensure_finite_vec(v: &Vector, context: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

pub fn ensure_square(m: &Matrix, context: &'static str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::NotSquare {
            context,
            rows: m.nrows(),
            cols: m.ncols(),
        })
    }
}

pub(crate) fn ensure_len(v: &Vector, expected: usize, context: &'static str) -> Result<()> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found: v.len(),
        })
    }
}

/// Thin SVD `m = u · diag(s) · v_t` with `s` in decreasing order.
///
/// Columns of `u` paired with an exactly zero singular value are zero.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vector,
    pub v_t: Matrix,
}

/// One-sided Jacobi SVD. Unlike bidiagonalization it stays accurate on
/// exactly rank-deficient inputs, which this crate produces constantly.
pub fn svd(m: &Matrix) -> Result<Svd> {
    ensure_finite(m, "svd input")?;
    if m.nrows() < m.ncols() {
        let t = jacobi_svd(&m.transpose())?;
        return Ok(Svd {
            u: t.v_t.transpose(),
            singular_values: t.singular_values,
            v_t: t.u.transpose(),
        });
    }
    jacobi_svd(m)
}

fn rotate_columns(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let (a, b) = (m[(r, i)], m[(r, j)]);
        m[(r, i)] = c * a - s * b;
        m[(r, j)] = s * a + c * b;
    }
}

/// Tall input only: orthogonalizes the columns of `m` by plane rotations.
fn jacobi_svd(m: &Matrix) -> Result<Svd> {
    let (rows, cols) = m.shape();
    let mut w = m.clone();
    let mut v = Matrix::identity(cols, cols);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols {
            for j in i + 1..cols {
                let alpha = w.column(i).norm_squared();
                let beta = w.column(j).norm_squared();
                let gamma = w.column(i).dot(&w.column(j));
                if libm::fabs(gamma) <= f64::EPSILON * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t =
                    libm::copysign(1.0, zeta) / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                rotate_columns(&mut w, i, j, c, c * t);
                rotate_columns(&mut v, i, j, c, c * t);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Decomposition("Jacobi SVD did not converge"));
    }
    let norms: Vec<f64> = (0..cols).map(|k| w.column(k).norm()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut u = Matrix::zeros(rows, cols);
    let mut s = Vector::zeros(cols);
    let mut v_t = Matrix::zeros(cols, cols);
    for (k, &idx) in order.iter().enumerate() {
        s[k] = norms[idx];
        if norms[idx] > 0.0 {
            u.set_column(k, &(w.column(idx) / norms[idx]));
        }
        v_t.set_row(k, &v.column(idx).transpose());
    }
    Ok(Svd {
        u,
        singular_values: s,
        v_t,
    })
}

/// [`svd`] plus the numerical rank under the shared cutoff.
struct RankedSvd {
    u: Matrix,
    v_t: Matrix,
    singular_values: Vector,
    rank: usize,
}

fn ranked_svd(m: &Matrix, context: &'static str) -> Result<RankedSvd> {
    ensure_finite(m, context)?;
    let Svd {
        u,
        singular_values: s,
        v_t,
    } = svd(m)?;
    let s_max = s.iter().copied().fold(0.0_f64, f64::max);
    let cutoff = RANK_REL_TOL * s_max * m.nrows().max(m.ncols()) as f64;
    let rank = if s_max > 0.0 {
        s.iter().filter(|&&x| x > cutoff).count()
    } else {
        0
    };
    Ok(RankedSvd {
        u,
        v_t,
        singular_values: s,
        rank,
    })
}

/// Numerical rank under the shared cutoff.
pub fn rank(m: &Matrix) -> Result<usize> {
    Ok(ranked_svd(m, "rank input")?.rank)
}

/// Largest singular value.
pub fn operator_norm(m: &Matrix) -> Result<f64> {
    let s = ranked_svd(m, "norm input")?.singular_values;
    Ok(s.iter().copied().fold(0.0, f64::max))
}

/// Smallest singular value (of the thin factorization).
pub fn min_singular_value(m: &Matrix) -> Result<f64> {
    let s = ranked_svd(m, "norm input")?.singular_values;
    Ok(s.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Moore–Penrose pseudo-inverse through a thin SVD.
pub fn pinv(m: &Matrix) -> Result<Matrix> {
    let svd = ranked_svd(m, "pseudo-inverse input")?;
    let mut out = Matrix::zeros(m.ncols(), m.nrows());
    // Sorted descending, so the first `rank` triplets are the kept ones.
    for k in 0..svd.rank {
        let inv = 1.0 / svd.singular_values[k];
        let v = svd.v_t.row(k).transpose();
        let u = svd.u.column(k);
        out += (v * u.transpose()) * inv;
    }
    Ok(out)
}

/// Orthonormal basis of `range(x)`, one column per retained singular value.
pub fn range_basis(x: &Matrix) -> Result<Matrix> {
    let svd = ranked_svd(x, "range input")?;
    Ok(svd.u.columns(0, svd.rank).into_owned())
}

/// Orthogonal projector onto `range(x)`.
pub fn proj_range(x: &Matrix) -> Result<Matrix> {
    let q = range_basis(x)?;
    Ok(&q * q.transpose())
}

/// Orthogonal projector onto `range(x)^⊥`.
pub fn proj_complement(x: &Matrix) -> Result<Matrix> {
    let p = proj_range(x)?;
    Ok(Matrix::identity(x.nrows(), x.nrows()) - p)
}

/// Eigenvalues of a square matrix with the derived radius and leftmost real part.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<Complex<f64>>,
    pub spectral_radius: f64,
    pub min_real_part: f64,
}

pub fn spectrum(m: &Matrix) -> Result<SpectrumReport> {
    ensure_square(m, "spectrum input")?;
    ensure_finite(m, "spectrum input")?;
    let schur = Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or(Error::Decomposition("Schur decomposition"))?;
    let eigenvalues: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().copied().collect();
    let spectral_radius = eigenvalues
        .iter()
        .map(|z| libm::hypot(z.re, z.im))
        .fold(0.0, f64::max);
    let min_real_part = eigenvalues
        .iter()
        .map(|z| z.re)
        .fold(f64::INFINITY, f64::min);
    Ok(SpectrumReport {
        eigenvalues,
        spectral_radius,
        min_real_part,
    })
}

/// `m^n` by repeated squaring.
pub fn mat_pow(m: &Matrix, mut n: usize) -> Result<Matrix> {
    ensure_square(m, "matrix power base")?;
    let mut result = Matrix::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    while n > 0 {
        if n & 1 == 1 {
            result = &result * &base;
        }
        n >>= 1;
        if n > 0 {
            base = &base * &base;
        }
    }
    Ok(result)
}

/// Inverse of a square matrix, rejected when it is singular under the rank rule.
pub fn inverse(m: &Matrix, context: &'static str) -> Result<Matrix> {
    ensure_square(m, context)?;
    if rank(m)? < m.nrows() {
        return Err(Error::Singular(context));
    }
    m.clone().lu().try_inverse().ok_or(Error::Singular(context))
}

/// Block-diagonal matrix from the given blocks.
pub fn block_diag(blocks: &[Matrix]) -> Matrix {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Identifier of the generator behind [`SeededSource`]: ChaCha8 keyed by
/// `seed_from_u64`, 53-bit uniforms, Box–Muller normals computed with `libm`.
pub const ALGORITHM_ID: &str = "chacha8-boxmuller-v1";

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(SPLITMIX_GAMMA);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// A seed value. Every stream drawn from the same seed is identical on every
/// platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeededSource {
    seed: u64,
}

impl SeededSource {
    pub const fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub const fn seed(&self) -> u64 {
        self.seed
    }

    pub const fn algorithm_id(&self) -> &'static str {
        ALGORITHM_ID
    }

    /// Independent child source: `splitmix64(seed ^ splitmix64(index))`.
    pub fn child(&self, index: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(index)))
    }

    pub fn stream(&self) -> NormalStream {
        NormalStream {
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            spare: None,
        }
    }
}

/// Sequential draws from a [`SeededSource`].
#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(radius * libm::sin(angle));
        radius * libm::cos(angle)
    }

    /// Matrix filled in row-major order.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| self.standard_normal()).collect();
        Matrix::from_row_slice(rows, cols, &data)
    }

    pub fn vector(&mut self, len: usize) -> Vector {
        Vector::from_fn(len, |_, _| self.standard_normal())
    }
}

/// i.i.d. standard-normal matrix drawn from a fresh stream of `src`.
pub fn gaussian_matrix(src: &SeededSource, rows: usize, cols: usize) -> Matrix {
    src.stream().matrix(rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.shape() == b.shape() && (a - b).amax() <= tol
    }

    #[test]
    fn pinv_identity() {
        let i = Matrix::identity(3, 3);
        assert!(close(&pinv(&i).unwrap(), &i, 1e-15));
    }

    #[test]
    fn pinv_truncates_zero_diagonal() {
        let d = Matrix::from_diagonal(&Vector::from_vec(alloc::vec![2.0, 0.0]));
        let expected = Matrix::from_diagonal(&Vector::from_vec(alloc::vec![0.5, 0.0]));
        assert!(close(&pinv(&d).unwrap(), &expected, 1e-15));
    }

    #[test]
    fn pinv_row_vector() {
        // X^T (X X^T)^{-1} = [1; 1] / 2
        let x = Matrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let expected = Matrix::from_row_slice(2, 1, &[0.5, 0.5]);
        assert!(close(&pinv(&x).unwrap(), &expected, 1e-15));
    }

    #[test]
    fn pinv_rejects_nan() {
        let x = Matrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(pinv(&x), Err(Error::NonFinite(_))));
        assert!(matches!(proj_range(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn projector_examples() {
        let i = Matrix::identity(3, 3);
        assert!(close(&proj_range(&i).unwrap(), &i, 1e-15));
        let z = Matrix::zeros(3, 2);
        assert!(close(&proj_range(&z).unwrap(), &Matrix::zeros(3, 3), 0.0));
        let col = Matrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let expected = Matrix::from_element(2, 2, 0.5);
        assert!(close(&proj_range(&col).unwrap(), &expected, 1e-15));
    }

    #[test]
    fn spectrum_examples() {
        let d = Matrix::from_diagonal(&Vector::from_vec(alloc::vec![1.0, 2.0]));
        let s = spectrum(&d).unwrap();
        assert_eq!(s.eigenvalues.len(), 2);
        assert!((s.spectral_radius - 2.0).abs() < 1e-14);
        assert!((s.min_real_part - 1.0).abs() < 1e-14);

        // Rotation by 90 degrees: λ² + 1 = 0.
        let rot = Matrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let s = spectrum(&rot).unwrap();
        let mut ims: Vec<f64> = s.eigenvalues.iter().map(|z| z.im).collect();
        ims.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((ims[0] + 1.0).abs() < 1e-14 && (ims[1] - 1.0).abs() < 1e-14);
        assert!(s.min_real_part.abs() < 1e-14);
        assert!((s.spectral_radius - 1.0).abs() < 1e-14);

        let s = spectrum(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(s.spectral_radius, 0.0);
        assert!(s.eigenvalues.iter().all(|z| z.norm_sqr() == 0.0));
    }

    #[test]
    fn spectrum_rejects_rectangular() {
        assert!(matches!(
            spectrum(&Matrix::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn mat_pow_matches_repeated_product() {
        let m = Matrix::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 0.5]);
        let mut naive = Matrix::identity(2, 2);
        for n in 0..12 {
            assert!(close(&mat_pow(&m, n).unwrap(), &naive, 1e-15));
            naive = &naive * &m;
        }
    }

    #[test]
    fn gaussian_is_deterministic() {
        let src = SeededSource::new(7);
        assert_eq!(gaussian_matrix(&src, 4, 3), gaussian_matrix(&src, 4, 3));
        assert_ne!(
            gaussian_matrix(&src, 4, 3),
            gaussian_matrix(&src.child(0), 4, 3)
        );
        assert_ne!(src.child(0), src.child(1));
    }

    #[test]
    fn gaussian_moments() {
        let n = 100_000;
        let m = gaussian_matrix(&SeededSource::new(2024), n, 1);
        let mean = m.sum() / n as f64;
        let var = m.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() <= 3.0 / libm::sqrt(n as f64), "mean {mean}");
        assert!((var - 1.0).abs() <= 0.05, "variance {var}");
    }

    #[test]
    fn block_diag_layout() {
        let a = Matrix::from_element(1, 2, 1.0);
        let b = Matrix::from_element(2, 1, 2.0);
        let d = block_diag(&[a, b]);
        assert_eq!(d.shape(), (3, 3));
        assert_eq!(d[(0, 1)], 1.0);
        assert_eq!(d[(2, 2)], 2.0);
        assert_eq!(d[(0, 2)], 0.0);
    }
}
