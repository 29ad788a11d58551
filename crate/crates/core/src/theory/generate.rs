//! Seeded random instances.
//!
//! Every generator draws the `U`-independent part of the instance from
//! `src.child(0)` and `U` from `src.child(1)`, so one seed fixes the whole
//! instance and `U` can be regenerated at a different width without
//! disturbing the rest.

use alloc::format;

use crate::inner::AffineInnerProblem;
use crate::linops::{self, Matrix, NormalStream, SeededSource, Vector};
use crate::outer::{Bilevel, QuadraticOuterLoss};
use crate::{Error, Result};

const MAX_RESAMPLES: usize = 64;

fn full_rank_draw(
    stream: &mut NormalStream,
    rows: usize,
    cols: usize,
    mut map: impl FnMut(Matrix) -> Matrix,
    what: &'static str,
) -> Result<Matrix> {
    for _ in 0..MAX_RESAMPLES {
        let m = map(stream.matrix(rows, cols));
        if linops::rank(&m)? == rows.min(cols) {
            return Ok(m);
        }
    }
    Err(Error::InvalidProblem(format!(
        "could not draw a full-rank {what}"
    )))
}

/// Gaussian `rows × cols` matrix of rank `min(rank, rows, cols)`: a full
/// Gaussian draw with its trailing singular values zeroed.
pub fn rank_limited(
    stream: &mut NormalStream,
    rows: usize,
    cols: usize,
    rank: usize,
) -> Result<Matrix> {
    let m = stream.matrix(rows, cols);
    let linops::Svd {
        u,
        singular_values: mut s,
        v_t,
    } = linops::svd(&m)?;
    for x in s.iter_mut().skip(rank) {
        *x = 0.0;
    }
    Ok(u * Matrix::from_diagonal(&s) * v_t)
}

/// `U` of shape `d_x × d_theta` for the instance seeded by `src`.
pub fn draw_u(src: &SeededSource, d_x: usize, d_theta: usize) -> Matrix {
    src.child(1).stream().matrix(d_x, d_theta)
}

/// Square strongly convex instance of size `d`.
///
/// `K_in = I + 0.1 G` (resampled until invertible), `B = K_in`,
/// `K_out = k_out_scale · G'` (resampled until invertible), and `c`, `ω`,
/// `z0` standard Gaussian. The inner step is the default one.
pub fn strongly_convex(
    src: &SeededSource,
    d: usize,
    d_theta: usize,
    k_out_scale: f64,
) -> Result<Bilevel> {
    if d == 0 || !(k_out_scale.is_finite() && k_out_scale > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need d > 0 and a positive K_out scale, got d = {d}, scale = {k_out_scale}"
        )));
    }
    let mut s = src.child(0).stream();
    let eye = Matrix::identity(d, d);
    let k_in = full_rank_draw(&mut s, d, d, |g| &eye + g * 0.1, "K_in")?;
    let k_out = full_rank_draw(&mut s, d, d, |g| g * k_out_scale, "K_out")?;
    let c = s.vector(d);
    let omega = s.vector(d);
    let z0 = s.vector(d);
    let inner = AffineInnerProblem::new(k_in.clone(), k_in, draw_u(src, d, d_theta), c)?;
    Bilevel::with_default_step(inner, QuadraticOuterLoss::new(k_out, omega)?, z0)
}

/// Dimensions and rank knobs of [`gradient_instance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientDims {
    pub d_z: usize,
    /// Rank of `K_in`; `K_in` is `inner_rank × d_z`, so `d_x = inner_rank`.
    pub inner_rank: usize,
    pub d_theta: usize,
    pub d_omega: usize,
    /// Rank of `K_out`, at most `min(d_omega, d_z)`.
    pub outer_rank: usize,
}

/// Inner problem from `F(z, θ) = ½‖K_in z + Uθ + c‖²`, so `B = K_in`, in
/// reduced form with surjective Gaussian `K_in`. `K_out` is Gaussian with its
/// trailing singular values zeroed down to `outer_rank`.
pub fn gradient_instance(src: &SeededSource, dims: GradientDims) -> Result<Bilevel> {
    let GradientDims {
        d_z,
        inner_rank,
        d_theta,
        d_omega,
        outer_rank,
    } = dims;
    if d_z == 0 || inner_rank == 0 || inner_rank > d_z || d_omega == 0 {
        return Err(Error::InvalidParameter(format!(
            "invalid dimensions {dims:?}"
        )));
    }
    let mut s = src.child(0).stream();
    let k_in = full_rank_draw(&mut s, inner_rank, d_z, |g| g, "K_in")?;
    let k_out = rank_limited(&mut s, d_omega, d_z, outer_rank)?;
    let c = s.vector(inner_rank);
    let omega = s.vector(d_omega);
    let z0 = s.vector(d_z);
    let inner = AffineInnerProblem::new(k_in.clone(), k_in, draw_u(src, inner_rank, d_theta), c)?;
    Bilevel::with_default_step(inner, QuadraticOuterLoss::new(k_out, omega)?, z0)
}

/// Strongly convex outer loss on top of a gradient-form inner problem with a
/// well-conditioned `K_in = [I + 0.1 G]` (first `d_x` rows) and
/// `K_out = I + 0.1 G'`.
pub fn well_conditioned_gradient(
    src: &SeededSource,
    d_z: usize,
    d_x: usize,
    d_theta: usize,
) -> Result<Bilevel> {
    if d_z == 0 || d_x == 0 || d_x > d_z {
        return Err(Error::InvalidParameter(format!(
            "need 0 < d_x <= d_z, got d_x = {d_x}, d_z = {d_z}"
        )));
    }
    let mut s = src.child(0).stream();
    let eye = Matrix::identity(d_z, d_z);
    let square = full_rank_draw(&mut s, d_z, d_z, |g| &eye + g * 0.1, "K_in")?;
    let k_in = square.rows(0, d_x).into_owned();
    let k_out = full_rank_draw(&mut s, d_z, d_z, |g| &eye + g * 0.1, "K_out")?;
    let c = s.vector(d_x);
    let omega = s.vector(d_z);
    let z0 = s.vector(d_z);
    let inner = AffineInnerProblem::new(k_in.clone(), k_in, draw_u(src, d_x, d_theta), c)?;
    Bilevel::with_default_step(inner, QuadraticOuterLoss::new(k_out, omega)?, z0)
}

fn uniform_index(s: &mut NormalStream, lo: usize, hi: usize) -> usize {
    let span = (hi - lo + 1) as f64;
    lo + ((s.uniform() * span) as usize).min(hi - lo)
}

/// Arbitrary valid instance with random dimensions in `1..=max_dim` and a
/// non-symmetric `B`.
///
/// `B = S (K_in K_inᵀ)⁻¹ K_in + N (I − P(K_inᵀ))` with `S` a positive definite
/// matrix plus a skew part, so `B K_inᵀ = S` has eigenvalues with positive
/// real part while `B` itself has an arbitrary component off `range(K_inᵀ)`.
pub fn general_valid(src: &SeededSource, max_dim: usize) -> Result<Bilevel> {
    if max_dim == 0 {
        return Err(Error::InvalidParameter("max_dim must be positive".into()));
    }
    let mut s = src.child(0).stream();
    let d_z = uniform_index(&mut s, 1, max_dim);
    let d_x = uniform_index(&mut s, 1, d_z);
    let d_theta = uniform_index(&mut s, 1, max_dim);
    let d_omega = uniform_index(&mut s, 1, max_dim);

    let k_in = full_rank_draw(&mut s, d_x, d_z, |g| g, "K_in")?;
    let a = s.matrix(d_x, d_x);
    let w = s.matrix(d_x, d_x);
    let spd = &a * a.transpose() / d_x as f64 + Matrix::identity(d_x, d_x) * 0.1;
    let skew = (&w - w.transpose()) * 0.5;
    let target = spd + skew;
    let gram_inv = linops::inverse(&(&k_in * k_in.transpose()), "K_in K_inᵀ")?;
    let off_range = s.matrix(d_x, d_z) * 0.5 * linops::proj_complement(&k_in.transpose())?;
    let b = target * gram_inv * &k_in + off_range;

    let k_out = s.matrix(d_omega, d_z);
    let c = s.vector(d_x);
    let omega = s.vector(d_omega);
    let z0 = s.vector(d_z);
    let inner = AffineInnerProblem::new(k_in, b, draw_u(src, d_x, d_theta), c)?;
    Bilevel::with_default_step(inner, QuadraticOuterLoss::new(k_out, omega)?, z0)
}

/// Standard Gaussian vector of length `len` from the seed's third stream.
pub fn draw_theta(src: &SeededSource, len: usize) -> Vector {
    src.child(2).stream().vector(len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strongly_convex_hypotheses() {
        let b = strongly_convex(&SeededSource::new(3), 6, 2, 1.0).unwrap();
        assert!(b.outer().is_strongly_convex());
        assert_eq!(linops::rank(b.inner().k_in()).unwrap(), 6);
        assert_eq!(b.inner().u().shape(), (6, 2));
    }

    #[test]
    fn u_prefix_is_stable_across_widths() {
        let src = SeededSource::new(11);
        let wide = draw_u(&src, 4, 6);
        let narrow = draw_u(&src, 4, 6).columns(0, 3).into_owned();
        assert_eq!(wide.columns(0, 3), narrow);
    }

    #[test]
    fn rank_knob() {
        let mut s = SeededSource::new(5).stream();
        let m = rank_limited(&mut s, 6, 8, 3).unwrap();
        assert_eq!(linops::rank(&m).unwrap(), 3);
    }

    #[test]
    fn general_instances_are_valid() {
        for seed in 0..30 {
            let b = general_valid(&SeededSource::new(seed), 8).unwrap();
            assert!(b.inner().validate().passed());
            assert!(b.inner().d_x() <= b.inner().d_z());
        }
    }

    #[test]
    fn gradient_dims() {
        let dims = GradientDims {
            d_z: 10,
            inner_rank: 7,
            d_theta: 3,
            d_omega: 10,
            outer_rank: 5,
        };
        let b = gradient_instance(&SeededSource::new(1), dims).unwrap();
        assert_eq!(linops::rank(b.outer().k_out()).unwrap(), 5);
        assert_eq!(b.inner().d_x(), 7);
        assert!(!b.outer().is_strongly_convex());
    }
}
