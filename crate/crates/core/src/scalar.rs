//! Scalar abstraction: the numeric kernels are generic over `Scalar`, which is
//! implemented for `f32` (pipeline default) and `f64` (gradient checks, exact
//! oracles). Linear-algebra entry points (SVD, linear solve) are associated
//! functions so nalgebra stays an implementation detail of the two impls.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ScalarOperand};
use num_traits::Float;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};

pub trait Scalar:
    Float
    + ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;

    fn standard_normal(rng: &mut ChaCha8Rng) -> Self;
    /// Uniform draw from [0, 1).
    fn uniform_01(rng: &mut ChaCha8Rng) -> Self;

    /// Full SVD of a square matrix, singular values sorted descending.
    /// Returns (u, sigma, v_t) with m = u * diag(sigma) * v_t.
    fn svd(m: &Array2<Self>) -> Result<(Array2<Self>, Array1<Self>, Array2<Self>)>;

    /// Determinant of a square matrix.
    fn det(m: &Array2<Self>) -> Self;

    /// Solve a * x = b for square a.
    fn solve(a: &Array2<Self>, b: &Array1<Self>) -> Result<Array1<Self>>;
}

/// Shorthand for typed numeric literals in generic code.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn from_f32(x: f32) -> Self {
                x as $t
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }

            fn standard_normal(rng: &mut ChaCha8Rng) -> Self {
                <StandardNormal as Distribution<$t>>::sample(&StandardNormal, rng)
            }

            fn uniform_01(rng: &mut ChaCha8Rng) -> Self {
                rand::Rng::gen::<$t>(rng)
            }

            fn svd(m: &Array2<Self>) -> Result<(Array2<Self>, Array1<Self>, Array2<Self>)> {
                let (r, c) = m.dim();
                if r != c {
                    return Err(CoreError::ShapeMismatch(format!(
                        "svd expects a square matrix, got {}x{}",
                        r, c
                    )));
                }
                let dm = DMatrix::<$t>::from_fn(r, c, |i, j| m[[i, j]]);
                let svd = nalgebra::linalg::SVD::try_new(
                    dm,
                    true,
                    true,
                    <$t>::EPSILON,
                    10_000,
                )
                .ok_or_else(|| {
                    CoreError::Numerical("svd failed to converge".to_string())
                })?;
                let u = svd.u.expect("svd u requested");
                let v_t = svd.v_t.expect("svd v_t requested");
                let sig = svd.singular_values;

                // Defensive descending sort; downstream code assumes the
                // smallest singular value sits in the last slot.
                let mut order: Vec<usize> = (0..r).collect();
                order.sort_by(|&a, &b| {
                    sig[b].partial_cmp(&sig[a]).expect("singular values are finite")
                });
                let u_s = Array2::from_shape_fn((r, r), |(i, j)| u[(i, order[j])]);
                let vt_s = Array2::from_shape_fn((r, r), |(i, j)| v_t[(order[i], j)]);
                let sig_s = Array1::from_shape_fn(r, |i| sig[order[i]]);
                Ok((u_s, sig_s, vt_s))
            }

            fn det(m: &Array2<Self>) -> Self {
                let (r, c) = m.dim();
                debug_assert_eq!(r, c, "det expects a square matrix");
                DMatrix::<$t>::from_fn(r, c, |i, j| m[[i, j]]).determinant()
            }

            fn solve(a: &Array2<Self>, b: &Array1<Self>) -> Result<Array1<Self>> {
                let (r, c) = a.dim();
                if r != c || b.len() != r {
                    return Err(CoreError::ShapeMismatch(format!(
                        "solve expects square a and matching b, got a {}x{}, b {}",
                        r,
                        c,
                        b.len()
                    )));
                }
                let dm = DMatrix::<$t>::from_fn(r, c, |i, j| a[[i, j]]);
                let dv = DVector::<$t>::from_fn(r, |i, _| b[i]);
                let x = dm
                    .lu()
                    .solve(&dv)
                    .ok_or_else(|| CoreError::Numerical("singular system in solve".to_string()))?;
                Ok(Array1::from_shape_fn(r, |i| x[i]))
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn svd_reconstructs_and_sorts() {
        let m = array![[3.0_f64, 1.0, 0.5], [0.0, 2.0, -1.0], [0.2, 0.0, 1.5]];
        let (u, s, vt) = f64::svd(&m).unwrap();
        assert!(s[0] >= s[1] && s[1] >= s[2]);
        let rec = u.dot(&Array2::from_diag(&s)).dot(&vt);
        for (a, b) in rec.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Orthogonality of factors.
        let utu = u.t().dot(&u);
        let vtv = vt.dot(&vt.t());
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                assert!((utu[[i, j]] - id).abs() < 1e-12);
                assert!((vtv[[i, j]] - id).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn solve_small_system() {
        let a = array![[2.0_f64, 1.0], [1.0, 3.0]];
        let b = array![5.0_f64, 10.0];
        let x = f64::solve(&a, &b).unwrap();
        assert!((2.0 * x[0] + x[1] - 5.0).abs() < 1e-12);
        assert!((x[0] + 3.0 * x[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn normal_draws_are_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..16 {
            let a: f32 = f32::standard_normal(&mut r1);
            let b: f32 = f32::standard_normal(&mut r2);
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
