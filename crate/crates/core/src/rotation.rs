//! SO(n)-valued latent actions: orthogonal projection of unconstrained
//! matrices, composition, identity anchoring, and the row-major chunk layout
//! used by the flow head.
//!
//! The projection is the SVD nearest-rotation map
//! `Proj(M) = U · diag(1, …, 1, det(U·Vᵀ)) · Vᵀ` with the determinant fix on
//! the last (smallest) singular direction, and it carries a hand-derived
//! backward pass with regularized singular-value gap terms so it can sit
//! inside a differentiated graph.

use ndarray::{Array1, Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Gap-term regularizer floor for the SVD backward pass.
pub const SVD_GAP_EPS: f64 = 1e-6;

/// Rotation matrix in SO(n): orthogonal with determinant +1.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationLatent<T: Scalar> {
    matrix: Array2<T>,
}

/// Unconstrained n×n encoder output, pre projection.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTransitionMatrix<T: Scalar>(pub Array2<T>);

/// Rotation flattened to n rows of n-dim vectors: the action-chunk layout the
/// flow head denoises (horizon n, dimension n per step).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentChunk<T: Scalar> {
    rows: Array2<T>,
}

/// Validation tolerance: 1e-6 is attainable in f64; f32 SVD roundoff needs
/// the epsilon-scaled floor.
fn rotation_tol<T: Scalar>(_n: usize) -> T {
    lit::<T>(1e-6).max(T::epsilon() * lit::<T>(500.0))
}

pub fn orthogonality_error<T: Scalar>(m: &ArrayView2<T>) -> T {
    let gram = m.t().dot(m);
    let n = m.nrows();
    let mut acc = T::zero();
    for i in 0..n {
        for j in 0..n {
            let id = if i == j { T::one() } else { T::zero() };
            let d = gram[[i, j]] - id;
            acc = acc + d * d;
        }
    }
    acc.sqrt()
}

impl<T: Scalar> RotationLatent<T> {
    /// Validates orthogonality and determinant before accepting the matrix.
    pub fn try_new(matrix: Array2<T>) -> Result<Self> {
        let (r, c) = matrix.dim();
        if r != c || r < 2 {
            return Err(CoreError::ShapeMismatch(format!(
                "rotation must be square with n >= 2, got {}x{}",
                r, c
            )));
        }
        if !matrix.iter().all(|x| x.is_finite()) {
            return Err(CoreError::InvalidInput(
                "rotation has non-finite entries".to_string(),
            ));
        }
        let tol = rotation_tol::<T>(r);
        let ortho = orthogonality_error(&matrix.view());
        if ortho > tol {
            return Err(CoreError::Numerical(format!(
                "matrix is not orthogonal: ||R'R - I||_F = {}",
                ortho
            )));
        }
        let det = T::det(&matrix);
        if (det - T::one()).abs() > tol {
            return Err(CoreError::Numerical(format!(
                "matrix is not a proper rotation: det = {}",
                det
            )));
        }
        Ok(RotationLatent { matrix })
    }

    pub fn identity(n: usize) -> Self {
        RotationLatent {
            matrix: Array2::eye(n),
        }
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Exact inverse: the transpose.
    pub fn inverse(&self) -> Self {
        RotationLatent {
            matrix: self.matrix.t().to_owned(),
        }
    }
}

impl<T: Scalar> RawTransitionMatrix<T> {
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

impl<T: Scalar> LatentChunk<T> {
    pub fn from_rows(rows: Array2<T>) -> Self {
        LatentChunk { rows }
    }

    /// n rows of n-dim vectors.
    pub fn rows(&self) -> &Array2<T> {
        &self.rows
    }

    pub fn horizon(&self) -> usize {
        self.rows.nrows()
    }
}

/// Everything the projection backward pass needs from the forward SVD.
#[derive(Debug, Clone)]
pub struct SvdParts<T: Scalar> {
    pub u: Array2<T>,
    pub sigma: Array1<T>,
    pub vt: Array2<T>,
    /// det(U·Vᵀ), the sign applied to the last singular direction.
    pub det_sign: T,
}

/// Nearest-rotation projection, returning the SVD parts for backprop.
pub fn project_parts<T: Scalar>(m: &ArrayView2<T>) -> Result<(Array2<T>, SvdParts<T>)> {
    let (r, c) = m.dim();
    if r != c || r < 2 {
        return Err(CoreError::ShapeMismatch(format!(
            "projection expects square n>=2 input, got {}x{}",
            r, c
        )));
    }
    if !m.iter().all(|x| x.is_finite()) {
        return Err(CoreError::InvalidInput(
            "projection input has non-finite entries".to_string(),
        ));
    }
    let owned = m.to_owned();
    let (u, sigma, vt) = T::svd(&owned).map_err(|e| match e {
        CoreError::Numerical(msg) => CoreError::Numerical(format!(
            "{}; input {}x{}, max |entry| = {}, ||m||_F = {}",
            msg,
            r,
            c,
            owned.iter().fold(T::zero(), |a, x| a.max(x.abs())),
            owned.iter().fold(T::zero(), |a, x| a + *x * *x).sqrt()
        )),
        other => other,
    })?;
    let det_sign = if T::det(&u.dot(&vt)) >= T::zero() {
        T::one()
    } else {
        -T::one()
    };
    // R = U · diag(1, …, 1, det_sign) · Vᵀ; the flip lands on the smallest
    // singular value because sigma is sorted descending.
    let n = r;
    let mut u_fixed = u.clone();
    for i in 0..n {
        u_fixed[[i, n - 1]] = u_fixed[[i, n - 1]] * det_sign;
    }
    let rot = u_fixed.dot(&vt);
    Ok((
        rot,
        SvdParts {
            u,
            sigma,
            vt,
            det_sign,
        },
    ))
}

pub fn project_to_rotation<T: Scalar>(m: &RawTransitionMatrix<T>) -> Result<RotationLatent<T>> {
    let (rot, _) = project_parts(&m.0.view())?;
    RotationLatent::try_new(rot)
}

/// Backward pass of the projection: maps dL/dR to dL/dM.
///
/// With G = Uᵀ·(dL/dR)·V, d = diag(1,…,1,det_sign) and sigma descending:
///   A_ij = [G_ij (d_j σ_j − d_i σ_i) + G_ji (d_j σ_i − d_i σ_j)] / (σ_j² − σ_i²)
///   dL/dM = U · A · Vᵀ
/// The gap denominators g = σ_j² − σ_i² are clamped sign-preservingly to
/// |g| ≥ SVD_GAP_EPS, exact everywhere else.
pub fn project_gradient<T: Scalar>(parts: &SvdParts<T>, grad_r: &ArrayView2<T>) -> Array2<T> {
    let n = parts.sigma.len();
    let v = parts.vt.t();
    let g = parts.u.t().dot(grad_r).dot(&v);
    let eps = lit::<T>(SVD_GAP_EPS);
    let d = |i: usize| {
        if i == n - 1 {
            parts.det_sign
        } else {
            T::one()
        }
    };
    let mut a = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (si, sj) = (parts.sigma[i], parts.sigma[j]);
            let gap = sj * sj - si * si;
            let denom = if gap >= T::zero() {
                gap.max(eps)
            } else {
                gap.min(-eps)
            };
            let num = g[[i, j]] * (d(j) * sj - d(i) * si) + g[[j, i]] * (d(j) * si - d(i) * sj);
            a[[i, j]] = num / denom;
        }
    }
    parts.u.dot(&a).dot(&parts.vt)
}

/// Projection as a graph op. `straight_through` passes the output gradient
/// through unchanged (the stop-gradient ablation); otherwise the regularized
/// SVD backward above is used.
pub fn project_graph<T: Scalar>(pre: &Tensor<T>, straight_through: bool) -> Result<Tensor<T>> {
    let m = pre
        .data()
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| CoreError::ShapeMismatch("projection input must be 2-D".to_string()))?;
    let (rot, parts) = project_parts(&m)?;
    Ok(pre.custom_unary(rot.into_dyn(), move |g| {
        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        if straight_through {
            g.clone()
        } else {
            project_gradient(&parts, &g2).into_dyn()
        }
    }))
}

/// z2 · z_identity⁻¹ · z1, the relative composition of two transitions
/// through the anchored identity. The inverse is the transpose.
pub fn compose_latents<T: Scalar>(
    z1: &RotationLatent<T>,
    z2: &RotationLatent<T>,
    z_identity: &RotationLatent<T>,
) -> Result<RotationLatent<T>> {
    let n = z1.dim();
    if z2.dim() != n || z_identity.dim() != n {
        return Err(CoreError::ShapeMismatch(format!(
            "compose dims disagree: {}, {}, {}",
            n,
            z2.dim(),
            z_identity.dim()
        )));
    }
    let m = z2
        .matrix()
        .dot(&z_identity.matrix().t())
        .dot(z1.matrix());
    RotationLatent::try_new(m)
}

/// Projection of the elementwise batch mean; the batch holds pre-projection
/// encoder outputs on identical-frame pairs.
pub fn anchor_identity<T: Scalar>(batch: &[RawTransitionMatrix<T>]) -> Result<RotationLatent<T>> {
    if batch.is_empty() {
        return Err(CoreError::InvalidInput(
            "anchor_identity needs a non-empty batch".to_string(),
        ));
    }
    let n = batch[0].dim();
    let mut mean = Array2::<T>::zeros((n, n));
    for m in batch {
        if m.dim() != n {
            return Err(CoreError::ShapeMismatch(
                "anchor batch has mixed dims".to_string(),
            ));
        }
        mean.zip_mut_with(&m.0, |a, &b| *a = *a + b);
    }
    let scale = T::one() / lit::<T>(batch.len() as f64);
    mean.mapv_inplace(|x| x * scale);
    project_to_rotation(&RawTransitionMatrix(mean))
}

pub fn frobenius_distance<T: Scalar>(
    z1: &RotationLatent<T>,
    z2: &RotationLatent<T>,
) -> Result<T> {
    if z1.dim() != z2.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "frobenius_distance dims disagree: {} vs {}",
            z1.dim(),
            z2.dim()
        )));
    }
    let mut acc = T::zero();
    for (a, b) in z1.matrix().iter().zip(z2.matrix().iter()) {
        let d = *a - *b;
        acc = acc + d * d;
    }
    Ok(acc.sqrt())
}

/// Haar-style random rotation: projection of an i.i.d. Gaussian matrix.
pub fn random_rotation<T: Scalar>(n: usize, rng: &mut ChaCha8Rng) -> Result<RotationLatent<T>> {
    if n < 2 {
        return Err(CoreError::InvalidInput(format!(
            "random_rotation needs n >= 2, got {}",
            n
        )));
    }
    let m = Array2::from_shape_fn((n, n), |_| T::standard_normal(rng));
    project_to_rotation(&RawTransitionMatrix(m))
}

/// Row-major flattening into the action-chunk layout. Exact bijection.
pub fn flatten<T: Scalar>(z: &RotationLatent<T>) -> LatentChunk<T> {
    LatentChunk {
        rows: z.matrix().clone(),
    }
}

pub fn unflatten<T: Scalar>(c: &LatentChunk<T>) -> Result<RotationLatent<T>> {
    let (r, cdim) = c.rows.dim();
    if r != cdim {
        return Err(CoreError::ShapeMismatch(format!(
            "chunk must hold n rows of dimension n, got {}x{}",
            r, cdim
        )));
    }
    RotationLatent::try_new(c.rows.clone())
}

/// R(θ) in SO(2); shared by tests and oracles.
pub fn rot2<T: Scalar>(theta: f64) -> Array2<T> {
    let (s, c) = theta.sin_cos();
    ndarray::array![
        [lit::<T>(c), lit::<T>(-s)],
        [lit::<T>(s), lit::<T>(c)]
    ]
}
