//! Reverse-mode autodiff over `ndarray` storage.
//!
//! A `Tensor` wraps an immutable value plus an optional backward closure; ops
//! build a DAG, `backward()` on a scalar loss walks it once in reverse
//! topological order. The op set is exactly what the models here need:
//! elementwise math, 2-D matmul, row concat/slice, fused row softmax with an
//! attention mask, fused layer norm, and a hook (`custom_unary`) for ops with
//! hand-derived backward passes such as the SVD rotation projection.
//!
//! Graphs are rebuilt every step and are single-threaded by design; gradient
//! accumulation order is fixed by construction order, so results are
//! bit-reproducible for a given seed.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};

use crate::scalar::{lit, Scalar};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackFn<T> = Box<dyn Fn(&ArrayD<T>)>;

struct Node<T: Scalar> {
    id: u64,
    data: ArrayD<T>,
    grad: RefCell<Option<ArrayD<T>>>,
    needs_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackFn<T>>,
}

pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn leaf(data: ArrayD<T>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            grad: RefCell::new(None),
            needs_grad: requires_grad,
            parents: vec![],
            backward: None,
        }))
    }

    pub fn constant(data: ArrayD<T>) -> Self {
        Self::leaf(data, false)
    }

    pub fn constant2(data: Array2<T>) -> Self {
        Self::constant(data.into_dyn())
    }

    pub fn constant1(data: Array1<T>) -> Self {
        Self::constant(data.into_dyn())
    }

    fn from_op(data: ArrayD<T>, parents: Vec<Tensor<T>>, back: BackFn<T>) -> Self {
        let needs_grad = parents.iter().any(|p| p.0.needs_grad);
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            grad: RefCell::new(None),
            needs_grad,
            parents,
            backward: if needs_grad { Some(back) } else { None },
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    pub fn data(&self) -> &ArrayD<T> {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    /// 2-D view; panics if the tensor is not 2-D (engine misuse).
    pub fn d2(&self) -> ArrayView2<'_, T> {
        self.0
            .data
            .view()
            .into_dimensionality()
            .expect("tensor is not 2-D")
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.0.data.len(), 1, "item() needs a single-element tensor");
        *self.0.data.iter().next().unwrap()
    }

    pub fn grad(&self) -> Option<ArrayD<T>> {
        self.0.grad.borrow().clone()
    }

    fn accum(&self, g: &ArrayD<T>) {
        if !self.0.needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.0.data.shape(), "gradient shape mismatch");
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.zip_mut_with(g, |a, &b| *a = *a + b),
            None => *slot = Some(g.clone()),
        }
    }

    /// Reverse pass from a scalar loss. Intermediate gradients are dropped as
    /// soon as they are consumed; leaf gradients survive for the optimizer.
    pub fn backward(&self) {
        assert_eq!(self.0.data.len(), 1, "backward() needs a scalar loss");
        if !self.0.needs_grad {
            return;
        }
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        visited.insert(self.id());
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, i)) = stack.pop() {
            if i < node.0.parents.len() {
                let parent = node.0.parents[i].clone();
                stack.push((node, i + 1));
                if parent.0.needs_grad && !visited.contains(&parent.id()) {
                    visited.insert(parent.id());
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        self.0
            .grad
            .replace(Some(ArrayD::ones(self.0.data.raw_dim())));
        for node in order.iter().rev() {
            if let Some(back) = &node.0.backward {
                let g = node.0.grad.borrow().clone();
                if let Some(g) = g {
                    back(&g);
                }
                node.0.grad.replace(None);
            }
        }
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = &self.0.data + &other.0.data;
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                a.accum(g);
                b.accum(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = &self.0.data - &other.0.data;
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                a.accum(g);
                b.accum(&g.mapv(|x| -x));
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let data = &self.0.data * &other.0.data;
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                a.accum(&(g * &b.0.data));
                b.accum(&(g * &a.0.data));
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.0.data.mapv(|x| x * c);
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| a.accum(&g.mapv(|x| x * c))),
        )
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.0.data.mapv(|x| x + c);
        let a = self.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |g| a.accum(g)))
    }

    pub fn exp(&self) -> Tensor<T> {
        let data = self.0.data.mapv(|x| x.exp());
        let a = self.clone();
        let out = data.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| a.accum(&(g * &out))),
        )
    }

    pub fn ln(&self) -> Tensor<T> {
        let data = self.0.data.mapv(|x| x.ln());
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let ga = g / &a.0.data;
                a.accum(&ga);
            }),
        )
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let data = self.0.data.mapv(|x| x.sqrt());
        let a = self.clone();
        let out = data.clone();
        let half = lit::<T>(0.5);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let ga = g / &out * half;
                a.accum(&ga);
            }),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        let data = self.0.data.mapv(|x| x.tanh());
        let a = self.clone();
        let out = data.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let ga = g * &out.mapv(|y| T::one() - y * y);
                a.accum(&ga);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data = self.0.data.mapv(sigmoid_scalar);
        let a = self.clone();
        let out = data.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let ga = g * &out.mapv(|y| y * (T::one() - y));
                a.accum(&ga);
            }),
        )
    }

    /// x * sigmoid(x); smooth activation so finite-difference checks stay
    /// clean (no ReLU kinks on the differentiated paths).
    pub fn silu(&self) -> Tensor<T> {
        let data = self.0.data.mapv(|x| x * sigmoid_scalar(x));
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let ga = g * &a.0.data.mapv(|x| {
                    let s = sigmoid_scalar(x);
                    s * (T::one() + x * (T::one() - s))
                });
                a.accum(&ga);
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let data = self
            .0
            .data
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        let a = self.clone();
        let parent_shape: Vec<usize> = self.shape().to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gr = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&parent_shape))
                    .expect("reshape backward");
                a.accum(&gr);
            }),
        )
    }

    pub fn transpose(&self) -> Tensor<T> {
        let data = self.d2().t().to_owned().into_dyn();
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let g2: ArrayView2<T> = g.view().into_dimensionality().unwrap();
                a.accum(&g2.t().to_owned().into_dyn());
            }),
        )
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        let a2 = self.d2();
        let b2 = other.d2();
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dim mismatch");
        let data = a2.dot(&b2).into_dyn();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let g2: ArrayView2<T> = g.view().into_dimensionality().unwrap();
                if a.needs_grad() {
                    a.accum(&g2.dot(&b.d2().t()).into_dyn());
                }
                if b.needs_grad() {
                    b.accum(&a.d2().t().dot(&g2).into_dyn());
                }
            }),
        )
    }

    pub fn concat_rows(parts: &[&Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let views: Vec<ArrayView2<T>> = parts.iter().map(|p| p.d2()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .expect("concat_rows column mismatch")
            .into_dyn();
        let owned: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        let row_counts: Vec<usize> = parts.iter().map(|p| p.d2().nrows()).collect();
        let backs = owned.clone();
        Tensor::from_op(
            data,
            owned,
            Box::new(move |g| {
                let g2: ArrayView2<T> = g.view().into_dimensionality().unwrap();
                let mut start = 0;
                for (p, &rows) in backs.iter().zip(row_counts.iter()) {
                    let seg = g2.slice(ndarray::s![start..start + rows, ..]);
                    p.accum(&seg.to_owned().into_dyn());
                    start += rows;
                }
            }),
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor<T> {
        let a2 = self.d2();
        assert!(start + len <= a2.nrows(), "slice_rows out of range");
        let data = a2
            .slice(ndarray::s![start..start + len, ..])
            .to_owned()
            .into_dyn();
        let a = self.clone();
        let (rows, cols) = (a2.nrows(), a2.ncols());
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let g2: ArrayView2<T> = g.view().into_dimensionality().unwrap();
                let mut full = Array2::<T>::zeros((rows, cols));
                full.slice_mut(ndarray::s![start..start + len, ..])
                    .assign(&g2);
                a.accum(&full.into_dyn());
            }),
        )
    }

    /// Repeat a 1-D tensor as `rows` identical rows.
    pub fn broadcast_row(&self, rows: usize) -> Tensor<T> {
        let v = self
            .0
            .data
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("broadcast_row needs a 1-D tensor");
        let cols = v.len();
        let data = Array2::from_shape_fn((rows, cols), |(_, j)| v[j]).into_dyn();
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let g2: ArrayView2<T> = g.view().into_dimensionality().unwrap();
                a.accum(&g2.sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.0.data.sum();
        let data = ArrayD::from_elem(IxDyn(&[]), s);
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                a.accum(&ArrayD::from_elem(a.0.data.raw_dim(), gv));
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = lit::<T>(self.0.data.len() as f64);
        self.sum_all().scale(T::one() / n)
    }

    /// Row sums of a 2-D tensor (axis 1 reduction, result 1-D).
    pub fn sum_rows(&self) -> Tensor<T> {
        let a2 = self.d2();
        let data = a2.sum_axis(Axis(1)).into_dyn();
        let a = self.clone();
        let (rows, cols) = (a2.nrows(), a2.ncols());
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let full = Array2::from_shape_fn((rows, cols), |(i, _)| g1[i]);
                a.accum(&full.into_dyn());
            }),
        )
    }

    /// Column sums of a 2-D tensor (axis 0 reduction, result 1-D).
    pub fn sum_cols(&self) -> Tensor<T> {
        let a2 = self.d2();
        let data = a2.sum_axis(Axis(0)).into_dyn();
        let a = self.clone();
        let (rows, cols) = (a2.nrows(), a2.ncols());
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let full = Array2::from_shape_fn((rows, cols), |(_, j)| g1[j]);
                a.accum(&full.into_dyn());
            }),
        )
    }

    /// Mean squared difference to another tensor, as a scalar.
    pub fn mse(&self, target: &Tensor<T>) -> Tensor<T> {
        let d = self.sub(target);
        d.mul(&d).mean_all()
    }

    // ---- fused row ops ----

    /// Row-wise softmax with an optional boolean mask (`true` = position is
    /// attendable). Masked positions get zero weight and zero gradient. Rows
    /// are max-subtracted before exponentiation.
    pub fn softmax_rows(&self, mask: Option<&Array2<bool>>) -> Tensor<T> {
        let x = self.d2();
        let (rows, cols) = (x.nrows(), x.ncols());
        if let Some(m) = mask {
            assert_eq!(m.dim(), (rows, cols), "softmax mask shape mismatch");
        }
        let mut out = Array2::<T>::zeros((rows, cols));
        for i in 0..rows {
            let allowed = |j: usize| mask.map_or(true, |m| m[[i, j]]);
            let mut mx = T::neg_infinity();
            for j in 0..cols {
                if allowed(j) && x[[i, j]] > mx {
                    mx = x[[i, j]];
                }
            }
            assert!(
                mx > T::neg_infinity(),
                "softmax row {} has no attendable position",
                i
            );
            let mut denom = T::zero();
            for j in 0..cols {
                if allowed(j) {
                    let e = (x[[i, j]] - mx).exp();
                    out[[i, j]] = e;
                    denom = denom + e;
                }
            }
            for j in 0..cols {
                out[[i, j]] = out[[i, j]] / denom;
            }
        }
        let a = self.clone();
        let p = out.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2: ArrayView2<T> = g.view().into_dimensionality().unwrap();
                let mut gx = Array2::<T>::zeros(p.dim());
                for i in 0..p.nrows() {
                    let mut dot = T::zero();
                    for j in 0..p.ncols() {
                        dot = dot + g2[[i, j]] * p[[i, j]];
                    }
                    for j in 0..p.ncols() {
                        gx[[i, j]] = p[[i, j]] * (g2[[i, j]] - dot);
                    }
                }
                a.accum(&gx.into_dyn());
            }),
        )
    }

    /// Row-wise layer norm with learned gain/bias (both 1-D of width D).
    pub fn layer_norm_rows(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Tensor<T> {
        let x = self.d2();
        let (rows, cols) = (x.nrows(), x.ncols());
        let gm = gamma
            .0
            .data
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("gamma must be 1-D");
        let bt = beta
            .0
            .data
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("beta must be 1-D");
        assert_eq!(gm.len(), cols, "layer norm gamma width mismatch");
        assert_eq!(bt.len(), cols, "layer norm beta width mismatch");

        let nc = lit::<T>(cols as f64);
        let mut xhat = Array2::<T>::zeros((rows, cols));
        let mut inv_std = Array1::<T>::zeros(rows);
        let mut out = Array2::<T>::zeros((rows, cols));
        for i in 0..rows {
            let mut mean = T::zero();
            for j in 0..cols {
                mean = mean + x[[i, j]];
            }
            mean = mean / nc;
            let mut var = T::zero();
            for j in 0..cols {
                let d = x[[i, j]] - mean;
                var = var + d * d;
            }
            var = var / nc;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..cols {
                let xh = (x[[i, j]] - mean) * is;
                xhat[[i, j]] = xh;
                out[[i, j]] = xh * gm[j] + bt[j];
            }
        }
        let (a, gpar, bpar) = (self.clone(), gamma.clone(), beta.clone());
        let gm_saved = gm.to_owned();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let g2: ArrayView2<T> = g.view().into_dimensionality().unwrap();
                let (rows, cols) = g2.dim();
                let nc = lit::<T>(cols as f64);
                let mut dgamma = Array1::<T>::zeros(cols);
                let mut dbeta = Array1::<T>::zeros(cols);
                let mut dx = Array2::<T>::zeros((rows, cols));
                for i in 0..rows {
                    let mut m1 = T::zero(); // mean of dxhat
                    let mut m2 = T::zero(); // mean of dxhat * xhat
                    for j in 0..cols {
                        let dxh = g2[[i, j]] * gm_saved[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat[[i, j]];
                        dgamma[j] = dgamma[j] + g2[[i, j]] * xhat[[i, j]];
                        dbeta[j] = dbeta[j] + g2[[i, j]];
                    }
                    m1 = m1 / nc;
                    m2 = m2 / nc;
                    for j in 0..cols {
                        let dxh = g2[[i, j]] * gm_saved[j];
                        dx[[i, j]] = inv_std[i] * (dxh - m1 - xhat[[i, j]] * m2);
                    }
                }
                a.accum(&dx.into_dyn());
                gpar.accum(&dgamma.into_dyn());
                bpar.accum(&dbeta.into_dyn());
            }),
        )
    }

    /// Custom differentiable op: caller supplies the forward value and a
    /// closure mapping the output gradient to the input gradient.
    pub fn custom_unary(
        &self,
        data: ArrayD<T>,
        back: impl Fn(&ArrayD<T>) -> ArrayD<T> + 'static,
    ) -> Tensor<T> {
        let a = self.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| a.accum(&back(g))),
        )
    }
}

#[inline]
fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Split on sign to avoid exp overflow at large |x|.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Central-difference gradient of a scalar function, for checking analytic
/// backward passes. `eps` is the absolute step per coordinate.
pub fn finite_difference_grad<T: Scalar>(
    f: &mut impl FnMut(&[T]) -> T,
    point: &[T],
    eps: T,
) -> Vec<T> {
    let mut grad = vec![T::zero(); point.len()];
    let mut buf = point.to_vec();
    for i in 0..point.len() {
        let x0 = point[i];
        buf[i] = x0 + eps;
        let fp = f(&buf);
        buf[i] = x0 - eps;
        let fm = f(&buf);
        buf[i] = x0;
        grad[i] = (fp - fm) / (eps + eps);
    }
    grad
}

/// L2 relative error between two gradient vectors:
/// ||a - b|| / max(||a||, ||b||, tiny).
pub fn grad_rel_error<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    let mut na = T::zero();
    let mut nb = T::zero();
    let mut nd = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        na = na + x * x;
        nb = nb + y * y;
        let d = x - y;
        nd = nd + d * d;
    }
    let denom = na.sqrt().max(nb.sqrt()).max(lit::<T>(1e-12));
    nd.sqrt() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn leaf2(values: Array2<f64>) -> Tensor<f64> {
        Tensor::leaf(values.into_dyn(), true)
    }

    /// FD-checks the gradient of `build` with respect to a single 2-D leaf.
    fn check_grad_2d(
        rows: usize,
        cols: usize,
        point: &[f64],
        build: impl Fn(&Tensor<f64>) -> Tensor<f64>,
        tol: f64,
    ) {
        assert_eq!(point.len(), rows * cols);
        let make_loss = |vals: &[f64]| -> f64 {
            let x = Tensor::constant(
                Array2::from_shape_vec((rows, cols), vals.to_vec())
                    .unwrap()
                    .into_dyn(),
            );
            build(&x).item()
        };
        let x = leaf2(Array2::from_shape_vec((rows, cols), point.to_vec()).unwrap());
        let loss = build(&x);
        loss.backward();
        let analytic: Vec<f64> = x.grad().unwrap().iter().cloned().collect();
        let mut f = |p: &[f64]| make_loss(p);
        let fd = finite_difference_grad(&mut f, point, 1e-6);
        let err = grad_rel_error(&analytic, &fd);
        assert!(err < tol, "gradient mismatch: rel err {}", err);
    }

    #[test]
    fn elementwise_chain_gradients_match_fd() {
        let point: Vec<f64> = vec![0.3, -0.7, 1.2, 0.05, -1.4, 2.1];
        check_grad_2d(
            2,
            3,
            &point,
            |x| {
                x.silu()
                    .add(&x.tanh())
                    .mul(&x.sigmoid())
                    .add_scalar(0.5)
                    .mean_all()
            },
            1e-6,
        );
    }

    #[test]
    fn exp_ln_sqrt_gradients_match_fd() {
        let point: Vec<f64> = vec![0.4, 0.9, 1.7, 2.3];
        check_grad_2d(
            2,
            2,
            &point,
            |x| x.exp().ln().sqrt().sum_all(),
            1e-6,
        );
    }

    #[test]
    fn matmul_gradients_match_fd() {
        let point: Vec<f64> = vec![0.1, -0.2, 0.7, 1.1, -0.4, 0.3];
        let w = Array2::from_shape_vec((3, 2), vec![0.5, -1.0, 0.25, 0.75, -0.5, 1.5]).unwrap();
        check_grad_2d(
            2,
            3,
            &point,
            move |x| {
                let w = Tensor::constant2(w.clone());
                x.matmul(&w).mul(&x.matmul(&w)).mean_all()
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_gradient_matches_fd_with_mask() {
        let point: Vec<f64> = vec![0.2, -0.5, 1.3, 0.8, 0.0, -1.1];
        let mask = array![[true, true, false], [true, true, true]];
        let target = array![[0.2, 0.5, 0.0], [0.1, 0.6, 0.3]];
        check_grad_2d(
            2,
            3,
            &point,
            move |x| {
                let p = x.softmax_rows(Some(&mask));
                p.mse(&Tensor::constant2(target.clone()))
            },
            1e-6,
        );
        // Masked position carries exactly zero weight.
        let x = leaf2(Array2::from_shape_vec((2, 3), point.clone()).unwrap());
        let mask = array![[true, true, false], [true, true, true]];
        let p = x.softmax_rows(Some(&mask));
        assert_eq!(p.d2()[[0, 2]], 0.0);
        let row0: f64 = (0..3).map(|j| p.d2()[[0, j]]).sum();
        assert!((row0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradient_matches_fd() {
        let point: Vec<f64> = vec![0.3, -0.9, 0.4, 1.2, 2.0, -0.3, 0.7, 0.1];
        let gamma = array![1.1, 0.9, 1.3, 0.7];
        let beta = array![0.1, -0.2, 0.0, 0.3];
        // Gradient w.r.t. the input.
        check_grad_2d(
            2,
            4,
            &point,
            {
                let (gamma, beta) = (gamma.clone(), beta.clone());
                move |x| {
                    let g = Tensor::constant1(gamma.clone());
                    let b = Tensor::constant1(beta.clone());
                    x.layer_norm_rows(&g, &b, 1e-5).mul(&x).mean_all()
                }
            },
            1e-5,
        );
        // Gradient w.r.t. gamma and beta.
        let x_arr = Array2::from_shape_vec((2, 4), point).unwrap();
        let g_leaf = Tensor::leaf(gamma.clone().into_dyn(), true);
        let b_leaf = Tensor::leaf(beta.clone().into_dyn(), true);
        let x = Tensor::constant2(x_arr.clone());
        let loss = x.layer_norm_rows(&g_leaf, &b_leaf, 1e-5).mean_all();
        loss.backward();
        let ag: Vec<f64> = g_leaf.grad().unwrap().iter().cloned().collect();
        let ab: Vec<f64> = b_leaf.grad().unwrap().iter().cloned().collect();
        let gamma_pt: Vec<f64> = gamma.iter().cloned().collect();
        let mut fg = |p: &[f64]| {
            let g = Tensor::constant1(Array1::from_vec(p.to_vec()));
            let b = Tensor::constant1(beta.clone());
            Tensor::constant2(x_arr.clone())
                .layer_norm_rows(&g, &b, 1e-5)
                .mean_all()
                .item()
        };
        let fd_g = finite_difference_grad(&mut fg, &gamma_pt, 1e-6);
        assert!(grad_rel_error(&ag, &fd_g) < 1e-6);
        let beta_pt: Vec<f64> = beta.iter().cloned().collect();
        let mut fb = |p: &[f64]| {
            let g = Tensor::constant1(gamma.clone());
            let b = Tensor::constant1(Array1::from_vec(p.to_vec()));
            Tensor::constant2(x_arr.clone())
                .layer_norm_rows(&g, &b, 1e-5)
                .mean_all()
                .item()
        };
        let fd_b = finite_difference_grad(&mut fb, &beta_pt, 1e-6);
        assert!(grad_rel_error(&ab, &fd_b) < 1e-6);
    }

    #[test]
    fn concat_slice_broadcast_gradients_match_fd() {
        let point: Vec<f64> = vec![0.5, -0.25, 0.75, 1.25];
        check_grad_2d(
            2,
            2,
            &point,
            |x| {
                let top = x.slice_rows(0, 1);
                let both = Tensor::concat_rows(&[&top, x]);
                let row = both.sum_cols(); // 1-D of width 2
                row.broadcast_row(3).mul(&row.broadcast_row(3)).mean_all()
            },
            1e-6,
        );
    }

    #[test]
    fn diamond_reuse_accumulates_both_paths() {
        // loss = sum(x*x + x) => dloss/dx = 2x + 1.
        let x = leaf2(array![[1.5, -2.0]]);
        let loss = x.mul(&x).add(&x).sum_all();
        loss.backward();
        let g = x.grad().unwrap();
        assert!((g[[0, 0]] - 4.0).abs() < 1e-12);
        assert!((g[[0, 1]] - -3.0).abs() < 1e-12);
    }

    #[test]
    fn constants_get_no_gradient() {
        let x = leaf2(array![[1.0, 2.0]]);
        let c = Tensor::constant2(array![[3.0, 4.0]]);
        let loss = x.mul(&c).sum_all();
        loss.backward();
        assert!(c.grad().is_none());
        let g = x.grad().unwrap();
        assert_eq!(g[[0, 0]], 3.0);
        assert_eq!(g[[0, 1]], 4.0);
    }

    #[test]
    fn backward_twice_on_fresh_graphs_is_stable() {
        for _ in 0..2 {
            let x = leaf2(array![[0.5]]);
            let loss = x.silu().sum_all();
            loss.backward();
            let g = x.grad().unwrap();
            assert!(g[[0, 0]].is_finite());
        }
    }
}
