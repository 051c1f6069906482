//! Model plumbing shared by the latent action model and the flow expert:
//! a named parameter store, linear/layer-norm/attention-block builders that
//! hold indices into that store, and frame patchification.
//!
//! Parameters live as plain arrays between steps. Each training step binds
//! them to fresh graph leaves, runs forward/backward, and hands the leaf
//! gradients to the optimizer; the store's insertion order fixes the update
//! order, which keeps training bit-reproducible.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, ArrayD};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct ParamEntry<T: Scalar> {
    name: String,
    value: ArrayD<T>,
}

/// Ordered, named parameter store.
#[derive(Debug, Clone)]
pub struct ParamVec<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamVec<T> {
    fn default() -> Self {
        ParamVec::new()
    }
}

impl<T: Scalar> ParamVec<T> {
    pub fn new() -> Self {
        ParamVec {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter; names must be unique.
    pub fn push(&mut self, name: &str, value: ArrayD<T>) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {}",
            name
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: usize) -> &ArrayD<T> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut ArrayD<T> {
        &mut self.entries[id].value
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Fresh differentiable leaves mirroring the store, one per parameter,
    /// in insertion order.
    pub fn bind(&self) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .map(|e| Tensor::leaf(e.value.clone(), true))
            .collect()
    }

    /// Like `bind` but without gradient tracking, for inference paths.
    pub fn bind_frozen(&self) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .map(|e| Tensor::leaf(e.value.clone(), false))
            .collect()
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.value.iter().all(|x| x.is_finite()))
    }

    /// Overwrites a parameter by name, checking the shape, for checkpoint
    /// restore.
    pub fn restore(&mut self, name: &str, value: ArrayD<T>) -> Result<()> {
        let id = self.id_by_name(name).ok_or_else(|| {
            CoreError::DataFormat(format!("checkpoint has unknown parameter {}", name))
        })?;
        if self.entries[id].value.shape() != value.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "parameter {}: stored shape {:?}, model expects {:?}",
                name,
                value.shape(),
                self.entries[id].value.shape()
            )));
        }
        self.entries[id].value = value;
        Ok(())
    }
}

/// Gaussian init scaled by 1/sqrt(fan_in).
fn linear_weight<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let scale = T::one() / lit::<T>((fan_in as f64).sqrt());
    Array2::from_shape_fn((fan_in, fan_out), |_| T::standard_normal(rng) * scale)
}

/// y = x W + b with W: (in, out).
#[derive(Debug, Clone, Copy)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

impl LinearIdx {
    pub fn init<T: Scalar>(
        pv: &mut ParamVec<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> LinearIdx {
        let w = pv.push(&format!("{}.w", name), linear_weight(fan_in, fan_out, rng).into_dyn());
        let b = pv.push(&format!("{}.b", name), Array1::<T>::zeros(fan_out).into_dyn());
        LinearIdx { w, b }
    }

    pub fn apply<T: Scalar>(&self, bound: &[Tensor<T>], x: &Tensor<T>) -> Tensor<T> {
        let rows = x.d2().nrows();
        x.matmul(&bound[self.w]).add(&bound[self.b].broadcast_row(rows))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormIdx {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNormIdx {
    pub fn init<T: Scalar>(pv: &mut ParamVec<T>, name: &str, dim: usize) -> LayerNormIdx {
        let gamma = pv.push(&format!("{}.gamma", name), Array1::<T>::ones(dim).into_dyn());
        let beta = pv.push(&format!("{}.beta", name), Array1::<T>::zeros(dim).into_dyn());
        LayerNormIdx { gamma, beta }
    }

    pub fn apply<T: Scalar>(&self, bound: &[Tensor<T>], x: &Tensor<T>) -> Tensor<T> {
        x.layer_norm_rows(&bound[self.gamma], &bound[self.beta], lit::<T>(LAYER_NORM_EPS))
    }
}

/// Pre-norm transformer block: single-head self-attention, then a silu MLP
/// with hidden size `mlp_ratio * d`, both with residual connections.
#[derive(Debug, Clone, Copy)]
pub struct BlockIdx {
    pub ln_attn: LayerNormIdx,
    pub wq: LinearIdx,
    pub wk: LinearIdx,
    pub wv: LinearIdx,
    pub wo: LinearIdx,
    pub ln_mlp: LayerNormIdx,
    pub mlp_in: LinearIdx,
    pub mlp_out: LinearIdx,
    pub d_model: usize,
}

pub const MLP_RATIO: usize = 2;

impl BlockIdx {
    pub fn init<T: Scalar>(
        pv: &mut ParamVec<T>,
        name: &str,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> BlockIdx {
        BlockIdx {
            ln_attn: LayerNormIdx::init(pv, &format!("{}.ln_attn", name), d_model),
            wq: LinearIdx::init(pv, &format!("{}.wq", name), d_model, d_model, rng),
            wk: LinearIdx::init(pv, &format!("{}.wk", name), d_model, d_model, rng),
            wv: LinearIdx::init(pv, &format!("{}.wv", name), d_model, d_model, rng),
            wo: LinearIdx::init(pv, &format!("{}.wo", name), d_model, d_model, rng),
            ln_mlp: LayerNormIdx::init(pv, &format!("{}.ln_mlp", name), d_model),
            mlp_in: LinearIdx::init(pv, &format!("{}.mlp_in", name), d_model, MLP_RATIO * d_model, rng),
            mlp_out: LinearIdx::init(pv, &format!("{}.mlp_out", name), MLP_RATIO * d_model, d_model, rng),
            d_model,
        }
    }

    /// `mask[i][j]` true means token i may attend to token j; None means
    /// full bidirectional attention.
    pub fn apply<T: Scalar>(
        &self,
        bound: &[Tensor<T>],
        x: &Tensor<T>,
        mask: Option<&Array2<bool>>,
    ) -> Tensor<T> {
        let h = self.ln_attn.apply(bound, x);
        let q = self.wq.apply(bound, &h);
        let k = self.wk.apply(bound, &h);
        let v = self.wv.apply(bound, &h);
        let scale = T::one() / lit::<T>((self.d_model as f64).sqrt());
        let scores = q.matmul(&k.transpose()).scale(scale);
        let attn = scores.softmax_rows(mask);
        let x = x.add(&self.wo.apply(bound, &attn.matmul(&v)));
        let h = self.ln_mlp.apply(bound, &x);
        x.add(&self.mlp_out.apply(bound, &self.mlp_in.apply(bound, &h).silu()))
    }
}

// ---- patchification ----

/// Token count for an H x W x C frame under square patches of side `p`.
pub fn patch_count(h: usize, w: usize, p: usize) -> usize {
    (h / p) * (w / p)
}

pub fn patch_dim(p: usize, channels: usize) -> usize {
    p * p * channels
}

/// Splits a frame into non-overlapping p x p patches, flattened row-major
/// (y, x, channel) into one token per patch; patches ordered row-major over
/// the patch grid. Frame dims must be divisible by p.
pub fn patchify<T: Scalar>(frame: &Array3<T>, p: usize) -> Result<Array2<T>> {
    let (h, w, c) = frame.dim();
    if h % p != 0 || w % p != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "frame {}x{} not divisible by patch {}",
            h, w, p
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::<T>::zeros((gh * gw, patch_dim(p, c)));
    for gy in 0..gh {
        for gx in 0..gw {
            let token = gy * gw + gx;
            let mut col = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        out[[token, col]] = frame[[gy * p + dy, gx * p + dx, ch]];
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of `patchify`.
pub fn unpatchify<T: Scalar>(
    tokens: &Array2<T>,
    h: usize,
    w: usize,
    c: usize,
    p: usize,
) -> Result<Array3<T>> {
    let (gh, gw) = (h / p, w / p);
    if tokens.dim() != (gh * gw, patch_dim(p, c)) {
        return Err(CoreError::ShapeMismatch(format!(
            "token matrix {:?} does not cover a {}x{}x{} frame at patch {}",
            tokens.dim(),
            h,
            w,
            c,
            p
        )));
    }
    let mut out = Array3::<T>::zeros((h, w, c));
    for gy in 0..gh {
        for gx in 0..gw {
            let token = gy * gw + gx;
            let mut col = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        out[[gy * p + dy, gx * p + dx, ch]] = tokens[[token, col]];
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sinusoidal features for a scalar in [0,1]: pairs of (sin, cos) at
/// geometrically spaced frequencies. `dim` must be even.
pub fn sinusoidal_features<T: Scalar>(t: f64, dim: usize) -> Array1<T> {
    assert!(dim % 2 == 0, "sinusoidal feature dim must be even");
    let half = dim / 2;
    let mut out = Array1::<T>::zeros(dim);
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let angle = 2.0 * std::f64::consts::PI * t * freq;
        out[2 * i] = T::from_f64(angle.sin());
        out[2 * i + 1] = T::from_f64(angle.cos());
    }
    out
}
