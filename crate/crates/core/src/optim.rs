//! AdamW with decoupled weight decay, optional global-norm gradient
//! clipping, and the two learning-rate schedules the pipeline uses.
//!
//! Updates walk parameters in store order with fixed-order reductions, so a
//! given (params, grads, step) triple always produces identical bytes.

use ndarray::ArrayD;

use crate::error::{CoreError, Result};
use crate::nn::ParamVec;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Maximum global gradient norm; None disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate to zero over `total_steps`.
    Cosine { total_steps: usize },
    /// Linear ramp to the base rate over `warmup_steps`, then a half-cosine
    /// to zero over the remaining steps.
    WarmupCosine {
        warmup_steps: usize,
        total_steps: usize,
    },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total_steps } => {
                let t = (step as f64 / (*total_steps).max(1) as f64).clamp(0.0, 1.0);
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::WarmupCosine {
                warmup_steps,
                total_steps,
            } => {
                if step < *warmup_steps {
                    return base * (step + 1) as f64 / *warmup_steps as f64;
                }
                let span = total_steps.saturating_sub(*warmup_steps).max(1);
                let t = ((step - warmup_steps) as f64 / span as f64).clamp(0.0, 1.0);
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug)]
pub struct AdamW<T: Scalar> {
    cfg: AdamWConfig,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    step: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamVec<T>, cfg: AdamWConfig) -> Self {
        let m = (0..params.len())
            .map(|i| ArrayD::zeros(params.value(i).shape().to_vec()))
            .collect();
        let v = (0..params.len())
            .map(|i| ArrayD::zeros(params.value(i).shape().to_vec()))
            .collect();
        AdamW {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update. `grads[i]` pairs with parameter i; `frozen(i)` exempts a
    /// parameter from this step entirely (no moment accumulation either).
    /// Clipping rescales by the global norm over non-frozen gradients.
    pub fn apply(
        &mut self,
        params: &mut ParamVec<T>,
        grads: &[Option<ArrayD<T>>],
        lr: f64,
        frozen: &dyn Fn(usize) -> bool,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let mut norm2 = 0.0f64;
        for (i, g) in grads.iter().enumerate() {
            if frozen(i) {
                continue;
            }
            if let Some(g) = g {
                for &x in g.iter() {
                    if !x.is_finite() {
                        return Err(CoreError::Numerical(format!(
                            "non-finite gradient for parameter {}",
                            params.name(i)
                        )));
                    }
                    norm2 += x.to_f64() * x.to_f64();
                }
            }
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm2.sqrt() > c => lit::<T>(c / norm2.sqrt()),
            _ => T::one(),
        };
        self.step += 1;
        let bc1 = T::one() - lit::<T>(self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::one() - lit::<T>(self.cfg.beta2.powi(self.step as i32));
        let b1 = lit::<T>(self.cfg.beta1);
        let b2 = lit::<T>(self.cfg.beta2);
        let eps = lit::<T>(self.cfg.eps);
        let lr_t = lit::<T>(lr);
        let wd = lit::<T>(self.cfg.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            if frozen(i) {
                continue;
            }
            let g = match g {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_mut(i);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &graw| {
                    let g = graw * scale;
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    // Decoupled decay: applied to the parameter, not the
                    // gradient.
                    *p = *p - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                });
        }
        Ok(())
    }
}
