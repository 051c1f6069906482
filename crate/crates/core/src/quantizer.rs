//! Soft vector quantization: a softmax posterior over a codebook driven by
//! euclidean distances, the convex-combination latent, and the KL-to-uniform
//! usage regularizer.
//!
//! Pure functions and graph builders share the same arithmetic (including the
//! epsilon inside the distance sqrt), so forward values agree between the
//! training path and the inference path.

use ndarray::{Array1, Array2, ArrayView1};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Keeps the distance sqrt differentiable when a pre-latent coincides with a
/// codeword; far below any tolerance used in tests.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Codebook<T: Scalar> {
    codewords: Array2<T>,
    temperature: T,
}

#[derive(Debug, Clone)]
pub struct QuantizerPosterior<T: Scalar> {
    weights: Array1<T>,
}

impl<T: Scalar> QuantizerPosterior<T> {
    /// Validates non-negativity and normalization (sum 1 within 1e-6).
    pub fn try_new(weights: Array1<T>) -> Result<Self> {
        if weights.is_empty() {
            return Err(CoreError::InvalidInput("empty posterior".to_string()));
        }
        let mut sum = T::zero();
        for w in weights.iter() {
            if !w.is_finite() || *w < T::zero() {
                return Err(CoreError::InvalidInput(format!(
                    "posterior weight {} is not a probability",
                    w
                )));
            }
            sum = sum + *w;
        }
        if (sum - T::one()).abs() > lit::<T>(1e-6) {
            return Err(CoreError::InvalidInput(format!(
                "posterior weights sum to {}",
                sum
            )));
        }
        Ok(QuantizerPosterior { weights })
    }

    pub fn weights(&self) -> &Array1<T> {
        &self.weights
    }

    pub fn max_weight(&self) -> T {
        self.weights
            .iter()
            .fold(T::zero(), |acc, &w| acc.max(w))
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> T {
        let mut h = T::zero();
        for &w in self.weights.iter() {
            if w > T::zero() {
                h = h - w * w.ln();
            }
        }
        h
    }
}

impl<T: Scalar> Codebook<T> {
    pub fn try_new(codewords: Array2<T>, temperature: T) -> Result<Self> {
        if codewords.nrows() < 1 {
            return Err(CoreError::InvalidInput(
                "codebook needs at least one codeword".to_string(),
            ));
        }
        if !(temperature > T::zero()) {
            return Err(CoreError::InvalidInput(format!(
                "quantizer temperature must be positive, got {}",
                temperature
            )));
        }
        if !codewords.iter().all(|x| x.is_finite()) {
            return Err(CoreError::InvalidInput(
                "codebook has non-finite codewords".to_string(),
            ));
        }
        Ok(Codebook {
            codewords,
            temperature,
        })
    }

    /// K codewords of dimension `dim`, i.i.d. Gaussian scaled by 1/sqrt(dim)
    /// so codeword norms sit near 1, matching pre-latent scale at init.
    pub fn init(k: usize, dim: usize, temperature: T, rng: &mut ChaCha8Rng) -> Result<Self> {
        let scale = T::one() / lit::<T>((dim as f64).sqrt());
        let codewords = Array2::from_shape_fn((k, dim), |_| T::standard_normal(rng) * scale);
        Codebook::try_new(codewords, temperature)
    }

    pub fn k(&self) -> usize {
        self.codewords.nrows()
    }

    pub fn dim(&self) -> usize {
        self.codewords.ncols()
    }

    pub fn codewords(&self) -> &Array2<T> {
        &self.codewords
    }

    pub fn codewords_mut(&mut self) -> &mut Array2<T> {
        &mut self.codewords
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    fn check_input(&self, pre_latent: &ArrayView1<T>) -> Result<()> {
        if pre_latent.len() != self.dim() {
            return Err(CoreError::ShapeMismatch(format!(
                "pre-latent dim {} vs codebook dim {}",
                pre_latent.len(),
                self.dim()
            )));
        }
        if !pre_latent.iter().all(|x| x.is_finite()) {
            return Err(CoreError::InvalidInput(
                "pre-latent has non-finite entries".to_string(),
            ));
        }
        Ok(())
    }

    fn distances(&self, pre_latent: &ArrayView1<T>) -> Array1<T> {
        let eps = lit::<T>(DIST_EPS);
        Array1::from_shape_fn(self.k(), |i| {
            let mut acc = T::zero();
            for j in 0..self.dim() {
                let d = pre_latent[j] - self.codewords[[i, j]];
                acc = acc + d * d;
            }
            (acc + eps).sqrt()
        })
    }

    /// softmax(-dist_i / T_q), max-subtracted for overflow safety.
    pub fn posterior(&self, pre_latent: &ArrayView1<T>) -> Result<QuantizerPosterior<T>> {
        self.check_input(pre_latent)?;
        let d = self.distances(pre_latent);
        let logits = d.mapv(|x| -x / self.temperature);
        let mx = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut w = logits.mapv(|x| (x - mx).exp());
        let denom = w.iter().fold(T::zero(), |a, &b| a + b);
        w.mapv_inplace(|x| x / denom);
        Ok(QuantizerPosterior { weights: w })
    }

    /// Convex combination of the codewords under the posterior.
    pub fn quantize(
        &self,
        pre_latent: &ArrayView1<T>,
    ) -> Result<(Array1<T>, QuantizerPosterior<T>)> {
        let post = self.posterior(pre_latent)?;
        let mut out = Array1::<T>::zeros(self.dim());
        for i in 0..self.k() {
            let w = post.weights[i];
            for j in 0..self.dim() {
                out[j] = out[j] + w * self.codewords[[i, j]];
            }
        }
        Ok((out, post))
    }

    /// Hard-VQ oracle: index of the nearest codeword, lowest index on ties.
    pub fn nearest(&self, pre_latent: &ArrayView1<T>) -> Result<usize> {
        self.check_input(pre_latent)?;
        let d = self.distances(pre_latent);
        let mut best = 0;
        for i in 1..d.len() {
            if d[i] < d[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// KL(mean posterior || uniform) = log K - H(mean posterior), plus
/// lambda_e * mean per-sample entropy. The aggregate term is exact for
/// one-hot inputs (0·log 0 handled explicitly).
pub fn soft_loss<T: Scalar>(
    posteriors: &[QuantizerPosterior<T>],
    lambda_e: T,
) -> Result<T> {
    if posteriors.is_empty() {
        return Err(CoreError::InvalidInput(
            "soft_loss needs a non-empty batch".to_string(),
        ));
    }
    let k = posteriors[0].weights.len();
    let inv_b = T::one() / lit::<T>(posteriors.len() as f64);
    let mut mean = Array1::<T>::zeros(k);
    let mut sample_entropy = T::zero();
    for p in posteriors {
        if p.weights.len() != k {
            return Err(CoreError::ShapeMismatch(
                "posteriors in batch have mixed sizes".to_string(),
            ));
        }
        mean.zip_mut_with(&p.weights, |a, &b| *a = *a + b * inv_b);
        sample_entropy = sample_entropy + p.entropy() * inv_b;
    }
    let log_k = lit::<T>((k as f64).ln());
    let mut neg_h = T::zero();
    for &m in mean.iter() {
        if m > T::zero() {
            neg_h = neg_h + m * m.ln();
        }
    }
    Ok(log_k + neg_h + lambda_e * sample_entropy)
}

// ---- graph builders (training path) ----

/// Posterior weights as a (1, K) graph tensor. `pre_latent` is 1-D of the
/// codebook dimension; `codewords` is the (K, D) parameter leaf.
pub fn posterior_graph<T: Scalar>(
    pre_latent: &Tensor<T>,
    codewords: &Tensor<T>,
    temperature: T,
) -> Tensor<T> {
    let k = codewords.d2().nrows();
    let diff = codewords.sub(&pre_latent.broadcast_row(k));
    let dist = diff
        .mul(&diff)
        .sum_rows()
        .add_scalar(lit::<T>(DIST_EPS))
        .sqrt();
    dist.scale(-T::one() / temperature)
        .reshape(&[1, k])
        .softmax_rows(None)
}

/// (quantized (1, D), posterior (1, K)) as graph tensors.
pub fn quantize_graph<T: Scalar>(
    pre_latent: &Tensor<T>,
    codewords: &Tensor<T>,
    temperature: T,
) -> (Tensor<T>, Tensor<T>) {
    let post = posterior_graph(pre_latent, codewords, temperature);
    let quantized = post.matmul(codewords);
    (quantized, post)
}

/// Graph version of `soft_loss` over stacked (1, K) posterior rows.
/// log(w + MIN_POSITIVE) keeps 0·log 0 finite without moving values at any
/// weight the tests can resolve.
pub fn soft_loss_graph<T: Scalar>(posteriors: &[Tensor<T>], lambda_e: T) -> Tensor<T> {
    assert!(!posteriors.is_empty(), "soft_loss_graph needs posteriors");
    let refs: Vec<&Tensor<T>> = posteriors.iter().collect();
    let stacked = Tensor::concat_rows(&refs);
    let b = stacked.d2().nrows();
    let k = stacked.d2().ncols();
    let tiny = T::min_positive_value();
    let mean = stacked.sum_cols().scale(T::one() / lit::<T>(b as f64));
    let agg = mean
        .mul(&mean.add_scalar(tiny).ln())
        .sum_all()
        .add_scalar(lit::<T>((k as f64).ln()));
    if lambda_e == T::zero() {
        return agg;
    }
    let per_sample = stacked
        .mul(&stacked.add_scalar(tiny).ln())
        .sum_all()
        .scale(-T::one() / lit::<T>(b as f64));
    agg.add(&per_sample.scale(lambda_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, grad_rel_error};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn toy_codebook(temperature: f64) -> Codebook<f64> {
        Codebook::try_new(
            array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]],
            temperature,
        )
        .unwrap()
    }

    #[test]
    fn equidistant_input_gives_uniform_posterior_and_mean_latent() {
        let cb = toy_codebook(0.1);
        let pre = array![0.0, 0.0];
        let (q, post) = cb.quantize(&pre.view()).unwrap();
        for w in post.weights().iter() {
            assert!((w - 0.25).abs() < 1e-9);
        }
        // Mean of the four unit codewords is the origin.
        assert!(q[0].abs() < 1e-12 && q[1].abs() < 1e-12);
    }

    #[test]
    fn single_codeword_posterior_is_one() {
        let cb = Codebook::try_new(array![[0.3_f64, -0.7, 2.0]], 0.5).unwrap();
        let pre = array![10.0, 0.0, -3.0];
        let (q, post) = cb.quantize(&pre.view()).unwrap();
        assert_eq!(post.weights().len(), 1);
        assert!((post.weights()[0] - 1.0).abs() < 1e-12);
        assert_eq!(q, array![0.3, -0.7, 2.0]);
    }

    #[test]
    fn cold_temperature_recovers_nearest_codeword() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let cb = Codebook::init(8, 6, 1e-4, &mut rng).unwrap();
            // Place the query near one codeword, far from the rest.
            let j = (rand::Rng::gen::<u32>(&mut rng) as usize) % 8;
            let mut pre = cb.codewords().row(j).to_owned();
            pre[0] += 5e-4;
            // Skip rare draws where another codeword sits close by.
            let near = cb
                .codewords()
                .rows()
                .into_iter()
                .enumerate()
                .filter(|(i, row)| {
                    let d: f64 = row
                        .iter()
                        .zip(pre.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    *i != j && d < 0.5
                })
                .count();
            if near > 0 {
                continue;
            }
            assert_eq!(cb.nearest(&pre.view()).unwrap(), j);
            let (q, post) = cb.quantize(&pre.view()).unwrap();
            assert!(post.weights()[j] > 0.999, "weight {}", post.weights()[j]);
            for (a, b) in q.iter().zip(cb.codewords().row(j).iter()) {
                assert!((a - b).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn max_weight_grows_as_temperature_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let words = Array2::from_shape_fn((16, 4), |_| f64::standard_normal(&mut rng));
            let pre = Array1::from_shape_fn(4, |_| f64::standard_normal(&mut rng));
            let mut last = 0.0;
            for t in [1.0, 0.1, 0.01] {
                let cb = Codebook::try_new(words.clone(), t).unwrap();
                let w = cb.posterior(&pre.view()).unwrap().max_weight();
                assert!(
                    w >= last - 1e-12,
                    "max weight fell from {} to {} at T={}",
                    last,
                    w,
                    t
                );
                last = w;
            }
        }
    }

    #[test]
    fn soft_loss_frozen_cases() {
        let uniform = QuantizerPosterior::try_new(Array1::from_elem(8, 0.125_f64)).unwrap();
        let loss = soft_loss(&vec![uniform; 5], 0.0).unwrap();
        assert!(loss.abs() < 1e-12);

        let mut hot = Array1::zeros(8);
        hot[3] = 1.0;
        let one_hot = QuantizerPosterior::try_new(hot).unwrap();
        let loss = soft_loss(&vec![one_hot; 4], 0.0).unwrap();
        assert!((loss - (8.0f64).ln()).abs() < 1e-9);

        let a = QuantizerPosterior::try_new(array![1.0_f64, 0.0]).unwrap();
        let b = QuantizerPosterior::try_new(array![0.0_f64, 1.0]).unwrap();
        let loss = soft_loss(&[a, b], 0.0).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn soft_loss_zero_only_at_uniform_aggregate() {
        let near = QuantizerPosterior::try_new(array![0.3, 0.7]).unwrap();
        let far = QuantizerPosterior::try_new(array![0.65, 0.35]).unwrap();
        // Aggregate (0.475, 0.525) is off uniform: loss strictly positive.
        let loss = soft_loss(&[near, far], 0.0).unwrap();
        assert!(loss > 1e-4);
    }

    #[test]
    fn lambda_e_adds_mean_sample_entropy() {
        let p = QuantizerPosterior::try_new(array![0.5, 0.5]).unwrap();
        let base = soft_loss(&vec![p.clone(); 3], 0.0).unwrap();
        let with = soft_loss(&vec![p; 3], 1.0).unwrap();
        assert!(((with - base) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn graph_forward_matches_pure_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cb = Codebook::init(16, 9, 0.1, &mut rng).unwrap();
        let pre = Array1::from_shape_fn(9, |_| f64::standard_normal(&mut rng));
        let (q_pure, post_pure) = cb.quantize(&pre.view()).unwrap();

        let pre_t = Tensor::constant1(pre);
        let words = Tensor::constant2(cb.codewords().clone());
        let (q_g, post_g) = quantize_graph(&pre_t, &words, 0.1);
        for (a, b) in q_g.data().iter().zip(q_pure.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in post_g.data().iter().zip(post_pure.weights().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn codeword_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let k = 6;
        let d = 5;
        let words0 = Array2::from_shape_fn((k, d), |_| f64::standard_normal(&mut rng));
        let pre = Array1::from_shape_fn(d, |_| f64::standard_normal(&mut rng));
        let target = Array1::from_shape_fn(d, |_| f64::standard_normal(&mut rng));

        // Loss = mse(quantize, target) + soft_loss(posterior): exercises both
        // codeword gradient paths at once.
        let build = |w: &Array2<f64>, track: bool| {
            let words = Tensor::leaf(w.clone().into_dyn(), track);
            let pre_t = Tensor::constant1(pre.clone());
            let (q, post) = quantize_graph(&pre_t, &words, 0.35);
            let mse = q.mse(&Tensor::constant2(
                target.clone().insert_axis(ndarray::Axis(0)),
            ));
            let loss = mse.add(&soft_loss_graph(&[post], 0.5));
            (words, loss)
        };
        let (words, loss) = build(&words0, true);
        loss.backward();
        let analytic: Vec<f64> = words.grad().unwrap().iter().cloned().collect();
        let point: Vec<f64> = words0.iter().cloned().collect();
        let mut f = |p: &[f64]| {
            let w = Array2::from_shape_vec((k, d), p.to_vec()).unwrap();
            build(&w, false).1.item()
        };
        let fd = finite_difference_grad(&mut f, &point, 1e-6);
        let err = grad_rel_error(&analytic, &fd);
        assert!(err < 1e-4, "codeword grad rel err {}", err);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cb = toy_codebook(0.1);
        let bad = array![f64::INFINITY, 0.0];
        assert!(cb.posterior(&bad.view()).is_err());
        let wrong_dim = array![1.0, 2.0, 3.0];
        assert!(cb.posterior(&wrong_dim.view()).is_err());
        assert!(Codebook::try_new(array![[1.0_f64]], 0.0).is_err());
        assert!(soft_loss::<f64>(&[], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn posterior_is_always_a_distribution(
            seed in 0u64..1000,
            scale in 0.01f64..100.0,
            t in 0.01f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::init(12, 7, t, &mut rng).unwrap();
            let pre = Array1::from_shape_fn(7, |_| f64::standard_normal(&mut rng) * scale);
            let post = cb.posterior(&pre.view()).unwrap();
            let sum: f64 = post.weights().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for &w in post.weights().iter() {
                prop_assert!((0.0..=1.0).contains(&w));
            }
        }
    }
}
