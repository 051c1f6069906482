//! The latent action model: a frame-pair encoder that emits an n x n
//! transition matrix, a quantizer over a learned codebook, an optional
//! projection onto the rotation group, and a conditional decoder that
//! predicts the second frame from the first plus the latent.
//!
//! Training consumes frame triplets. Each transition is reconstructed
//! one step ahead, and the two latents composed through the batch's
//! identity anchor must also reproduce the two-step future, which stops
//! the latent from simply memorizing the target frame's appearance.

use ndarray::{Array2, Array3, ArrayD, ArrayView2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::metrics::MetricsRow;
use crate::nn::{patch_count, patch_dim, patchify, unpatchify, BlockIdx, LayerNormIdx, LinearIdx, ParamVec};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::quantizer::{quantize_graph, soft_loss_graph};
use crate::rng::derived_rng;
use crate::rotation::{orthogonality_error, project_graph, RotationLatent};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::world::{FrameTriplet, TripletSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    /// Convex combination under a softmax posterior.
    Soft,
    /// Nearest codeword with a straight-through gradient and the usual
    /// codebook/commitment penalties.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LamConfig {
    /// Latent transition matrices are n x n.
    pub latent_n: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub patch: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub codebook_k: usize,
    /// Softmax temperature of the quantizer posterior.
    pub temperature: f64,
    pub quantizer: QuantizerKind,
    /// Project quantized latents onto the rotation group.
    pub project: bool,
    /// Train with the composed two-step reconstruction term.
    pub compose_loss: bool,
    /// Weight on the quantizer regularizer.
    pub lambda_soft: f64,
    /// Extra weight on per-sample posterior entropy inside the soft loss.
    pub lambda_entropy: f64,
    /// Skip the analytic projection gradient and pass gradients through
    /// unchanged (ablation switch).
    pub straight_through_projection: bool,
}

impl Default for LamConfig {
    fn default() -> Self {
        LamConfig {
            latent_n: 16,
            d_model: 48,
            blocks: 2,
            patch: 8,
            frame_height: 32,
            frame_width: 32,
            codebook_k: 64,
            temperature: 0.1,
            quantizer: QuantizerKind::Soft,
            project: true,
            compose_loss: true,
            lambda_soft: 1.0,
            lambda_entropy: 0.0,
            straight_through_projection: false,
        }
    }
}

impl LamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_n < 2 {
            return Err(CoreError::InvalidInput(
                "latent dimension must be at least 2".to_string(),
            ));
        }
        if self.frame_height % self.patch != 0 || self.frame_width % self.patch != 0 {
            return Err(CoreError::InvalidInput(format!(
                "frame {}x{} not divisible by patch {}",
                self.frame_height, self.frame_width, self.patch
            )));
        }
        if self.d_model < 4 || self.blocks == 0 || self.codebook_k == 0 {
            return Err(CoreError::InvalidInput(
                "model too small: need d_model >= 4, blocks >= 1, codebook_k >= 1".to_string(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(CoreError::InvalidInput(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.lambda_soft < 0.0 || self.lambda_entropy < 0.0 {
            return Err(CoreError::InvalidInput(
                "loss weights must be non-negative".to_string(),
            ));
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        patch_count(self.frame_height, self.frame_width, self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        patch_dim(self.patch, 3)
    }
}

#[derive(Debug, Clone)]
struct LamIndices {
    enc_embed: LinearIdx,
    enc_pos: usize,
    enc_frame_emb: usize,
    enc_blocks: Vec<BlockIdx>,
    enc_ln: LayerNormIdx,
    enc_head: LinearIdx,
    dec_embed: LinearIdx,
    dec_pos: usize,
    dec_latent_in: LinearIdx,
    dec_latent_pos: usize,
    dec_cond: LinearIdx,
    dec_blocks: Vec<BlockIdx>,
    dec_ln: LayerNormIdx,
    dec_out: LinearIdx,
    codebook: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletLossBreakdown<T: Scalar> {
    pub l_single: T,
    pub l_comp: T,
    pub l_soft: T,
    pub l_total: T,
}

impl<T: Scalar> TripletLossBreakdown<T> {
    /// l_total must be the sum of its parts; reconstruction terms cannot be
    /// negative.
    pub fn check(&self) -> Result<()> {
        let sum = self.l_single + self.l_comp + self.l_soft;
        let tol = lit::<T>(1e-6) * T::one().max(self.l_total.abs());
        if (sum - self.l_total).abs() > tol {
            return Err(CoreError::Numerical(format!(
                "loss breakdown does not add up: {} + {} + {} != {}",
                self.l_single, self.l_comp, self.l_soft, self.l_total
            )));
        }
        if self.l_single < T::zero() || self.l_comp < T::zero() {
            return Err(CoreError::Numerical(
                "reconstruction losses must be non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

struct QuantizeOut<T: Scalar> {
    /// The latent transition matrix, (n, n).
    latent: Tensor<T>,
    /// Soft posterior (1, K) when the quantizer is soft.
    posterior: Option<Tensor<T>>,
    /// Codebook + commitment penalty when the quantizer is hard.
    hard_penalty: Option<Tensor<T>>,
    /// Quantized row (1, n*n) before any projection.
    quantized_row: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LamModel<T: Scalar> {
    cfg: LamConfig,
    params: ParamVec<T>,
    idx: LamIndices,
    // Identity anchor from the most recent training batch; carried in
    // checkpoints so downstream stages can compose without re-anchoring.
    z_identity: Option<Array2<T>>,
}

impl<T: Scalar> LamModel<T> {
    pub fn new(cfg: &LamConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derived_rng(seed, "lam-init");
        let mut pv = ParamVec::new();
        let d = cfg.d_model;
        let tokens = cfg.tokens_per_frame();
        let pdim = cfg.patch_dim();
        let n = cfg.latent_n;
        let emb_scale = lit::<T>(0.02);

        let enc_embed = LinearIdx::init(&mut pv, "enc.embed", pdim, d, &mut rng);
        let enc_pos = pv.push(
            "enc.pos",
            Array2::from_shape_fn((tokens, d), |_| T::standard_normal(&mut rng) * emb_scale)
                .into_dyn(),
        );
        let enc_frame_emb = pv.push(
            "enc.frame_emb",
            Array2::from_shape_fn((3, d), |_| T::standard_normal(&mut rng) * emb_scale).into_dyn(),
        );
        let enc_blocks = (0..cfg.blocks)
            .map(|i| BlockIdx::init(&mut pv, &format!("enc.block{}", i), d, &mut rng))
            .collect();
        let enc_ln = LayerNormIdx::init(&mut pv, "enc.ln", d);
        let enc_head = LinearIdx::init(&mut pv, "enc.head", d, n * n, &mut rng);

        let dec_embed = LinearIdx::init(&mut pv, "dec.embed", pdim, d, &mut rng);
        let dec_pos = pv.push(
            "dec.pos",
            Array2::from_shape_fn((tokens, d), |_| T::standard_normal(&mut rng) * emb_scale)
                .into_dyn(),
        );
        let dec_latent_in = LinearIdx::init(&mut pv, "dec.latent_in", n, d, &mut rng);
        let dec_latent_pos = pv.push(
            "dec.latent_pos",
            Array2::from_shape_fn((n, d), |_| T::standard_normal(&mut rng) * emb_scale).into_dyn(),
        );
        let dec_cond = LinearIdx::init(&mut pv, "dec.cond", n * n, d, &mut rng);
        let dec_blocks = (0..cfg.blocks)
            .map(|i| BlockIdx::init(&mut pv, &format!("dec.block{}", i), d, &mut rng))
            .collect();
        let dec_ln = LayerNormIdx::init(&mut pv, "dec.ln", d);
        let dec_out = LinearIdx::init(&mut pv, "dec.out", d, pdim, &mut rng);

        // Per-coordinate std 1/n puts codeword norms near 1, the scale of
        // encoder outputs at init.
        let cb_scale = T::one() / lit::<T>(n as f64);
        let codebook = pv.push(
            "codebook",
            Array2::from_shape_fn((cfg.codebook_k, n * n), |_| T::standard_normal(&mut rng) * cb_scale)
                .into_dyn(),
        );

        Ok(LamModel {
            z_identity: None,
            cfg: cfg.clone(),
            params: pv,
            idx: LamIndices {
                enc_embed,
                enc_pos,
                enc_frame_emb,
                enc_blocks,
                enc_ln,
                enc_head,
                dec_embed,
                dec_pos,
                dec_latent_in,
                dec_latent_pos,
                dec_cond,
                dec_blocks,
                dec_ln,
                dec_out,
                codebook,
            },
        })
    }

    pub fn config(&self) -> &LamConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamVec<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVec<T> {
        &mut self.params
    }

    /// Identity anchor recorded by the most recent training run, if any.
    pub fn z_identity(&self) -> Option<&Array2<T>> {
        self.z_identity.as_ref()
    }

    pub fn set_z_identity(&mut self, z: Array2<T>) -> Result<()> {
        let n = self.cfg.latent_n;
        if z.dim() != (n, n) {
            return Err(CoreError::ShapeMismatch(format!(
                "identity anchor {:?}, model expects ({}, {})",
                z.dim(),
                n,
                n
            )));
        }
        self.z_identity = Some(z);
        Ok(())
    }

    fn check_frame(&self, frame: &Array3<T>) -> Result<()> {
        let want = (self.cfg.frame_height, self.cfg.frame_width, 3);
        if frame.dim() != want {
            return Err(CoreError::ShapeMismatch(format!(
                "frame {:?}, model expects {:?}",
                frame.dim(),
                want
            )));
        }
        Ok(())
    }

    fn frame_emb_row(&self, bound: &[Tensor<T>], which: usize, rows: usize) -> Tensor<T> {
        bound[self.idx.enc_frame_emb]
            .slice_rows(which, 1)
            .reshape(&[self.cfg.d_model])
            .broadcast_row(rows)
    }

    /// Joint encoding of a frame pair into the (1, n*n) pre-latent row.
    fn encode_graph(
        &self,
        bound: &[Tensor<T>],
        tokens_a: &Array2<T>,
        tokens_b: &Array2<T>,
    ) -> Tensor<T> {
        let rows = self.cfg.tokens_per_frame();
        let emb_a = self
            .idx
            .enc_embed
            .apply(bound, &Tensor::constant2(tokens_a.clone()))
            .add(&bound[self.idx.enc_pos])
            .add(&self.frame_emb_row(bound, 0, rows));
        let emb_b = self
            .idx
            .enc_embed
            .apply(bound, &Tensor::constant2(tokens_b.clone()))
            .add(&bound[self.idx.enc_pos])
            .add(&self.frame_emb_row(bound, 1, rows));
        // Third stream: the patchwise frame difference. Unchanged background
        // cancels there, so the tokens that matter for the action stand out
        // instead of being buried under shared scene content.
        let emb_d = self
            .idx
            .enc_embed
            .apply(bound, &Tensor::constant2(tokens_b - tokens_a))
            .add(&bound[self.idx.enc_pos])
            .add(&self.frame_emb_row(bound, 2, rows));
        let mut x = Tensor::concat_rows(&[&emb_a, &emb_b, &emb_d]);
        for block in &self.idx.enc_blocks {
            x = block.apply(bound, &x, None);
        }
        let x = self.idx.enc_ln.apply(bound, &x);
        let pooled = x
            .sum_cols()
            .scale(T::one() / lit::<T>(3.0 * rows as f64))
            .reshape(&[1, self.cfg.d_model]);
        // Head entries come off the pre-norm stack at unit scale, so the raw
        // row norm is about n. Scaling by 1/n sizes the pre-latent to the
        // unit-norm codeword cloud; a pre-latent far outside that cloud sees
        // near-equal distances to every codeword and the posterior softmax
        // starts in its flat regime, where the quantizer gradient is
        // stillborn.
        self.idx
            .enc_head
            .apply(bound, &pooled)
            .scale(T::one() / lit::<T>(self.cfg.latent_n as f64))
    }

    /// Quantization + optional rotation projection of a pre-latent row.
    fn quantize_pipeline(&self, bound: &[Tensor<T>], pre_row: &Tensor<T>) -> Result<QuantizeOut<T>> {
        let n = self.cfg.latent_n;
        let nn = n * n;
        let codebook = &bound[self.idx.codebook];
        let (quantized_row, posterior, hard_penalty) = match self.cfg.quantizer {
            QuantizerKind::Soft => {
                let pre_flat = pre_row.reshape(&[nn]);
                let (q, post) = quantize_graph(&pre_flat, codebook, lit::<T>(self.cfg.temperature));
                (q, Some(post), None)
            }
            QuantizerKind::Hard => {
                // Nearest codeword by euclidean distance, lowest index wins.
                let pre_data = pre_row.data().clone();
                let cb = codebook.d2().to_owned();
                let mut best = 0;
                let mut best_d = T::infinity();
                for i in 0..cb.nrows() {
                    let mut acc = T::zero();
                    for (j, &p) in pre_data.iter().enumerate() {
                        let d = p - cb[[i, j]];
                        acc = acc + d * d;
                    }
                    if acc < best_d {
                        best_d = acc;
                        best = i;
                    }
                }
                let c_row = codebook.slice_rows(best, 1);
                // Straight-through: forward value is the codeword, gradient
                // passes to the encoder unchanged.
                let jump = Tensor::constant(
                    (&c_row.data().clone() - &pre_data).into_shape_with_order(IxDyn(&[1, nn])).unwrap(),
                );
                let q = pre_row.add(&jump);
                let pre_const = Tensor::constant(pre_data.clone());
                let c_const = Tensor::constant(c_row.data().clone());
                let pull_codebook = c_row.sub(&pre_const);
                let pull_encoder = pre_row.sub(&c_const);
                let penalty = pull_codebook
                    .mul(&pull_codebook)
                    .sum_all()
                    .add(&pull_encoder.mul(&pull_encoder).sum_all().scale(lit::<T>(0.25)));
                (q, None, Some(penalty))
            }
        };
        let mat = quantized_row.reshape(&[n, n]);
        let latent = if self.cfg.project {
            project_graph(&mat, self.cfg.straight_through_projection)?
        } else {
            mat
        };
        Ok(QuantizeOut {
            latent,
            posterior,
            hard_penalty,
            quantized_row,
        })
    }

    /// Decodes base-frame tokens plus latent rows into predicted frame
    /// tokens in (0, 1).
    fn decode_graph(&self, bound: &[Tensor<T>], base_tokens: &Array2<T>, z: &Tensor<T>) -> Tensor<T> {
        let rows = self.cfg.tokens_per_frame();
        let n = self.cfg.latent_n;
        // The flattened latent is added into every base token. Latent rows
        // alone let attention learn to skip the latent entirely; the additive
        // path keeps the predicted frame coupled to z.
        let cond = self
            .idx
            .dec_cond
            .apply(bound, &z.reshape(&[1, n * n]))
            .reshape(&[self.cfg.d_model])
            .broadcast_row(rows);
        let base = self
            .idx
            .dec_embed
            .apply(bound, &Tensor::constant2(base_tokens.clone()))
            .add(&bound[self.idx.dec_pos])
            .add(&cond);
        let lat = self
            .idx
            .dec_latent_in
            .apply(bound, z)
            .add(&bound[self.idx.dec_latent_pos]);
        let mut x = Tensor::concat_rows(&[&base, &lat]);
        for block in &self.idx.dec_blocks {
            x = block.apply(bound, &x, None);
        }
        let frame_part = self.idx.dec_ln.apply(bound, &x.slice_rows(0, rows));
        self.idx.dec_out.apply(bound, &frame_part).sigmoid()
    }

    /// Mean of the batch's quantized identity-pair latents, projected when
    /// the config projects. Differentiable into encoder and codebook.
    fn batch_identity_graph(&self, bound: &[Tensor<T>], frames: &[&Array3<T>]) -> Result<Tensor<T>> {
        if frames.is_empty() {
            return Err(CoreError::InvalidInput(
                "identity anchor needs at least one frame".to_string(),
            ));
        }
        let n = self.cfg.latent_n;
        let mut acc: Option<Tensor<T>> = None;
        for f in frames {
            self.check_frame(f)?;
            let tokens = patchify(f, self.cfg.patch)?;
            let pre = self.encode_graph(bound, &tokens, &tokens);
            let q = self.quantize_pipeline_unprojected(bound, &pre)?;
            acc = Some(match acc {
                None => q,
                Some(a) => a.add(&q),
            });
        }
        let mean = acc
            .unwrap()
            .scale(T::one() / lit::<T>(frames.len() as f64))
            .reshape(&[n, n]);
        if self.cfg.project {
            project_graph(&mean, self.cfg.straight_through_projection)
        } else {
            Ok(mean)
        }
    }

    /// Quantized row without projection; the identity anchor averages
    /// before projecting.
    fn quantize_pipeline_unprojected(
        &self,
        bound: &[Tensor<T>],
        pre_row: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let saved = self.cfg.project;
        // Reuse the pipeline with projection disabled; cheap because the
        // flag only gates the final step.
        let out = if saved {
            let mut cfg = self.clone_shallow();
            cfg.cfg.project = false;
            cfg.quantize_pipeline(bound, pre_row)?
        } else {
            self.quantize_pipeline(bound, pre_row)?
        };
        Ok(out.quantized_row)
    }

    fn clone_shallow(&self) -> LamModel<T> {
        LamModel {
            cfg: self.cfg.clone(),
            params: ParamVec::new(),
            idx: self.idx.clone(),
            z_identity: None,
        }
    }

    // ---- pure (inference) entry points ----

    /// Raw n x n encoder output before quantization.
    pub fn encode_pre_latent(&self, a: &Array3<T>, b: &Array3<T>) -> Result<Array2<T>> {
        self.check_frame(a)?;
        self.check_frame(b)?;
        let bound = self.params.bind_frozen();
        let pre = self.encode_graph(&bound, &patchify(a, self.cfg.patch)?, &patchify(b, self.cfg.patch)?);
        let n = self.cfg.latent_n;
        Ok(pre.data().clone().into_shape_with_order((n, n)).unwrap())
    }

    /// The latent transition matrix the configured pipeline produces
    /// (quantized, projected when configured).
    pub fn transition_matrix(&self, a: &Array3<T>, b: &Array3<T>) -> Result<Array2<T>> {
        self.check_frame(a)?;
        self.check_frame(b)?;
        let bound = self.params.bind_frozen();
        let pre = self.encode_graph(&bound, &patchify(a, self.cfg.patch)?, &patchify(b, self.cfg.patch)?);
        let out = self.quantize_pipeline(&bound, &pre)?;
        let n = self.cfg.latent_n;
        Ok(out.latent.data().clone().into_shape_with_order((n, n)).unwrap())
    }

    /// Full extraction pipeline ending on the rotation group. Errors when
    /// the model was configured without projection.
    pub fn extract_latent(&self, a: &Array3<T>, b: &Array3<T>) -> Result<RotationLatent<T>> {
        if !self.cfg.project {
            return Err(CoreError::InvalidInput(
                "model configured without rotation projection; use transition_matrix".to_string(),
            ));
        }
        RotationLatent::try_new(self.transition_matrix(a, b)?)
    }

    /// Identity anchor over a set of frames: encode each frame against
    /// itself, quantize, average, then project when configured.
    pub fn identity_anchor(&self, frames: &[&Array3<T>]) -> Result<Array2<T>> {
        let bound = self.params.bind_frozen();
        let z = self.batch_identity_graph(&bound, frames)?;
        let n = self.cfg.latent_n;
        Ok(z.data().clone().into_shape_with_order((n, n)).unwrap())
    }

    /// Predicted next frame from a base frame and a latent matrix.
    pub fn decode_matrix(&self, base: &Array3<T>, z: &ArrayView2<T>) -> Result<Array3<T>> {
        self.check_frame(base)?;
        let n = self.cfg.latent_n;
        if z.dim() != (n, n) {
            return Err(CoreError::ShapeMismatch(format!(
                "latent {:?}, model expects ({}, {})",
                z.dim(),
                n,
                n
            )));
        }
        let bound = self.params.bind_frozen();
        let tokens = patchify(base, self.cfg.patch)?;
        let out = self.decode_graph(&bound, &tokens, &Tensor::constant2(z.to_owned()));
        unpatchify(
            &out.data().clone().into_shape_with_order(out.d2().dim()).unwrap(),
            self.cfg.frame_height,
            self.cfg.frame_width,
            3,
            self.cfg.patch,
        )
    }

    pub fn decode(&self, base: &Array3<T>, z: &RotationLatent<T>) -> Result<Array3<T>> {
        self.decode_matrix(base, &z.matrix().view())
    }

    /// Alias of `decode` with the second frame as base; the degeneration
    /// probe applies a transition's latent to the frame it arrived at.
    pub fn imagined_frame(&self, base: &Array3<T>, z: &RotationLatent<T>) -> Result<Array3<T>> {
        self.decode(base, z)
    }

    /// Loss on one triplet against a fixed identity anchor.
    pub fn triplet_loss(
        &self,
        t: &FrameTriplet<T>,
        z_identity: &ArrayView2<T>,
    ) -> Result<TripletLossBreakdown<T>> {
        let bound = self.params.bind_frozen();
        let z_id = Tensor::constant2(z_identity.to_owned());
        let (_, breakdown) = self.triplet_loss_graph(&bound, t, &z_id)?;
        Ok(breakdown)
    }

    /// Builds the full triplet loss graph. Returns the scalar loss tensor
    /// and the forward values of its components.
    fn triplet_loss_graph(
        &self,
        bound: &[Tensor<T>],
        t: &FrameTriplet<T>,
        z_identity: &Tensor<T>,
    ) -> Result<(Tensor<T>, TripletLossBreakdown<T>)> {
        for f in &t.frames {
            self.check_frame(f)?;
        }
        let tok: Vec<Array2<T>> = t
            .frames
            .iter()
            .map(|f| patchify(f, self.cfg.patch))
            .collect::<Result<_>>()?;

        let pre1 = self.encode_graph(bound, &tok[0], &tok[1]);
        let q1 = self.quantize_pipeline(bound, &pre1)?;
        let pre2 = self.encode_graph(bound, &tok[1], &tok[2]);
        let q2 = self.quantize_pipeline(bound, &pre2)?;

        let target1 = Tensor::constant2(tok[1].clone());
        let target2 = Tensor::constant2(tok[2].clone());
        let recon1 = self.decode_graph(bound, &tok[0], &q1.latent);
        let recon2 = self.decode_graph(bound, &tok[1], &q2.latent);
        // Token-space MSE equals pixel MSE: patchification is a bijection.
        let l_single = recon1.mse(&target1).add(&recon2.mse(&target2));

        let zero = || Tensor::constant(ArrayD::from_elem(IxDyn(&[]), T::zero()));
        let l_comp = if self.cfg.compose_loss {
            let z_comp = q2
                .latent
                .matmul(&z_identity.transpose())
                .matmul(&q1.latent);
            let recon_comp = self.decode_graph(bound, &tok[0], &z_comp);
            recon_comp.mse(&target2)
        } else {
            zero()
        };

        let l_soft = match self.cfg.quantizer {
            QuantizerKind::Soft => {
                let posts = [q1.posterior.unwrap(), q2.posterior.unwrap()];
                soft_loss_graph(&posts, lit::<T>(self.cfg.lambda_entropy))
                    .scale(lit::<T>(self.cfg.lambda_soft))
            }
            QuantizerKind::Hard => q1
                .hard_penalty
                .unwrap()
                .add(&q2.hard_penalty.unwrap())
                .scale(lit::<T>(self.cfg.lambda_soft)),
        };

        let l_total = l_single.add(&l_comp).add(&l_soft);
        let breakdown = TripletLossBreakdown {
            l_single: l_single.item(),
            l_comp: l_comp.item(),
            l_soft: l_soft.item(),
            l_total: l_total.item(),
        };
        Ok((l_total, breakdown))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LamTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Emit a metrics row every this many steps (first and last always).
    pub log_every: usize,
}

impl Default for LamTrainConfig {
    fn default() -> Self {
        LamTrainConfig {
            steps: 5000,
            batch: 8,
            lr: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            log_every: 1,
        }
    }
}

/// Trains the model in place. One optimizer step per batch of triplets,
/// constant learning rate, identity anchor recomputed from each batch's
/// first frames. Returns the metrics log. Aborts with a diagnostic when
/// the loss stops being finite.
pub fn train_lam<T: Scalar, S: TripletSource<T> + ?Sized>(
    model: &mut LamModel<T>,
    data: &S,
    tcfg: &LamTrainConfig,
) -> Result<Vec<MetricsRow>> {
    if data.is_empty() {
        return Err(CoreError::InvalidInput("empty training set".to_string()));
    }
    if tcfg.batch == 0 || tcfg.steps == 0 {
        return Err(CoreError::InvalidInput(
            "training needs batch >= 1 and steps >= 1".to_string(),
        ));
    }
    let mut rng = derived_rng(tcfg.seed, "lam-train");
    let mut opt = AdamW::new(
        model.params(),
        AdamWConfig {
            weight_decay: tcfg.weight_decay,
            clip_norm: None,
            ..AdamWConfig::default()
        },
    );
    let mut log = Vec::new();
    let inv_b = 1.0 / tcfg.batch as f64;
    for step in 0..tcfg.steps {
        let triplets: Vec<FrameTriplet<T>> = (0..tcfg.batch)
            .map(|_| data.get(rng.gen_range(0..data.len())))
            .collect::<Result<_>>()?;
        let bound = model.params.bind();
        let first_frames: Vec<&Array3<T>> = triplets.iter().map(|t| &t.frames[0]).collect();
        let z_id = model.batch_identity_graph(&bound, &first_frames)?;

        let mut loss_acc: Option<Tensor<T>> = None;
        let mut sums = [0.0f64; 4];
        for t in &triplets {
            let (loss, bd) = model.triplet_loss_graph(&bound, t, &z_id)?;
            bd.check()?;
            sums[0] += bd.l_single.to_f64() * inv_b;
            sums[1] += bd.l_comp.to_f64() * inv_b;
            sums[2] += bd.l_soft.to_f64() * inv_b;
            sums[3] += bd.l_total.to_f64() * inv_b;
            loss_acc = Some(match loss_acc {
                None => loss,
                Some(acc) => acc.add(&loss),
            });
        }
        let loss = loss_acc.unwrap().scale(lit::<T>(inv_b));
        let loss_val = loss.item().to_f64();
        if !loss_val.is_finite() {
            return Err(CoreError::Numerical(format!(
                "loss became non-finite at step {}: single {} comp {} soft {}",
                step, sums[0], sums[1], sums[2]
            )));
        }
        loss.backward();
        let grads: Vec<Option<ArrayD<T>>> = bound.iter().map(|t| t.grad()).collect();
        opt.apply(
            &mut model.params,
            &grads,
            LrSchedule::Constant.rate(tcfg.lr, step),
            &|_| false,
        )?;
        if step + 1 == tcfg.steps {
            let z = model.identity_anchor(&first_frames)?;
            model.z_identity = Some(z);
        }

        // Periodic sanity: projected latents must still look like rotations
        // and parameters must stay finite.
        if step % 100 == 0 {
            if !model.params.all_finite() {
                return Err(CoreError::Numerical(format!(
                    "parameters became non-finite after step {}",
                    step
                )));
            }
            if model.cfg.project {
                let z = model.transition_matrix(&triplets[0].frames[0], &triplets[0].frames[1])?;
                let err = orthogonality_error(&z.view()).to_f64();
                if err > 1e-3 {
                    return Err(CoreError::Numerical(format!(
                        "projected latent drifted off the rotation group at step {}: orthogonality error {}",
                        step, err
                    )));
                }
            }
        }
        if step % tcfg.log_every == 0 || step + 1 == tcfg.steps {
            log.push(
                MetricsRow::new(step as u64)
                    .set("l_single", sums[0])
                    .set("l_comp", sums[1])
                    .set("l_soft", sums[2])
                    .set("l_total", sums[3]),
            );
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, grad_rel_error};
    use crate::world::{generate_triplets, WorldConfig};

    fn tiny_cfg() -> LamConfig {
        LamConfig {
            latent_n: 4,
            d_model: 16,
            blocks: 1,
            patch: 16,
            codebook_k: 8,
            ..LamConfig::default()
        }
    }

    fn world_triplets<T: Scalar>(count: usize, seed: u64) -> Vec<FrameTriplet<T>> {
        generate_triplets(&WorldConfig::default(), seed, count).unwrap()
    }

    #[test]
    fn encode_and_decode_shapes_hold() {
        let model: LamModel<f32> = LamModel::new(&tiny_cfg(), 1).unwrap();
        let t = &world_triplets::<f32>(1, 2)[0];
        let pre = model.encode_pre_latent(&t.frames[0], &t.frames[1]).unwrap();
        assert_eq!(pre.dim(), (4, 4));
        let z = model.extract_latent(&t.frames[0], &t.frames[1]).unwrap();
        let out = model.decode(&t.frames[0], &z).unwrap();
        assert_eq!(out.dim(), (32, 32, 3));
        for &v in out.iter() {
            assert!(v > 0.0 && v < 1.0, "decoder output {} outside (0,1)", v);
        }
        // Determinism of the whole pipeline.
        let pre2 = model.encode_pre_latent(&t.frames[0], &t.frames[1]).unwrap();
        assert_eq!(pre, pre2);
        let out2 = model.decode(&t.frames[0], &z).unwrap();
        assert_eq!(out, out2);
    }

    #[test]
    fn latent_dimension_follows_config() {
        for n in [8usize, 16, 32] {
            let cfg = LamConfig {
                latent_n: n,
                d_model: 16,
                blocks: 1,
                patch: 16,
                codebook_k: 4,
                ..LamConfig::default()
            };
            let model: LamModel<f32> = LamModel::new(&cfg, 3).unwrap();
            let t = &world_triplets::<f32>(1, 5)[0];
            let pre = model.encode_pre_latent(&t.frames[0], &t.frames[1]).unwrap();
            assert_eq!(pre.dim(), (n, n));
        }
    }

    #[test]
    fn extracted_latents_are_rotations() {
        let model: LamModel<f64> = LamModel::new(&tiny_cfg(), 7).unwrap();
        for t in &world_triplets::<f64>(5, 11) {
            let z = model.extract_latent(&t.frames[0], &t.frames[1]).unwrap();
            // try_new validated orthogonality and determinant already; spot
            // check the error magnitude.
            assert!(orthogonality_error(&z.matrix().view()) < 1e-9);
        }
    }

    #[test]
    fn single_codeword_ignores_frames() {
        let cfg = LamConfig {
            codebook_k: 1,
            ..tiny_cfg()
        };
        let model: LamModel<f64> = LamModel::new(&cfg, 13).unwrap();
        let ts = world_triplets::<f64>(2, 17);
        let za = model.extract_latent(&ts[0].frames[0], &ts[0].frames[1]).unwrap();
        let zb = model.extract_latent(&ts[1].frames[1], &ts[1].frames[2]).unwrap();
        // Both collapse to the projection of the lone codeword.
        let cb = model.params.value(model.idx.codebook).clone();
        let n = cfg.latent_n;
        let word = cb.into_shape_with_order((n, n)).unwrap();
        let direct = crate::rotation::project_to_rotation(&crate::rotation::RawTransitionMatrix(word)).unwrap();
        for (a, b) in za.matrix().iter().zip(direct.matrix().iter()) {
            assert!((*a - *b).abs() < 1e-9);
        }
        for (a, b) in zb.matrix().iter().zip(direct.matrix().iter()) {
            assert!((*a - *b).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_breakdown_adds_up() {
        let model: LamModel<f32> = LamModel::new(&tiny_cfg(), 19).unwrap();
        let ts = world_triplets::<f32>(2, 23);
        let frames: Vec<&Array3<f32>> = ts.iter().map(|t| &t.frames[0]).collect();
        let z_id = model.identity_anchor(&frames).unwrap();
        for t in &ts {
            let bd = model.triplet_loss(t, &z_id.view()).unwrap();
            bd.check().unwrap();
            assert!(bd.l_single > 0.0);
            assert!(bd.l_comp > 0.0);
        }
    }

    #[test]
    fn compose_loss_flag_zeroes_the_term() {
        let cfg = LamConfig {
            compose_loss: false,
            ..tiny_cfg()
        };
        let model: LamModel<f32> = LamModel::new(&cfg, 29).unwrap();
        let ts = world_triplets::<f32>(1, 31);
        let z_id = model.identity_anchor(&[&ts[0].frames[0]]).unwrap();
        let bd = model.triplet_loss(&ts[0], &z_id.view()).unwrap();
        assert_eq!(bd.l_comp, 0.0);
        bd.check().unwrap();
    }

    #[test]
    fn hard_quantizer_snaps_to_codewords() {
        let cfg = LamConfig {
            quantizer: QuantizerKind::Hard,
            project: false,
            compose_loss: false,
            ..tiny_cfg()
        };
        let model: LamModel<f64> = LamModel::new(&cfg, 37).unwrap();
        let ts = world_triplets::<f64>(1, 41);
        let z = model.transition_matrix(&ts[0].frames[0], &ts[0].frames[1]).unwrap();
        let flat: Vec<f64> = z.iter().cloned().collect();
        let cb = model.params.value(model.idx.codebook).clone();
        let cb2 = cb.into_shape_with_order((cfg.codebook_k, 16)).unwrap();
        let matches = (0..cfg.codebook_k)
            .filter(|&i| {
                (0..16).all(|j| (cb2[[i, j]] - flat[j]).abs() < 1e-12)
            })
            .count();
        assert_eq!(matches, 1, "hard latent is not exactly one codeword");
        let bd = model
            .triplet_loss(&ts[0], &model.identity_anchor(&[&ts[0].frames[0]]).unwrap().view())
            .unwrap();
        assert!(bd.l_soft > 0.0, "commitment penalty should be positive");
    }

    #[test]
    fn triplet_loss_gradient_matches_finite_differences() {
        let cfg = LamConfig {
            latent_n: 3,
            d_model: 8,
            blocks: 1,
            patch: 16,
            codebook_k: 4,
            ..LamConfig::default()
        };
        let model: LamModel<f64> = LamModel::new(&cfg, 43).unwrap();
        let t = &world_triplets::<f64>(1, 47)[0];
        let z_id = model.identity_anchor(&[&t.frames[0]]).unwrap();
        // Ten entries of the encoder head weight.
        let head_w = model.idx.enc_head.w;
        let full: Vec<f64> = model.params.value(head_w).iter().cloned().collect();
        let slice_len = 10;

        let eval = |vals: &[f64], track: bool| {
            let mut bound = model.params.bind_frozen();
            let mut patched = full.clone();
            patched[..slice_len].copy_from_slice(vals);
            let shape = model.params.value(head_w).shape().to_vec();
            bound[head_w] = Tensor::leaf(ArrayD::from_shape_vec(shape, patched).unwrap(), track);
            let z = Tensor::constant2(z_id.clone());
            let (loss, _) = model.triplet_loss_graph(&bound, t, &z).unwrap();
            (bound, loss)
        };
        let point: Vec<f64> = full[..slice_len].to_vec();
        let (bound, loss) = eval(&point, true);
        loss.backward();
        let analytic: Vec<f64> = bound[head_w]
            .grad()
            .unwrap()
            .iter()
            .take(slice_len)
            .cloned()
            .collect();
        let mut f = |vals: &[f64]| eval(vals, false).1.item();
        let fd = finite_difference_grad(&mut f, &point, 1e-6);
        let err = grad_rel_error(&analytic, &fd);
        assert!(err < 1e-3, "triplet loss grad rel err {}", err);
    }

    #[test]
    fn anchor_gradient_reaches_encoder() {
        let model: LamModel<f64> = LamModel::new(&tiny_cfg(), 53).unwrap();
        let t = &world_triplets::<f64>(1, 59)[0];
        let bound = model.params.bind();
        let z_id = model.batch_identity_graph(&bound, &[&t.frames[0]]).unwrap();
        z_id.mul(&z_id).sum_all().backward();
        let g = bound[model.idx.enc_head.w].grad().unwrap();
        let norm: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0, "no gradient flowed through the identity anchor");
    }

    #[test]
    fn two_train_steps_are_reproducible_and_move_params() {
        let run = || {
            let mut model: LamModel<f32> = LamModel::new(&tiny_cfg(), 61).unwrap();
            let data = world_triplets::<f32>(6, 67);
            let log = train_lam(
                &mut model,
                &data,
                &LamTrainConfig {
                    steps: 2,
                    batch: 2,
                    ..LamTrainConfig::default()
                },
            )
            .unwrap();
            assert!(
                model.z_identity().is_some(),
                "training must leave an identity anchor behind"
            );
            (log, model.params.value(0).clone())
        };
        let (log_a, w_a) = run();
        let (log_b, w_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(w_a, w_b);
        let fresh: LamModel<f32> = LamModel::new(&tiny_cfg(), 61).unwrap();
        assert_ne!(fresh.params.value(0), &w_a, "training did not move parameters");
        assert!(log_a[0].get("l_total").unwrap() > 0.0);
    }

    #[test]
    fn shape_and_mode_errors_are_reported() {
        let model: LamModel<f32> = LamModel::new(&tiny_cfg(), 71).unwrap();
        let bad = Array3::<f32>::zeros((16, 16, 3));
        assert!(model.encode_pre_latent(&bad, &bad).is_err());
        let cfg = LamConfig {
            project: false,
            ..tiny_cfg()
        };
        let flat: LamModel<f32> = LamModel::new(&cfg, 73).unwrap();
        let t = &world_triplets::<f32>(1, 79)[0];
        let err = flat.extract_latent(&t.frames[0], &t.frames[1]).unwrap_err();
        assert_eq!(err.category(), "invalid-input");
        assert!(flat.transition_matrix(&t.frames[0], &t.frames[1]).is_ok());
    }
}
