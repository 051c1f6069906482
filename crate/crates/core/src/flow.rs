//! Flow-matching action expert over two token groups: the latent
//! transition matrix laid out as n rows of n dims, and a robot action
//! chunk of N rows of d dims. A structured attention mask keeps
//! information flowing one way: context tokens see only context, latent
//! tokens see context and latent, robot tokens see everything.
//!
//! Stage boundaries: pretraining denoises latents alone conditioned on a
//! frame pair; finetuning denoises the joint (robot, latent) variable
//! conditioned on one frame plus a task embedding, with a planner-off
//! mode that drops the latent tokens entirely.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::lam::LamModel;
use crate::metrics::MetricsRow;
use crate::nn::{patchify, sinusoidal_features, BlockIdx, LayerNormIdx, LinearIdx, ParamVec};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::derived_rng;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::world::{FrameTriplet, TripletSource, WorldConfig, ACTION_CLASS_COUNT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Must match the latent model that supplies supervision targets.
    pub latent_n: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub patch: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Robot chunk horizon N.
    pub robot_horizon: usize,
    /// Robot action dimension per control step.
    pub robot_dim: usize,
    /// Task-id vocabulary for the finetune context.
    pub num_tasks: usize,
    pub w_latent: f64,
    pub w_robot: f64,
    /// Robot tokens attend causally within their own group instead of
    /// bidirectionally (group-level ordering is unchanged).
    pub token_causal_robot: bool,
    /// Euler integration steps used by the samplers.
    pub sample_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            latent_n: 16,
            d_model: 48,
            blocks: 2,
            patch: 8,
            frame_height: 32,
            frame_width: 32,
            robot_horizon: 8,
            robot_dim: 4,
            num_tasks: ACTION_CLASS_COUNT,
            w_latent: 1.0,
            w_robot: 1.0,
            token_causal_robot: false,
            sample_steps: 10,
        }
    }
}

impl FlowConfig {
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
        if self.robot_horizon == 0 || self.robot_dim == 0 {
            return Err(CoreError::InvalidInput(
                "robot chunk needs horizon >= 1 and dim >= 1".to_string(),
            ));
        }
        if self.d_model < 4 || self.blocks == 0 || self.num_tasks == 0 || self.sample_steps == 0 {
            return Err(CoreError::InvalidInput(
                "model too small: need d_model >= 4, blocks >= 1, num_tasks >= 1, sample_steps >= 1"
                    .to_string(),
            ));
        }
        if self.w_latent < 0.0 || self.w_robot < 0.0 {
            return Err(CoreError::InvalidInput(
                "loss weights must be non-negative".to_string(),
            ));
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        crate::nn::patch_count(self.frame_height, self.frame_width, self.patch)
    }
}

/// What the expert is conditioned on. Pretraining sees the frame pair the
/// latent was extracted from; finetuning sees the current frame plus a
/// task id standing in for an instruction.
#[derive(Debug, Clone, Copy)]
pub enum ContextSource<'a, T: Scalar> {
    FramePair {
        prev: &'a Array3<T>,
        next: &'a Array3<T>,
    },
    FrameTask {
        frame: &'a Array3<T>,
        task: usize,
    },
}

/// Robot action chunk: N control steps of d normalized world deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk<T: Scalar> {
    actions: Array2<T>,
}

impl<T: Scalar> ActionChunk<T> {
    pub fn try_new(actions: Array2<T>) -> Result<Self> {
        if actions.nrows() == 0 || actions.ncols() == 0 {
            return Err(CoreError::InvalidInput(
                "action chunk needs at least one step and one dimension".to_string(),
            ));
        }
        if actions.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidInput(
                "action chunk contains non-finite values".to_string(),
            ));
        }
        Ok(ActionChunk { actions })
    }

    pub fn actions(&self) -> &Array2<T> {
        &self.actions
    }

    pub fn horizon(&self) -> usize {
        self.actions.nrows()
    }
}

/// The jointly denoised variable: a robot chunk plus a latent laid out as
/// its own chunk of n rows.
#[derive(Debug, Clone, PartialEq)]
pub struct JointActionState<T: Scalar> {
    pub robot: Array2<T>,
    pub latent: Array2<T>,
}

/// A point on the linear path between noise and target.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState<T: Scalar> {
    pub value: Array2<T>,
    pub time: T,
}

/// value = t * target + (1 - t) * noise.
pub fn interpolate<T: Scalar>(
    target: &ArrayView2<T>,
    noise: &ArrayView2<T>,
    t: T,
) -> Result<FlowState<T>> {
    if target.dim() != noise.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "target {:?} vs noise {:?}",
            target.dim(),
            noise.dim()
        )));
    }
    if !(t >= T::zero() && t <= T::one()) {
        return Err(CoreError::InvalidInput(format!(
            "interpolation time must lie in [0, 1], got {}",
            t
        )));
    }
    let value = target.mapv(|v| v * t) + noise.mapv(|v| v * (T::one() - t));
    Ok(FlowState { value, time: t })
}

/// Group-level visibility rules, bidirectional inside each group.
pub fn build_attention_mask(n_ctx: usize, n_latent: usize, n_robot: usize) -> Array2<bool> {
    build_attention_mask_with(n_ctx, n_latent, n_robot, false)
}

/// `token_causal_robot` restricts robot tokens to earlier-or-equal robot
/// positions; their view of context and latent tokens is unchanged.
pub fn build_attention_mask_with(
    n_ctx: usize,
    n_latent: usize,
    n_robot: usize,
    token_causal_robot: bool,
) -> Array2<bool> {
    let total = n_ctx + n_latent + n_robot;
    Array2::from_shape_fn((total, total), |(i, j)| {
        if i < n_ctx {
            j < n_ctx
        } else if i < n_ctx + n_latent {
            j < n_ctx + n_latent
        } else if token_causal_robot {
            j < n_ctx + n_latent || j <= i
        } else {
            true
        }
    })
}

/// Fixed-step Euler integration of dx/dt = field(x, t) from t = 0 to 1.
/// The field sees t = k/steps for k in 0..steps. Errors when the state
/// stops being finite.
pub fn euler_integrate<T: Scalar>(
    init: Array1<T>,
    steps: usize,
    mut field: impl FnMut(&Array1<T>, T) -> Result<Array1<T>>,
) -> Result<Array1<T>> {
    assert!(steps >= 1, "integration needs at least one step");
    let dt = T::one() / lit::<T>(steps as f64);
    let mut x = init;
    for k in 0..steps {
        let t = lit::<T>(k as f64) * dt;
        let v = field(&x, t)?;
        if v.len() != x.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "velocity length {} vs state length {}",
                v.len(),
                x.len()
            )));
        }
        x = x + v.mapv(|u| u * dt);
        if x.iter().any(|u| !u.is_finite()) {
            return Err(CoreError::Numerical(format!(
                "integration state became non-finite at step {}",
                k
            )));
        }
    }
    Ok(x)
}

/// Per-component scale dividing raw world deltas so chunk entries are
/// order one: the config's per-micro-step maxima for translation and
/// rotation, and unity for the gripper channel.
pub fn action_chunk_normalizer(cfg: &WorldConfig) -> [f64; 4] {
    [
        cfg.translation_step.1,
        cfg.translation_step.1,
        cfg.rotation_step.1,
        1.0,
    ]
}

/// Lays a triplet's two per-micro-step actions into a horizon-N chunk:
/// the first transition's action fills the first k rows, the second
/// transition's action fills the rest.
pub fn robot_chunk<T: Scalar>(
    t: &FrameTriplet<T>,
    horizon: usize,
    normalizer: &[f64; 4],
) -> Result<ActionChunk<T>> {
    if normalizer.iter().any(|&s| !(s > 0.0)) {
        return Err(CoreError::InvalidInput(
            "chunk normalizer entries must be positive".to_string(),
        ));
    }
    let k = t.interval_k;
    let mut out = Array2::<T>::zeros((horizon, 4));
    for i in 0..horizon {
        let a = &t.actions[if i < k { 0 } else { 1 }];
        let raw = [
            a.delta_position[0],
            a.delta_position[1],
            a.delta_heading,
            a.delta_gripper,
        ];
        for (c, (&v, &s)) in raw.iter().zip(normalizer.iter()).enumerate() {
            out[[i, c]] = lit::<T>(v / s);
        }
    }
    ActionChunk::try_new(out)
}

#[derive(Debug, Clone)]
struct FlowIndices {
    ctx_embed: LinearIdx,
    ctx_pos: usize,
    ctx_frame_emb: usize,
    ctx_task_emb: usize,
    time_in: LinearIdx,
    time_out: LinearIdx,
    lat_in: LinearIdx,
    lat_pos: usize,
    lat_out: LinearIdx,
    rob_in: LinearIdx,
    rob_pos: usize,
    rob_out: LinearIdx,
    blocks: Vec<BlockIdx>,
    ln: LayerNormIdx,
}

#[derive(Debug, Clone)]
pub struct FlowModel<T: Scalar> {
    cfg: FlowConfig,
    params: ParamVec<T>,
    idx: FlowIndices,
}

impl<T: Scalar> FlowModel<T> {
    pub fn new(cfg: &FlowConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derived_rng(seed, "flow-init");
        let mut pv = ParamVec::new();
        let d = cfg.d_model;
        let tokens = cfg.tokens_per_frame();
        let pdim = crate::nn::patch_dim(cfg.patch, 3);
        let n = cfg.latent_n;
        let emb_scale = lit::<T>(0.02);
        let emb = |pv: &mut ParamVec<T>, name: &str, rows: usize, rng: &mut ChaCha8Rng| {
            pv.push(
                name,
                Array2::from_shape_fn((rows, d), |_| T::standard_normal(rng) * emb_scale)
                    .into_dyn(),
            )
        };

        let ctx_embed = LinearIdx::init(&mut pv, "ctx.embed", pdim, d, &mut rng);
        let ctx_pos = emb(&mut pv, "ctx.pos", tokens, &mut rng);
        let ctx_frame_emb = emb(&mut pv, "ctx.frame_emb", 2, &mut rng);
        let ctx_task_emb = emb(&mut pv, "ctx.task_emb", cfg.num_tasks, &mut rng);
        let time_in = LinearIdx::init(&mut pv, "time.in", d, d, &mut rng);
        let time_out = LinearIdx::init(&mut pv, "time.out", d, d, &mut rng);
        let lat_in = LinearIdx::init(&mut pv, "lat.in", n, d, &mut rng);
        let lat_pos = emb(&mut pv, "lat.pos", n, &mut rng);
        let lat_out = LinearIdx::init(&mut pv, "lat.out", d, n, &mut rng);
        let rob_in = LinearIdx::init(&mut pv, "rob.in", cfg.robot_dim, d, &mut rng);
        let rob_pos = emb(&mut pv, "rob.pos", cfg.robot_horizon, &mut rng);
        let rob_out = LinearIdx::init(&mut pv, "rob.out", d, cfg.robot_dim, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|i| BlockIdx::init(&mut pv, &format!("block{}", i), d, &mut rng))
            .collect();
        let ln = LayerNormIdx::init(&mut pv, "ln", d);

        Ok(FlowModel {
            cfg: cfg.clone(),
            params: pv,
            idx: FlowIndices {
                ctx_embed,
                ctx_pos,
                ctx_frame_emb,
                ctx_task_emb,
                time_in,
                time_out,
                lat_in,
                lat_pos,
                lat_out,
                rob_in,
                rob_pos,
                rob_out,
                blocks,
                ln,
            },
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamVec<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVec<T> {
        &mut self.params
    }

    /// The latent model must agree on latent dimension and frame shape to
    /// supply supervision targets.
    pub fn check_latent_model(&self, lam: &LamModel<T>) -> Result<()> {
        let lc = lam.config();
        if lc.latent_n != self.cfg.latent_n
            || lc.frame_height != self.cfg.frame_height
            || lc.frame_width != self.cfg.frame_width
        {
            return Err(CoreError::Config(format!(
                "incompatible latent model: n {} frame {}x{}, expert expects n {} frame {}x{}",
                lc.latent_n,
                lc.frame_height,
                lc.frame_width,
                self.cfg.latent_n,
                self.cfg.frame_height,
                self.cfg.frame_width
            )));
        }
        Ok(())
    }

    fn check_frame(&self, frame: &Array3<T>) -> Result<()> {
        let want = (self.cfg.frame_height, self.cfg.frame_width, 3);
        if frame.dim() != want {
            return Err(CoreError::ShapeMismatch(format!(
                "frame {:?}, expert expects {:?}",
                frame.dim(),
                want
            )));
        }
        Ok(())
    }

    fn frame_tokens(&self, bound: &[Tensor<T>], frame: &Array3<T>, which: usize) -> Result<Tensor<T>> {
        self.check_frame(frame)?;
        let rows = self.cfg.tokens_per_frame();
        let emb = self
            .idx
            .ctx_embed
            .apply(bound, &Tensor::constant2(patchify(frame, self.cfg.patch)?))
            .add(&bound[self.idx.ctx_pos])
            .add(
                &bound[self.idx.ctx_frame_emb]
                    .slice_rows(which, 1)
                    .reshape(&[self.cfg.d_model])
                    .broadcast_row(rows),
            );
        Ok(emb)
    }

    /// Context token block for either conditioning mode.
    fn context_graph(&self, bound: &[Tensor<T>], src: &ContextSource<T>) -> Result<Tensor<T>> {
        match src {
            ContextSource::FramePair { prev, next } => {
                let a = self.frame_tokens(bound, prev, 0)?;
                let b = self.frame_tokens(bound, next, 1)?;
                Ok(Tensor::concat_rows(&[&a, &b]))
            }
            ContextSource::FrameTask { frame, task } => {
                if *task >= self.cfg.num_tasks {
                    return Err(CoreError::InvalidInput(format!(
                        "task id {} out of range (vocabulary {})",
                        task, self.cfg.num_tasks
                    )));
                }
                let f = self.frame_tokens(bound, frame, 0)?;
                let t = bound[self.idx.ctx_task_emb].slice_rows(*task, 1);
                Ok(Tensor::concat_rows(&[&f, &t]))
            }
        }
    }

    fn time_embedding(&self, bound: &[Tensor<T>], tau: T) -> Tensor<T> {
        let feats = sinusoidal_features::<T>(tau.to_f64(), self.cfg.d_model);
        let row = Tensor::constant2(feats.insert_axis(ndarray::Axis(0)));
        let h = self.idx.time_in.apply(bound, &row).silu();
        self.idx.time_out.apply(bound, &h)
    }

    /// One evaluation of the velocity field. Either noised group may be
    /// absent; the mask adapts to whatever is present.
    fn velocity_graph(
        &self,
        bound: &[Tensor<T>],
        ctx: &Tensor<T>,
        x_latent: Option<&Tensor<T>>,
        x_robot: Option<&Tensor<T>>,
        tau: T,
    ) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
        assert!(
            x_latent.is_some() || x_robot.is_some(),
            "velocity field needs at least one noised group"
        );
        let n_ctx = ctx.d2().nrows();
        let n_lat = x_latent.map_or(0, |_| self.cfg.latent_n);
        let n_rob = x_robot.map_or(0, |_| self.cfg.robot_horizon);
        let d = self.cfg.d_model;
        let time = self.time_embedding(bound, tau).reshape(&[d]);

        let mut groups: Vec<Tensor<T>> = vec![ctx.clone()];
        if let Some(z) = x_latent {
            groups.push(
                self.idx
                    .lat_in
                    .apply(bound, z)
                    .add(&bound[self.idx.lat_pos])
                    .add(&time.broadcast_row(n_lat)),
            );
        }
        if let Some(a) = x_robot {
            groups.push(
                self.idx
                    .rob_in
                    .apply(bound, a)
                    .add(&bound[self.idx.rob_pos])
                    .add(&time.broadcast_row(n_rob)),
            );
        }
        let refs: Vec<&Tensor<T>> = groups.iter().collect();
        let mut x = Tensor::concat_rows(&refs);
        let mask =
            build_attention_mask_with(n_ctx, n_lat, n_rob, self.cfg.token_causal_robot);
        for block in &self.idx.blocks {
            x = block.apply(bound, &x, Some(&mask));
        }
        let x = self.idx.ln.apply(bound, &x);
        let v_lat = x_latent.map(|_| {
            self.idx
                .lat_out
                .apply(bound, &x.slice_rows(n_ctx, n_lat))
        });
        let v_rob = x_robot.map(|_| {
            self.idx
                .rob_out
                .apply(bound, &x.slice_rows(n_ctx + n_lat, n_rob))
        });
        (v_lat, v_rob)
    }

    /// Velocity-matching loss for the latent alone at a fixed time and
    /// noise draw: mean squared error over all latent entries.
    fn latent_loss_graph(
        &self,
        bound: &[Tensor<T>],
        z_target: &ArrayView2<T>,
        src: &ContextSource<T>,
        tau: T,
        noise: &ArrayView2<T>,
    ) -> Result<Tensor<T>> {
        let n = self.cfg.latent_n;
        if z_target.dim() != (n, n) {
            return Err(CoreError::ShapeMismatch(format!(
                "latent target {:?}, expert expects ({}, {})",
                z_target.dim(),
                n,
                n
            )));
        }
        let state = interpolate(z_target, noise, tau)?;
        let ctx = self.context_graph(bound, src)?;
        let (v_lat, _) =
            self.velocity_graph(bound, &ctx, Some(&Tensor::constant2(state.value)), None, tau);
        let target_v = Tensor::constant2(z_target.to_owned() - noise);
        Ok(v_lat.unwrap().mse(&target_v))
    }

    /// Joint velocity-matching loss at fixed time and noise: weighted
    /// squared errors over both groups, averaged over all entries of the
    /// joint variable. `None` robot parts drop the robot group entirely
    /// (the planner-off arm swaps roles: latent absent, robot present).
    fn joint_loss_graph(
        &self,
        bound: &[Tensor<T>],
        robot_target: Option<&ArrayView2<T>>,
        latent_target: Option<&ArrayView2<T>>,
        src: &ContextSource<T>,
        tau: T,
        robot_noise: Option<&ArrayView2<T>>,
        latent_noise: Option<&ArrayView2<T>>,
    ) -> Result<Tensor<T>> {
        let n = self.cfg.latent_n;
        let (nr, dr) = (self.cfg.robot_horizon, self.cfg.robot_dim);
        let mut denom = 0.0;
        let ctx = self.context_graph(bound, src)?;

        let lat_state = match (latent_target, latent_noise) {
            (Some(zt), Some(zn)) => {
                if zt.dim() != (n, n) {
                    return Err(CoreError::ShapeMismatch(format!(
                        "latent target {:?}, expert expects ({}, {})",
                        zt.dim(),
                        n,
                        n
                    )));
                }
                denom += (n * n) as f64;
                Some(Tensor::constant2(interpolate(zt, zn, tau)?.value))
            }
            (None, None) => None,
            _ => {
                return Err(CoreError::InvalidInput(
                    "latent target and noise must be given together".to_string(),
                ))
            }
        };
        let rob_state = match (robot_target, robot_noise) {
            (Some(at), Some(an)) => {
                if at.dim() != (nr, dr) {
                    return Err(CoreError::ShapeMismatch(format!(
                        "robot target {:?}, expert expects ({}, {})",
                        at.dim(),
                        nr,
                        dr
                    )));
                }
                denom += (nr * dr) as f64;
                Some(Tensor::constant2(interpolate(at, an, tau)?.value))
            }
            (None, None) => None,
            _ => {
                return Err(CoreError::InvalidInput(
                    "robot target and noise must be given together".to_string(),
                ))
            }
        };
        if lat_state.is_none() && rob_state.is_none() {
            return Err(CoreError::InvalidInput(
                "joint loss needs at least one group".to_string(),
            ));
        }

        let (v_lat, v_rob) =
            self.velocity_graph(bound, &ctx, lat_state.as_ref(), rob_state.as_ref(), tau);
        let mut acc: Option<Tensor<T>> = None;
        let add = |acc: &mut Option<Tensor<T>>, term: Tensor<T>| {
            *acc = Some(match acc.take() {
                None => term,
                Some(a) => a.add(&term),
            });
        };
        if let (Some(v), Some(zt), Some(zn)) = (v_lat, latent_target, latent_noise) {
            let diff = v.sub(&Tensor::constant2(zt.to_owned() - zn));
            add(
                &mut acc,
                diff.mul(&diff).sum_all().scale(lit::<T>(self.cfg.w_latent)),
            );
        }
        if let (Some(v), Some(at), Some(an)) = (v_rob, robot_target, robot_noise) {
            let diff = v.sub(&Tensor::constant2(at.to_owned() - an));
            add(
                &mut acc,
                diff.mul(&diff).sum_all().scale(lit::<T>(self.cfg.w_robot)),
            );
        }
        Ok(acc.unwrap().scale(lit::<T>(1.0 / denom)))
    }

    // ---- pure (inference) entry points ----

    /// Latent flow-matching loss with freshly drawn time and noise.
    pub fn latent_fm_loss(
        &self,
        z_target: &ArrayView2<T>,
        src: &ContextSource<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<T> {
        let bound = self.params.bind_frozen();
        let n = self.cfg.latent_n;
        let tau = T::uniform_01(rng);
        let noise = Array2::from_shape_fn((n, n), |_| T::standard_normal(rng));
        let loss = self.latent_loss_graph(&bound, z_target, src, tau, &noise.view())?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(CoreError::Numerical("flow loss is non-finite".to_string()));
        }
        Ok(v)
    }

    /// Joint flow-matching loss with freshly drawn shared time and noise.
    pub fn joint_fm_loss(
        &self,
        x_target: &JointActionState<T>,
        src: &ContextSource<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<T> {
        let bound = self.params.bind_frozen();
        let n = self.cfg.latent_n;
        let (nr, dr) = (self.cfg.robot_horizon, self.cfg.robot_dim);
        let tau = T::uniform_01(rng);
        let zn = Array2::from_shape_fn((n, n), |_| T::standard_normal(rng));
        let an = Array2::from_shape_fn((nr, dr), |_| T::standard_normal(rng));
        let loss = self.joint_loss_graph(
            &bound,
            Some(&x_target.robot.view()),
            Some(&x_target.latent.view()),
            src,
            tau,
            Some(&an.view()),
            Some(&zn.view()),
        )?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(CoreError::Numerical("flow loss is non-finite".to_string()));
        }
        Ok(v)
    }

    /// Euler-integrates the latent group alone from Gaussian noise.
    pub fn sample_latent(
        &self,
        src: &ContextSource<T>,
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<T>> {
        let n = self.cfg.latent_n;
        let bound = self.params.bind_frozen();
        let ctx = self.context_graph(&bound, src)?;
        let init = Array1::from_shape_fn(n * n, |_| T::standard_normal(rng));
        let out = euler_integrate(init, steps, |x, t| {
            let z = x.clone().into_shape_with_order((n, n)).unwrap();
            let (v, _) = self.velocity_graph(&bound, &ctx, Some(&Tensor::constant2(z)), None, t);
            Ok(v.unwrap()
                .data()
                .iter()
                .cloned()
                .collect::<Array1<T>>())
        })?;
        Ok(out.into_shape_with_order((n, n)).unwrap())
    }

    /// Euler-integrates robot actions, jointly with the latent group when
    /// `with_planner` is set. Returns the sampled chunk in normalized
    /// units plus the latent when it was denoised alongside.
    pub fn sample_actions(
        &self,
        src: &ContextSource<T>,
        steps: usize,
        rng: &mut ChaCha8Rng,
        with_planner: bool,
    ) -> Result<(Array2<T>, Option<Array2<T>>)> {
        let n = self.cfg.latent_n;
        let (nr, dr) = (self.cfg.robot_horizon, self.cfg.robot_dim);
        let rob_len = nr * dr;
        let lat_len = if with_planner { n * n } else { 0 };
        let bound = self.params.bind_frozen();
        let ctx = self.context_graph(&bound, src)?;
        let init = Array1::from_shape_fn(lat_len + rob_len, |_| T::standard_normal(rng));
        let out = euler_integrate(init, steps, |x, t| {
            let z = with_planner.then(|| {
                Tensor::constant2(
                    x.slice(ndarray::s![..lat_len])
                        .to_owned()
                        .into_shape_with_order((n, n))
                        .unwrap(),
                )
            });
            let a = Tensor::constant2(
                x.slice(ndarray::s![lat_len..])
                    .to_owned()
                    .into_shape_with_order((nr, dr))
                    .unwrap(),
            );
            let (v_lat, v_rob) = self.velocity_graph(&bound, &ctx, z.as_ref(), Some(&a), t);
            let mut v = Vec::with_capacity(lat_len + rob_len);
            if let Some(vz) = v_lat {
                v.extend(vz.data().iter().cloned());
            }
            v.extend(v_rob.unwrap().data().iter().cloned());
            Ok(Array1::from_vec(v))
        })?;
        let robot = out
            .slice(ndarray::s![lat_len..])
            .to_owned()
            .into_shape_with_order((nr, dr))
            .unwrap();
        let latent = with_planner.then(|| {
            out.slice(ndarray::s![..lat_len])
                .to_owned()
                .into_shape_with_order((n, n))
                .unwrap()
        });
        Ok((robot, latent))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Fraction of steps during which the context embeddings stay frozen
    /// and the learning rate ramps up linearly.
    pub warmup_frac: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            steps: 5000,
            batch: 8,
            lr: 1e-4,
            weight_decay: 0.001,
            clip_norm: 1.0,
            warmup_frac: 0.05,
            seed: 0,
            log_every: 1,
        }
    }
}

impl FlowTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(CoreError::InvalidInput(
                "training needs batch >= 1 and steps >= 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(CoreError::InvalidInput(format!(
                "warmup fraction must lie in [0, 1), got {}",
                self.warmup_frac
            )));
        }
        Ok(())
    }

    fn warmup_steps(&self) -> usize {
        (self.steps as f64 * self.warmup_frac).ceil() as usize
    }
}

struct TrainDriver<T: Scalar> {
    opt: AdamW<T>,
    schedule: LrSchedule,
    warmup_steps: usize,
    ctx_param: Vec<bool>,
}

impl<T: Scalar> TrainDriver<T> {
    fn new(model: &FlowModel<T>, tcfg: &FlowTrainConfig) -> Self {
        let ctx_param = (0..model.params.len())
            .map(|i| model.params.name(i).starts_with("ctx."))
            .collect();
        TrainDriver {
            opt: AdamW::new(
                &model.params,
                AdamWConfig {
                    weight_decay: tcfg.weight_decay,
                    clip_norm: Some(tcfg.clip_norm),
                    ..AdamWConfig::default()
                },
            ),
            schedule: LrSchedule::WarmupCosine {
                warmup_steps: tcfg.warmup_steps(),
                total_steps: tcfg.steps,
            },
            warmup_steps: tcfg.warmup_steps(),
            ctx_param,
        }
    }

    fn step(
        &mut self,
        model: &mut FlowModel<T>,
        bound: &[Tensor<T>],
        loss: &Tensor<T>,
        step: usize,
        lr: f64,
    ) -> Result<()> {
        loss.backward();
        let grads: Vec<Option<ArrayD<T>>> = bound.iter().map(|t| t.grad()).collect();
        let freeze_ctx = step < self.warmup_steps;
        let ctx_param = &self.ctx_param;
        self.opt.apply(
            &mut model.params,
            &grads,
            self.schedule.rate(lr, step),
            &|i| freeze_ctx && ctx_param[i],
        )?;
        if step % 100 == 0 && !model.params.all_finite() {
            return Err(CoreError::Numerical(format!(
                "parameters became non-finite after step {}",
                step
            )));
        }
        Ok(())
    }
}

/// Latent-only training against targets extracted by a frozen latent
/// model. Each triplet supervises its first transition, so a one-triplet
/// dataset trains a single fixed (context, target) pair.
pub fn pretrain_vla<T: Scalar, S: TripletSource<T> + ?Sized>(
    model: &mut FlowModel<T>,
    lam: &LamModel<T>,
    data: &S,
    tcfg: &FlowTrainConfig,
) -> Result<Vec<MetricsRow>> {
    tcfg.validate()?;
    model.check_latent_model(lam)?;
    if data.is_empty() {
        return Err(CoreError::InvalidInput("empty training set".to_string()));
    }
    let n = model.cfg.latent_n;
    let mut rng = derived_rng(tcfg.seed, "vla-pretrain");
    let mut driver = TrainDriver::new(model, tcfg);
    let mut log = Vec::new();
    // Latent targets are a pure function of the dataset index (the latent
    // model is frozen), so they are extracted once per index.
    let mut z_cache: HashMap<usize, Array2<T>> = HashMap::new();
    for step in 0..tcfg.steps {
        let bound = model.params.bind();
        let mut loss_acc: Option<Tensor<T>> = None;
        for _ in 0..tcfg.batch {
            let idx = rng.gen_range(0..data.len());
            let t = data.get(idx)?;
            let z_target = match z_cache.entry(idx) {
                Entry::Occupied(e) => e.get().clone(),
                Entry::Vacant(e) => e
                    .insert(lam.transition_matrix(&t.frames[0], &t.frames[1])?)
                    .clone(),
            };
            let src = ContextSource::FramePair {
                prev: &t.frames[0],
                next: &t.frames[1],
            };
            let tau = T::uniform_01(&mut rng);
            let noise = Array2::from_shape_fn((n, n), |_| T::standard_normal(&mut rng));
            let loss =
                model.latent_loss_graph(&bound, &z_target.view(), &src, tau, &noise.view())?;
            loss_acc = Some(match loss_acc {
                None => loss,
                Some(acc) => acc.add(&loss),
            });
        }
        let loss = loss_acc.unwrap().scale(lit::<T>(1.0 / tcfg.batch as f64));
        let l_fm = loss.item().to_f64();
        if !l_fm.is_finite() {
            return Err(CoreError::Numerical(format!(
                "loss became non-finite at step {}",
                step
            )));
        }
        driver.step(model, &bound, &loss, step, tcfg.lr)?;
        if step % tcfg.log_every == 0 || step + 1 == tcfg.steps {
            log.push(MetricsRow::new(step as u64).set("l_fm", l_fm));
        }
    }
    Ok(log)
}

/// Joint training of robot chunks and latents (or robot chunks alone when
/// `with_planner` is false). The task id conditioning is the first
/// transition's class; the latent target is the first transition's latent
/// from the frozen latent model.
pub fn finetune<T: Scalar, S: TripletSource<T> + ?Sized>(
    model: &mut FlowModel<T>,
    lam: &LamModel<T>,
    data: &S,
    world: &WorldConfig,
    tcfg: &FlowTrainConfig,
    with_planner: bool,
) -> Result<Vec<MetricsRow>> {
    tcfg.validate()?;
    model.check_latent_model(lam)?;
    if data.is_empty() {
        return Err(CoreError::InvalidInput("empty training set".to_string()));
    }
    if model.cfg.robot_dim != 4 {
        return Err(CoreError::Config(format!(
            "world chunks carry 4 components per step, expert expects {}",
            model.cfg.robot_dim
        )));
    }
    let n = model.cfg.latent_n;
    let (nr, dr) = (model.cfg.robot_horizon, model.cfg.robot_dim);
    let normalizer = action_chunk_normalizer(world);
    let mut rng = derived_rng(tcfg.seed, "vla-finetune");
    let mut driver = TrainDriver::new(model, tcfg);
    let mut log = Vec::new();
    let mut z_cache: HashMap<usize, Array2<T>> = HashMap::new();
    for step in 0..tcfg.steps {
        let bound = model.params.bind();
        let mut loss_acc: Option<Tensor<T>> = None;
        for _ in 0..tcfg.batch {
            let idx = rng.gen_range(0..data.len());
            let t = data.get(idx)?;
            let chunk = robot_chunk(&t, nr, &normalizer)?;
            let src = ContextSource::FrameTask {
                frame: &t.frames[0],
                task: t.actions[0].class_label.index(),
            };
            let tau = T::uniform_01(&mut rng);
            let an = Array2::from_shape_fn((nr, dr), |_| T::standard_normal(&mut rng));
            let loss = if with_planner {
                let z_target = match z_cache.entry(idx) {
                    Entry::Occupied(e) => e.get().clone(),
                    Entry::Vacant(e) => e
                        .insert(lam.transition_matrix(&t.frames[0], &t.frames[1])?)
                        .clone(),
                };
                let zn = Array2::from_shape_fn((n, n), |_| T::standard_normal(&mut rng));
                model.joint_loss_graph(
                    &bound,
                    Some(&chunk.actions().view()),
                    Some(&z_target.view()),
                    &src,
                    tau,
                    Some(&an.view()),
                    Some(&zn.view()),
                )?
            } else {
                model.joint_loss_graph(
                    &bound,
                    Some(&chunk.actions().view()),
                    None,
                    &src,
                    tau,
                    Some(&an.view()),
                    None,
                )?
            };
            loss_acc = Some(match loss_acc {
                None => loss,
                Some(acc) => acc.add(&loss),
            });
        }
        let loss = loss_acc.unwrap().scale(lit::<T>(1.0 / tcfg.batch as f64));
        let l_fm = loss.item().to_f64();
        if !l_fm.is_finite() {
            return Err(CoreError::Numerical(format!(
                "loss became non-finite at step {}",
                step
            )));
        }
        driver.step(model, &bound, &loss, step, tcfg.lr)?;
        if step % tcfg.log_every == 0 || step + 1 == tcfg.steps {
            log.push(MetricsRow::new(step as u64).set("l_fm", l_fm));
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lam::{LamConfig, LamModel};
    use crate::tensor::{finite_difference_grad, grad_rel_error};
    use crate::world::generate_triplets;
    use ndarray::array;

    fn tiny_flow() -> FlowConfig {
        FlowConfig {
            latent_n: 4,
            d_model: 16,
            blocks: 1,
            patch: 16,
            ..FlowConfig::default()
        }
    }

    fn tiny_lam() -> LamConfig {
        LamConfig {
            latent_n: 4,
            d_model: 16,
            blocks: 1,
            patch: 16,
            codebook_k: 8,
            ..LamConfig::default()
        }
    }

    #[test]
    fn interpolate_hits_endpoints_and_midpoint() {
        let target = array![[2.0_f64, 4.0], [6.0, 8.0]];
        let noise = array![[1.0_f64, 2.0], [3.0, 4.0]];
        let at_0 = interpolate(&target.view(), &noise.view(), 0.0).unwrap();
        assert_eq!(at_0.value, noise);
        let at_1 = interpolate(&target.view(), &noise.view(), 1.0).unwrap();
        assert_eq!(at_1.value, target);
        // target = 2 * noise, so the midpoint is 1.5 * noise.
        let mid = interpolate(&target.view(), &noise.view(), 0.5).unwrap();
        assert_eq!(mid.value, noise.mapv(|v| 1.5 * v));
        assert!(interpolate(&target.view(), &noise.view(), 1.5).is_err());
        assert!(interpolate(&target.view(), &noise.view(), -0.1).is_err());
        let bad = Array2::<f64>::zeros((3, 2));
        assert!(interpolate(&target.view(), &bad.view(), 0.5).is_err());
    }

    #[test]
    fn mask_matches_hand_enumerated_table() {
        // Layout: 2 context, 3 latent, 4 robot tokens. Row = query.
        let m = build_attention_mask(2, 3, 4);
        assert_eq!(m.dim(), (9, 9));
        let t = true;
        let f = false;
        let expected = [
            // ctx rows: context columns only.
            [t, t, f, f, f, f, f, f, f],
            [t, t, f, f, f, f, f, f, f],
            // latent rows: context + latent, never robot.
            [t, t, t, t, t, f, f, f, f],
            [t, t, t, t, t, f, f, f, f],
            [t, t, t, t, t, f, f, f, f],
            // robot rows: everything.
            [t, t, t, t, t, t, t, t, t],
            [t, t, t, t, t, t, t, t, t],
            [t, t, t, t, t, t, t, t, t],
            [t, t, t, t, t, t, t, t, t],
        ];
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(m[[i, j]], expected[i][j], "mask mismatch at ({}, {})", i, j);
            }
        }
    }

    #[test]
    fn mask_blocks_latent_from_robot_for_random_sizes() {
        let mut rng = derived_rng(7, "mask-sizes");
        for _ in 0..50 {
            let (c, l, r) = (
                rng.gen_range(0..6usize),
                rng.gen_range(0..6usize),
                rng.gen_range(1..6usize),
            );
            for causal in [false, true] {
                let m = build_attention_mask_with(c, l, r, causal);
                for i in c..c + l {
                    for j in c + l..c + l + r {
                        assert!(!m[[i, j]], "latent row {} sees robot column {}", i, j);
                    }
                }
                // What latent tokens can reach is a subset of what robot
                // tokens can reach.
                for i in c..c + l {
                    for rob in c + l..c + l + r {
                        for j in 0..c + l + r {
                            if m[[i, j]] {
                                assert!(m[[rob, j]] || j > rob);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn causal_robot_mask_is_lower_triangular_in_its_block() {
        let m = build_attention_mask_with(2, 2, 3, true);
        for i in 4..7 {
            for j in 4..7 {
                assert_eq!(m[[i, j]], j <= i);
            }
            for j in 0..4 {
                assert!(m[[i, j]]);
            }
        }
    }

    #[test]
    fn euler_recovers_constant_target_exactly() {
        let c = Array1::from_vec(vec![0.7_f64, -2.0, 3.5]);
        let mut rng = derived_rng(3, "euler-oracle");
        let x0 = Array1::from_shape_fn(3, |_| f64::standard_normal(&mut rng));
        for steps in [1usize, 5, 50] {
            let v = &c - &x0;
            let out = euler_integrate(x0.clone(), steps, |_, _| Ok(v.clone())).unwrap();
            for (a, b) in out.iter().zip(c.iter()) {
                assert!((a - b).abs() < 1e-9, "S={}: {} vs {}", steps, a, b);
            }
        }
    }

    #[test]
    fn zeroed_expert_gives_hand_computable_losses() {
        let mut model: FlowModel<f64> = FlowModel::new(&tiny_flow(), 5).unwrap();
        for i in 0..model.params.len() {
            model.params.value_mut(i).fill(0.0);
        }
        let data = generate_triplets::<f64>(&WorldConfig::default(), 11, 1).unwrap();
        let t = &data[0];
        let bound = model.params.bind_frozen();
        let n = 4;
        let mut rng = derived_rng(13, "zero-expert");
        let z_target = Array2::from_shape_fn((n, n), |_| f64::standard_normal(&mut rng));
        let noise = Array2::from_shape_fn((n, n), |_| f64::standard_normal(&mut rng));
        let src = ContextSource::FramePair {
            prev: &t.frames[0],
            next: &t.frames[1],
        };
        // With every parameter zero the velocity output is exactly zero,
        // so the loss is the mean square of the true velocity.
        let loss = model
            .latent_loss_graph(&bound, &z_target.view(), &src, 0.3, &noise.view())
            .unwrap()
            .item();
        let expect = (&z_target - &noise).mapv(|v| v * v).mean().unwrap();
        assert!((loss - expect).abs() < 1e-12);
        // Target equal to noise means zero true velocity and zero loss.
        let zero_loss = model
            .latent_loss_graph(&bound, &z_target.view(), &src, 0.3, &z_target.view())
            .unwrap()
            .item();
        assert_eq!(zero_loss, 0.0);

        // Joint case: weighted sums of squares over the joint element count.
        let (nr, dr) = (model.cfg.robot_horizon, model.cfg.robot_dim);
        let a_target = Array2::from_shape_fn((nr, dr), |_| f64::standard_normal(&mut rng));
        let an = Array2::from_shape_fn((nr, dr), |_| f64::standard_normal(&mut rng));
        let src_ft = ContextSource::FrameTask {
            frame: &t.frames[0],
            task: 2,
        };
        let joint = model
            .joint_loss_graph(
                &bound,
                Some(&a_target.view()),
                Some(&z_target.view()),
                &src_ft,
                0.6,
                Some(&an.view()),
                Some(&noise.view()),
            )
            .unwrap()
            .item();
        let sse_lat = (&z_target - &noise).mapv(|v| v * v).sum();
        let sse_rob = (&a_target - &an).mapv(|v| v * v).sum();
        let expect_joint = (sse_lat + sse_rob) / (n * n + nr * dr) as f64;
        assert!((joint - expect_joint).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_weights_are_additive() {
        let model: FlowModel<f64> = FlowModel::new(&tiny_flow(), 17).unwrap();
        let data = generate_triplets::<f64>(&WorldConfig::default(), 19, 1).unwrap();
        let t = &data[0];
        let bound = model.params.bind_frozen();
        let n = 4;
        let (nr, dr) = (model.cfg.robot_horizon, model.cfg.robot_dim);
        let mut rng = derived_rng(23, "weights");
        let z_target = Array2::from_shape_fn((n, n), |_| f64::standard_normal(&mut rng));
        let zn = Array2::from_shape_fn((n, n), |_| f64::standard_normal(&mut rng));
        let a_target = Array2::from_shape_fn((nr, dr), |_| f64::standard_normal(&mut rng));
        let an = Array2::from_shape_fn((nr, dr), |_| f64::standard_normal(&mut rng));
        let src = ContextSource::FrameTask {
            frame: &t.frames[0],
            task: 0,
        };
        let eval = |wl: f64, wr: f64| {
            let mut m = model.clone();
            m.cfg.w_latent = wl;
            m.cfg.w_robot = wr;
            m.joint_loss_graph(
                &bound,
                Some(&a_target.view()),
                Some(&z_target.view()),
                &src,
                0.4,
                Some(&an.view()),
                Some(&zn.view()),
            )
            .unwrap()
            .item()
        };
        let both = eval(1.0, 1.0);
        let lat_only = eval(1.0, 0.0);
        let rob_only = eval(0.0, 1.0);
        assert!((both - (lat_only + rob_only)).abs() < 1e-12);
        assert!(lat_only > 0.0 && rob_only > 0.0);
    }

    #[test]
    fn latent_loss_gradient_matches_finite_differences() {
        let cfg = FlowConfig {
            latent_n: 3,
            d_model: 8,
            blocks: 1,
            patch: 16,
            robot_horizon: 3,
            ..FlowConfig::default()
        };
        let model: FlowModel<f64> = FlowModel::new(&cfg, 29).unwrap();
        let data = generate_triplets::<f64>(&WorldConfig::default(), 31, 1).unwrap();
        let t = &data[0];
        let n = 3;
        let mut rng = derived_rng(37, "fd-latent");
        let z_target = Array2::from_shape_fn((n, n), |_| f64::standard_normal(&mut rng));
        let noise = Array2::from_shape_fn((n, n), |_| f64::standard_normal(&mut rng));

        let wq = model.idx.blocks[0].wq.w;
        let full: Vec<f64> = model.params.value(wq).iter().cloned().collect();
        let slice_len = 10;
        let eval = |vals: &[f64], track: bool| {
            let mut bound = model.params.bind_frozen();
            let mut patched = full.clone();
            patched[..slice_len].copy_from_slice(vals);
            let shape = model.params.value(wq).shape().to_vec();
            bound[wq] = Tensor::leaf(ArrayD::from_shape_vec(shape, patched).unwrap(), track);
            let src = ContextSource::FramePair {
                prev: &t.frames[0],
                next: &t.frames[1],
            };
            let loss = model
                .latent_loss_graph(&bound, &z_target.view(), &src, 0.37, &noise.view())
                .unwrap();
            (bound, loss)
        };
        let point: Vec<f64> = full[..slice_len].to_vec();
        let (bound, loss) = eval(&point, true);
        loss.backward();
        let analytic: Vec<f64> = bound[wq].grad().unwrap().iter().take(slice_len).cloned().collect();
        let mut f = |vals: &[f64]| eval(vals, false).1.item();
        let fd = finite_difference_grad(&mut f, &point, 1e-6);
        let err = grad_rel_error(&analytic, &fd);
        assert!(err < 1e-3, "latent loss grad rel err {}", err);
    }

    #[test]
    fn joint_loss_gradient_matches_finite_differences() {
        let cfg = FlowConfig {
            latent_n: 3,
            d_model: 8,
            blocks: 1,
            patch: 16,
            robot_horizon: 3,
            ..FlowConfig::default()
        };
        let model: FlowModel<f64> = FlowModel::new(&cfg, 41).unwrap();
        let data = generate_triplets::<f64>(&WorldConfig::default(), 43, 1).unwrap();
        let t = &data[0];
        let n = 3;
        let (nr, dr) = (3, 4);
        let mut rng = derived_rng(47, "fd-joint");
        let z_target = Array2::from_shape_fn((n, n), |_| f64::standard_normal(&mut rng));
        let zn = Array2::from_shape_fn((n, n), |_| f64::standard_normal(&mut rng));
        let a_target = Array2::from_shape_fn((nr, dr), |_| f64::standard_normal(&mut rng));
        let an = Array2::from_shape_fn((nr, dr), |_| f64::standard_normal(&mut rng));

        let wq = model.idx.blocks[0].wq.w;
        let full: Vec<f64> = model.params.value(wq).iter().cloned().collect();
        let slice_len = 10;
        let eval = |vals: &[f64], track: bool| {
            let mut bound = model.params.bind_frozen();
            let mut patched = full.clone();
            patched[..slice_len].copy_from_slice(vals);
            let shape = model.params.value(wq).shape().to_vec();
            bound[wq] = Tensor::leaf(ArrayD::from_shape_vec(shape, patched).unwrap(), track);
            let src = ContextSource::FrameTask {
                frame: &t.frames[0],
                task: 3,
            };
            let loss = model
                .joint_loss_graph(
                    &bound,
                    Some(&a_target.view()),
                    Some(&z_target.view()),
                    &src,
                    0.52,
                    Some(&an.view()),
                    Some(&zn.view()),
                )
                .unwrap();
            (bound, loss)
        };
        let point: Vec<f64> = full[..slice_len].to_vec();
        let (bound, loss) = eval(&point, true);
        loss.backward();
        let analytic: Vec<f64> = bound[wq].grad().unwrap().iter().take(slice_len).cloned().collect();
        let mut f = |vals: &[f64]| eval(vals, false).1.item();
        let fd = finite_difference_grad(&mut f, &point, 1e-6);
        let err = grad_rel_error(&analytic, &fd);
        assert!(err < 1e-3, "joint loss grad rel err {}", err);
    }

    #[test]
    fn sampling_is_seed_deterministic_with_right_shapes() {
        let model: FlowModel<f32> = FlowModel::new(&tiny_flow(), 53).unwrap();
        let data = generate_triplets::<f32>(&WorldConfig::default(), 59, 1).unwrap();
        let t = &data[0];
        let src = ContextSource::FramePair {
            prev: &t.frames[0],
            next: &t.frames[1],
        };
        let z1 = model.sample_latent(&src, 10, &mut derived_rng(1, "s")).unwrap();
        let z2 = model.sample_latent(&src, 10, &mut derived_rng(1, "s")).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(z1.dim(), (4, 4));
        let z3 = model.sample_latent(&src, 10, &mut derived_rng(2, "s")).unwrap();
        assert_ne!(z1, z3);

        let src_ft = ContextSource::FrameTask {
            frame: &t.frames[0],
            task: 1,
        };
        let (rob, lat) = model
            .sample_actions(&src_ft, 10, &mut derived_rng(3, "s"), true)
            .unwrap();
        assert_eq!(rob.dim(), (8, 4));
        assert_eq!(lat.unwrap().dim(), (4, 4));
        let (rob2, lat2) = model
            .sample_actions(&src_ft, 10, &mut derived_rng(3, "s"), false)
            .unwrap();
        assert_eq!(rob2.dim(), (8, 4));
        assert!(lat2.is_none());
    }

    #[test]
    fn robot_chunk_layout_and_normalization() {
        let world = WorldConfig::default();
        let data = generate_triplets::<f64>(&world, 61, 20).unwrap();
        let norm = action_chunk_normalizer(&world);
        let t = data
            .iter()
            .find(|t| {
                t.actions[0].class_label != t.actions[1].class_label
            })
            .unwrap();
        let chunk = robot_chunk(t, 8, &norm).unwrap();
        let a = chunk.actions();
        assert_eq!(a.dim(), (8, 4));
        // First k rows repeat action 0, the rest repeat action 1.
        for i in 0..8 {
            let src = &t.actions[if i < t.interval_k { 0 } else { 1 }];
            assert!((a[[i, 0]] - src.delta_position[0] / norm[0]).abs() < 1e-12);
            assert!((a[[i, 1]] - src.delta_position[1] / norm[1]).abs() < 1e-12);
            assert!((a[[i, 2]] - src.delta_heading / norm[2]).abs() < 1e-12);
            assert_eq!(a[[i, 3]], 0.0);
        }
        // Magnitudes were drawn below the config maxima, so normalized
        // entries sit at or below one (single-float rounding slack).
        for v in a.iter() {
            assert!(v.abs() <= 1.0 + 1e-6, "normalized entry {} above 1", v);
        }
    }

    #[test]
    fn pretrain_smoke_improves_and_freezes_context_during_warmup() {
        let lam: LamModel<f32> = LamModel::new(&tiny_lam(), 67).unwrap();
        let mut model: FlowModel<f32> = FlowModel::new(&tiny_flow(), 71).unwrap();
        let data = generate_triplets::<f32>(&WorldConfig::default(), 73, 8).unwrap();
        let ctx_id = model.params.id_by_name("ctx.embed.w").unwrap();
        let lat_id = model.params.id_by_name("lat.in.w").unwrap();
        let ctx_before = model.params.value(ctx_id).clone();
        let lat_before = model.params.value(lat_id).clone();
        // warmup covers all ten steps, so the context embedding must not
        // move while other parameters do.
        let tcfg = FlowTrainConfig {
            steps: 10,
            batch: 2,
            warmup_frac: 0.999,
            seed: 79,
            ..FlowTrainConfig::default()
        };
        let log = pretrain_vla(&mut model, &lam, &data, &tcfg).unwrap();
        assert_eq!(log.len(), 10);
        assert_eq!(model.params.value(ctx_id), &ctx_before);
        assert_ne!(model.params.value(lat_id), &lat_before);

        // Reproducibility of the metrics log.
        let mut model2: FlowModel<f32> = FlowModel::new(&tiny_flow(), 71).unwrap();
        let log2 = pretrain_vla(&mut model2, &lam, &data, &tcfg).unwrap();
        assert_eq!(log, log2);
    }

    #[test]
    fn finetune_smoke_runs_both_planner_modes() {
        let lam: LamModel<f32> = LamModel::new(&tiny_lam(), 83).unwrap();
        let world = WorldConfig::default();
        let data = generate_triplets::<f32>(&world, 89, 8).unwrap();
        let tcfg = FlowTrainConfig {
            steps: 6,
            batch: 2,
            seed: 97,
            ..FlowTrainConfig::default()
        };
        for planner in [true, false] {
            let mut model: FlowModel<f32> = FlowModel::new(&tiny_flow(), 101).unwrap();
            let log = finetune(&mut model, &lam, &data, &world, &tcfg, planner).unwrap();
            assert_eq!(log.len(), 6);
            assert!(log[0].get("l_fm").unwrap().is_finite());
        }
    }

    #[test]
    fn incompatible_latent_model_is_rejected() {
        let lam: LamModel<f32> = LamModel::new(
            &LamConfig {
                latent_n: 8,
                d_model: 16,
                blocks: 1,
                patch: 16,
                codebook_k: 4,
                ..LamConfig::default()
            },
            1,
        )
        .unwrap();
        let model: FlowModel<f32> = FlowModel::new(&tiny_flow(), 2).unwrap();
        let err = model.check_latent_model(&lam).unwrap_err();
        assert_eq!(err.category(), "config");
        let data = generate_triplets::<f32>(&WorldConfig::default(), 3, 2).unwrap();
        let t = &data[0];
        let src = ContextSource::FrameTask {
            frame: &t.frames[0],
            task: 99,
        };
        let bad = model
            .sample_actions(&src, 4, &mut derived_rng(5, "x"), false)
            .unwrap_err();
        assert_eq!(bad.category(), "invalid-input");
    }

    #[test]
    fn fm_losses_are_nonnegative_and_finite() {
        let model: FlowModel<f64> = FlowModel::new(&tiny_flow(), 103).unwrap();
        let data = generate_triplets::<f64>(&WorldConfig::default(), 107, 3).unwrap();
        let mut rng = derived_rng(109, "loss-sign");
        for t in &data {
            let z = Array2::from_shape_fn((4, 4), |_| f64::standard_normal(&mut rng));
            let src = ContextSource::FramePair {
                prev: &t.frames[0],
                next: &t.frames[1],
            };
            let l = model.latent_fm_loss(&z.view(), &src, &mut rng).unwrap();
            assert!(l >= 0.0 && l.is_finite());
            let joint = JointActionState {
                robot: Array2::from_shape_fn((8, 4), |_| f64::standard_normal(&mut rng)),
                latent: z.clone(),
            };
            let src_ft = ContextSource::FrameTask {
                frame: &t.frames[0],
                task: t.actions[0].class_label.index(),
            };
            let lj = model.joint_fm_loss(&joint, &src_ft, &mut rng).unwrap();
            assert!(lj >= 0.0 && lj.is_finite());
        }
    }
}
