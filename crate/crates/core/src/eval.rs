//! Held-out analyses of trained models: the degeneration probe, linear
//! probing of latents against ground-truth motion, cross-style transfer,
//! composition consistency, open-loop action error, and the ablation
//! grid runner that ties them together.
//!
//! Every report here is a pure function of (model, data, seed); reruns
//! reproduce the numbers bit for bit. All statistics are computed in
//! double precision regardless of the model's scalar type.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flow::{
    action_chunk_normalizer, finetune, pretrain_vla, robot_chunk, ContextSource, FlowConfig,
    FlowModel, FlowTrainConfig,
};
use crate::lam::{train_lam, LamConfig, LamModel, LamTrainConfig, QuantizerKind};
use crate::rng::derived_rng;
use crate::scalar::Scalar;
use crate::world::{
    builtin_style, estimate_sprite_motion, render, sample_action, sample_start, ActionClass,
    TripletSource, WorldConfig,
};

fn frame_mse<T: Scalar>(a: &Array3<T>, b: &Array3<T>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x.to_f64() - y.to_f64();
        s += d * d;
    }
    s / a.len() as f64
}

// ---- degeneration probe ----

/// Next-frame reconstruction error versus the error of re-applying the
/// same latent to the frame it arrived at. Latents that merely copy the
/// target frame's appearance keep the imagined frame close to I_{t+1},
/// so a small delta flags degenerate latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegenerationReport {
    /// Mean MSE(decode(I_t, z), I_{t+1}) over the held-out set.
    pub mse_next: f64,
    /// Mean MSE(decode(I_{t+1}, z), I_{t+1}): how far the imagined frame
    /// moves away from the frame it was applied to.
    pub mse_imagined: f64,
    /// mse_imagined - mse_next.
    pub delta: f64,
}

pub fn degeneration_probe<T: Scalar, S: TripletSource<T> + ?Sized>(
    model: &LamModel<T>,
    heldout: &S,
) -> Result<DegenerationReport> {
    if heldout.is_empty() {
        return Err(CoreError::InvalidInput(
            "degeneration probe needs a non-empty held-out set".to_string(),
        ));
    }
    let mut mse_next = 0.0;
    let mut mse_imagined = 0.0;
    for i in 0..heldout.len() {
        let t = heldout.get(i)?;
        let z = model.transition_matrix(&t.frames[0], &t.frames[1])?;
        let pred_next = model.decode_matrix(&t.frames[0], &z.view())?;
        mse_next += frame_mse(&pred_next, &t.frames[1]);
        let imagined = model.decode_matrix(&t.frames[1], &z.view())?;
        mse_imagined += frame_mse(&imagined, &t.frames[1]);
    }
    mse_next /= heldout.len() as f64;
    mse_imagined /= heldout.len() as f64;
    Ok(DegenerationReport {
        mse_next,
        mse_imagined,
        delta: mse_imagined - mse_next,
    })
}

// ---- linear probing ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeOptions {
    /// Fraction of samples held out for evaluation.
    pub holdout_frac: f64,
    pub seed: u64,
    /// Shuffle labels relative to features (control run).
    pub permute_labels: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            holdout_frac: 0.25,
            seed: 0,
            permute_labels: false,
        }
    }
}

/// Held-out quality of linear readouts from flattened latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Ridge regression MSE per action component (dx, dy, dheading).
    pub regression_mse: Vec<f64>,
    /// Out-of-sample r-squared over the two translation components,
    /// against the train-mean baseline.
    pub r_squared: f64,
    /// Held-out accuracy of the multinomial linear classifier.
    pub classification_accuracy: f64,
    /// Held-out frequency of the most common class.
    pub baseline_accuracy: f64,
    pub n_train: usize,
    pub n_heldout: usize,
}

/// Fits ridge regression (latent -> per-micro-step deltas) and a softmax
/// linear classifier (latent -> class id) on flattened latents from both
/// transitions of every triplet. Refuses when fewer training samples
/// than latent dimensions are available.
pub fn linear_probe<T: Scalar, S: TripletSource<T> + ?Sized>(
    model: &LamModel<T>,
    data: &S,
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    if !(opts.holdout_frac > 0.0 && opts.holdout_frac < 1.0) {
        return Err(CoreError::InvalidInput(format!(
            "holdout fraction must lie in (0, 1), got {}",
            opts.holdout_frac
        )));
    }
    let count = data.len() * 2;
    let dim = model.config().latent_n * model.config().latent_n;
    let mut features = Array2::<f64>::zeros((count, dim));
    let mut deltas = Array2::<f64>::zeros((count, 3));
    let mut classes = Vec::with_capacity(count);
    for i in 0..data.len() {
        let t = data.get(i)?;
        for (j, (a, b)) in [(0usize, 1usize), (1, 2)].iter().enumerate() {
            let z = model.transition_matrix(&t.frames[*a], &t.frames[*b])?;
            let row = 2 * i + j;
            for (c, &v) in z.iter().enumerate() {
                features[[row, c]] = v.to_f64();
            }
            let act = &t.actions[j];
            deltas[[row, 0]] = act.delta_position[0];
            deltas[[row, 1]] = act.delta_position[1];
            deltas[[row, 2]] = act.delta_heading;
            classes.push(act.class_label.index());
        }
    }
    probe_core(features, deltas, classes, opts)
}

/// Candidate ridge penalties, log-spaced over [1e-4, 1e2].
const RIDGE_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];
const CV_FOLDS: usize = 5;

fn probe_core(
    features: Array2<f64>,
    mut deltas: Array2<f64>,
    mut classes: Vec<usize>,
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    let count = features.nrows();
    let dim = features.ncols();
    let n_heldout = ((count as f64) * opts.holdout_frac).round() as usize;
    let n_train = count.saturating_sub(n_heldout);
    if n_train < dim || n_heldout == 0 {
        return Err(CoreError::InvalidInput(format!(
            "probe needs more than {} training samples for {}-dim latents, got {} (of {} total)",
            dim, dim, n_train, count
        )));
    }

    if opts.permute_labels {
        let mut rng = derived_rng(opts.seed, "probe-permute");
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        let d = deltas.clone();
        let c = classes.clone();
        for (dst, &src) in order.iter().enumerate() {
            deltas.row_mut(dst).assign(&d.row(src));
            classes[dst] = c[src];
        }
    }

    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut derived_rng(opts.seed, "probe-split"));
    let train_idx = &order[..n_train];
    let held_idx = &order[n_train..];

    let take = |idx: &[usize], m: &Array2<f64>| -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), m.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&m.row(i));
        }
        out
    };
    let x_train = take(train_idx, &features);
    let y_train = take(train_idx, &deltas);
    let x_held = take(held_idx, &features);
    let y_held = take(held_idx, &deltas);
    let c_train: Vec<usize> = train_idx.iter().map(|&i| classes[i]).collect();
    let c_held: Vec<usize> = held_idx.iter().map(|&i| classes[i]).collect();

    // Standardize features by train statistics.
    let (mu, sd) = feature_stats(&x_train);
    let xs_train = standardize(&x_train, &mu, &sd);
    let xs_held = standardize(&x_held, &mu, &sd);

    // Ridge penalty by 5-fold cross-validation on the training split.
    let lambda = select_ridge_lambda(&xs_train, &y_train);
    let fit = ridge_fit(&xs_train, &y_train, lambda);
    let pred = fit.predict(&xs_held);

    let mut regression_mse = Vec::with_capacity(3);
    for c in 0..3 {
        let mut s = 0.0;
        for r in 0..xs_held.nrows() {
            let d = pred[[r, c]] - y_held[[r, c]];
            s += d * d;
        }
        regression_mse.push(s / xs_held.nrows() as f64);
    }
    // r-squared over the translation components against the train-mean
    // baseline; zero when the targets carry no variance at all.
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for c in 0..2 {
        for r in 0..xs_held.nrows() {
            let d = pred[[r, c]] - y_held[[r, c]];
            ss_res += d * d;
            let b = y_held[[r, c]] - fit.y_mean[c];
            ss_tot += b * b;
        }
    }
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };

    let w = softmax_fit(&xs_train, &c_train, crate::world::ACTION_CLASS_COUNT);
    let mut correct = 0usize;
    for (r, &label) in c_held.iter().enumerate() {
        if softmax_predict(&w, &xs_held.row(r).to_owned()) == label {
            correct += 1;
        }
    }
    let classification_accuracy = correct as f64 / c_held.len() as f64;
    let mut freq = vec![0usize; crate::world::ACTION_CLASS_COUNT];
    for &c in &c_held {
        freq[c] += 1;
    }
    let baseline_accuracy = *freq.iter().max().unwrap() as f64 / c_held.len() as f64;

    Ok(ProbeReport {
        regression_mse,
        r_squared,
        classification_accuracy,
        baseline_accuracy,
        n_train,
        n_heldout,
    })
}

fn feature_stats(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mu = x.sum_axis(ndarray::Axis(0)) / n;
    let mut var = Array1::<f64>::zeros(x.ncols());
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let d = x[[r, c]] - mu[c];
            var[c] += d * d;
        }
    }
    let sd = var.mapv(|v| (v / n).sqrt().max(1e-8));
    (mu, sd)
}

fn standardize(x: &Array2<f64>, mu: &Array1<f64>, sd: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for r in 0..out.nrows() {
        for c in 0..out.ncols() {
            out[[r, c]] = (out[[r, c]] - mu[c]) / sd[c];
        }
    }
    out
}

struct RidgeFit {
    weights: Array2<f64>,
    x_mean: Array1<f64>,
    y_mean: Array1<f64>,
}

impl RidgeFit {
    fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        let centered = x - &self
            .x_mean
            .view()
            .insert_axis(ndarray::Axis(0))
            .broadcast(x.dim())
            .unwrap();
        centered.dot(&self.weights) + &self.y_mean.view().insert_axis(ndarray::Axis(0))
    }
}

/// Closed-form ridge on centered data; the intercept is the train mean.
fn ridge_fit(x: &Array2<f64>, y: &Array2<f64>, lambda: f64) -> RidgeFit {
    let n = x.nrows() as f64;
    let x_mean = x.sum_axis(ndarray::Axis(0)) / n;
    let y_mean = y.sum_axis(ndarray::Axis(0)) / n;
    let xc = x - &x_mean.view().insert_axis(ndarray::Axis(0)).broadcast(x.dim()).unwrap();
    let yc = y - &y_mean.view().insert_axis(ndarray::Axis(0)).broadcast(y.dim()).unwrap();
    let p = x.ncols();
    let mut a = xc.t().dot(&xc);
    for i in 0..p {
        a[[i, i]] += lambda;
    }
    let b = xc.t().dot(&yc);
    let mut weights = Array2::<f64>::zeros((p, y.ncols()));
    for c in 0..y.ncols() {
        // The normal matrix is positive definite for lambda > 0, so the
        // solve cannot fail.
        let col = f64::solve(&a, &b.column(c).to_owned()).expect("ridge system is nonsingular");
        weights.column_mut(c).assign(&col);
    }
    RidgeFit {
        weights,
        x_mean,
        y_mean,
    }
}

fn select_ridge_lambda(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let mut best = (f64::INFINITY, RIDGE_GRID[0]);
    for &lambda in &RIDGE_GRID {
        let mut err = 0.0;
        for fold in 0..CV_FOLDS {
            let val: Vec<usize> = (0..n).filter(|i| i % CV_FOLDS == fold).collect();
            let tr: Vec<usize> = (0..n).filter(|i| i % CV_FOLDS != fold).collect();
            let take = |idx: &[usize], m: &Array2<f64>| -> Array2<f64> {
                let mut out = Array2::zeros((idx.len(), m.ncols()));
                for (r, &i) in idx.iter().enumerate() {
                    out.row_mut(r).assign(&m.row(i));
                }
                out
            };
            let fit = ridge_fit(&take(&tr, x), &take(&tr, y), lambda);
            let pred = fit.predict(&take(&val, x));
            let yv = take(&val, y);
            for r in 0..pred.nrows() {
                for c in 0..pred.ncols() {
                    let d = pred[[r, c]] - yv[[r, c]];
                    err += d * d;
                }
            }
        }
        if err < best.0 {
            best = (err, lambda);
        }
    }
    best.1
}

/// Multinomial softmax regression by full-batch gradient descent with a
/// step size from the Lipschitz bound of the convex objective; fully
/// deterministic, no sampling involved.
fn softmax_fit(x: &Array2<f64>, labels: &[usize], num_classes: usize) -> Array2<f64> {
    let (n, p) = x.dim();
    let l2 = 1e-4;
    let mean_sq_norm = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let lr = 1.0 / (0.5 * mean_sq_norm + l2);
    let mut w = Array2::<f64>::zeros((p + 1, num_classes));
    let mut xb = Array2::<f64>::ones((n, p + 1));
    xb.slice_mut(ndarray::s![.., ..p]).assign(x);
    for _ in 0..1500 {
        let logits = xb.dot(&w);
        let mut probs = logits;
        for mut row in probs.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        for (r, &label) in labels.iter().enumerate() {
            probs[[r, label]] -= 1.0;
        }
        let mut grad = xb.t().dot(&probs) / n as f64;
        grad.slice_mut(ndarray::s![..p, ..])
            .scaled_add(l2, &w.slice(ndarray::s![..p, ..]));
        let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        w.scaled_add(-lr, &grad);
        if gnorm < 1e-7 {
            break;
        }
    }
    w
}

fn softmax_predict(w: &Array2<f64>, x: &Array1<f64>) -> usize {
    let p = w.nrows() - 1;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for c in 0..w.ncols() {
        let mut s = w[[p, c]];
        for i in 0..p {
            s += x[i] * w[[i, c]];
        }
        if s > best.0 {
            best = (s, c);
        }
    }
    best.1
}

// ---- cross-style transfer ----

/// How well a latent extracted in one rendering style drives motion when
/// decoded onto another style's frame. Direction and magnitude are
/// measured by the sprite-motion estimator; failures to find the sprite
/// in the decoded frame are counted, not averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub cases: usize,
    /// Moving cases where the decoded frame yielded a sprite detection.
    pub detected: usize,
    /// Mean cosine between estimated and true pixel displacement over
    /// detected cases (zero when nothing was detected).
    pub direction_cosine: f64,
    /// Mean |estimated| / |true| displacement over detected cases.
    pub magnitude_ratio: f64,
    /// Mean |estimated displacement| in pixels for identity-latent cases
    /// (small values mean identity transfers as stillness).
    pub static_motion_px: f64,
    /// Identity cases where detection failed.
    pub static_failures: usize,
}

/// Extracts latents from translation transitions rendered in `style_a`,
/// decodes them onto the same underlying state rendered in `style_b`,
/// and scores the induced motion against the ground truth. A quarter of
/// the cases (at least one) probe the identity latent instead.
pub fn cross_domain_transfer<T: Scalar>(
    model: &LamModel<T>,
    world: &WorldConfig,
    style_a: u32,
    style_b: u32,
    n_cases: usize,
    seed: u64,
) -> Result<TransferReport> {
    if n_cases == 0 {
        return Err(CoreError::InvalidInput(
            "transfer evaluation needs at least one case".to_string(),
        ));
    }
    let sa = builtin_style(style_a)?;
    let sb = builtin_style(style_b)?;
    let mut rng = derived_rng(seed, "transfer-cases");
    let translation = [
        ActionClass::Left,
        ActionClass::Right,
        ActionClass::Up,
        ActionClass::Down,
    ];
    let mut detected = 0usize;
    let mut cosine = 0.0;
    let mut ratio = 0.0;
    let n_static = (n_cases / 4).max(1);
    let mut static_px = 0.0;
    let mut static_failures = 0usize;

    for _ in 0..n_cases {
        // Keep drawing until the sampled class is a translation; draws
        // are always consumed so the stream stays seed-stable.
        let mut action = sample_action(world, &mut rng);
        while !translation.contains(&action.class_label) {
            action = sample_action(world, &mut rng);
        }
        let start = sample_start(world, &mut rng);
        let mut state = start;
        for _ in 0..world.interval_k {
            state = state.apply(&action);
        }
        let a0: Array3<T> = render(world, &start, sa);
        let a1: Array3<T> = render(world, &state, sa);
        let z = model.transition_matrix(&a0, &a1)?;
        let base: Array3<T> = render(world, &start, sb);
        let decoded = model.decode_matrix(&base, &z.view())?;
        match estimate_sprite_motion(&base.view(), sb, &decoded.view(), sb) {
            Err(CoreError::SpriteNotDetected { .. }) => {}
            Err(e) => return Err(e),
            Ok(est) => {
                let k = world.interval_k as f64;
                let truth = [
                    action.delta_position[0] * k * world.width as f64,
                    action.delta_position[1] * k * world.height as f64,
                ];
                let tn = (truth[0] * truth[0] + truth[1] * truth[1]).sqrt();
                let en =
                    (est.delta_px[0] * est.delta_px[0] + est.delta_px[1] * est.delta_px[1]).sqrt();
                detected += 1;
                if en > 0.0 {
                    cosine += (est.delta_px[0] * truth[0] + est.delta_px[1] * truth[1]) / (en * tn);
                }
                ratio += en / tn;
            }
        }
    }

    for _ in 0..n_static {
        let start = sample_start(world, &mut rng);
        let a0: Array3<T> = render(world, &start, sa);
        let z = model.transition_matrix(&a0, &a0)?;
        let base: Array3<T> = render(world, &start, sb);
        let decoded = model.decode_matrix(&base, &z.view())?;
        match estimate_sprite_motion(&base.view(), sb, &decoded.view(), sb) {
            Err(CoreError::SpriteNotDetected { .. }) => static_failures += 1,
            Err(e) => return Err(e),
            Ok(est) => {
                static_px +=
                    (est.delta_px[0] * est.delta_px[0] + est.delta_px[1] * est.delta_px[1]).sqrt();
            }
        }
    }

    Ok(TransferReport {
        cases: n_cases,
        detected,
        direction_cosine: if detected > 0 { cosine / detected as f64 } else { 0.0 },
        magnitude_ratio: if detected > 0 { ratio / detected as f64 } else { 0.0 },
        static_motion_px: if n_static > static_failures {
            static_px / (n_static - static_failures) as f64
        } else {
            0.0
        },
        static_failures,
    })
}

// ---- composition consistency ----

/// Mean pixel MSE of the composed two-step prediction divided by the
/// mean pixel MSE of the direct second-step prediction, both against
/// I_{t+2}. Near one means composing two latents costs nothing.
pub fn composition_consistency<T: Scalar, S: TripletSource<T> + ?Sized>(
    model: &LamModel<T>,
    heldout: &S,
) -> Result<f64> {
    if heldout.is_empty() {
        return Err(CoreError::InvalidInput(
            "composition check needs a non-empty held-out set".to_string(),
        ));
    }
    // Identity anchor from the first frames of the held-out set itself.
    let anchor_count = heldout.len().min(8);
    let mut anchor_frames = Vec::with_capacity(anchor_count);
    for i in 0..anchor_count {
        anchor_frames.push(heldout.get(i)?.frames[0].clone());
    }
    let refs: Vec<&Array3<T>> = anchor_frames.iter().collect();
    let z_id = model.identity_anchor(&refs)?;
    let z_id_t = z_id.t().to_owned();

    let mut mse_comp = 0.0;
    let mut mse_next = 0.0;
    for i in 0..heldout.len() {
        let t = heldout.get(i)?;
        let z1 = model.transition_matrix(&t.frames[0], &t.frames[1])?;
        let z2 = model.transition_matrix(&t.frames[1], &t.frames[2])?;
        let comp = z2.dot(&z_id_t).dot(&z1);
        let pred_comp = model.decode_matrix(&t.frames[0], &comp.view())?;
        let pred_next = model.decode_matrix(&t.frames[1], &z2.view())?;
        mse_comp += frame_mse(&pred_comp, &t.frames[2]);
        mse_next += frame_mse(&pred_next, &t.frames[2]);
    }
    if mse_next <= 0.0 {
        return Err(CoreError::Numerical(
            "direct predictions are exact; composition ratio is undefined".to_string(),
        ));
    }
    Ok(mse_comp / mse_next)
}

// ---- open-loop action error ----

/// Mean squared error between sampled robot chunks and the normalized
/// ground-truth chunks on a held-out set, conditioning on (first frame,
/// task id) exactly as during finetuning.
pub fn open_loop_action_mse<T: Scalar, S: TripletSource<T> + ?Sized>(
    flow: &FlowModel<T>,
    heldout: &S,
    world: &WorldConfig,
    sample_steps: usize,
    with_planner: bool,
    seed: u64,
) -> Result<f64> {
    if heldout.is_empty() {
        return Err(CoreError::InvalidInput(
            "open-loop evaluation needs a non-empty held-out set".to_string(),
        ));
    }
    let normalizer = action_chunk_normalizer(world);
    let horizon = flow.config().robot_horizon;
    let mut rng = derived_rng(seed, "open-loop");
    let mut mse = 0.0;
    for i in 0..heldout.len() {
        let t = heldout.get(i)?;
        let src = ContextSource::FrameTask {
            frame: &t.frames[0],
            task: t.actions[0].class_label.index(),
        };
        let (sampled, _) = flow.sample_actions(&src, sample_steps, &mut rng, with_planner)?;
        let gt = robot_chunk(&t, horizon, &normalizer)?;
        let mut s = 0.0;
        for (&a, &b) in sampled.iter().zip(gt.actions().iter()) {
            let d = a.to_f64() - b.to_f64();
            s += d * d;
        }
        mse += s / sampled.len() as f64;
    }
    Ok(mse / heldout.len() as f64)
}

// ---- ablation grid ----

/// Latent-space construction of a training arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    /// Hard nearest-codeword quantization, no projection, no composition.
    Discrete,
    /// Soft quantization in flat space, no projection, no composition.
    Continuous,
    /// Soft quantization projected to the rotation group, no composition.
    Rotation,
    /// The whole pipeline including the composed two-step loss.
    Full,
}

impl LatentMode {
    pub const ALL: [LatentMode; 4] = [
        LatentMode::Discrete,
        LatentMode::Continuous,
        LatentMode::Rotation,
        LatentMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LatentMode::Discrete => "discrete",
            LatentMode::Continuous => "continuous",
            LatentMode::Rotation => "rotation",
            LatentMode::Full => "full",
        }
    }

    /// Rewrites the quantizer/projection/composition switches; the rest
    /// of the config is left alone.
    pub fn apply(self, cfg: &mut LamConfig) {
        let (quantizer, project, compose) = match self {
            LatentMode::Discrete => (QuantizerKind::Hard, false, false),
            LatentMode::Continuous => (QuantizerKind::Soft, false, false),
            LatentMode::Rotation => (QuantizerKind::Soft, true, false),
            LatentMode::Full => (QuantizerKind::Soft, true, true),
        };
        cfg.quantizer = quantizer;
        cfg.project = project;
        cfg.compose_loss = compose;
    }
}

/// One grid point's metrics. Latent-side numbers repeat across the two
/// planner rows of the same (n, mode) pair since the trained latent
/// model is shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub latent_n: usize,
    pub mode: String,
    pub planner: bool,
    pub probe_r_squared: f64,
    pub probe_accuracy: f64,
    pub baseline_accuracy: f64,
    pub degeneration_delta: f64,
    pub mse_next: f64,
    pub composition_ratio: f64,
    pub open_loop_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub dims: Vec<usize>,
    pub modes: Vec<LatentMode>,
    pub planner: Vec<bool>,
    /// Every arm trains and evaluates on the same generated data.
    pub data_seed: u64,
    pub train_triplets: usize,
    pub heldout_triplets: usize,
    pub world: WorldConfig,
    pub lam: LamConfig,
    pub lam_train: LamTrainConfig,
    pub flow: FlowConfig,
    pub pretrain: FlowTrainConfig,
    pub finetune: FlowTrainConfig,
    pub probe: ProbeOptions,
    pub sample_steps: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            dims: vec![8, 16, 32],
            modes: LatentMode::ALL.to_vec(),
            planner: vec![true, false],
            data_seed: 0,
            train_triplets: 768,
            heldout_triplets: 64,
            world: WorldConfig::default(),
            lam: LamConfig::default(),
            lam_train: LamTrainConfig::default(),
            flow: FlowConfig::default(),
            pretrain: FlowTrainConfig::default(),
            finetune: FlowTrainConfig {
                steps: 3000,
                ..FlowTrainConfig::default()
            },
            probe: ProbeOptions::default(),
            sample_steps: 10,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.modes.is_empty() || self.planner.is_empty() {
            return Err(CoreError::Config(
                "ablation grid must have at least one dim, mode, and planner setting".to_string(),
            ));
        }
        if self.train_triplets == 0 || self.heldout_triplets == 0 {
            return Err(CoreError::Config(
                "ablation needs non-empty train and held-out sets".to_string(),
            ));
        }
        let max_dim = *self.dims.iter().max().unwrap();
        let samples = self.train_triplets * 2;
        let train_samples = samples - ((samples as f64) * self.probe.holdout_frac).round() as usize;
        if train_samples < max_dim * max_dim {
            return Err(CoreError::Config(format!(
                "probe would refuse: {} training samples for {}-dim latents; raise train_triplets",
                train_samples,
                max_dim * max_dim
            )));
        }
        Ok(())
    }
}

/// Trains and evaluates every (latent dim, latent mode, planner) arm on
/// shared data with matched budgets. Returns one row per grid point, in
/// grid order.
pub fn run_ablation_suite<T: Scalar>(cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let train = crate::world::generate_triplets::<T>(&cfg.world, cfg.data_seed, cfg.train_triplets)?;
    let heldout = crate::world::generate_triplets::<T>(
        &cfg.world,
        cfg.data_seed.wrapping_add(1),
        cfg.heldout_triplets,
    )?;
    let mut rows = Vec::new();
    for &n in &cfg.dims {
        for &mode in &cfg.modes {
            let mut lam_cfg = cfg.lam.clone();
            lam_cfg.latent_n = n;
            mode.apply(&mut lam_cfg);
            let mut lam = LamModel::<T>::new(&lam_cfg, cfg.lam_train.seed)?;
            train_lam(&mut lam, &train[..], &cfg.lam_train)?;

            let probe = linear_probe(&lam, &train[..], &cfg.probe)?;
            let degen = degeneration_probe(&lam, &heldout[..])?;
            let ratio = composition_consistency(&lam, &heldout[..])?;

            for &planner in &cfg.planner {
                let mut flow_cfg = cfg.flow.clone();
                flow_cfg.latent_n = n;
                let mut flow = FlowModel::<T>::new(&flow_cfg, cfg.pretrain.seed)?;
                pretrain_vla(&mut flow, &lam, &train[..], &cfg.pretrain)?;
                finetune(&mut flow, &lam, &train[..], &cfg.world, &cfg.finetune, planner)?;
                let open_loop = open_loop_action_mse(
                    &flow,
                    &heldout[..],
                    &cfg.world,
                    cfg.sample_steps,
                    planner,
                    cfg.data_seed,
                )?;
                rows.push(AblationRow {
                    latent_n: n,
                    mode: mode.name().to_string(),
                    planner,
                    probe_r_squared: probe.r_squared,
                    probe_accuracy: probe.classification_accuracy,
                    baseline_accuracy: probe.baseline_accuracy,
                    degeneration_delta: degen.delta,
                    mse_next: degen.mse_next,
                    composition_ratio: ratio,
                    open_loop_mse: open_loop,
                });
            }
        }
    }
    Ok(rows)
}
