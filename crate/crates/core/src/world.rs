//! Procedural 2-D sprite world: a rigid sprite translating and rotating over
//! a styled background, rendered as small RGB frames with ground-truth action
//! labels, plus the on-disk dataset format and a template-correlation motion
//! estimator used as the scoring oracle.
//!
//! Every style's palette occupies its own disjoint red-channel band, and
//! anti-aliasing only mixes colors within a style, so two styles differ at
//! every single pixel while the underlying state trajectory is identical.
//! Sprite shapes are re-centered on their area centroid, which makes the
//! rendered mask centroid rotation-invariant.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, ArrayView3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::rng::derived_rng;
use crate::scalar::Scalar;

pub const DATASET_VERSION: u32 = 1;
/// Floats per triplet in a labels chunk:
/// style_id, then (dx, dy, dheading, dgripper, class) per transition.
pub const LABEL_RECORD_LEN: usize = 11;
/// Triplets per chunk file pair.
pub const CHUNK_SIZE: usize = 256;

// ---- state and actions ----

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    std::f64::consts::PI - (std::f64::consts::PI - theta).rem_euclid(2.0 * std::f64::consts::PI)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldState {
    /// Normalized image coordinates, x right, y down, clamped to [0,1].
    pub position: [f64; 2],
    /// Radians in (-pi, pi]. Positive heading turns the sprite from +x
    /// toward +y, which reads as clockwise on screen.
    pub heading: f64,
    /// Open fraction in [0,1], shown as the center dot's color.
    pub gripper: f64,
}

impl WorldState {
    pub fn new(position: [f64; 2], heading: f64, gripper: f64) -> Self {
        WorldState {
            position: [position[0].clamp(0.0, 1.0), position[1].clamp(0.0, 1.0)],
            heading: wrap_angle(heading),
            gripper: gripper.clamp(0.0, 1.0),
        }
    }

    /// One micro-step of linear motion.
    pub fn apply(&self, action: &GroundTruthAction) -> WorldState {
        WorldState::new(
            [
                self.position[0] + action.delta_position[0],
                self.position[1] + action.delta_position[1],
            ],
            self.heading + action.delta_heading,
            self.gripper + action.delta_gripper,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionClass {
    Left,
    Right,
    Up,
    Down,
    RotateCw,
    RotateCcw,
    Static,
}

pub const ACTION_CLASS_COUNT: usize = 7;

impl ActionClass {
    pub const ALL: [ActionClass; ACTION_CLASS_COUNT] = [
        ActionClass::Left,
        ActionClass::Right,
        ActionClass::Up,
        ActionClass::Down,
        ActionClass::RotateCw,
        ActionClass::RotateCcw,
        ActionClass::Static,
    ];

    pub fn index(self) -> usize {
        ActionClass::ALL.iter().position(|c| *c == self).unwrap()
    }

    pub fn from_index(i: usize) -> Result<ActionClass> {
        ActionClass::ALL
            .get(i)
            .copied()
            .ok_or_else(|| CoreError::DataFormat(format!("action class index {} out of range", i)))
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionClass::Left => "left",
            ActionClass::Right => "right",
            ActionClass::Up => "up",
            ActionClass::Down => "down",
            ActionClass::RotateCw => "rotate_cw",
            ActionClass::RotateCcw => "rotate_ccw",
            ActionClass::Static => "static",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthAction {
    /// Normalized units per micro-step.
    pub delta_position: [f64; 2],
    /// Radians per micro-step.
    pub delta_heading: f64,
    pub delta_gripper: f64,
    pub class_label: ActionClass,
}

impl GroundTruthAction {
    /// Labels a delta by its dominant component. Translation outranks
    /// rotation outranks static; within translation the x axis wins ties.
    pub fn classify(delta_position: [f64; 2], delta_heading: f64) -> ActionClass {
        let eps = 1e-9;
        let (dx, dy) = (delta_position[0], delta_position[1]);
        if dx.abs() > eps || dy.abs() > eps {
            if dx.abs() >= dy.abs() {
                if dx < 0.0 {
                    ActionClass::Left
                } else {
                    ActionClass::Right
                }
            } else if dy < 0.0 {
                ActionClass::Up
            } else {
                ActionClass::Down
            }
        } else if delta_heading.abs() > eps {
            if delta_heading > 0.0 {
                ActionClass::RotateCw
            } else {
                ActionClass::RotateCcw
            }
        } else {
            ActionClass::Static
        }
    }

    pub fn from_deltas(delta_position: [f64; 2], delta_heading: f64, delta_gripper: f64) -> Self {
        GroundTruthAction {
            delta_position,
            delta_heading,
            delta_gripper,
            class_label: GroundTruthAction::classify(delta_position, delta_heading),
        }
    }

    pub fn zero() -> Self {
        GroundTruthAction::from_deltas([0.0, 0.0], 0.0, 0.0)
    }
}

// ---- sprite shapes ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpriteShape {
    Wedge,
    Key,
    Tee,
}

const SHAPES: [SpriteShape; 3] = [SpriteShape::Wedge, SpriteShape::Key, SpriteShape::Tee];

fn in_rect(q: [f64; 2], x0: f64, x1: f64, y0: f64, y1: f64) -> bool {
    q[0] >= x0 && q[0] <= x1 && q[1] >= y0 && q[1] <= y1
}

fn in_disk(q: [f64; 2], c: [f64; 2], r: f64) -> bool {
    let dx = q[0] - c[0];
    let dy = q[1] - c[1];
    dx * dx + dy * dy <= r * r
}

fn in_triangle(q: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let cross = |p: [f64; 2], u: [f64; 2], v: [f64; 2]| {
        (v[0] - u[0]) * (p[1] - u[1]) - (v[1] - u[1]) * (p[0] - u[0])
    };
    let d1 = cross(q, a, b);
    let d2 = cross(q, b, c);
    let d3 = cross(q, c, a);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

impl SpriteShape {
    /// Occupancy in raw shape coordinates, before centroid correction.
    /// All three shapes are rotationally asymmetric so orientation is
    /// recoverable from the mask alone.
    fn contains_raw(self, q: [f64; 2]) -> bool {
        match self {
            SpriteShape::Wedge => {
                in_triangle(q, [1.0, 0.0], [-0.75, 0.7], [-0.45, -0.85])
            }
            SpriteShape::Key => {
                in_disk(q, [-0.3, 0.0], 0.52)
                    || in_rect(q, -0.3, 1.0, -0.16, 0.16)
                    || in_rect(q, 0.62, 1.0, 0.16, 0.55)
            }
            SpriteShape::Tee => {
                in_rect(q, -0.85, 0.85, -0.6, -0.2) || in_rect(q, -0.2, 0.2, -0.2, 0.95)
            }
        }
    }

    fn table_index(self) -> usize {
        SHAPES.iter().position(|s| *s == self).unwrap()
    }

    /// Area centroid and maximal radius about that centroid, estimated once
    /// on a fine grid. Shapes are queried relative to the centroid so the
    /// rendered mask centroid does not move under rotation.
    fn geometry(self) -> &'static ShapeGeometry {
        static GEO: OnceLock<[ShapeGeometry; 3]> = OnceLock::new();
        &GEO.get_or_init(|| {
            let mut out = [ShapeGeometry::default(); 3];
            for (i, shape) in SHAPES.iter().enumerate() {
                out[i] = ShapeGeometry::measure(*shape);
            }
            out
        })[self.table_index()]
    }

    pub fn centroid(self) -> [f64; 2] {
        self.geometry().centroid
    }

    /// Maximal distance from the centroid to any occupied point, in shape
    /// units.
    pub fn extent(self) -> f64 {
        self.geometry().extent
    }

    /// Occupancy with the area centroid moved to the origin.
    pub fn contains(self, q: [f64; 2]) -> bool {
        let c = self.geometry().centroid;
        self.contains_raw([q[0] + c[0], q[1] + c[1]])
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct ShapeGeometry {
    centroid: [f64; 2],
    extent: f64,
}

impl ShapeGeometry {
    fn measure(shape: SpriteShape) -> ShapeGeometry {
        let n = 1601;
        let lim = 1.3;
        let step = 2.0 * lim / (n as f64 - 1.0);
        let mut count = 0u64;
        let mut sx = 0.0;
        let mut sy = 0.0;
        for iy in 0..n {
            let y = -lim + step * iy as f64;
            for ix in 0..n {
                let x = -lim + step * ix as f64;
                if shape.contains_raw([x, y]) {
                    count += 1;
                    sx += x;
                    sy += y;
                }
            }
        }
        assert!(count > 0, "shape occupies no grid cells");
        let centroid = [sx / count as f64, sy / count as f64];
        let mut extent2: f64 = 0.0;
        for iy in 0..n {
            let y = -lim + step * iy as f64;
            for ix in 0..n {
                let x = -lim + step * ix as f64;
                if shape.contains_raw([x, y]) {
                    let dx = x - centroid[0];
                    let dy = y - centroid[1];
                    extent2 = extent2.max(dx * dx + dy * dy);
                }
            }
        }
        ShapeGeometry {
            centroid,
            extent: extent2.sqrt(),
        }
    }
}

// ---- render styles ----

pub type Color = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackgroundTexture {
    Solid,
    /// Horizontal lerp from `background` to `background_right`.
    HGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderStyle {
    pub style_id: u32,
    pub shape: SpriteShape,
    pub background: Color,
    pub background_right: Color,
    pub texture: BackgroundTexture,
    pub sprite: Color,
    pub dot_closed: Color,
    pub dot_open: Color,
}

impl RenderStyle {
    pub fn background_at(&self, x_frac: f64) -> Color {
        match self.texture {
            BackgroundTexture::Solid => self.background,
            BackgroundTexture::HGradient => lerp_color(self.background, self.background_right, x_frac),
        }
    }

    fn dot_color(&self, gripper: f64) -> Color {
        lerp_color(self.dot_closed, self.dot_open, gripper)
    }
}

fn lerp_color(a: Color, b: Color, t: f64) -> Color {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Four fixed styles. Every color a style can emit keeps its red channel
/// inside the style's private band (0: [.05,.2], 1: [.3,.45], 2: [.55,.7],
/// 3: [.8,.95]); anti-aliased mixtures stay in-band by convexity, so frames
/// from two different styles disagree at every pixel. Style 3 is reserved
/// as the held-out embodiment in transfer evaluations.
pub fn builtin_styles() -> &'static [RenderStyle; 4] {
    static STYLES: OnceLock<[RenderStyle; 4]> = OnceLock::new();
    STYLES.get_or_init(|| {
        [
            RenderStyle {
                style_id: 0,
                shape: SpriteShape::Wedge,
                background: [0.06, 0.25, 0.35],
                background_right: [0.06, 0.25, 0.35],
                texture: BackgroundTexture::Solid,
                sprite: [0.19, 0.85, 0.55],
                dot_closed: [0.12, 0.10, 0.10],
                dot_open: [0.12, 0.95, 0.95],
            },
            RenderStyle {
                style_id: 1,
                shape: SpriteShape::Key,
                background: [0.31, 0.12, 0.38],
                background_right: [0.44, 0.26, 0.52],
                texture: BackgroundTexture::HGradient,
                sprite: [0.44, 0.90, 0.30],
                dot_closed: [0.37, 0.05, 0.20],
                dot_open: [0.37, 0.80, 0.85],
            },
            RenderStyle {
                style_id: 2,
                shape: SpriteShape::Tee,
                background: [0.56, 0.50, 0.20],
                background_right: [0.56, 0.50, 0.20],
                texture: BackgroundTexture::Solid,
                sprite: [0.69, 0.10, 0.75],
                dot_closed: [0.62, 0.30, 0.05],
                dot_open: [0.62, 0.95, 0.60],
            },
            RenderStyle {
                style_id: 3,
                shape: SpriteShape::Key,
                background: [0.81, 0.55, 0.10],
                background_right: [0.94, 0.70, 0.25],
                texture: BackgroundTexture::HGradient,
                sprite: [0.81, 0.05, 0.90],
                dot_closed: [0.88, 0.40, 0.02],
                dot_open: [0.88, 0.98, 0.70],
            },
        ]
    })
}

pub fn builtin_style(style_id: u32) -> Result<&'static RenderStyle> {
    builtin_styles()
        .iter()
        .find(|s| s.style_id == style_id)
        .ok_or_else(|| CoreError::InvalidInput(format!("unknown style id {}", style_id)))
}

// ---- world config ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    /// Micro-steps between consecutive frames of a triplet.
    pub interval_k: usize,
    /// Sprite size in normalized units (shape units scale by this).
    pub sprite_scale: f64,
    /// Center dot radius in normalized units.
    pub dot_radius: f64,
    /// Per-micro-step translation magnitude range, normalized units.
    pub translation_step: (f64, f64),
    /// Per-micro-step rotation magnitude range, radians.
    pub rotation_step: (f64, f64),
    /// Styles the sampler may draw from.
    pub style_ids: Vec<u32>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            height: 32,
            width: 32,
            interval_k: 3,
            sprite_scale: 0.16,
            dot_radius: 0.025,
            translation_step: (0.01, 0.02),
            rotation_step: (0.05, 0.15),
            style_ids: vec![0, 1, 2],
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(CoreError::InvalidInput(format!(
                "frame {}x{} too small for the sprite",
                self.height, self.width
            )));
        }
        if self.interval_k == 0 {
            return Err(CoreError::InvalidInput("interval k must be >= 1".to_string()));
        }
        if !(self.sprite_scale > 0.0) || !(self.dot_radius > 0.0) {
            return Err(CoreError::InvalidInput(
                "sprite scale and dot radius must be positive".to_string(),
            ));
        }
        for (lo, hi, what) in [
            (self.translation_step.0, self.translation_step.1, "translation"),
            (self.rotation_step.0, self.rotation_step.1, "rotation"),
        ] {
            if !(lo >= 0.0 && hi >= lo) {
                return Err(CoreError::InvalidInput(format!(
                    "{} step range ({}, {}) is not an ordered non-negative pair",
                    what, lo, hi
                )));
            }
        }
        if self.style_ids.is_empty() {
            return Err(CoreError::InvalidInput("no styles configured".to_string()));
        }
        for &id in &self.style_ids {
            builtin_style(id)?;
        }
        if self.margin() >= 0.5 {
            return Err(CoreError::InvalidInput(format!(
                "margin {:.3} leaves no room to place the sprite",
                self.margin()
            )));
        }
        Ok(())
    }

    /// Start positions are confined to [margin, 1-margin]^2 so the sprite
    /// never leaves the frame (and position is never clamped) across both
    /// transitions of a triplet.
    pub fn margin(&self) -> f64 {
        let max_extent = SHAPES
            .iter()
            .map(|s| s.extent())
            .fold(0.0f64, f64::max);
        let travel = 2.0 * self.interval_k as f64 * self.translation_step.1;
        let pixel_pad = 2.0 / self.height.min(self.width) as f64;
        self.sprite_scale * max_extent + travel + pixel_pad
    }
}

// ---- rendering ----

/// Deterministic rasterization with 3x3 supersampling. Pixel (ix, iy)
/// covers [ix, ix+1) x [iy, iy+1) in pixel coordinates; the sprite center
/// sits at (position.x * width, position.y * height).
pub fn render<T: Scalar>(cfg: &WorldConfig, state: &WorldState, style: &RenderStyle) -> Array3<T> {
    let (h, w) = (cfg.height, cfg.width);
    let scale_px = cfg.sprite_scale * h.min(w) as f64;
    let dot_unit = cfg.dot_radius / cfg.sprite_scale;
    let center = [state.position[0] * w as f64, state.position[1] * h as f64];
    let (sin_t, cos_t) = state.heading.sin_cos();
    let sprite = style.sprite;
    let dot = style.dot_color(state.gripper);
    let mut frame = Array3::<T>::zeros((h, w, 3));
    for iy in 0..h {
        for ix in 0..w {
            let mut acc = [0.0f64; 3];
            for sy in 0..3 {
                for sx in 0..3 {
                    let px = ix as f64 + (sx as f64 + 0.5) / 3.0;
                    let py = iy as f64 + (sy as f64 + 0.5) / 3.0;
                    let ux = (px - center[0]) / scale_px;
                    let uy = (py - center[1]) / scale_px;
                    // Inverse heading rotation into shape coordinates.
                    let q = [ux * cos_t + uy * sin_t, -ux * sin_t + uy * cos_t];
                    let c = if q[0] * q[0] + q[1] * q[1] <= dot_unit * dot_unit {
                        dot
                    } else if style.shape.contains(q) {
                        sprite
                    } else {
                        style.background_at(px / w as f64)
                    };
                    acc[0] += c[0];
                    acc[1] += c[1];
                    acc[2] += c[2];
                }
            }
            for ch in 0..3 {
                frame[[iy, ix, ch]] = T::from_f64(acc[ch] / 9.0);
            }
        }
    }
    frame
}

// ---- triplet sampling ----

#[derive(Debug, Clone)]
pub struct FrameTriplet<T: Scalar> {
    /// (I_t, I_{t+1}, I_{t+2}), each height x width x 3 in [0,1].
    pub frames: [Array3<T>; 3],
    /// Micro-steps between consecutive frames.
    pub interval_k: usize,
    /// Per-micro-step actions for t -> t+1 and t+1 -> t+2.
    pub actions: [GroundTruthAction; 2],
    pub style_id: u32,
}

/// Rounds through f32 so values survive the on-disk format bit-exactly.
fn quantize_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn sample_magnitude(range: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    quantize_f32(range.0 + (range.1 - range.0) * rng.gen::<f64>())
}

/// Uniform class draw, then a magnitude draw in the class's range. The
/// magnitude draw happens for every class (and is discarded for static) so
/// the stream position does not depend on the class drawn.
pub fn sample_action(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> GroundTruthAction {
    let class = ActionClass::ALL[rng.gen_range(0..ACTION_CLASS_COUNT)];
    let tr = sample_magnitude(cfg.translation_step, rng);
    let rot = sample_magnitude(cfg.rotation_step, rng);
    let (dp, dh) = match class {
        ActionClass::Left => ([-tr, 0.0], 0.0),
        ActionClass::Right => ([tr, 0.0], 0.0),
        ActionClass::Up => ([0.0, -tr], 0.0),
        ActionClass::Down => ([0.0, tr], 0.0),
        ActionClass::RotateCw => ([0.0, 0.0], rot),
        ActionClass::RotateCcw => ([0.0, 0.0], -rot),
        ActionClass::Static => ([0.0, 0.0], 0.0),
    };
    let action = GroundTruthAction::from_deltas(dp, dh, 0.0);
    debug_assert_eq!(action.class_label, class);
    action
}

pub fn sample_start(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> WorldState {
    let m = cfg.margin();
    let x = quantize_f32(m + (1.0 - 2.0 * m) * rng.gen::<f64>());
    let y = quantize_f32(m + (1.0 - 2.0 * m) * rng.gen::<f64>());
    let heading = quantize_f32(wrap_angle(std::f64::consts::PI * (2.0 * rng.gen::<f64>() - 1.0)));
    let gripper = quantize_f32(rng.gen::<f64>());
    WorldState::new([x, y], heading, gripper)
}

/// Draws a start state and two actions, advances k micro-steps per
/// transition, and renders the three boundary frames in the given style.
/// The rng drives state only; the style is an explicit argument so the same
/// stream yields the same trajectory under any style.
pub fn sample_triplet<T: Scalar>(
    cfg: &WorldConfig,
    style: &RenderStyle,
    rng: &mut ChaCha8Rng,
) -> FrameTriplet<T> {
    let start = sample_start(cfg, rng);
    let actions = [sample_action(cfg, rng), sample_action(cfg, rng)];
    let mut states = [start, start, start];
    for step in 0..2 {
        let mut s = states[step];
        for _ in 0..cfg.interval_k {
            let next = s.apply(&actions[step]);
            // The margin guarantees motion never reaches the clamp.
            debug_assert!(next.position[0] > 0.0 && next.position[0] < 1.0);
            debug_assert!(next.position[1] > 0.0 && next.position[1] < 1.0);
            s = next;
        }
        states[step + 1] = s;
    }
    FrameTriplet {
        frames: [
            render(cfg, &states[0], style),
            render(cfg, &states[1], style),
            render(cfg, &states[2], style),
        ],
        interval_k: cfg.interval_k,
        actions,
        style_id: style.style_id,
    }
}

/// Deterministic batch generation. State and style choices come from
/// separate streams derived from the seed, so changing the style list
/// leaves every trajectory untouched.
pub fn generate_triplets<T: Scalar>(
    cfg: &WorldConfig,
    seed: u64,
    count: usize,
) -> Result<Vec<FrameTriplet<T>>> {
    cfg.validate()?;
    let mut state_rng = derived_rng(seed, "world-state");
    let mut style_rng = derived_rng(seed, "world-style");
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = cfg.style_ids[style_rng.gen_range(0..cfg.style_ids.len())];
        let style = builtin_style(id)?;
        out.push(sample_triplet(cfg, style, &mut state_rng));
    }
    Ok(out)
}

// ---- motion estimation ----

#[derive(Debug, Clone, Copy)]
pub struct MotionEstimate {
    /// Centroid displacement in pixels.
    pub delta_px: [f64; 2],
    /// Radians, positive clockwise on screen.
    pub delta_heading: f64,
    /// Peak normalized cross-correlation of the rotation search.
    pub correlation: f64,
}

const DETECTION_MIN_MASS: f64 = 0.5;
const DETECTION_MIN_CORRELATION: f64 = 0.5;
const ROTATION_SEARCH_LIMIT: f64 = 1.25;

struct MaskStats {
    mask: Array2<f64>,
    centroid: [f64; 2],
    sigma: f64,
}

/// Per-pixel euclidean distance from the style's background: soft sprite
/// coverage, insensitive to what the sprite colors actually are.
fn sprite_mask<T: Scalar>(frame: &ArrayView3<T>, style: &RenderStyle) -> Result<MaskStats> {
    let (h, w, c) = frame.dim();
    if c != 3 {
        return Err(CoreError::ShapeMismatch(format!(
            "expected 3 channels, got {}",
            c
        )));
    }
    let mut mask = Array2::<f64>::zeros((h, w));
    for iy in 0..h {
        for ix in 0..w {
            let bg = style.background_at((ix as f64 + 0.5) / w as f64);
            let mut d2 = 0.0;
            for ch in 0..3 {
                let d = frame[[iy, ix, ch]].to_f64() - bg[ch];
                d2 += d * d;
            }
            mask[[iy, ix]] = d2.sqrt();
        }
    }
    let mass: f64 = mask.sum();
    if mass < DETECTION_MIN_MASS {
        return Err(CoreError::SpriteNotDetected { correlation: 0.0 });
    }
    let mut cx = 0.0;
    let mut cy = 0.0;
    for iy in 0..h {
        for ix in 0..w {
            // Pixel (ix, iy) covers [ix, ix+1): its center is at +0.5.
            cx += mask[[iy, ix]] * (ix as f64 + 0.5);
            cy += mask[[iy, ix]] * (iy as f64 + 0.5);
        }
    }
    let centroid = [cx / mass, cy / mass];
    let mut var = 0.0;
    for iy in 0..h {
        for ix in 0..w {
            let dx = ix as f64 + 0.5 - centroid[0];
            let dy = iy as f64 + 0.5 - centroid[1];
            var += mask[[iy, ix]] * (dx * dx + dy * dy);
        }
    }
    Ok(MaskStats {
        mask,
        centroid,
        sigma: (var / mass).sqrt(),
    })
}

/// Bilinear sample at pixel-center coordinates, clamped at the border.
fn bilinear(mask: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = mask.dim();
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let top = mask[[y0, x0]] * (1.0 - tx) + mask[[y0, x1]] * tx;
    let bot = mask[[y1, x0]] * (1.0 - tx) + mask[[y1, x1]] * tx;
    top * (1.0 - ty) + bot * ty
}

/// Correlates mask_a around its centroid with mask_b sampled at offsets
/// rotated by delta around its centroid. At the true heading change the
/// two patches coincide.
fn rotation_ncc(a: &MaskStats, b: &MaskStats, radius: i64, delta: f64) -> f64 {
    let (sin_d, cos_d) = delta.sin_cos();
    let n = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let mut sa = 0.0;
    let mut sb = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for oy in -radius..=radius {
        for ox in -radius..=radius {
            let va = bilinear(&a.mask, a.centroid[0] + ox as f64, a.centroid[1] + oy as f64);
            let rx = cos_d * ox as f64 - sin_d * oy as f64;
            let ry = sin_d * ox as f64 + cos_d * oy as f64;
            let vb = bilinear(&b.mask, b.centroid[0] + rx, b.centroid[1] + ry);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let cov = sab - sa * sb / n;
    let var_a = saa - sa * sa / n;
    let var_b = sbb - sb * sb / n;
    if var_a <= 0.0 || var_b <= 0.0 {
        return 0.0;
    }
    cov / (var_a * var_b).sqrt()
}

/// Centroid displacement plus rotation recovered by a coarse-to-fine grid
/// search over normalized cross-correlation of the two background-difference
/// masks. Styles are passed explicitly because background subtraction needs
/// them; the rotation search assumes both frames show the same sprite shape
/// (when they do not, the correlation gate fails and an error is returned).
pub fn estimate_sprite_motion<T: Scalar>(
    frame_a: &ArrayView3<T>,
    style_a: &RenderStyle,
    frame_b: &ArrayView3<T>,
    style_b: &RenderStyle,
) -> Result<MotionEstimate> {
    if frame_a.dim() != frame_b.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "frame dims {:?} vs {:?}",
            frame_a.dim(),
            frame_b.dim()
        )));
    }
    let a = sprite_mask(frame_a, style_a)?;
    let b = sprite_mask(frame_b, style_b)?;
    let (h, w, _) = frame_a.dim();
    let radius = ((3.0 * a.sigma.max(b.sigma)).ceil() as i64 + 2)
        .max(6)
        .min((h.min(w) / 2) as i64 - 1);

    let mut best = (0.0f64, f64::NEG_INFINITY);
    let coarse = 0.02;
    let steps = (ROTATION_SEARCH_LIMIT / coarse).round() as i64;
    for i in -steps..=steps {
        let delta = i as f64 * coarse;
        let ncc = rotation_ncc(&a, &b, radius, delta);
        if ncc > best.1 {
            best = (delta, ncc);
        }
    }
    let fine = 0.0025;
    let fine_steps = (coarse / fine).round() as i64 + 2;
    let center = best.0;
    for i in -fine_steps..=fine_steps {
        let delta = center + i as f64 * fine;
        if delta.abs() > ROTATION_SEARCH_LIMIT + coarse {
            continue;
        }
        let ncc = rotation_ncc(&a, &b, radius, delta);
        if ncc > best.1 {
            best = (delta, ncc);
        }
    }
    if best.1 < DETECTION_MIN_CORRELATION {
        return Err(CoreError::SpriteNotDetected { correlation: best.1 });
    }
    Ok(MotionEstimate {
        delta_px: [b.centroid[0] - a.centroid[0], b.centroid[1] - a.centroid[1]],
        delta_heading: best.0,
        correlation: best.1,
    })
}

// ---- dataset format ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkEntry {
    pub frames: String,
    pub labels: String,
    pub count: usize,
    pub frames_sha256: String,
    pub labels_sha256: String,
}

/// The `manifest` file, stored as TOML. Checksums cover the raw bytes of
/// each chunk file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub interval_k: usize,
    pub style_ids: Vec<u32>,
    pub chunks: Vec<ChunkEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

fn frame_floats(height: usize, width: usize) -> usize {
    height * width * 3
}

fn push_action(out: &mut Vec<f32>, a: &GroundTruthAction) {
    out.push(a.delta_position[0] as f32);
    out.push(a.delta_position[1] as f32);
    out.push(a.delta_heading as f32);
    out.push(a.delta_gripper as f32);
    out.push(a.class_label.index() as f32);
}

/// Writes `manifest` + chunk files into `dir`. The manifest goes last so a
/// partially written directory is detectable. Triplets must agree on frame
/// shape and interval.
pub fn write_dataset<T: Scalar>(triplets: &[FrameTriplet<T>], dir: &Path) -> Result<DatasetManifest> {
    if triplets.is_empty() {
        return Err(CoreError::InvalidInput("no triplets to write".to_string()));
    }
    let (h, w, c) = triplets[0].frames[0].dim();
    let k = triplets[0].interval_k;
    std::fs::create_dir_all(dir)?;
    let mut style_ids: Vec<u32> = Vec::new();
    let mut chunks = Vec::new();
    for (chunk_idx, chunk) in triplets.chunks(CHUNK_SIZE).enumerate() {
        let mut frame_bytes: Vec<u8> = Vec::with_capacity(chunk.len() * 3 * frame_floats(h, w) * 4);
        let mut label_bytes: Vec<u8> = Vec::with_capacity(chunk.len() * LABEL_RECORD_LEN * 4);
        for t in chunk {
            for frame in &t.frames {
                if frame.dim() != (h, w, c) {
                    return Err(CoreError::ShapeMismatch(
                        "triplets in one dataset must share frame shape".to_string(),
                    ));
                }
                for &v in frame.iter() {
                    frame_bytes.write_f32::<LittleEndian>(v.to_f32())?;
                }
            }
            if t.interval_k != k {
                return Err(CoreError::InvalidInput(
                    "triplets in one dataset must share interval k".to_string(),
                ));
            }
            let mut rec: Vec<f32> = Vec::with_capacity(LABEL_RECORD_LEN);
            rec.push(t.style_id as f32);
            push_action(&mut rec, &t.actions[0]);
            push_action(&mut rec, &t.actions[1]);
            for v in rec {
                label_bytes.write_f32::<LittleEndian>(v)?;
            }
            if !style_ids.contains(&t.style_id) {
                style_ids.push(t.style_id);
            }
        }
        let frames_name = format!("frames_{:04}.f32", chunk_idx);
        let labels_name = format!("labels_{:04}.f32", chunk_idx);
        let entry = ChunkEntry {
            frames_sha256: sha256_hex(&frame_bytes),
            labels_sha256: sha256_hex(&label_bytes),
            frames: frames_name.clone(),
            labels: labels_name.clone(),
            count: chunk.len(),
        };
        std::fs::File::create(dir.join(&frames_name))?.write_all(&frame_bytes)?;
        std::fs::File::create(dir.join(&labels_name))?.write_all(&label_bytes)?;
        chunks.push(entry);
    }
    style_ids.sort_unstable();
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        count: triplets.len(),
        height: h,
        width: w,
        channels: c,
        interval_k: k,
        style_ids,
        chunks,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| CoreError::DataFormat(format!("manifest serialization: {}", e)))?;
    std::fs::write(dir.join("manifest"), text)?;
    Ok(manifest)
}

#[derive(Debug)]
struct LoadedChunk {
    frames: Vec<f32>,
    labels: Vec<f32>,
}

/// Read-only dataset handle. Chunks are checksum-verified on first touch
/// and cached; `get` is safe to call from multiple threads.
#[derive(Debug)]
pub struct Dataset<T: Scalar> {
    dir: PathBuf,
    manifest: DatasetManifest,
    offsets: Vec<usize>,
    cache: Mutex<HashMap<usize, Arc<LoadedChunk>>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn open(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest"))?;
        let manifest: DatasetManifest = toml::from_str(&text)
            .map_err(|e| CoreError::DataFormat(format!("manifest parse: {}", e)))?;
        if manifest.version != DATASET_VERSION {
            return Err(CoreError::DataFormat(format!(
                "dataset version {} unsupported (expected {})",
                manifest.version, DATASET_VERSION
            )));
        }
        if manifest.channels != 3 {
            return Err(CoreError::DataFormat(format!(
                "expected 3 channels, manifest says {}",
                manifest.channels
            )));
        }
        let total: usize = manifest.chunks.iter().map(|c| c.count).sum();
        if total != manifest.count {
            return Err(CoreError::DataFormat(format!(
                "manifest count {} but chunks hold {}",
                manifest.count, total
            )));
        }
        let mut offsets = Vec::with_capacity(manifest.chunks.len());
        let mut acc = 0;
        for c in &manifest.chunks {
            offsets.push(acc);
            acc += c.count;
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            offsets,
            cache: Mutex::new(HashMap::new()),
            _marker: std::marker::PhantomData,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    fn read_floats(&self, name: &str, expect_sha: &str, expect_len: usize) -> Result<Vec<f32>> {
        let mut bytes = Vec::new();
        std::fs::File::open(self.dir.join(name))?.read_to_end(&mut bytes)?;
        let got = sha256_hex(&bytes);
        if got != expect_sha {
            return Err(CoreError::Checksum(format!(
                "{}: stored {} read {}",
                name, expect_sha, got
            )));
        }
        if bytes.len() != expect_len * 4 {
            return Err(CoreError::DataFormat(format!(
                "{}: {} bytes, expected {}",
                name,
                bytes.len(),
                expect_len * 4
            )));
        }
        let mut floats = vec![0.0f32; expect_len];
        bytes.as_slice().read_f32_into::<LittleEndian>(&mut floats)?;
        Ok(floats)
    }

    fn chunk(&self, idx: usize) -> Result<Arc<LoadedChunk>> {
        let mut cache = self.cache.lock().expect("dataset cache poisoned");
        if let Some(c) = cache.get(&idx) {
            return Ok(c.clone());
        }
        let entry = &self.manifest.chunks[idx];
        let per_frame = frame_floats(self.manifest.height, self.manifest.width);
        let frames = self.read_floats(&entry.frames, &entry.frames_sha256, entry.count * 3 * per_frame)?;
        let labels = self.read_floats(&entry.labels, &entry.labels_sha256, entry.count * LABEL_RECORD_LEN)?;
        let loaded = Arc::new(LoadedChunk { frames, labels });
        cache.insert(idx, loaded.clone());
        Ok(loaded)
    }

    pub fn get(&self, index: usize) -> Result<FrameTriplet<T>> {
        if index >= self.len() {
            return Err(CoreError::InvalidInput(format!(
                "triplet index {} out of range (dataset holds {})",
                index,
                self.len()
            )));
        }
        let chunk_idx = self
            .offsets
            .iter()
            .rposition(|&o| o <= index)
            .expect("offsets start at zero");
        let within = index - self.offsets[chunk_idx];
        let data = self.chunk(chunk_idx)?;
        let (h, w) = (self.manifest.height, self.manifest.width);
        let per_frame = frame_floats(h, w);
        let base = within * 3 * per_frame;
        let mut frames: Vec<Array3<T>> = Vec::with_capacity(3);
        for f in 0..3 {
            let slice = &data.frames[base + f * per_frame..base + (f + 1) * per_frame];
            frames.push(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                T::from_f32(slice[(y * w + x) * 3 + c])
            }));
        }
        let rec = &data.labels[within * LABEL_RECORD_LEN..(within + 1) * LABEL_RECORD_LEN];
        let read_action = |off: usize| -> Result<GroundTruthAction> {
            let class_raw = rec[off + 4];
            if class_raw.fract() != 0.0 || class_raw < 0.0 {
                return Err(CoreError::DataFormat(format!(
                    "label class {} is not an index",
                    class_raw
                )));
            }
            let class = ActionClass::from_index(class_raw as usize)?;
            Ok(GroundTruthAction {
                delta_position: [rec[off] as f64, rec[off + 1] as f64],
                delta_heading: rec[off + 2] as f64,
                delta_gripper: rec[off + 3] as f64,
                class_label: class,
            })
        };
        let mut frames_iter = frames.into_iter();
        Ok(FrameTriplet {
            frames: [
                frames_iter.next().unwrap(),
                frames_iter.next().unwrap(),
                frames_iter.next().unwrap(),
            ],
            interval_k: self.manifest.interval_k,
            actions: [read_action(1)?, read_action(6)?],
            style_id: rec[0] as u32,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<FrameTriplet<T>>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Anything a training loop can draw triplets from: an on-disk dataset or an
/// in-memory batch.
pub trait TripletSource<T: Scalar>: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<FrameTriplet<T>>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> TripletSource<T> for Dataset<T> {
    fn len(&self) -> usize {
        Dataset::len(self)
    }

    fn get(&self, index: usize) -> Result<FrameTriplet<T>> {
        Dataset::get(self, index)
    }
}

impl<T: Scalar> TripletSource<T> for [FrameTriplet<T>] {
    fn len(&self) -> usize {
        <[FrameTriplet<T>]>::len(self)
    }

    fn get(&self, index: usize) -> Result<FrameTriplet<T>> {
        <[FrameTriplet<T>]>::get(self, index)
            .cloned()
            .ok_or_else(|| CoreError::InvalidInput(format!("triplet index {} out of range", index)))
    }
}

impl<T: Scalar> TripletSource<T> for Vec<FrameTriplet<T>> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn get(&self, index: usize) -> Result<FrameTriplet<T>> {
        TripletSource::get(self.as_slice(), index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    fn mid_state(heading: f64) -> WorldState {
        WorldState::new([0.5, 0.5], heading, 0.3)
    }

    #[test]
    fn wrap_angle_hits_boundaries() {
        let pi = std::f64::consts::PI;
        assert_eq!(wrap_angle(pi), pi);
        assert_eq!(wrap_angle(-pi), pi);
        assert!((wrap_angle(1.5 * pi) + 0.5 * pi).abs() < 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(2.0 * pi)).abs() < 1e-12);
    }

    #[test]
    fn classify_priority_order() {
        assert_eq!(
            GroundTruthAction::classify([-0.01, 0.0], 0.5),
            ActionClass::Left
        );
        assert_eq!(
            GroundTruthAction::classify([0.0, 0.02], 0.0),
            ActionClass::Down
        );
        assert_eq!(GroundTruthAction::classify([0.0, 0.0], -0.1), ActionClass::RotateCcw);
        assert_eq!(GroundTruthAction::classify([0.0, 0.0], 0.0), ActionClass::Static);
        // x wins the exact tie with y.
        assert_eq!(
            GroundTruthAction::classify([0.01, 0.01], 0.0),
            ActionClass::Right
        );
    }

    #[test]
    fn render_is_deterministic() {
        let c = cfg();
        let s = mid_state(0.7);
        let a: Array3<f32> = render(&c, &s, builtin_style(0).unwrap());
        let b: Array3<f32> = render(&c, &s, builtin_style(0).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn styles_differ_at_every_pixel_with_same_centroid() {
        let c = cfg();
        let s = mid_state(-1.1);
        for (ia, ib) in [(0u32, 1u32), (1, 2), (0, 3), (2, 3)] {
            let fa: Array3<f64> = render(&c, &s, builtin_style(ia).unwrap());
            let fb: Array3<f64> = render(&c, &s, builtin_style(ib).unwrap());
            for y in 0..c.height {
                for x in 0..c.width {
                    let da = (fa[[y, x, 0]] - fb[[y, x, 0]]).abs();
                    assert!(da > 0.05, "styles {} {} agree at pixel {},{}", ia, ib, x, y);
                }
            }
            let ma = sprite_mask(&fa.view(), builtin_style(ia).unwrap()).unwrap();
            let mb = sprite_mask(&fb.view(), builtin_style(ib).unwrap()).unwrap();
            // Different shapes, same state: centroids land together.
            assert!((ma.centroid[0] - mb.centroid[0]).abs() < 0.6);
            assert!((ma.centroid[1] - mb.centroid[1]).abs() < 0.6);
        }
    }

    #[test]
    fn gripper_changes_sprite_interior() {
        let c = cfg();
        let closed: Array3<f64> = render(&c, &WorldState::new([0.5, 0.5], 0.4, 0.0), builtin_style(0).unwrap());
        let open: Array3<f64> = render(&c, &WorldState::new([0.5, 0.5], 0.4, 1.0), builtin_style(0).unwrap());
        let diff: f64 = closed
            .iter()
            .zip(open.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.1, "gripper dot invisible (sum abs diff {})", diff);
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let c = cfg();
        for id in 0..4 {
            let f: Array3<f64> = render(&c, &mid_state(2.0), builtin_style(id).unwrap());
            for v in f.iter() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn dot_disk_fits_inside_every_shape() {
        let c = cfg();
        let dot_unit = c.dot_radius / c.sprite_scale;
        for shape in SHAPES {
            for i in 0..64 {
                let ang = 2.0 * std::f64::consts::PI * i as f64 / 64.0;
                // Sample just outside the dot edge: still sprite, not background.
                let r = dot_unit * 1.05;
                assert!(
                    shape.contains([r * ang.cos(), r * ang.sin()]),
                    "{:?} does not cover the center dot at angle {}",
                    shape,
                    ang
                );
            }
        }
    }

    #[test]
    fn static_triplet_frames_are_identical() {
        let c = cfg();
        let style = builtin_style(2).unwrap();
        let mut rng = derived_rng(5, "test-static");
        // Draw until both actions are static.
        loop {
            let t: FrameTriplet<f32> = sample_triplet(&c, style, &mut rng);
            if t.actions[0].class_label == ActionClass::Static
                && t.actions[1].class_label == ActionClass::Static
            {
                assert_eq!(t.frames[0], t.frames[1]);
                assert_eq!(t.frames[1], t.frames[2]);
                break;
            }
        }
    }

    #[test]
    fn triplets_are_seed_deterministic() {
        let c = cfg();
        let a: Vec<FrameTriplet<f32>> = generate_triplets(&c, 42, 3).unwrap();
        let b: Vec<FrameTriplet<f32>> = generate_triplets(&c, 42, 3).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.frames[0], y.frames[0]);
            assert_eq!(x.frames[2], y.frames[2]);
            assert_eq!(x.actions[0], y.actions[0]);
            assert_eq!(x.style_id, y.style_id);
        }
    }

    #[test]
    fn style_list_does_not_affect_trajectories() {
        let mut only0 = cfg();
        only0.style_ids = vec![0];
        let mut only2 = cfg();
        only2.style_ids = vec![2];
        let a: Vec<FrameTriplet<f64>> = generate_triplets(&only0, 9, 4).unwrap();
        let b: Vec<FrameTriplet<f64>> = generate_triplets(&only2, 9, 4).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.actions, y.actions);
            // Same state, different style: every pixel differs.
            let differing = x.frames[0]
                .iter()
                .zip(y.frames[0].iter())
                .filter(|(p, q)| p != q)
                .count();
            assert_eq!(differing, x.frames[0].len());
        }
    }

    #[test]
    fn estimate_on_identical_frames_is_exactly_zero() {
        let c = cfg();
        let f: Array3<f64> = render(&c, &mid_state(0.9), builtin_style(1).unwrap());
        let est = estimate_sprite_motion(
            &f.view(),
            builtin_style(1).unwrap(),
            &f.view(),
            builtin_style(1).unwrap(),
        )
        .unwrap();
        assert_eq!(est.delta_px, [0.0, 0.0]);
        assert_eq!(est.delta_heading, 0.0);
        assert!(est.correlation > 0.99);
    }

    #[test]
    fn estimate_recovers_known_shift() {
        let c = cfg();
        let style = builtin_style(0).unwrap();
        let a: Array3<f64> = render(&c, &WorldState::new([0.45, 0.5], 0.6, 0.5), style);
        // +3px in x, -2px in y at 32x32.
        let b: Array3<f64> = render(
            &c,
            &WorldState::new([0.45 + 3.0 / 32.0, 0.5 - 2.0 / 32.0, ], 0.6, 0.5),
            style,
        );
        let est = estimate_sprite_motion(&a.view(), style, &b.view(), style).unwrap();
        assert!((est.delta_px[0] - 3.0).abs() < 1.0, "dx {}", est.delta_px[0]);
        assert!((est.delta_px[1] + 2.0).abs() < 1.0, "dy {}", est.delta_px[1]);
        assert!(est.delta_heading.abs() < 0.1);
    }

    #[test]
    fn estimate_recovers_pure_rotation() {
        let c = cfg();
        for id in 0..4 {
            let style = builtin_style(id).unwrap();
            let a: Array3<f64> = render(&c, &WorldState::new([0.5, 0.5], -0.3, 0.2), style);
            let b: Array3<f64> = render(&c, &WorldState::new([0.5, 0.5], -0.3 + 0.35, 0.2), style);
            let est = estimate_sprite_motion(&a.view(), style, &b.view(), style).unwrap();
            let dp = (est.delta_px[0].powi(2) + est.delta_px[1].powi(2)).sqrt();
            assert!(dp < 1.0, "style {}: spurious translation {}", id, dp);
            assert!(
                (est.delta_heading - 0.35).abs() < 0.1,
                "style {}: rotation estimate {}",
                id,
                est.delta_heading
            );
        }
    }

    #[test]
    fn background_only_frame_is_not_detected() {
        let c = cfg();
        let style = builtin_style(2).unwrap();
        let mut bg = Array3::<f64>::zeros((c.height, c.width, 3));
        for y in 0..c.height {
            for x in 0..c.width {
                let col = style.background_at((x as f64 + 0.5) / c.width as f64);
                for ch in 0..3 {
                    bg[[y, x, ch]] = col[ch];
                }
            }
        }
        let sprite: Array3<f64> = render(&c, &mid_state(0.0), style);
        let err = estimate_sprite_motion(&sprite.view(), style, &bg.view(), style).unwrap_err();
        assert_eq!(err.category(), "sprite-not-detected");
    }

    #[test]
    fn sampled_labels_match_classifier() {
        let c = cfg();
        let mut rng = derived_rng(11, "test-classify");
        for _ in 0..200 {
            let a = sample_action(&c, &mut rng);
            assert_eq!(
                a.class_label,
                GroundTruthAction::classify(a.delta_position, a.delta_heading)
            );
            assert_eq!(a.delta_gripper, 0.0);
        }
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let c = cfg();
        let triplets: Vec<FrameTriplet<f32>> = generate_triplets(&c, 3, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&triplets, dir.path()).unwrap();
        let ds: Dataset<f32> = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 10);
        for (i, t) in triplets.iter().enumerate() {
            let r = ds.get(i).unwrap();
            for f in 0..3 {
                assert_eq!(t.frames[f], r.frames[f], "triplet {} frame {}", i, f);
            }
            assert_eq!(t.actions, r.actions, "triplet {}", i);
            assert_eq!(t.style_id, r.style_id);
            assert_eq!(t.interval_k, r.interval_k);
        }
    }

    #[test]
    fn corrupt_chunk_fails_checksum() {
        let c = cfg();
        let triplets: Vec<FrameTriplet<f32>> = generate_triplets(&c, 4, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&triplets, dir.path()).unwrap();
        // Truncate the frames chunk behind the manifest's back.
        let path = dir.path().join("frames_0000.f32");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let ds: Dataset<f32> = Dataset::open(dir.path()).unwrap();
        let err = ds.get(0).unwrap_err();
        assert_eq!(err.category(), "checksum");
    }

    #[test]
    fn manifest_count_mismatch_is_rejected() {
        let c = cfg();
        let triplets: Vec<FrameTriplet<f32>> = generate_triplets(&c, 4, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&triplets, dir.path()).unwrap();
        let path = dir.path().join("manifest");
        let text = std::fs::read_to_string(&path).unwrap();
        // Only the top-level count (the first occurrence): the chunk entry
        // keeps its true count, so the totals disagree.
        std::fs::write(&path, text.replacen("count = 3", "count = 4", 1)).unwrap();
        let err = Dataset::<f32>::open(dir.path()).unwrap_err();
        assert_eq!(err.category(), "data-format");
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let c = cfg();
        let triplets: Vec<FrameTriplet<f32>> = generate_triplets(&c, 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&triplets, dir.path()).unwrap();
        let path = dir.path().join("manifest");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("version = 1", "version = 99")).unwrap();
        let err = Dataset::<f32>::open(dir.path()).unwrap_err();
        assert_eq!(err.category(), "data-format");
    }

    #[test]
    fn generation_is_byte_identical_per_seed() {
        let c = cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        for dir in [&dir_a, &dir_b] {
            let triplets: Vec<FrameTriplet<f32>> = generate_triplets(&c, 77, 5).unwrap();
            write_dataset(&triplets, dir.path()).unwrap();
        }
        for name in ["manifest", "frames_0000.f32", "labels_0000.f32"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{} differs between runs", name);
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = cfg();
        c.style_ids = vec![9];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.interval_k = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.sprite_scale = 0.6;
        assert!(c.validate().is_err(), "margin should exceed 0.5");
        assert!(cfg().validate().is_ok());
    }
}
