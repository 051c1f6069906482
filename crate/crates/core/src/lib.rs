//! Rotational latent action modeling on a procedural sprite world.
//!
//! The pipeline discovers latent actions as SO(n) rotation matrices from frame
//! pairs (encoder + soft vector quantization + orthogonal projection), trains
//! them with a compositional triplet objective, and drives a flow-matching
//! action head that denoises latent and robot action chunks jointly under a
//! structured attention mask. Everything is generic over the scalar type
//! (`f32` for the pipeline and on-disk tensors, `f64` for gradient checks).

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod flow;
pub mod lam;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod quantizer;
pub mod rng;
pub mod rotation;
pub mod scalar;
pub mod tensor;
pub mod world;

pub use error::CoreError;
pub use scalar::Scalar;

/// Pipeline default scalar. Datasets and checkpoints both store little-endian
/// f32 on disk; f64 model instantiations are for double-precision
/// gradient checks.
pub type Real = f32;

pub type Rotation = rotation::RotationLatent<Real>;
pub type Lam = lam::LamModel<Real>;
pub type Flow = flow::FlowModel<Real>;
pub type Ckpt = checkpoint::Checkpoint<Real>;
