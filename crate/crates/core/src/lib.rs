//! Core machinery for deformable neural field reconstruction: a tape-based
//! reverse-mode autodiff engine over dense f64 tensors, screw-axis rigid
//! transforms, windowed sinusoidal encodings, observation-to-canonical
//! warp fields, elastic and background regularizers, and a volume renderer
//! with image metrics.

pub mod encoding;
pub mod fields;
pub mod img;
pub mod lie;
pub mod metrics;
pub mod nn;
pub mod regularizers;
pub mod render;
pub mod svd;
pub mod tape;
pub mod tensor;

pub use tape::{NodeId, ParamId, Tape};
pub use tensor::Tensor;
