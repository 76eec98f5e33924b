//! Unified multi-head audio-to-face animation.
//!
//! One model consumes a raw audio waveform and emits 3D facial motion under
//! several heterogeneous annotation conventions (mesh vertices, blendshape
//! weights, skeleton poses), each handled by its own decoder head. The crate
//! contains the full pipeline at desk scale:
//!
//! - [`numerics`]: dense tensors, a reverse-mode differentiation graph, the
//!   layer primitives the model needs, finite-difference checking and Adam.
//! - [`motion`]: annotation conventions and differentiable derivation of face
//!   vertices from each head's native output.
//! - [`ipca`]: incremental PCA over vertex frames plus an exact SVD oracle.
//! - [`dataset`]: manifest loading, splits, duplication balancing, binary
//!   motion/audio formats and a synthetic dataset generator.
//! - [`model`]: the audio encoder, frequency adaptor, identity embedding with
//!   pivot, motion decoder, per-convention heads and checkpoint container.
//! - [`training`]: two-stage training, loss routing, fine-tuning and transfer
//!   harnesses, and the stability-grid driver.
//! - [`metrics`]: lip-sync and facial-dynamics error metrics.

pub mod container;
pub mod dataset;
pub mod ipca;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod numerics;
pub mod training;
