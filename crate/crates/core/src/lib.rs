//! Pillar-based 3D pedestrian detection on LiDAR point clouds.
//!
//! The crate covers the whole desk-scale pipeline: pillar quantization with
//! per-point decoration, a stackable pillar-attention feature encoder, a
//! gated bidirectional feature pyramid over the scattered pseudo-image, an
//! anchor-based detection head with focal and L1 losses, and the rotated-box
//! geometry plus AP@40 evaluation protocol. Everything differentiable runs on
//! the minimal reverse-mode tape in [`tensor`], so each building block can be
//! checked against central finite differences.

pub mod backbone;
pub mod error;
pub mod eval;
pub mod geom;
pub mod head;
pub mod init;
pub mod model;
pub mod paa;
pub mod pillar;
pub mod scene;
pub mod selfcheck;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
