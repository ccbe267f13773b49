//! Locality-aware compact representation and compression for 3D Gaussian
//! splat scenes.
//!
//! The crate is organised around the stages of the pipeline:
//!
//! * [`model`]: Gaussian records, the explicit/implicit attribute split and
//!   PLY splat-file I/O.
//! * [`coherence`]: spatial coherence statistics of splat attributes.
//! * [`field`]: the multi-resolution hash grid + MLP heads that store the
//!   implicit attributes.
//! * [`masks`]: learnable pruning and SH-bandwidth masks.
//! * [`render`]: a CPU reference splatter with analytic gradients, plus
//!   PSNR/SSIM.
//! * [`train`]: Adam, the photometric loss, field distillation and a toy
//!   end-to-end trainer.
//! * [`densify`]: volumetric compositing and median-depth back-projection for
//!   dense point-cloud initialisation.
//! * [`codec`]: Morton sorting, lossless octree position coding, clipped
//!   quantization, range coding and the `.locogs` container.

pub mod coherence;
pub mod codec;
pub mod densify;
pub mod field;
pub mod masks;
pub mod math;
pub mod model;
pub mod render;
pub mod synthetic;
pub mod train;

pub use model::{ExplicitAttrs, Gaussian, ImplicitAttrs, PositionPrecision, SplatScene};
