//! Compression of splat scenes: Morton ordering, lossless position coding,
//! attribute quantization, range coding and the `.locogs` container.

pub mod container;
pub mod entropy;
pub mod morton;
pub mod octree;
pub mod quant;
pub mod reinterpret;

pub use container::{color_stream, decode_scene, encode_scene, CompressedScene, EncodeOptions, StorageStats, StreamKind};
pub use entropy::{entropy_decode, entropy_encode, ModelSpec};
pub use morton::{morton_decode, morton_key, morton_sort, MORTON_BITS};
pub use octree::{octree_decode, octree_encode};
pub use quant::{clip_multiplier, dequantize, quantize, QuantSpec};
pub use reinterpret::{reinterpret_pos, reinterpret_pos_inv};

/// Errors raised while encoding or decoding compressed data.
#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("invalid entropy model: {0}")]
    Model(String),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("checksum mismatch in {stream} stream")]
    Checksum { stream: &'static str },
    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("not a locogs container")]
    Magic,
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
