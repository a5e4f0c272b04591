//! Dense-tensor implementation of the MetaSeg semantic segmentation network:
//! a convolutional MetaFormer encoder, a decoder of Global Meta Blocks with
//! Channel Reduction Attention, reverse-mode autodiff, and an analytical
//! cost model.

pub mod analyzer;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod image;
pub mod metaformer;
pub mod model;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::MetaSeg;
pub use params::{Init, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};
