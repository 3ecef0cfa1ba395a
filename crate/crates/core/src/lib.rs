//! Volumetric segmentation toolkit: a small reverse-mode autodiff engine, the
//! basic encoder-decoder and dual-stream (DFUNet) networks built on it, losses,
//! augmentation, preprocessing, training and sliding-window inference.

pub mod augment;
pub mod blocks;
pub mod error;
pub mod inference;
pub mod io;
pub mod losses;
pub mod models;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
