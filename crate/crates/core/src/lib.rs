//! Semantic segmentation with a cascaded channel + spatial attention block.
//!
//! The crate bundles everything needed to train and evaluate the network at
//! desk scale: a small reverse-mode autodiff engine ([`tape`]), the attention
//! block ([`attention`]), an encoder-decoder model ([`model`]), raster data
//! handling and augmentation ([`data`]), training ([`train`]), tiled
//! inference with heatmaps ([`infer`]), segmentation metrics ([`metrics`]) and
//! the command-line workflow ([`cli`]).

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod keyvalue;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod par;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
