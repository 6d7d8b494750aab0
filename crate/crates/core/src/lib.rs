//! Zero-shot low-light enhancement by optimizing the input seeds of frozen
//! Retinex decoders.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub mod pretrain;
pub mod retinex;
pub mod tensor;

pub use error::{Error, Result};
