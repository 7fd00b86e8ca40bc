//! Locally aware vision transformer for person re-identification.
//!
//! The crate is self-contained: a small dense tensor library with reverse-mode
//! automatic differentiation ([`autodiff`]), a ViT encoder ([`backbone`]), the
//! globally-enhanced-local-token classifier ensemble ([`head`]), blockwise
//! fine-tuning ([`finetune`]), exact retrieval metrics ([`reid`]) and the data,
//! checkpoint and training plumbing around them.

pub mod autodiff;
pub mod backbone;
mod binio;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod optim;
pub mod params;
pub mod reid;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
