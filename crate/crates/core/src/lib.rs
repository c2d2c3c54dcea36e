//! Semi-supervised video intensity regression: a CNN + ConvGRU encoder
//! pretrained with a contrastive predictive pretext, then fine-tuned from
//! sparse frame labels by backpropagation through time.

pub mod checkpoint;
pub mod cli;
pub mod cpc;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod metrics;
pub mod model;
pub mod semisup;

pub use error::{Error, Result};
