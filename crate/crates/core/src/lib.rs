//! CGI-versus-photograph image classification with a from-scratch Swin
//! Transformer, evaluated across RGB, YCbCr and HSV inputs.

pub mod colorspace;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod swin;
pub mod training;
pub mod tsne;

pub use error::{Error, Result};
