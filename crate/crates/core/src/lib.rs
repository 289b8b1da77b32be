//! Framework-free implementation of a dual-branch white-blood-cell classifier:
//! an EPSA + spatial-attention residual backbone fused with a morphological
//! attribute predictor/encoder, trained with a deep-supervision loss and a
//! pseudo-labeling pipeline, plus multi-label evaluation metrics.

pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
