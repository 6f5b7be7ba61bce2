//! Self-supervised change point detection for multivariate time series.
//!
//! The pipeline: a dilated causal convolution encoder maps fixed-length
//! history/future windows to compact embeddings, trained with a contrastive
//! objective so that adjacent windows embed similarly while windows far
//! apart in time do not. Change points are reported where the cosine
//! similarity between adjacent-window embeddings drops below its trailing
//! moving average.
//!
//! All numeric code is generic over the [`scalar::Scalar`] element type;
//! f32 is the working precision, f64 the shadow precision for gradient
//! verification. Concrete aliases for both live at the crate root.

pub mod contrastive;
pub mod data;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working-precision tensor used for training and inference.
pub type Tensor32 = tensor::Tensor<f32>;
/// Shadow-precision tensor used for gradient verification.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Series32 = data::LabeledSeries<f32>;
pub type Series64 = data::LabeledSeries<f64>;
pub type EncoderParams32 = encoder::EncoderParams<f32>;
pub type EncoderParams64 = encoder::EncoderParams<f64>;

