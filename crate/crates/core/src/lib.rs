//! Desk-scale laboratory for single-domain generalized object detection.
//!
//! The crate bundles everything needed to train and stress-test a miniature
//! two-stage detector under a corruption benchmark:
//!
//! - [`grad`]: a dense-tensor engine with reverse-mode automatic
//!   differentiation and an SGD optimizer,
//! - [`imagef`]: float images in `[0, 1]` with PNG round-tripping,
//! - [`corruption`]: the 15-type x 5-severity corruption taxonomy,
//! - [`augment`]: the color + frequency training-time augmentation,
//! - [`data`]: a synthetic labeled source domain of shape scenes,
//! - [`select`]: multi-region text-image selection over a batch,
//! - [`embed`]: a frozen text-embedding provider (pseudo or file-backed),
//! - [`crfi`]: the cross-modal region feature-interaction loss family,
//! - [`detector`]: the toy backbone / RPN / ROI detector with cross-domain
//!   proposal refining and mixing,
//! - [`eval`]: IoU, average precision, mAP, the mPC aggregate and the
//!   clean-vs-corrupted cosine-similarity report.
//!
//! Core math is generic over the scalar type through [`scalar::Real`]
//! (`f32` or `f64`); the crate-root aliases below pin the `f64` lane that
//! the rest of the workspace uses.

pub mod augment;
pub mod corruption;
pub mod crfi;
pub mod data;
pub mod detector;
pub mod embed;
pub mod error;
pub mod eval;
pub mod grad;
pub mod imagef;
pub mod rng;
pub mod scalar;
pub mod select;

pub use error::CoreError;
pub use scalar::Real;

/// Default-precision tensor (`f64` data, `f64` gradients).
pub type Tensor = grad::Tensor<f64>;
/// Default-precision SGD optimizer.
pub type Sgd = grad::Sgd<f64>;
/// Default-precision float image.
pub type ImageF = imagef::ImageF<f64>;
/// Default-precision detection sample.
pub type DetectionSample = data::DetectionSample<f64>;
/// Default-precision embedding provider.
pub type EmbeddingProvider = embed::EmbeddingProvider<f64>;
/// Default-precision projection head.
pub type ProjectionHead = crfi::ProjectionHead<f64>;
/// Default-precision feature bundle.
pub type FeatureBundle = crfi::FeatureBundle<f64>;
/// Default-precision toy detector.
pub type ToyDetector = detector::ToyDetector<f64>;
