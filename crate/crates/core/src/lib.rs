//! Few-shot object counting by iterative correlation-based feature
//! refinement.
//!
//! Given an image and a handful of exemplar boxes around instances of the
//! category to count, the pipeline
//!
//! 1. extracts a multi-layer feature map with a frozen convolutional
//!    backbone and ROI-pools one feature patch per exemplar ([`backbone`]),
//! 2. correlates the image features with every exemplar and normalizes the
//!    correlation across exemplars and across space ([`distill`]),
//! 3. stamps the exemplar features back onto the image grid weighted by that
//!    correlation and fuses the result into the image features, repeating
//!    for a fixed number of iterations ([`refine`]),
//! 4. regresses a full-resolution density map whose sum is the count
//!    ([`density`]).
//!
//! Everything runs on a small reverse-mode autodiff engine ([`autodiff`])
//! over dense `f64` tensors; training uses Adam ([`optim`]). [`synth`] and
//! [`dataset`] generate reproducible synthetic counting scenes, and
//! [`train`], [`eval`] and [`ablation`] drive experiments.

pub mod ablation;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod density;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod raster;
pub mod refine;
pub mod synth;
pub mod tensor;
pub mod train;

pub use backbone::{Backbone, BackboneConfig, BoxRegion, ImageSample};
pub use density::DensityMap;
pub use distill::CorrelationStack;
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use model::{CountingModel, ModelConfig, Prediction};
pub use params::{ParamId, ParamStore};
pub use refine::IterationTrace;
pub use tensor::Tensor;
pub use train::TrainConfig;
