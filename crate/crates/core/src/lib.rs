//! Fusion-token multimodal joint-embedding training stack.
//!
//! The crate is organised bottom-up:
//!
//! * [`grad`]: define-by-run reverse-mode autodiff over dense `f64` arrays
//! * [`sigreg`]: invariance and characteristic-function Gaussian matching losses
//! * [`vit`]: the fusion-token encoder with pruned / persistent routing
//! * [`scene`]: procedural paired RGB + companion-modality scenes
//! * [`views`]: synchronized multi-crop view generation
//! * [`optim`]: AdamW and learning-rate schedules
//! * [`probes`]: frozen-feature segmentation and depth probes
//! * [`profiler`]: analytic and instrumented cost accounting
//! * [`train`]: run configuration, checkpoints and the training loop

pub mod error;
pub mod grad;
pub mod image;
pub mod optim;
pub mod probes;
pub mod profiler;
pub mod rng;
pub mod scene;
pub mod sigreg;
pub mod train;
pub mod views;
pub mod vit;

pub use error::{Error, Result};
pub use grad::{Graph, ParamStore, Tensor, Var};
pub use image::Image;
