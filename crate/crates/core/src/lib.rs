//! Salient object subitizing toolkit.
//!
//! Predicts how many salient objects an image contains, as one of five count
//! classes `0, 1, 2, 3, 4+`. The crate covers the whole pipeline:
//!
//! - [`data`]: annotation consolidation, manifests, reproducible splits.
//! - [`imaging`]: RGBA float rasters, bilinear resize, cutout transforms,
//!   alpha compositing and PNG / raw-float codecs.
//! - [`synth`]: cut-and-paste generation of labeled multi-object scenes with
//!   occlusion-based rejection.
//! - [`nnet`]: a small convolutional counter ("SubitNet") trained with SGD and
//!   momentum, including two-stage (synthetic then real) fine-tuning.
//! - [`eval`]: VOC07 11-point AP, mAP, chance baseline, confusion matrices.
//! - [`featviz`]: channel novelty by maximum Spearman correlation and
//!   top-activation patches.
//! - [`detect`]: count-cued detection post-processing and pooled P/R/F.
//! - [`retrieval`]: KNN tag voting, score combination and nDCG@h.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.
//! Results never depend on the execution mode.

pub mod config;
pub mod data;
pub mod detect;
pub mod eval;
pub mod exec;
pub mod featviz;
pub mod imaging;
pub mod nnet;
pub mod retrieval;
pub mod seed;
pub mod synth;

pub use data::{Category, CountLabel, DatasetManifest, ManifestEntry};
pub use exec::Execution;
pub use imaging::{BoundingBox, RasterImage};

/// Version string written next to every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
