//! Desk-scale laboratory for scribble-supervised segmentation.
//!
//! The crate simulates sparse scribble annotation on synthetic images,
//! trains an analytically differentiable pixel classifier under partial
//! cross entropy, and layers on the supervision-side machinery studied
//! here: saliency-guided block mixup with transport and occlusion,
//! a global consistency loss, EM estimation of class mixture ratios
//! over unlabeled pixels, a spatial-energy prior with top-ranked
//! positive selection, and largest-component shape regularization.
//!
//! Data parallelism uses rayon behind the default `parallel` feature;
//! disabling it yields a dependency-free sequential build with
//! identical numerical results.

// The numeric kernels iterate several parallel flat buffers at once;
// explicit indices read better there than zipped iterator chains.
#![allow(clippy::needless_range_loop)]

pub mod core;
pub mod energy;
pub mod error;
pub mod estimator;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod mixaug;
pub mod morphology;
pub mod scribblegen;
pub mod study;
pub mod trainer;

pub use crate::core::{Image, LabelMap, ProbMap, SeededRng, SoftLabelMap, BACKGROUND, UNLABELED};
pub use crate::error::{Error, Result};
