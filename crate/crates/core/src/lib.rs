//! Open long-tailed recognition at desk scale.
//!
//! The model maps an input to a direct feature (small MLP or conv backbone,
//! optionally with modulated attention on the last feature map), enriches it
//! with a memory feature composed from learned class centroids, calibrates
//! the result by its reachability to that memory, and classifies with a
//! cosine classifier over the squashed embedding. Training combines
//! cross-entropy with a large-margin loss against the centroids while the
//! centroids themselves follow an EMA of batch features.
//!
//! Alongside the model: long-tail dataset curation (Pareto rank counts,
//! balanced closed test split, open split, shot partition, class-aware
//! batching), open-set evaluation (thresholded rejection, per-shot
//! accuracies, F-measure, sweep curves), a finite-difference gradient
//! checker covering every analytic gradient, and a plain-softmax baseline
//! for controlled comparison.
//!
//! With the default `parallel` feature the per-sample inner loops (batch
//! gradients, split scoring) run on rayon; reductions fold in input order,
//! so output is bit-identical to the sequential fallback.

// Indexed loops over rows/positions are the clearest form for the dense
// kernels in this crate.
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod backbone;
pub mod centroid;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod params;
pub mod parallel;
pub mod rng;
pub mod training;
pub mod types;

pub use config::{validate_config, BackboneKind, Config, LossReduction, ModelVariant};
pub use error::{Error, Result};
pub use types::{Label, LabeledExample, ShotCategory};
