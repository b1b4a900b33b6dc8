//! Adversarial-training laboratory for small image classifiers.
//!
//! Everything is built from scratch on dense tensors: a reverse-mode
//! autodiff graph, a small model zoo with a portable checkpoint format,
//! gradient attacks (FGSM / IFGSM / PGD) with norm-ball projection,
//! five training procedures (STD, AT, SAT, AMAT, DPAAT) plus ablation
//! variants, evaluation metrics (GAcc/RAcc, mAP/mARP, P/R/F1), Grad-CAM
//! heatmaps, and a config-driven CLI pipeline.
//!
//! All randomness flows through counter-based seeded streams, so every
//! pipeline run is bit-reproducible for a fixed seed.

pub mod attack;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
