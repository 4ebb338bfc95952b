//! Uncertainty-gated multi-view test-time augmentation.
//!
//! Stage 1 ([`stage1`]) learns, per class, which augmentation view tends to
//! yield the least uncertain prediction on training data. Stage 2
//! ([`stage2`]) augments a test sample only when its default-view
//! uncertainty exceeds a threshold, fusing the default and optimal-view
//! softmax outputs. [`evaluation`] sweeps the threshold and compares against
//! single-view and random-augmentation baselines, and [`synthetic`] provides a
//! seeded benchmark with a from-scratch classifier to drive the whole chain.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod prediction_store;
pub mod stage1;
pub mod stage2;
pub mod synthetic;
pub mod uncertainty;

pub use error::{Error, Result};
pub use prediction_store::{Manifest, PredictionRecord, ViewPrediction, ViewSet};
pub use stage1::{OptimalViewTable, SelectionMatrix};
pub use stage2::{Threshold, TtaDecision};
pub use uncertainty::{MetricConfig, MetricKind, Uncertainty};
