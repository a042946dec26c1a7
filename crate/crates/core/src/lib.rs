//! Intracranial hemorrhage detection on CT series: preprocessing, synthetic
//! data, the two-stage model, training, semi-supervised rounds and ensemble
//! metrics.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod kv;
pub mod labels;
pub mod model;
pub mod preprocess;
pub mod ssl;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use labels::{Class, LabelVector, NUM_CLASSES, NUM_SUBTYPES};
