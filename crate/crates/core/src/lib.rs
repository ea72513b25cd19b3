//! Two-stage transfer learning for facial action unit (AU) recognition.
//!
//! A feed-forward backbone is first trained on expression classification,
//! then reused under a small MLP head for multi-label AU recognition, and
//! finally per-AU decision thresholds are tuned for F1. Everything runs on a
//! built-in reverse-mode tape over `f64` tensors and on synthetic data whose
//! AU labels are derived from expression templates.

pub mod calibration;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod losses_metrics;
pub mod model;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
