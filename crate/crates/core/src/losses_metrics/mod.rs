//! Training losses for both heads and the evaluation metrics.

mod losses;
mod metrics;

pub use losses::{compute_pos_weights, cross_entropy, multi_label_loss};
pub use metrics::{
    accuracy, argmax_rows, confusion_counts, f1_report, AuMetrics, BinaryMatrix, Confusion,
    MetricsReport,
};
