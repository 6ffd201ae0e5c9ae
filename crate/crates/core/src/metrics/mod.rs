//! Segmentation metrics and downstream-task metrics.

pub mod calib;
pub mod ood;
pub mod seg;
pub mod selective;

pub use calib::{calib_samples_panoptic, calib_samples_semantic, ece, CalibSample, EceAccumulator, DEFAULT_BINS};
pub use ood::auroc;
pub use seg::{
    confusion_matrix, miou, per_image_iou, per_image_pq, pq_image, ConfusionMatrix, PqCounts, PqImage, PqStats,
    PqSummary, SegmentMatch, SegmentQuality,
};
pub use selective::{aurc, risk_coverage_curve, ScoreRecord};
