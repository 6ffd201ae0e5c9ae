//! Sampling-based uncertainty estimation for query-based segmentation models.
//!
//! Ensemble members (dropout passes, test-time augmentations, prior video
//! frames) are aligned to a common frame, matched query-by-query and folded
//! into a running mean, while accumulators build pixel-wise uncertainty maps.
//! Maps are aggregated to image scores and evaluated on failure detection,
//! calibration and out-of-distribution detection.

pub mod aggregate;
pub mod align;
pub mod dataset;
pub mod error;
pub mod fuse;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pixagg;
pub mod remap;
pub mod report;
pub mod residency;
pub mod synth;
pub mod uncertainty;

pub use aggregate::{aggregate_samples, aggregate_stream, greedy_match, hungarian_match, Aggregated, RunningAggregate};
pub use align::{build_aligned_ensemble, AlignOptions, AlignedEnsemble, EnsembleMember, PredictionConfig, Tta};
pub use error::{Error, LogitTensor, Result};
pub use model::{
    FlowField, LogitView, Measure, Orientation, PanopticLabelMap, PixelClassDistribution, SampleTensor,
    SemanticLabelMap, TransformDescriptor, UncertaintyMap, VOID,
};
pub use pixagg::{ImageScore, PixelAgg};
pub use remap::ClassMapping;
