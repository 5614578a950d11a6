//! Segmentation evaluation.
//!
//! Overlap metrics come from per-class confusion counts. Surface metrics use
//! 4-connected boundaries and Euclidean distances between pixel centres.
//! Anything that cannot be defined (an empty surface) is reported as
//! undefined rather than as a number.

mod mask;
mod overlap;
mod report;
mod surface;

pub use mask::SegMask;
pub use overlap::{confusion, overlap_metrics, ClassCounts, Confusion, OverlapMetrics};
pub use report::{evaluate_dataset, ClassReport, Distance, ImageMetrics, MetricReport, CLASS_NAMES};
pub use surface::{
    assd, boundary_complexity, boundary_pixels, directed_distances, hd95, percentile, squared_distance_transform,
};
