//! Geometry, masks, attribution grids and summary statistics shared by the
//! metric, model and I/O modules.

mod bbox;
mod grid;
mod mask;
mod stats;

pub use bbox::{iou, BBox};
pub use grid::Grid;
pub use mask::{rasterize, union_mask, BinaryMask};
pub use stats::{summarize, MetricSummary};
