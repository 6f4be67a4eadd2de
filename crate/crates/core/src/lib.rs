//! Evaluation toolkit for explainable object detection.
//!
//! * [`detmetrics`]: COCO-style average precision.
//! * [`xaimetrics`]: attribution localization and top-k intersection.
//! * [`micromodel`]: a small hand-differentiated detector with Grad-CAM,
//!   AdamW, plateau scheduling and transfer regimes.
//! * [`synthdata`]: a synthetic domain-shift benchmark.
//! * [`io`]: annotation, detection, grid, image and bundle formats.
//! * [`experiment`]: end-to-end transfer experiments and report rendering.

pub mod cli;
pub mod detmetrics;
pub mod error;
pub mod experiment;
pub mod io;
pub mod micromodel;
pub mod primitives;
pub mod seeding;
pub mod synthdata;
pub mod xaimetrics;

pub use detmetrics::{mean_ap, ApConfig, ApReport, Detection, GroundTruth};
pub use error::{Error, Result};
pub use primitives::{iou, BBox, BinaryMask, Grid, MetricSummary};
pub use xaimetrics::{attribution_localization, topk_intersection, topk_mask, XaiEvalConfig};
