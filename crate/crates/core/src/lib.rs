//! Tracker-hijacking adversarial patches for tracking-by-detection pipelines.
//!
//! The crate bundles every piece needed to generate and evaluate a
//! two-stage hijacking attack end to end:
//!
//! * [`geometry`]: box algebra, IOU, non-maximum suppression.
//! * [`imaging`]: images, patch pasting, transformation sampling, input
//!   defenses, PPM and raw planar file formats.
//! * [`detector`]: a small grid/anchor detector with hand-written reverse
//!   mode, gradient checking, training and a weights file format.
//! * [`mot`]: Kalman tracking with IOU-gated Hungarian association.
//! * [`targeting`]: target box search and proposal filters.
//! * [`losses`]: score, regression, total-variation, erasure and the
//!   branch-switching adversarial objective.
//! * [`attackopt`]: Adam patch optimization (conditional and fixed-weight).
//! * [`stage1`]: mask-based patch location preselection.
//! * [`harness`]: synthetic scenes, attack execution, baselines, metrics.

pub mod attackopt;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod imaging;
pub mod losses;
pub mod mot;
pub mod stage1;
pub mod targeting;

pub use error::{Error, Result};
pub use geometry::{iou, nms, BBox, Vec2};
pub use imaging::{Image, PatchSpec};
