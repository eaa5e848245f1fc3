//! Consistent-motion-pair mining and spatiotemporal alignment of animal video sequences.
//!
//! The crate covers the data model, trajectory descriptors and pair mining, rigid
//! (homography) alignment, thin-plate-spline matching and its temporal extension, and
//! landmark-based evaluation.

pub mod descriptors;
pub mod evaluation;
pub mod homography;
pub mod model;
pub mod tps;
pub mod ttps;

pub use model::{
    BBox, EdgeMap, FlowField, ForegroundMask, FrameSequence, Grid, Interval, LandmarkSet,
    ModelError, Point2, Trajectory, NUM_LANDMARKS, TRAJ_LEN,
};
