//! Object-level monocular SLAM in closed loop.
//!
//! An edge-based particle-filter object tracker and a drifting, scale-ambiguous
//! visual odometry feed a pose graph of camera poses and object landmarks.
//! Object measurements are gated against the graph's marginal covariances and
//! rejected measurements feed back into the tracker as resets or
//! re-initializations. Everything runs against a deterministic synthetic
//! tabletop world so that results can be scored against ground truth.

pub mod eval;
pub mod mapper;
pub mod par;
pub mod pipeline;
pub mod recognizer;
pub mod rng;
pub mod scene;
pub mod se3;
pub mod table;
pub mod tracker;
pub mod vo;

pub use se3::{CameraIntrinsics, Covariance6, Pose, Twist};
