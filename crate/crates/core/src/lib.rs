//! State estimation for radar point-object tracking: a linear Kalman filter,
//! an interacting-multiple-model bank, and a learned-gain filter whose Kalman
//! gain comes from a small recurrent network, plus scenario generation and
//! consistency metrics to compare them.

pub mod error;
pub mod imm;
pub mod kalman;
pub mod kalmannet;
pub mod metrics;
pub mod motion;
pub mod neural;
pub mod numerics;
pub mod runner;
pub mod scenarios;
pub mod training;

pub use error::{Error, Result};
pub use kalman::{InitialCovariance, StateEstimate};
pub use motion::{ModelKind, MotionModel, SystemMatrices};
pub use numerics::{Mat, Vector};
