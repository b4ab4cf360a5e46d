//! Core of the pillow-grid rehabilitation game framework.

pub mod analytics;
pub mod calibration;
pub mod config;
pub mod engine;
pub mod input;
pub mod levelgen;
pub mod profile;
pub mod recorder;
pub mod scalar;
pub mod session;
pub mod skeleton;

pub use calibration::{Cell, GridLayout, Location};
pub use config::{GameConfig, Mechanic, ViewMode};
pub use scalar::Real;
pub use skeleton::JointId;

/// Double-precision skeleton frame, the form used by the engine and logs.
pub type Frame = skeleton::SkeletonFrame<f64>;
pub type Frame32 = skeleton::SkeletonFrame<f32>;
pub type Point = skeleton::Vec3<f64>;
pub type Point32 = skeleton::Vec3<f32>;
pub type Grid = calibration::GridFrame<f64>;
pub type Grid32 = calibration::GridFrame<f32>;
pub type Posture = skeleton::PostureMetrics<f64>;
