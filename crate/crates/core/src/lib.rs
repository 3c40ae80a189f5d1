//! Simulator and evaluation harness for instruction-driven grasp reasoning in
//! cluttered bins.
//!
//! The crate is organized around the stages of one grasp episode:
//!
//! * [`scene`] holds objects, the occlusion graph and the ground-truth queries
//!   (obstructor closure, valid picks, minimal steps, difficulty).
//! * [`dataset`] reads and writes the canonical scene, instruction and
//!   scenario-manifest files and stratifies scenarios by difficulty.
//! * [`localization`], [`prompting`] and [`reasoning`] turn a scene state into
//!   numbered marks, a prompt and a grasp decision.
//! * [`geometry`] lifts masks into a grasp pose.
//! * [`episode`] runs the step loop and applies the failure taxonomy.
//! * [`metrics`] scores finished episodes.

pub mod dataset;
pub mod episode;
pub mod geometry;
pub mod localization;
pub mod mask;
pub mod metrics;
pub mod prompting;
pub mod reasoning;
pub mod remote;
pub mod scene;
pub mod seed;
pub mod synth;

pub use mask::Mask;
pub use scene::{Difficulty, DifficultyLevel, ObjectId, Point, Scene, SceneState};
