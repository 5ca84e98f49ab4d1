//! Core library for a simulated free-roaming model car.
//!
//! The stack, bottom to top:
//!
//! * [`world`] - rooms with extruded obstacles, car geometry, and the noisy
//!   kinematic bicycle step.
//! * [`dubins`] - shortest curvature-bounded paths and the three-gate
//!   training routes built from them.
//! * [`control`] - PID-plus-cross-track steering that tracks a sampled route.
//! * [`render`] - pinhole raycaster producing ground-truth depth and textured
//!   stereo color images.
//! * [`sgm`] - semi-global stereo matching: block SAD costs, scanline
//!   aggregation, winner-take-all disparity, depth reconstruction.
//! * [`dataset`] - episode recording, frame-stacked training samples, and the
//!   binary dataset container.
//! * [`policy`] - a small fire-module convolutional network with hand-rolled
//!   reverse-mode gradients and an adaptive-decay optimizer.
//! * [`eval`] - closed-loop trials, trajectory-length reports, comparisons,
//!   and offline validation of checkpoints.
//!
//! Everything is seeded and deterministic: the same inputs and seeds produce
//! bit-identical artifacts regardless of thread count.

pub mod control;
pub mod dataset;
pub mod dubins;
pub mod eval;
pub mod imageio;
pub mod policy;
pub mod render;
pub mod rng;
pub mod sgm;
pub mod world;
