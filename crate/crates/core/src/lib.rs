//! Hand-eye action networks for visuomotor imitation learning.
//!
//! The crate bundles everything needed to train and evaluate policies that
//! ground actions in attended 3D keypoints:
//!
//! * [`diffcore`]: reverse-mode differentiation engine and Adam.
//! * [`geometry`]: pinhole camera model and rigid transforms.
//! * [`sim`]: kinematic tabletop simulator, renderer, tasks and scripted experts.
//! * [`han`]: the policy network and its baseline/ablation variants.
//! * [`train`]: demonstration datasets, the behavior-cloning loss and trainer.
//! * [`eval`]: closed-loop rollouts, report tables, attention diagnostics, overlays.
//! * [`teleop`]: lockstep teleoperation protocol and session server.

pub mod diffcore;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod han;
pub mod imageio;
pub mod sim;
pub mod teleop;
pub mod train;

pub use error::{Error, Result};
