//! Hierarchical relation networks for learned particle physics.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`]: particle scene graphs and hierarchical k-means grouping.
//! * [`sim`]: procedural shapes and the reference mass-spring simulator that
//!   produces ground-truth trajectories.
//! * [`diff`]: dense MLPs with reverse-mode gradients and Adam.
//! * [`model`]: the hierarchical predictor, its ablations and baselines.
//! * [`train`]: loss, normalization statistics, training, rollout and metrics.
//! * [`io`] and [`cli`]: trajectory files, checkpoints and the `hrn` binary.

pub mod cli;
pub mod diff;
pub mod error;
pub mod graph;
pub mod io;
pub mod math;
pub mod model;
pub mod sim;
pub mod spatial;
pub mod train;

pub use error::{Error, Result};
