//! Probabilistic movement primitives (ProMPs) with parametric phase profiles.
//!
//! A trajectory distribution is represented by a Gaussian over the weights of
//! a normalized bell-shaped basis evaluated in *phase* (a monotone
//! reparameterization of time in `[0, 1]`). Decoupling shape from execution
//! speed lets one library of primitives recognize and reproduce movements
//! performed at different velocities.
//!
//! The crate provides:
//!
//! * [`basis`] — normalized bell features over phase and their derivatives.
//! * [`phase`] — the two-parameter sigmoidal phase profile and the iterative
//!   alignment that assigns a profile to every demonstration.
//! * [`promp`] — weight projection, model fitting, via-point conditioning and
//!   trajectory generation.
//! * [`recognition`] — streaming classification against a movement library
//!   and per-sample phase posteriors.
//! * [`perception`] — a small feed-forward network that estimates phase from
//!   a sliding window of observations.
//! * [`data`] — synthetic dataset generators and trajectory CSV I/O.

pub mod basis;
pub mod data;
mod math;
pub mod perception;
pub mod phase;
pub mod promp;
pub mod recognition;

pub use basis::{BasisConfig, BasisError, FeatureRow};
pub use data::{BenchmarkSpec, DataError, JointspaceSpec, Trajectory};
pub use perception::{PhaseNet, PhaseNetConfig, PerceptionError, TrainingPair};
pub use phase::{AlignError, AlignOptions, AlignmentResult, PhaseMap, PhaseProfile};
pub use promp::{Demonstration, FitResult, GenerateMode, ProMPError, ProMPModel, Ridge};
pub use recognition::{
    MovementLibrary, PhasePosterior, RecognitionError, RecognitionTrace,
};

/// Number of points of the uniform phase grid used for alignment integrals,
/// phase priors and likelihood quadrature.
pub const PHASE_GRID_LEN: usize = 200;

/// Uniform grid on `[0, 1]` with [`PHASE_GRID_LEN`] points.
pub fn phase_grid() -> Vec<f64> {
    math::uniform_grid(PHASE_GRID_LEN)
}
