//! Learned external-wrench dynamics for a quadrotor with a tether-suspended
//! payload, and the receding-horizon controller that consumes them.
//!
//! The pipeline, end to end:
//!
//! 1. [`sim`] — ground-truth physics: a 6-DoF quadrotor coupled to a
//!    point-mass payload on an inextensible tether, plus reference
//!    trajectories and closed-loop data collection.
//! 2. [`labeling`] — recover the external force/torque acting on the
//!    quadrotor by inverting the rigid-body equations on logged data.
//! 3. [`embed`] — the embedding network Φ(χ) with spectral normalization
//!    and a linear decoder C.
//! 4. [`lls`] — the lifted linear system z⁺ = A z + B ζ: least-squares
//!    identification, rollouts, sliding-window refit, horizon prediction.
//! 5. [`train`] — offline learning of Φ and C against forward/backward
//!    multi-step prediction and reconstruction losses.
//! 6. [`cert`] — the global prediction-error bound certificate and its
//!    empirical verification.
//! 7. [`mpc`] — SQP-based receding-horizon control over the nominal or
//!    wrench-augmented (hybrid) model, and the closed-loop runner.
//! 8. [`metrics`] — RMSE reports for wrench estimation and tracking.

pub mod cert;
pub mod embed;
pub mod labeling;
pub mod lls;
pub mod log;
pub mod metrics;
pub mod mpc;
pub mod sim;
pub mod train;

pub use crate::log::{LogRow, TrajectoryLog};
pub use crate::sim::{ControlInput, PayloadState, PlantParams, QuadState, Wrench};
