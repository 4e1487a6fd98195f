//! Ground-truth physics: a 6-DoF quadrotor rigid body coupled to a
//! point-mass payload hanging from an inextensible massless tether, plus
//! linear residual drag.
//!
//! The tether is a hybrid system: while taut the payload is a spherical
//! pendulum about the attachment point and exerts a tension wrench on the
//! quadrotor; when the computed tension crosses zero it goes slack and the
//! payload flies ballistically until the tether re-engages (inelastic
//! impact projecting the relative velocity onto the sphere tangent).
//!
//! Attitude is stored as a unit quaternion and integrated with fixed-step
//! RK4; the rotation matrix is exposed wherever the flat dynamics want it.

mod plant;
mod reference;
mod rollout;

pub use plant::{
    exact_accelerations, mechanical_energy, payload_position, quad_derivative, rk4_quad_step,
    step_plant, tether_tension, true_external_wrench, QuadDerivative, StepFlags,
};
pub use reference::{RefGen, RefKind};
pub use rollout::{closed_loop, collect_dataset, Controller, RolloutCfg};

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Quadrotor rigid-body state. Position/velocity in the world frame,
/// angular rate in the body frame, attitude as a unit quaternion
/// (body → world).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    /// Position in the world frame [m].
    pub p_w: Vector3<f64>,
    /// Velocity in the world frame [m/s].
    pub v_w: Vector3<f64>,
    /// Attitude, body → world.
    pub quat: UnitQuaternion<f64>,
    /// Angular rate in the body frame [rad/s].
    pub omega_b: Vector3<f64>,
}

impl QuadState {
    /// Identity attitude at the origin, at rest.
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self {
            p_w: p,
            v_w: Vector3::zeros(),
            quat: UnitQuaternion::identity(),
            omega_b: Vector3::zeros(),
        }
    }

    /// Rotation matrix body → world.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.quat.to_rotation_matrix().into_inner()
    }

    pub fn is_finite(&self) -> bool {
        self.p_w.iter().all(|x| x.is_finite())
            && self.v_w.iter().all(|x| x.is_finite())
            && self.quat.coords.iter().all(|x| x.is_finite())
            && self.omega_b.iter().all(|x| x.is_finite())
    }
}

/// Collective thrust along the body z-axis plus body torque.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Total thrust [N], nonnegative.
    pub f_u: f64,
    /// Body torque [N·m].
    pub tau_m: Vector3<f64>,
}

impl ControlInput {
    pub fn new(f_u: f64, tau_m: Vector3<f64>) -> Self {
        Self { f_u, tau_m }
    }

    pub fn zero() -> Self {
        Self { f_u: 0.0, tau_m: Vector3::zeros() }
    }

    pub fn is_finite(&self) -> bool {
        self.f_u.is_finite() && self.tau_m.iter().all(|x| x.is_finite())
    }
}

/// External force (world frame) and torque (body frame) acting on the
/// quadrotor beyond its nominal model: tether tension plus residual drag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    /// External force in the world frame [N].
    pub f_e: Vector3<f64>,
    /// External torque in the body frame [N·m].
    pub tau_e: Vector3<f64>,
}

impl Wrench {
    pub fn zero() -> Self {
        Self { f_e: Vector3::zeros(), tau_e: Vector3::zeros() }
    }

    /// Stacked `[f_e; tau_e]`.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.f_e.x, self.f_e.y, self.f_e.z, self.tau_e.x, self.tau_e.y, self.tau_e.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            f_e: Vector3::new(v[0], v[1], v[2]),
            tau_e: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.f_e.iter().all(|x| x.is_finite()) && self.tau_e.iter().all(|x| x.is_finite())
    }
}

/// Payload state relative to the tether attachment point.
///
/// `q` is the unit vector from the attachment point toward the payload
/// while taut; while slack it is the relative offset divided by the tether
/// length (norm < 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadState {
    pub q: Vector3<f64>,
    pub q_dot: Vector3<f64>,
    pub taut: bool,
}

impl PayloadState {
    /// Hanging straight down, motionless, taut.
    pub fn hanging() -> Self {
        Self { q: -Vector3::z(), q_dot: Vector3::zeros(), taut: true }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().all(|x| x.is_finite()) && self.q_dot.iter().all(|x| x.is_finite())
    }
}

/// Physical parameters of the plant: quadrotor mass/inertia, payload and
/// tether, residual drag, actuator limits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlantParams {
    /// Quadrotor mass [kg].
    pub m: f64,
    /// Inertia matrix [kg·m²], symmetric positive definite.
    pub j: Matrix3<f64>,
    /// Gravitational acceleration [m/s²].
    pub g: f64,
    /// Payload mass [kg]; zero disables the payload entirely.
    pub m_p: f64,
    /// Tether length [m].
    pub l: f64,
    /// Tether attachment offset from the CoM, body frame [m].
    pub r_att: Vector3<f64>,
    /// Diagonal of the linear drag matrix on world velocity [N·s/m].
    pub d_v: Vector3<f64>,
    /// Diagonal of the angular drag matrix on body rates [N·m·s].
    pub d_omega: Vector3<f64>,
    /// Thrust limit [N].
    pub f_max: f64,
    /// Per-axis torque limit [N·m].
    pub tau_max: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        let m = 2.0;
        let g = 9.81;
        Self {
            m,
            j: Matrix3::from_diagonal(&Vector3::new(0.03, 0.03, 0.05)),
            g,
            m_p: 0.26,
            l: 0.8,
            r_att: Vector3::new(0.0, 0.0, -0.05),
            d_v: Vector3::repeat(0.05),
            d_omega: Vector3::repeat(0.005),
            f_max: 2.5 * m * g,
            tau_max: 1.0,
        }
    }
}

impl PlantParams {
    /// The controller-side nominal model: same rigid body, no payload,
    /// no residual drag.
    pub fn nominal(&self) -> Self {
        Self {
            m_p: 0.0,
            d_v: Vector3::zeros(),
            d_omega: Vector3::zeros(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.m > 0.0) || !(self.l > 0.0) || self.m_p < 0.0 {
            return Err(SimError::BadParams("m > 0, l > 0, m_p >= 0 required".into()));
        }
        let sym = (self.j - self.j.transpose()).norm();
        if sym > 1e-12 || self.j.symmetric_eigenvalues().min() <= 0.0 {
            return Err(SimError::BadParams("inertia must be symmetric positive definite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("numerical blowup: non-finite state")]
    NumericalBlowup,
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("time step {0} outside (0, 0.05]")]
    BadTimeStep(f64),
    #[error("sampling rate {0} Hz below the 10 Hz minimum")]
    BadRate(f64),
    #[error("controller failed: {0}")]
    Controller(String),
}
