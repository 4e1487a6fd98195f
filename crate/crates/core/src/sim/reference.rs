//! Reference trajectories and the differentially-flat feedforward inputs
//! for the payload-free quadrotor.
//!
//! Each kind provides an analytic position/velocity/acceleration profile;
//! the flat map turns acceleration into thrust direction (yaw pinned to
//! zero) and the attitude trajectory is differentiated numerically for
//! body rates and feedforward torque.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use super::{ControlInput, PlantParams, QuadState};

/// Reference trajectory family.
#[derive(Clone, Debug, PartialEq)]
pub enum RefKind {
    /// Horizontal circle of given radius flown at constant speed.
    Circle { radius: f64, speed: f64, height: f64 },
    /// Figure-eight (Gerono lemniscate) with half-length `scale`;
    /// `speed` is the peak speed along the path.
    Lemniscate { scale: f64, speed: f64, height: f64 },
    /// Constant hover point.
    Hover { point: Vector3<f64> },
    /// Smooth quintic segments between seeded random waypoints in a box
    /// centered on `center` with half-extents `half`.
    RandomPoints { center: Vector3<f64>, half: Vector3<f64>, segment_time: f64, seed: u64 },
}

impl RefKind {
    pub fn circle_default() -> Self {
        RefKind::Circle { radius: 1.0, speed: 1.5, height: 1.6 }
    }

    pub fn lemniscate_default() -> Self {
        RefKind::Lemniscate { scale: 1.0, speed: 1.5, height: 1.6 }
    }
}

/// Reference generator: holds the trajectory kind plus the nominal plant
/// constants needed for feedforward inputs.
#[derive(Clone, Debug)]
pub struct RefGen {
    pub kind: RefKind,
    m: f64,
    j: Matrix3<f64>,
    g: f64,
    waypoints: Vec<Vector3<f64>>,
}

/// Quintic (minimum-jerk) interpolation factor and derivatives on [0, 1].
fn quintic(s: f64) -> (f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    let h = 10.0 * s3 - 15.0 * s2 * s2 + 6.0 * s2 * s3;
    let dh = 30.0 * s2 - 60.0 * s3 + 30.0 * s2 * s2;
    let ddh = 60.0 * s - 180.0 * s2 + 120.0 * s3;
    (h, dh, ddh)
}

impl RefGen {
    pub fn new(kind: RefKind, params: &PlantParams) -> Self {
        let waypoints = match &kind {
            RefKind::RandomPoints { center, half, seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut pts = vec![*center];
                for _ in 0..256 {
                    let p = Vector3::new(
                        center.x + rng.random_range(-half.x..=half.x),
                        center.y + rng.random_range(-half.y..=half.y),
                        center.z + rng.random_range(-half.z..=half.z),
                    );
                    pts.push(p);
                }
                pts
            }
            _ => Vec::new(),
        };
        Self { kind, m: params.m, j: params.j, g: params.g, waypoints }
    }

    /// Period of the periodic kinds, if any.
    pub fn period(&self) -> Option<f64> {
        match &self.kind {
            RefKind::Circle { radius, speed, .. } => {
                Some(2.0 * std::f64::consts::PI * radius / speed)
            }
            RefKind::Lemniscate { scale, speed, .. } => {
                let omega = speed / (scale * std::f64::consts::SQRT_2);
                Some(2.0 * std::f64::consts::PI / omega)
            }
            _ => None,
        }
    }

    /// Analytic flat outputs: position, velocity, acceleration.
    pub fn flat_outputs(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        match &self.kind {
            RefKind::Circle { radius, speed, height } => {
                let omega = speed / radius;
                let (s, c) = (omega * t).sin_cos();
                (
                    Vector3::new(radius * c, radius * s, *height),
                    Vector3::new(-radius * omega * s, radius * omega * c, 0.0),
                    Vector3::new(
                        -radius * omega * omega * c,
                        -radius * omega * omega * s,
                        0.0,
                    ),
                )
            }
            RefKind::Lemniscate { scale, speed, height } => {
                // x = a sin(wt), y = (a/2) sin(2wt); peak speed = a w sqrt(2) at t = 0.
                let omega = speed / (scale * std::f64::consts::SQRT_2);
                let (s1, c1) = (omega * t).sin_cos();
                let (s2, c2) = (2.0 * omega * t).sin_cos();
                (
                    Vector3::new(scale * s1, 0.5 * scale * s2, *height),
                    Vector3::new(scale * omega * c1, scale * omega * c2, 0.0),
                    Vector3::new(
                        -scale * omega * omega * s1,
                        -2.0 * scale * omega * omega * s2,
                        0.0,
                    ),
                )
            }
            RefKind::Hover { point } => (*point, Vector3::zeros(), Vector3::zeros()),
            RefKind::RandomPoints { segment_time, .. } => {
                let seg = (t / segment_time).floor() as usize;
                let seg = seg.min(self.waypoints.len() - 2);
                let s = ((t - seg as f64 * segment_time) / segment_time).clamp(0.0, 1.0);
                let a = self.waypoints[seg];
                let b = self.waypoints[seg + 1];
                let d = b - a;
                let (h, dh, ddh) = quintic(s);
                (
                    a + d * h,
                    d * (dh / segment_time),
                    d * (ddh / (segment_time * segment_time)),
                )
            }
        }
    }

    fn attitude(&self, t: f64) -> UnitQuaternion<f64> {
        let (_, _, a) = self.flat_outputs(t);
        let b3 = (a + Vector3::new(0.0, 0.0, self.g)).normalize();
        // Yaw pinned to zero: b2 = b3 × x̂, b1 = b2 × b3.
        let b2 = b3.cross(&Vector3::x()).normalize();
        let b1 = b2.cross(&b3);
        let r = Matrix3::from_columns(&[b1, b2, b3]);
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r))
    }

    fn body_rate(&self, t: f64) -> Vector3<f64> {
        let h = 1e-4;
        let tm = (t - h).max(0.0);
        let q0 = self.attitude(tm);
        let q1 = self.attitude(tm + 2.0 * h);
        (q0.inverse() * q1).scaled_axis() / (2.0 * h)
    }

    /// Reference state and differentially-flat feedforward input at `t`.
    pub fn sample(&self, t: f64) -> (QuadState, ControlInput) {
        let (p, v, a) = self.flat_outputs(t);
        let quat = self.attitude(t);
        let omega = self.body_rate(t);
        let h = 1e-4;
        let omega_dot = if t < h {
            (self.body_rate(t + h) - self.body_rate(t)) / h
        } else {
            (self.body_rate(t + h) - self.body_rate(t - h)) / (2.0 * h)
        };
        let f_u = self.m * (a + Vector3::new(0.0, 0.0, self.g)).norm();
        let tau = self.j * omega_dot + omega.cross(&(self.j * omega));
        (
            QuadState { p_w: p, v_w: v, quat, omega_b: omega },
            ControlInput::new(f_u, tau),
        )
    }
}
