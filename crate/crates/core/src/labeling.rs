//! Training labels: the external wrench recovered by inverting the
//! rigid-body equations on logged data.
//!
//! Given v̇ and ω̇ (exact from the simulator, or finite differences of the
//! logged velocities), the wrench is
//!
//! ```text
//! f_e = m v̇ + m g e₃ − f_u R e₃
//! τ_e = J ω̇ + ω × Jω − τ_m
//! ```

use nalgebra::{Vector3, Vector6};

use crate::log::TrajectoryLog;
use crate::sim::{ControlInput, PlantParams, QuadState, Wrench};

/// One training sample: wrench label χ and regressor input ζ = [v_w; ω_b].
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub chi: Wrench,
    pub zeta: Vector6<f64>,
    pub t: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("need at least 3 samples, got {0}")]
    TooShort(usize),
    #[error("non-uniform timestamps: step {idx} has dt = {dt}, expected {expected}")]
    NonUniform { idx: usize, dt: f64, expected: f64 },
    #[error("non-finite value in log")]
    NonFinite,
    #[error("log carries no exact accelerations")]
    NoExactAccel,
}

/// Which derivative source labels are computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivativeSource {
    /// Exact accelerations logged by the simulator when available, else
    /// finite differences.
    Auto,
    Exact,
    FiniteDifference,
}

/// Second-order numeric derivatives of the logged velocities: central
/// differences in the interior, one-sided three-point stencils at the
/// ends. Requires a uniform sample interval (≤ 1% jitter).
pub fn numeric_derivatives(
    log: &TrajectoryLog,
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>), LabelError> {
    let n = log.len();
    if n < 3 {
        return Err(LabelError::TooShort(n));
    }
    let dt = log.rows[1].t - log.rows[0].t;
    for (i, pair) in log.rows.windows(2).enumerate() {
        let d = pair[1].t - pair[0].t;
        if ((d - dt) / dt).abs() > 0.01 {
            return Err(LabelError::NonUniform { idx: i + 1, dt: d, expected: dt });
        }
    }

    let deriv = |f: &dyn Fn(usize) -> Vector3<f64>| -> Vec<Vector3<f64>> {
        (0..n)
            .map(|i| {
                if i == 0 {
                    (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * dt)
                } else if i == n - 1 {
                    (3.0 * f(n - 1) - 4.0 * f(n - 2) + f(n - 3)) / (2.0 * dt)
                } else {
                    (f(i + 1) - f(i - 1)) / (2.0 * dt)
                }
            })
            .collect()
    };
    let v_dot = deriv(&|i| log.rows[i].state.v_w);
    let omega_dot = deriv(&|i| log.rows[i].state.omega_b);
    Ok((v_dot, omega_dot))
}

/// Invert the rigid-body equations for the external wrench at one sample.
/// Exact when the derivatives are exact.
pub fn label_wrench(
    s: &QuadState,
    v_dot: &Vector3<f64>,
    omega_dot: &Vector3<f64>,
    u: &ControlInput,
    params: &PlantParams,
) -> Wrench {
    let r = s.rotation();
    let f_e = params.m * v_dot + Vector3::new(0.0, 0.0, params.m * params.g)
        - r * Vector3::new(0.0, 0.0, u.f_u);
    let j_omega = params.j * s.omega_b;
    let tau_e = params.j * omega_dot + s.omega_b.cross(&j_omega) - u.tau_m;
    Wrench { f_e, tau_e }
}

/// Label a whole log. `params` are the quadrotor-only nominal parameters
/// (the payload is unknown to this stage).
pub fn label_log(
    log: &TrajectoryLog,
    params: &PlantParams,
    source: DerivativeSource,
) -> Result<Vec<LabeledSample>, LabelError> {
    let n = log.len();
    if n < 3 {
        return Err(LabelError::TooShort(n));
    }
    let use_exact = match source {
        DerivativeSource::Exact => {
            if !log.rows.iter().all(|r| r.accel.is_some()) {
                return Err(LabelError::NoExactAccel);
            }
            true
        }
        DerivativeSource::Auto => log.rows.iter().all(|r| r.accel.is_some()),
        DerivativeSource::FiniteDifference => false,
    };

    let fd = if use_exact { None } else { Some(numeric_derivatives(log)?) };
    let mut out = Vec::with_capacity(n);
    for (i, row) in log.rows.iter().enumerate() {
        let (v_dot, omega_dot) = if use_exact {
            row.accel.unwrap()
        } else {
            let (vd, wd) = fd.as_ref().unwrap();
            (vd[i], wd[i])
        };
        let chi = label_wrench(&row.state, &v_dot, &omega_dot, &row.input, params);
        if !chi.is_finite() {
            return Err(LabelError::NonFinite);
        }
        out.push(LabeledSample { chi, zeta: row.zeta(), t: row.t });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::LogRow;
    use crate::sim::{PayloadState, RefGen, RefKind};
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;

    fn synthetic_log(n: usize, dt: f64, v_of_t: impl Fn(f64) -> Vector3<f64>) -> TrajectoryLog {
        let rows = (0..n)
            .map(|i| {
                let t = i as f64 * dt;
                LogRow {
                    t,
                    state: QuadState {
                        p_w: Vector3::zeros(),
                        v_w: v_of_t(t),
                        quat: UnitQuaternion::identity(),
                        omega_b: Vector3::zeros(),
                    },
                    input: ControlInput::zero(),
                    wrench: None,
                    accel: None,
                }
            })
            .collect();
        TrajectoryLog { rows, ..Default::default() }
    }

    #[test]
    fn linear_velocity_differentiates_exactly() {
        let log = synthetic_log(100, 0.02, |t| Vector3::new(t, 0.0, 0.0));
        let (v_dot, _) = numeric_derivatives(&log).unwrap();
        for d in &v_dot {
            assert_relative_eq!(d.x, 1.0, epsilon = 1e-10);
            assert_relative_eq!(d.y, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_velocity_gives_zero_derivative() {
        let log = synthetic_log(50, 0.02, |_| Vector3::new(0.3, -0.1, 0.9));
        let (v_dot, _) = numeric_derivatives(&log).unwrap();
        for d in &v_dot {
            assert!(d.norm() < 1e-12);
        }
    }

    #[test]
    fn sine_derivative_error_within_taylor_budget() {
        use std::f64::consts::TAU;
        let dt = 0.02;
        let log = synthetic_log(200, dt, |t| Vector3::new((TAU * t).sin(), 0.0, 0.0));
        let (v_dot, _) = numeric_derivatives(&log).unwrap();
        let budget = (TAU * dt).powi(2) / 6.0 * TAU;
        // Interior points only; the one-sided ends have a larger constant.
        for (i, d) in v_dot.iter().enumerate().skip(1).take(v_dot.len() - 2) {
            let truth = TAU * (TAU * i as f64 * dt).cos();
            assert!(
                (d.x - truth).abs() <= budget * 1.01,
                "i = {i}: err = {}",
                (d.x - truth).abs()
            );
        }
    }

    #[test]
    fn jittered_timestamps_rejected() {
        let mut log = synthetic_log(10, 0.02, |_| Vector3::zeros());
        log.rows[5].t += 0.005;
        assert!(matches!(numeric_derivatives(&log), Err(LabelError::NonUniform { .. })));
    }

    #[test]
    fn hover_labels_are_zero() {
        let params = PlantParams::default().nominal();
        let s = QuadState::at_rest(Vector3::new(0.0, 0.0, 1.6));
        let u = ControlInput::new(params.m * params.g, Vector3::zeros());
        let chi = label_wrench(&s, &Vector3::zeros(), &Vector3::zeros(), &u, &params);
        assert!(chi.f_e.norm() < 1e-12);
        assert!(chi.tau_e.norm() < 1e-12);
    }

    /// Closed-form roundtrip: on a simulator log with payload and drag,
    /// labels from exact derivatives reproduce the true wrench.
    #[test]
    fn exact_labels_match_true_wrench() {
        let params = PlantParams::default();
        let gen = RefGen::new(RefKind::circle_default(), &params);
        struct Ff<'a>(&'a RefGen);
        impl crate::sim::Controller for Ff<'_> {
            fn control(
                &mut self,
                t: f64,
                _: &QuadState,
            ) -> Result<ControlInput, crate::sim::SimError> {
                Ok(self.0.sample(t).1)
            }
        }
        let (x0, _) = gen.sample(0.0);
        let cfg = crate::sim::RolloutCfg { duration: 2.0, ..Default::default() };
        let log = crate::sim::closed_loop(
            &mut Ff(&gen),
            (x0, PayloadState::hanging()),
            &params,
            &cfg,
        )
        .unwrap();
        assert!(!log.failed);

        let labels = label_log(&log, &params.nominal(), DerivativeSource::Exact).unwrap();
        for (row, lab) in log.rows.iter().zip(&labels) {
            let truth = row.wrench.unwrap().to_vector();
            let got = lab.chi.to_vector();
            assert!(
                (truth - got).amax() < 1e-6,
                "label mismatch at t = {}: {:?} vs {:?}",
                row.t,
                got,
                truth
            );
        }
    }

    /// Finite-difference labels stay within the differentiation error
    /// budget of a few percent of the wrench peak.
    #[test]
    fn fd_labels_close_to_truth() {
        let params = PlantParams::default();
        let gen = RefGen::new(RefKind::circle_default(), &params);
        struct Ff<'a>(&'a RefGen);
        impl crate::sim::Controller for Ff<'_> {
            fn control(
                &mut self,
                t: f64,
                _: &QuadState,
            ) -> Result<ControlInput, crate::sim::SimError> {
                Ok(self.0.sample(t).1)
            }
        }
        let (x0, _) = gen.sample(0.0);
        let cfg = crate::sim::RolloutCfg { duration: 4.0, ..Default::default() };
        let log = crate::sim::closed_loop(
            &mut Ff(&gen),
            (x0, PayloadState::hanging()),
            &params,
            &cfg,
        )
        .unwrap();

        let labels =
            label_log(&log, &params.nominal(), DerivativeSource::FiniteDifference).unwrap();
        let mut peak: f64 = 0.0;
        let mut se = 0.0;
        for (row, lab) in log.rows.iter().zip(&labels) {
            let truth = row.wrench.unwrap().f_e;
            peak = peak.max(truth.norm());
            se += (truth - lab.chi.f_e).norm_squared();
        }
        let rmse = (se / log.len() as f64).sqrt();
        assert!(rmse <= 0.02 * peak, "rmse {rmse} vs peak {peak}");
    }

    #[test]
    fn zeta_is_a_pure_projection() {
        let mut row = synthetic_log(3, 0.02, |_| Vector3::new(1.0, 2.0, 3.0)).rows[0].clone();
        row.state.omega_b = Vector3::new(4.0, 5.0, 6.0);
        let before = row.zeta();
        // Unrelated fields must not affect ζ.
        row.input.f_u = 99.0;
        row.state.p_w = Vector3::new(7.0, 8.0, 9.0);
        row.wrench = Some(Wrench::zero());
        assert_eq!(before, row.zeta());
        assert_eq!(before, Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0));
    }
}
