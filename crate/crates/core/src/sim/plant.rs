//! Coupled quadrotor + tethered-payload dynamics and the RK4 integrator.
//!
//! The taut tether is handled as an inextensible constraint: the tension
//! magnitude is solved from the constraint ‖q‖ = 1 together with the
//! quadrotor accelerations it feeds back into, which gives a small scalar
//! linear equation instead of a stiff spring.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{ControlInput, PayloadState, PlantParams, QuadState, SimError, Wrench};

/// Time derivative of the quadrotor state under a given external wrench.
#[derive(Clone, Debug)]
pub struct QuadDerivative {
    pub dp: Vector3<f64>,
    pub dv: Vector3<f64>,
    pub dquat: Quaternion<f64>,
    pub domega: Vector3<f64>,
}

/// Rigid-body derivative: ṗ = v, v̇ = (−m g e₃ + f_u R e₃ + f_e)/m,
/// q̇ = ½ q ⊗ (0, ω), ω̇ = J⁻¹(−ω × Jω + τ_m + τ_e).
pub fn quad_derivative(
    s: &QuadState,
    u: &ControlInput,
    wrench: &Wrench,
    params: &PlantParams,
) -> QuadDerivative {
    let r = s.rotation();
    let thrust_w = r * Vector3::new(0.0, 0.0, u.f_u);
    let dv = (Vector3::new(0.0, 0.0, -params.m * params.g) + thrust_w + wrench.f_e) / params.m;
    let j_omega = params.j * s.omega_b;
    let domega = params
        .j
        .try_inverse()
        .expect("inertia invertible")
        * (-s.omega_b.cross(&j_omega) + u.tau_m + wrench.tau_e);
    let dquat = s.quat.into_inner() * Quaternion::from_imag(s.omega_b) * 0.5;
    QuadDerivative { dp: s.v_w, dv, dquat, domega }
}

fn quad_add(s: &QuadState, d: &QuadDerivative, h: f64) -> QuadState {
    // Stage states renormalize the quaternion so rotation matrices stay
    // exact on the manifold (projection keeps the integrator 4th order).
    QuadState {
        p_w: s.p_w + d.dp * h,
        v_w: s.v_w + d.dv * h,
        quat: UnitQuaternion::new_normalize(s.quat.into_inner() + d.dquat * h),
        omega_b: s.omega_b + d.domega * h,
    }
}

fn quad_combine(
    s: &QuadState,
    k1: &QuadDerivative,
    k2: &QuadDerivative,
    k3: &QuadDerivative,
    k4: &QuadDerivative,
    h: f64,
) -> QuadState {
    let w = h / 6.0;
    let quat_raw = s.quat.into_inner()
        + (k1.dquat + k2.dquat * 2.0 + k3.dquat * 2.0 + k4.dquat) * w;
    QuadState {
        p_w: s.p_w + (k1.dp + k2.dp * 2.0 + k3.dp * 2.0 + k4.dp) * w,
        v_w: s.v_w + (k1.dv + k2.dv * 2.0 + k3.dv * 2.0 + k4.dv) * w,
        quat: UnitQuaternion::new_normalize(quat_raw),
        omega_b: s.omega_b + (k1.domega + k2.domega * 2.0 + k3.domega * 2.0 + k4.domega) * w,
    }
}

/// One RK4 step of the quadrotor alone with the wrench held constant
/// across the stages. Shared by the plant (which adds the payload) and
/// the controller's prediction models, so the two stay bit-identical.
pub fn rk4_quad_step(
    s: &QuadState,
    u: &ControlInput,
    wrench: &Wrench,
    params: &PlantParams,
    h: f64,
) -> QuadState {
    let k1 = quad_derivative(s, u, wrench, params);
    let k2 = quad_derivative(&quad_add(s, &k1, h / 2.0), u, wrench, params);
    let k3 = quad_derivative(&quad_add(s, &k2, h / 2.0), u, wrench, params);
    let k4 = quad_derivative(&quad_add(s, &k3, h), u, wrench, params);
    quad_combine(s, &k1, &k2, &k3, &k4, h)
}

/// Tether tension magnitude consistent with the ‖q‖ = 1 constraint, given
/// the instantaneous state and input. Negative values mean the constraint
/// would have to push, i.e. the tether goes slack.
pub fn tether_tension(
    s: &QuadState,
    ps: &PayloadState,
    u: &ControlInput,
    params: &PlantParams,
) -> f64 {
    if params.m_p == 0.0 || !ps.taut {
        return 0.0;
    }
    let r = s.rotation();
    let q = ps.q;

    // Tension-free quadrotor accelerations (thrust, gravity, drag only).
    let thrust_w = r * Vector3::new(0.0, 0.0, u.f_u);
    let drag_f = -params.d_v.component_mul(&s.v_w);
    let v_dot0 = (Vector3::new(0.0, 0.0, -params.m * params.g) + thrust_w + drag_f) / params.m;
    let j_inv = params.j.try_inverse().expect("inertia invertible");
    let j_omega = params.j * s.omega_b;
    let drag_t = -params.d_omega.component_mul(&s.omega_b);
    let omega_dot0 = j_inv * (-s.omega_b.cross(&j_omega) + u.tau_m + drag_t);

    // Tension-free acceleration of the attachment point.
    let a_att0 = v_dot0
        + r * (s.omega_b.cross(&s.omega_b.cross(&params.r_att)))
        + r * (omega_dot0.cross(&params.r_att));

    // Sensitivity of the attachment acceleration to a unit tension T·q.
    let lever = params.r_att.cross(&(r.transpose() * q));
    let w_sens = q / params.m + r * ((j_inv * lever).cross(&params.r_att));

    let num = params.l * ps.q_dot.norm_squared() - params.g * q.z - q.dot(&a_att0);
    params.m_p * num / (1.0 + params.m_p * q.dot(&w_sens))
}

/// External wrench on the quadrotor: tether tension applied at the
/// attachment offset plus linear drag. Slack tether (or zero payload
/// mass) contributes nothing beyond drag.
pub fn true_external_wrench(
    s: &QuadState,
    ps: &PayloadState,
    u: &ControlInput,
    params: &PlantParams,
) -> Result<Wrench, SimError> {
    if !s.is_finite() || !ps.is_finite() || !u.is_finite() {
        return Err(SimError::NumericalBlowup);
    }
    let r = s.rotation();
    let tension = tether_tension(s, ps, u, params);
    let f_p = ps.q * tension;
    let tau_p = params.r_att.cross(&(r.transpose() * f_p));
    Ok(Wrench {
        f_e: f_p - params.d_v.component_mul(&s.v_w),
        tau_e: tau_p - params.d_omega.component_mul(&s.omega_b),
    })
}

#[derive(Clone, Debug)]
struct PlantDerivative {
    quad: QuadDerivative,
    dq: Vector3<f64>,
    dq_dot: Vector3<f64>,
}

fn plant_derivative(
    s: &QuadState,
    ps: &PayloadState,
    u: &ControlInput,
    params: &PlantParams,
) -> PlantDerivative {
    let r = s.rotation();
    let tension = tether_tension(s, ps, u, params);
    let f_p = ps.q * tension;
    let wrench = Wrench {
        f_e: f_p - params.d_v.component_mul(&s.v_w),
        tau_e: params.r_att.cross(&(r.transpose() * f_p))
            - params.d_omega.component_mul(&s.omega_b),
    };
    let quad = quad_derivative(s, u, &wrench, params);

    if params.m_p == 0.0 {
        return PlantDerivative { quad, dq: Vector3::zeros(), dq_dot: Vector3::zeros() };
    }

    // Actual attachment acceleration, tension included via the quad
    // derivatives already computed above.
    let a_att = quad.dv
        + r * (s.omega_b.cross(&s.omega_b.cross(&params.r_att)))
        + r * (quad.domega.cross(&params.r_att));
    let grav = Vector3::new(0.0, 0.0, -params.g);
    let dq_dot = if ps.taut {
        (grav - ps.q * (tension / params.m_p) - a_att) / params.l
    } else {
        (grav - a_att) / params.l
    };
    PlantDerivative { quad, dq: ps.q_dot, dq_dot }
}

fn plant_add(s: &QuadState, ps: &PayloadState, d: &PlantDerivative, h: f64) -> (QuadState, PayloadState) {
    (
        quad_add(s, &d.quad, h),
        PayloadState { q: ps.q + d.dq * h, q_dot: ps.q_dot + d.dq_dot * h, taut: ps.taut },
    )
}

/// Single RK4 step of the coupled system with the current tether mode
/// frozen; mode transitions are handled by the caller.
fn rk4_plant_step(
    s: &QuadState,
    ps: &PayloadState,
    u: &ControlInput,
    params: &PlantParams,
    h: f64,
) -> (QuadState, PayloadState) {
    let k1 = plant_derivative(s, ps, u, params);
    let (s2, p2) = plant_add(s, ps, &k1, h / 2.0);
    let k2 = plant_derivative(&s2, &p2, u, params);
    let (s3, p3) = plant_add(s, ps, &k2, h / 2.0);
    let k3 = plant_derivative(&s3, &p3, u, params);
    let (s4, p4) = plant_add(s, ps, &k3, h);
    let k4 = plant_derivative(&s4, &p4, u, params);

    let quad = quad_combine(s, &k1.quad, &k2.quad, &k3.quad, &k4.quad, h);
    let w = h / 6.0;
    let mut payload = PayloadState {
        q: ps.q + (k1.dq + k2.dq * 2.0 + k3.dq * 2.0 + k4.dq) * w,
        q_dot: ps.q_dot + (k1.dq_dot + k2.dq_dot * 2.0 + k3.dq_dot * 2.0 + k4.dq_dot) * w,
        taut: ps.taut,
    };
    if ps.taut && params.m_p > 0.0 {
        // Constraint stabilization: renormalize q and remove the radial
        // component of the velocity the integrator leaked in.
        payload.q.normalize_mut();
        payload.q_dot -= payload.q * payload.q.dot(&payload.q_dot);
    }
    (quad, payload)
}

/// Flags raised while stepping the plant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepFlags {
    /// Actuator limits clamped the input.
    pub saturated: bool,
    /// Tether re-engaged during the step (inelastic impact).
    pub impact: bool,
    /// Tether went slack during the step.
    pub released: bool,
}

/// Inelastic re-engagement: put the payload exactly on the sphere and
/// project the relative velocity onto the tangent plane.
fn apply_impact(ps: &mut PayloadState) {
    ps.q.normalize_mut();
    ps.q_dot -= ps.q * ps.q.dot(&ps.q_dot);
    ps.taut = true;
}

/// Advance the coupled plant by one RK4 step of size `dt` ∈ (0, 0.05].
///
/// Actuator limits are clamped (flagged, not an error). Taut → slack
/// switches when the computed tension drops below zero; slack → taut is
/// located by bisection inside the step so the payload position stays
/// continuous through the impact.
pub fn step_plant(
    s: &QuadState,
    ps: &PayloadState,
    u: &ControlInput,
    params: &PlantParams,
    dt: f64,
) -> Result<(QuadState, PayloadState, StepFlags), SimError> {
    if !(dt > 0.0 && dt <= 0.05) {
        return Err(SimError::BadTimeStep(dt));
    }
    if !s.is_finite() || !ps.is_finite() || !u.is_finite() {
        return Err(SimError::NumericalBlowup);
    }

    let mut flags = StepFlags::default();
    let mut u = *u;
    let f_clamped = u.f_u.clamp(0.0, params.f_max);
    let tau_clamped = u.tau_m.map(|t| t.clamp(-params.tau_max, params.tau_max));
    if f_clamped != u.f_u || tau_clamped != u.tau_m {
        flags.saturated = true;
    }
    u.f_u = f_clamped;
    u.tau_m = tau_clamped;

    let mut state = s.clone();
    let mut payload = ps.clone();
    let mut remaining = dt;
    // At most a few transitions can occur within one small step.
    for _ in 0..8 {
        let (ns, nps) = rk4_plant_step(&state, &payload, &u, params, remaining);
        if params.m_p == 0.0 {
            state = ns;
            payload = nps;
            break;
        }
        if payload.taut {
            state = ns;
            payload = nps;
            if tether_tension(&state, &payload, &u, params) < 0.0 {
                payload.taut = false;
                flags.released = true;
            }
            break;
        }
        // Slack: watch for the tether re-engaging (‖q‖ reaching 1).
        if nps.q.norm() < 1.0 {
            state = ns;
            payload = nps;
            break;
        }
        // Bisect the sub-interval [0, remaining] for the crossing time.
        let mut lo = 0.0;
        let mut hi = remaining;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let (_, pmid) = rk4_plant_step(&state, &payload, &u, params, mid);
            if pmid.q.norm() < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (shit, mut phit) = rk4_plant_step(&state, &payload, &u, params, hi);
        apply_impact(&mut phit);
        flags.impact = true;
        state = shit;
        payload = phit;
        remaining -= hi;
        if remaining <= 0.0 {
            break;
        }
    }

    if !state.is_finite() || !payload.is_finite() {
        return Err(SimError::NumericalBlowup);
    }
    Ok((state, payload, flags))
}

/// World-frame payload position given the quadrotor state.
pub fn payload_position(s: &QuadState, ps: &PayloadState, params: &PlantParams) -> Vector3<f64> {
    s.p_w + s.rotation() * params.r_att + ps.q * params.l
}

/// Exact quadrotor accelerations (v̇, ω̇) at an instant, payload and drag
/// included; logged alongside samples so labels can be validated against
/// exact derivatives.
pub fn exact_accelerations(
    s: &QuadState,
    ps: &PayloadState,
    u: &ControlInput,
    params: &PlantParams,
) -> (Vector3<f64>, Vector3<f64>) {
    let d = plant_derivative(s, ps, u, params);
    (d.quad.dv, d.quad.domega)
}

/// Total mechanical energy of the coupled system (kinetic + potential),
/// used by conservation checks.
pub fn mechanical_energy(s: &QuadState, ps: &PayloadState, params: &PlantParams) -> f64 {
    let r = s.rotation();
    let mut e = 0.5 * params.m * s.v_w.norm_squared()
        + params.m * params.g * s.p_w.z
        + 0.5 * s.omega_b.dot(&(params.j * s.omega_b));
    if params.m_p > 0.0 {
        let y = payload_position(s, ps, params);
        let y_dot = s.v_w + r * (s.omega_b.cross(&params.r_att)) + ps.q_dot * params.l;
        e += 0.5 * params.m_p * y_dot.norm_squared() + params.m_p * params.g * y.z;
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hover_input(params: &PlantParams, with_payload: bool) -> ControlInput {
        let m = if with_payload { params.m + params.m_p } else { params.m };
        ControlInput::new(m * params.g, Vector3::zeros())
    }

    fn no_drag(mut params: PlantParams) -> PlantParams {
        params.d_v = Vector3::zeros();
        params.d_omega = Vector3::zeros();
        params
    }

    #[test]
    fn static_payload_wrench_matches_weight() {
        let params = no_drag(PlantParams::default());
        let s = QuadState::at_rest(Vector3::new(0.0, 0.0, 1.6));
        let ps = PayloadState::hanging();
        let u = hover_input(&params, true);
        let w = true_external_wrench(&s, &ps, &u, &params).unwrap();
        assert_relative_eq!(w.f_e.z, -0.26 * 9.81, epsilon = 1e-9);
        assert_relative_eq!(w.f_e.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(w.f_e.y, 0.0, epsilon = 1e-12);
        // r_att parallel to the hanging tether: no torque.
        assert_relative_eq!(w.tau_e.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn no_payload_no_drag_is_zero_wrench() {
        let mut params = no_drag(PlantParams::default());
        params.m_p = 0.0;
        let s = QuadState::at_rest(Vector3::zeros());
        let w =
            true_external_wrench(&s, &PayloadState::hanging(), &ControlInput::zero(), &params)
                .unwrap();
        assert_eq!(w.f_e, Vector3::zeros());
        assert_eq!(w.tau_e, Vector3::zeros());
    }

    #[test]
    fn linear_drag_definition() {
        let mut params = PlantParams::default();
        params.m_p = 0.0;
        params.d_v = Vector3::repeat(0.1);
        let mut s = QuadState::at_rest(Vector3::zeros());
        s.v_w = Vector3::new(0.0, 0.0, 1.0);
        let w =
            true_external_wrench(&s, &PayloadState::hanging(), &ControlInput::zero(), &params)
                .unwrap();
        assert_relative_eq!(w.f_e.z, -0.1, epsilon = 1e-12);
    }

    #[test]
    fn hover_is_a_fixed_point() {
        let params = no_drag(PlantParams::default());
        let s0 = QuadState::at_rest(Vector3::new(0.0, 0.0, 1.6));
        let ps0 = PayloadState::hanging();
        let u = hover_input(&params, true);
        let mut s = s0.clone();
        let mut ps = ps0.clone();
        for _ in 0..1000 {
            let (ns, nps, _) = step_plant(&s, &ps, &u, &params, 1e-3).unwrap();
            s = ns;
            ps = nps;
        }
        assert_relative_eq!((s.p_w - s0.p_w).norm(), 0.0, epsilon = 1e-9);
        assert_relative_eq!(s.v_w.norm(), 0.0, epsilon = 1e-9);
        assert!(ps.taut);
    }

    #[test]
    fn free_fall_kinematics() {
        let mut params = no_drag(PlantParams::default());
        params.m_p = 0.0;
        let mut s = QuadState::at_rest(Vector3::zeros());
        let mut ps = PayloadState::hanging();
        for _ in 0..100 {
            let (ns, nps, _) = step_plant(&s, &ps, &ControlInput::zero(), &params, 1e-3).unwrap();
            s = ns;
            ps = nps;
        }
        assert_relative_eq!(s.v_w.z, -0.981, epsilon = 1e-6);
    }

    #[test]
    fn actuator_limits_clamp_and_flag() {
        let params = PlantParams::default();
        let s = QuadState::at_rest(Vector3::zeros());
        let u = ControlInput::new(1e3, Vector3::new(5.0, 0.0, 0.0));
        let (_, _, flags) = step_plant(&s, &PayloadState::hanging(), &u, &params, 1e-3).unwrap();
        assert!(flags.saturated);
    }

    #[test]
    fn nan_state_is_an_error() {
        let params = PlantParams::default();
        let mut s = QuadState::at_rest(Vector3::zeros());
        s.v_w.x = f64::NAN;
        assert!(matches!(
            step_plant(&s, &PayloadState::hanging(), &ControlInput::zero(), &params, 1e-3),
            Err(SimError::NumericalBlowup)
        ));
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        // Swinging payload + tumbling quad, fixed inputs, no transitions.
        let params = no_drag(PlantParams::default());
        let s0 = QuadState::at_rest(Vector3::new(0.0, 0.0, 2.0));
        let ps0 = PayloadState {
            q: Vector3::new(0.5f64.sin(), 0.0, -(0.5f64.cos())),
            q_dot: Vector3::zeros(),
            taut: true,
        };
        let u = ControlInput::new((params.m + params.m_p) * params.g * 1.02, Vector3::zeros());

        let endpoint = |dt: f64| {
            let n = (1.0 / dt).round() as usize;
            let mut s = s0.clone();
            let mut ps = ps0.clone();
            for _ in 0..n {
                let (ns, nps, _) = step_plant(&s, &ps, &u, &params, dt).unwrap();
                s = ns;
                ps = nps;
            }
            (s, ps)
        };

        let (s_ref, ps_ref) = endpoint(0.125e-3);
        let err = |dt: f64| {
            let (s, ps) = endpoint(dt);
            ((s.p_w - s_ref.p_w).norm_squared()
                + (s.v_w - s_ref.v_w).norm_squared()
                + (ps.q - ps_ref.q).norm_squared())
            .sqrt()
        };
        let e4 = err(4e-3);
        let e2 = err(2e-3);
        let e1 = err(1e-3);
        let r42 = e4 / e2;
        let r21 = e2 / e1;
        assert!((12.0..=20.0).contains(&r42), "ratio 4ms/2ms = {r42}");
        assert!((12.0..=20.0).contains(&r21), "ratio 2ms/1ms = {r21}");
    }

    #[test]
    fn energy_conserved_without_drag_or_input() {
        let params = no_drag(PlantParams::default());
        let s0 = QuadState {
            p_w: Vector3::new(0.0, 0.0, 5.0),
            v_w: Vector3::new(0.2, 0.0, 0.0),
            quat: UnitQuaternion::identity(),
            omega_b: Vector3::new(0.3, -0.2, 0.4),
        };
        let ps0 = PayloadState {
            q: Vector3::new(0.6f64.sin(), 0.0, -(0.6f64.cos())),
            q_dot: Vector3::new(0.0, 0.5, 0.0),
            taut: true,
        };
        let e0 = mechanical_energy(&s0, &ps0, &params);
        let mut s = s0;
        let mut ps = ps0;
        for _ in 0..5000 {
            let (ns, nps, _) = step_plant(&s, &ps, &ControlInput::zero(), &params, 1e-3).unwrap();
            s = ns;
            ps = nps;
        }
        let e1 = mechanical_energy(&s, &ps, &params);
        assert!(
            ((e1 - e0) / e0).abs() < 1e-6,
            "relative energy drift {}",
            ((e1 - e0) / e0).abs()
        );
    }

    #[test]
    fn attitude_stays_orthonormal() {
        let params = PlantParams::default();
        let mut s = QuadState::at_rest(Vector3::zeros());
        s.omega_b = Vector3::new(1.0, 2.0, -0.5);
        let mut ps = PayloadState::hanging();
        let u = ControlInput::new(params.m * params.g, Vector3::new(0.05, -0.02, 0.01));
        for _ in 0..2000 {
            let (ns, nps, _) = step_plant(&s, &ps, &u, &params, 1e-3).unwrap();
            s = ns;
            ps = nps;
            assert!((s.quat.norm() - 1.0).abs() < 1e-12);
        }
        let r = s.rotation();
        assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-9);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn tether_constraint_and_transitions() {
        // Payload balanced above the quadrotor: the tether releases
        // immediately, the payload falls ballistically through the
        // attachment point and re-engages hanging below, all without the
        // payload ever leaving the sphere of radius l.
        let params = no_drag(PlantParams::default());
        let mut s = QuadState::at_rest(Vector3::new(0.0, 0.0, 2.0));
        let mut ps = PayloadState { q: Vector3::z(), q_dot: Vector3::zeros(), taut: true };
        let u = ControlInput::new(params.m * params.g, Vector3::zeros());
        let mut released = false;
        let mut impacted = false;
        for _ in 0..2000 {
            let (ns, nps, flags) = step_plant(&s, &ps, &u, &params, 1e-3).unwrap();
            s = ns;
            ps = nps;
            released |= flags.released;
            impacted |= flags.impact;
            let dist = (payload_position(&s, &ps, &params)
                - (s.p_w + s.rotation() * params.r_att))
                .norm();
            assert!(dist <= params.l + 1e-9, "tether overstretched: {dist}");
            if ps.taut {
                assert!((dist - params.l).abs() <= 1e-9);
            }
        }
        assert!(released, "expected at least one slack transition");
        assert!(impacted, "expected at least one re-engagement");
    }
}
