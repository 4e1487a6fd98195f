//! Closed-loop rollout engine: fixed-rate control loop around the plant,
//! logging states, inputs and the ground-truth wrench at every tick.

use nalgebra::Vector3;

use super::plant::{exact_accelerations, step_plant, true_external_wrench};
use super::{ControlInput, PayloadState, PlantParams, QuadState, RefGen, SimError};
use crate::log::{LogRow, TrajectoryLog};

/// A feedback controller driving the plant at the loop rate.
pub trait Controller {
    fn control(&mut self, t: f64, state: &QuadState) -> Result<ControlInput, SimError>;
}

/// Rollout configuration. `payload_step` adds mass to the payload at the
/// given time (the "extra payload attached mid-flight" experiment).
#[derive(Clone, Debug)]
pub struct RolloutCfg {
    pub rate_hz: f64,
    pub duration: f64,
    /// Internal integrator substep [s].
    pub substep: f64,
    /// Positions beyond this bound abort the rollout as divergence [m].
    pub pos_bound: f64,
    pub payload_step: Option<(f64, f64)>,
}

impl Default for RolloutCfg {
    fn default() -> Self {
        Self { rate_hz: 50.0, duration: 10.0, substep: 1e-3, pos_bound: 50.0, payload_step: None }
    }
}

/// Run the closed loop and log at the tick rate. The log row at tick k
/// holds the state measured at t_k, the input applied over [t_k, t_{k+1}),
/// the true external wrench and the exact accelerations at t_k.
pub fn closed_loop(
    controller: &mut dyn Controller,
    initial: (QuadState, PayloadState),
    params: &PlantParams,
    cfg: &RolloutCfg,
) -> Result<TrajectoryLog, SimError> {
    if cfg.rate_hz < 10.0 {
        return Err(SimError::BadRate(cfg.rate_hz));
    }
    params.validate()?;
    let dt = 1.0 / cfg.rate_hz;
    let n_ticks = (cfg.duration * cfg.rate_hz).round() as usize;
    let n_sub = (dt / cfg.substep).round().max(1.0) as usize;
    let h = dt / n_sub as f64;

    let mut params = params.clone();
    let (mut state, mut payload) = initial;
    let mut log = TrajectoryLog::default();

    for k in 0..n_ticks {
        let t = k as f64 * dt;
        if let Some((t_step, dm)) = cfg.payload_step {
            if t >= t_step && t - dt < t_step {
                params.m_p += dm;
            }
        }
        let u = match controller.control(t, &state) {
            Ok(u) => u,
            Err(e) => {
                log.failed = true;
                log.failure_reason = Some(e.to_string());
                return Ok(log);
            }
        };
        let wrench = true_external_wrench(&state, &payload, &u, &params)?;
        let accel = exact_accelerations(&state, &payload, &u, &params);
        log.rows.push(LogRow {
            t,
            state: state.clone(),
            input: u,
            wrench: Some(wrench),
            accel: Some(accel),
        });

        for _ in 0..n_sub {
            let (ns, nps, _) = step_plant(&state, &payload, &u, &params, h)?;
            state = ns;
            payload = nps;
        }
        if state.p_w.norm() > cfg.pos_bound {
            log.failed = true;
            log.failure_reason = Some(format!("position bound exceeded at t = {t:.2}"));
            return Ok(log);
        }
    }
    Ok(log)
}

/// Collect a training dataset: closed-loop rollout along a reference,
/// starting on the reference with the payload hanging at rest.
pub fn collect_dataset(
    controller: &mut dyn Controller,
    refgen: &RefGen,
    duration: f64,
    rate_hz: f64,
    params: &PlantParams,
) -> Result<TrajectoryLog, SimError> {
    let (x0, _) = refgen.sample(0.0);
    let payload = if params.m_p > 0.0 {
        PayloadState::hanging()
    } else {
        PayloadState { q: -Vector3::z(), q_dot: Vector3::zeros(), taut: false }
    };
    let cfg = RolloutCfg { rate_hz, duration, ..Default::default() };
    closed_loop(controller, (x0, payload), params, &cfg)
}
