//! Time-stamped rollout logs shared by the simulator, labeling, training
//! and evaluation stages.

use nalgebra::{Vector3, Vector6};

use crate::sim::{ControlInput, QuadState, Wrench};

/// One logged sample: state and applied input at time `t`, plus the
/// ground-truth wrench and exact accelerations when the source (the
/// simulator) can provide them. Ingested real logs carry neither.
#[derive(Clone, Debug)]
pub struct LogRow {
    pub t: f64,
    pub state: QuadState,
    pub input: ControlInput,
    pub wrench: Option<Wrench>,
    /// Exact (v̇, ω̇) at the sample instant; in-memory only, not part of
    /// the CSV schema.
    pub accel: Option<(Vector3<f64>, Vector3<f64>)>,
}

impl LogRow {
    /// Regressor input ζ = [v_w; ω_b]. A pure projection of the state.
    pub fn zeta(&self) -> Vector6<f64> {
        let v = &self.state.v_w;
        let w = &self.state.omega_b;
        Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
    }
}

/// A fixed-rate rollout log. `failed` marks logs truncated by controller
/// divergence or solver breakdown.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
    pub failed: bool,
    pub failure_reason: Option<String>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Uniform sample interval, if the log has at least two rows.
    pub fn dt(&self) -> Option<f64> {
        (self.rows.len() >= 2).then(|| self.rows[1].t - self.rows[0].t)
    }

    pub fn has_wrench(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.wrench.is_some())
    }
}
