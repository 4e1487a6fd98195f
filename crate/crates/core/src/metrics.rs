//! RMSE reports for wrench estimation and trajectory tracking.
//!
//! Composite errors are formed per sample from the error vector (e.g.
//! F_k = √(e_x² + e_y² + e_z²)) and then aggregated, so RMSE_F² equals
//! RMSE_Fx² + RMSE_Fy² + RMSE_Fz² by construction.

use serde::{Deserialize, Serialize};

use crate::log::TrajectoryLog;
use crate::sim::{RefGen, Wrench};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("misaligned series: {pred} predictions vs {truth} truths")]
    Misaligned { pred: usize, truth: usize },
    #[error("empty input")]
    Empty,
}

/// Wrench estimation RMSEs: per axis plus the planar and full composites.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RmseReport {
    /// Per-axis RMSE: Fx, Fy, Fz [N], then τx, τy, τz [N·m].
    pub axes: [f64; 6],
    pub f_xy: f64,
    pub tau_xy: f64,
    pub f: f64,
    pub tau: f64,
    pub n: usize,
}

/// RMSE of the per-sample estimation error, per axis and composite.
pub fn rmse_wrench(pred: &[Wrench], truth: &[Wrench]) -> Result<RmseReport, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::Misaligned { pred: pred.len(), truth: truth.len() });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = pred.len();
    let mut sq = [0.0f64; 6];
    for (p, t) in pred.iter().zip(truth) {
        let e = p.to_vector() - t.to_vector();
        for i in 0..6 {
            sq[i] += e[i] * e[i];
        }
    }
    let ms = |s: f64| (s / n as f64).sqrt();
    Ok(RmseReport {
        axes: [ms(sq[0]), ms(sq[1]), ms(sq[2]), ms(sq[3]), ms(sq[4]), ms(sq[5])],
        f_xy: ms(sq[0] + sq[1]),
        tau_xy: ms(sq[3] + sq[4]),
        f: ms(sq[0] + sq[1] + sq[2]),
        tau: ms(sq[3] + sq[4] + sq[5]),
        n,
    })
}

/// Tracking errors against the reference: E_xy is the RMSE of the planar
/// position error magnitude, E_z of the altitude error.
pub fn tracking_rmse(log: &TrajectoryLog, refgen: &RefGen) -> (f64, f64) {
    if log.is_empty() {
        return (0.0, 0.0);
    }
    let mut sq_xy = 0.0;
    let mut sq_z = 0.0;
    for row in &log.rows {
        let (x_ref, _) = refgen.sample(row.t);
        let e = row.state.p_w - x_ref.p_w;
        sq_xy += e.x * e.x + e.y * e.y;
        sq_z += e.z * e.z;
    }
    let n = log.len() as f64;
    ((sq_xy / n).sqrt(), (sq_z / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::LogRow;
    use crate::sim::{ControlInput, PlantParams, QuadState, RefKind};
    use approx::assert_relative_eq;
    use nalgebra::{Vector3, Vector6};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    #[test]
    fn perfect_prediction_is_zero() {
        let w = vec![Wrench::from_vector(&Vector6::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3)); 10];
        let r = rmse_wrench(&w, &w).unwrap();
        assert_eq!(r.axes, [0.0; 6]);
        assert_eq!(r.f, 0.0);
        assert_eq!(r.tau, 0.0);
    }

    #[test]
    fn constant_unit_error() {
        let truth = vec![Wrench::from_vector(&Vector6::new(0.5, -1.0, 2.0, 0.0, 0.1, 0.0)); 7];
        let pred: Vec<_> = truth
            .iter()
            .map(|w| {
                Wrench::from_vector(&(w.to_vector() + Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)))
            })
            .collect();
        let r = rmse_wrench(&pred, &truth).unwrap();
        assert_relative_eq!(r.axes[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.f, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.tau, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn misaligned_lengths_error_reports_counts() {
        let a = vec![Wrench::zero(); 3];
        let b = vec![Wrench::zero(); 5];
        match rmse_wrench(&a, &b) {
            Err(MetricsError::Misaligned { pred: 3, truth: 5 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    /// Brute-force second implementation over plain f64 loops.
    #[test]
    fn matches_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let truth: Vec<Wrench> = (0..100)
            .map(|_| Wrench::from_vector(&Vector6::from_fn(|_, _| rng.random_range(-2.0..=2.0))))
            .collect();
        let pred: Vec<Wrench> = (0..100)
            .map(|_| Wrench::from_vector(&Vector6::from_fn(|_, _| rng.random_range(-2.0..=2.0))))
            .collect();
        let r = rmse_wrench(&pred, &truth).unwrap();

        let n = 100usize;
        let mut acc = [0.0f64; 6];
        let mut f = 0.0;
        let mut fxy = 0.0;
        for i in 0..n {
            let p = pred[i].to_vector();
            let t = truth[i].to_vector();
            for k in 0..6 {
                acc[k] += (p[k] - t[k]) * (p[k] - t[k]);
            }
            let (ex, ey, ez) = (p[0] - t[0], p[1] - t[1], p[2] - t[2]);
            f += ex * ex + ey * ey + ez * ez;
            fxy += ex * ex + ey * ey;
        }
        for k in 0..6 {
            assert_relative_eq!(r.axes[k], (acc[k] / n as f64).sqrt(), epsilon = 1e-12);
        }
        assert_relative_eq!(r.f, (f / n as f64).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(r.f_xy, (fxy / n as f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn tracking_offset_pythagoras() {
        let params = PlantParams::default();
        let point = Vector3::new(0.0, 0.0, 2.0);
        let refgen = RefGen::new(RefKind::Hover { point }, &params);
        let rows: Vec<LogRow> = (0..10)
            .map(|i| LogRow {
                t: i as f64 * 0.02,
                state: QuadState::at_rest(point + Vector3::new(0.3, 0.4, 0.5)),
                input: ControlInput::zero(),
                wrench: None,
                accel: None,
            })
            .collect();
        let log = TrajectoryLog { rows, ..Default::default() };
        let (e_xy, e_z) = tracking_rmse(&log, &refgen);
        assert_relative_eq!(e_xy, 0.5, epsilon = 1e-12);
        assert_relative_eq!(e_z, 0.5, epsilon = 1e-12);

        let perfect_rows: Vec<LogRow> = log
            .rows
            .iter()
            .map(|r| LogRow { state: QuadState::at_rest(point), ..r.clone() })
            .collect();
        let perfect = TrajectoryLog { rows: perfect_rows, ..Default::default() };
        assert_eq!(tracking_rmse(&perfect, &refgen), (0.0, 0.0));
    }

    proptest! {
        /// Euclidean structure of the composites: F² = F_xy² + F_z² and
        /// F ≥ max(F_xy, F_z) for any error series.
        #[test]
        fn composite_triangle_structure(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<Wrench> = (0..50)
                .map(|_| Wrench::from_vector(&Vector6::from_fn(|_, _| rng.random_range(-5.0..=5.0))))
                .collect();
            let pred: Vec<Wrench> = (0..50)
                .map(|_| Wrench::from_vector(&Vector6::from_fn(|_, _| rng.random_range(-5.0..=5.0))))
                .collect();
            let r = rmse_wrench(&pred, &truth).unwrap();
            prop_assert!((r.f.powi(2) - (r.f_xy.powi(2) + r.axes[2].powi(2))).abs() < 1e-9);
            prop_assert!(r.f >= r.f_xy - 1e-12);
            prop_assert!(r.f >= r.axes[2] - 1e-12);
            prop_assert!(r.tau >= r.tau_xy - 1e-12);
        }
    }
}
