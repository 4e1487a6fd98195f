//! The lifted linear system z(t+t_s) = A z(t) + B ζ(t): least-squares
//! identification of (A, B), forward/backward rollouts, the sliding
//! window used online, and horizon prediction of the wrench.
//!
//! All lifted-space math runs on standardized χ and ζ (training-set
//! statistics stored in the model); raw units only appear at the
//! boundaries.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Vector6};
use serde::{Deserialize, Serialize};

use crate::embed::{embed, Decoder, MlpParams};
use crate::labeling::LabeledSample;
use crate::sim::Wrench;

/// Ridge used by the online sliding-window refit (the near-square
/// window regressor is routinely ill-conditioned).
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum LlsError {
    #[error("non-finite input to least-squares fit")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("backward rollout requires invertible A (cond = {0:.3e})")]
    SingularA(f64),
    #[error("insufficient history: window has {have} of {need} samples")]
    WindowNotFull { have: usize, need: usize },
    #[error("least-squares solve failed")]
    SolveFailed,
}

/// Standardization statistics for χ and ζ, estimated on the training set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormStats {
    pub chi_mean: Vector6<f64>,
    pub chi_std: Vector6<f64>,
    pub zeta_mean: Vector6<f64>,
    pub zeta_std: Vector6<f64>,
}

impl NormStats {
    /// No-op statistics (zero mean, unit scale).
    pub fn identity() -> Self {
        Self {
            chi_mean: Vector6::zeros(),
            chi_std: Vector6::repeat(1.0),
            zeta_mean: Vector6::zeros(),
            zeta_std: Vector6::repeat(1.0),
        }
    }

    /// Per-component mean and standard deviation, floored to keep
    /// constant channels harmless.
    pub fn from_samples(samples: &[LabeledSample]) -> Self {
        let n = samples.len().max(1) as f64;
        let mut chi_mean = Vector6::zeros();
        let mut zeta_mean = Vector6::zeros();
        for s in samples {
            chi_mean += s.chi.to_vector();
            zeta_mean += s.zeta;
        }
        chi_mean /= n;
        zeta_mean /= n;
        let mut chi_var = Vector6::zeros();
        let mut zeta_var = Vector6::zeros();
        for s in samples {
            let dc = s.chi.to_vector() - chi_mean;
            let dz = s.zeta - zeta_mean;
            chi_var += dc.component_mul(&dc);
            zeta_var += dz.component_mul(&dz);
        }
        let floor = 1e-8;
        Self {
            chi_mean,
            chi_std: (chi_var / n).map(|v| v.sqrt().max(floor)),
            zeta_mean,
            zeta_std: (zeta_var / n).map(|v| v.sqrt().max(floor)),
        }
    }

    pub fn normalize_chi(&self, chi: &Vector6<f64>) -> Vector6<f64> {
        (chi - self.chi_mean).component_div(&self.chi_std)
    }

    pub fn denormalize_chi(&self, chi_n: &Vector6<f64>) -> Vector6<f64> {
        chi_n.component_mul(&self.chi_std) + self.chi_mean
    }

    pub fn normalize_zeta(&self, zeta: &Vector6<f64>) -> Vector6<f64> {
        (zeta - self.zeta_mean).component_div(&self.zeta_std)
    }
}

/// Exported model: embedding parameters, decoder, discrete dynamics and
/// the normalization they were trained in.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LiftedModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub decoder: Decoder,
    pub mlp: MlpParams,
    /// Sample time [s].
    pub t_s: f64,
    /// Online window length T.
    pub window_t: usize,
    pub norm: NormStats,
    pub spectral_radius: f64,
    pub stable: bool,
}

impl LiftedModel {
    pub fn k(&self) -> usize {
        self.mlp.k()
    }

    /// Normalize and lift a raw wrench.
    pub fn lift(&self, chi: &Wrench) -> DVector<f64> {
        embed(&self.norm.normalize_chi(&chi.to_vector()), &self.mlp)
    }

    /// Decode a lifted state back to a raw wrench.
    pub fn unlift(&self, z: &DVector<f64>) -> Wrench {
        let chi_n = self.decoder.decode(z);
        let v = Vector6::from_iterator(chi_n.iter().copied());
        Wrench::from_vector(&self.norm.denormalize_chi(&v))
    }

    /// Spectral radius of A and the stability flag it implies.
    pub fn stability(a: &DMatrix<f64>) -> (f64, bool) {
        let rho = a.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
        (rho, rho <= 1.0 + 1e-6)
    }
}

/// One step of the lifted dynamics. The training loss and the online
/// predictor both go through here.
pub fn lls_step(a: &DMatrix<f64>, b: &DMatrix<f64>, z: &DVector<f64>, zeta_n: &DVector<f64>) -> DVector<f64> {
    a * z + b * zeta_n
}

/// Condition numbers beyond this treat A as singular for inversion.
pub const BACKWARD_COND_LIMIT: f64 = 1e10;

/// Spectral condition number σ_max/σ_min (∞ when singular).
pub fn spectral_cond(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    if sv.min() > 0.0 {
        sv.max() / sv.min()
    } else {
        f64::INFINITY
    }
}

/// Result of a least-squares fit.
#[derive(Clone, Debug)]
pub struct LlsFit {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Condition number of the stacked regressor.
    pub cond: f64,
    /// Raised when cond exceeds 1e12; the solution is still returned.
    pub ill_conditioned: bool,
}

/// Solve min ‖Z1 − A Z0 − B U0‖_F over (A, B).
///
/// With `ridge` > 0 the normal equations get a Tikhonov term λI; with
/// `ridge` = 0 the minimum-norm solution is taken via the pseudo-inverse.
pub fn fit_ab(
    z0: &DMatrix<f64>,
    z1: &DMatrix<f64>,
    u0: &DMatrix<f64>,
    ridge: f64,
) -> Result<LlsFit, LlsError> {
    let k = z0.nrows();
    let p = u0.nrows();
    let n = z0.ncols();
    if z1.nrows() != k || z1.ncols() != n || u0.ncols() != n {
        return Err(LlsError::Shape(format!(
            "Z0 {}x{}, Z1 {}x{}, U0 {}x{}",
            k,
            n,
            z1.nrows(),
            z1.ncols(),
            p,
            u0.ncols()
        )));
    }
    if !z0.iter().chain(z1.iter()).chain(u0.iter()).all(|x| x.is_finite()) {
        return Err(LlsError::NonFinite);
    }

    let mut g = DMatrix::zeros(k + p, n);
    g.view_mut((0, 0), (k, n)).copy_from(z0);
    g.view_mut((k, 0), (p, n)).copy_from(u0);

    let sv = g.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };

    let ab = if ridge > 0.0 {
        let m = &g * g.transpose() + DMatrix::identity(k + p, k + p) * ridge;
        let rhs = &g * z1.transpose();
        let chol = m.cholesky().ok_or(LlsError::SolveFailed)?;
        chol.solve(&rhs).transpose()
    } else {
        let eps = smax * (k + p).max(n) as f64 * f64::EPSILON;
        let pinv = g.clone().pseudo_inverse(eps).map_err(|_| LlsError::SolveFailed)?;
        z1 * pinv
    };

    Ok(LlsFit {
        a: ab.view((0, 0), (k, k)).into_owned(),
        b: ab.view((0, k), (k, p)).into_owned(),
        cond,
        ill_conditioned: cond > 1e12,
    })
}

/// Iterate the lifted dynamics forward n steps; `out[0]` = z0.
pub fn rollout_forward(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    z0: &DVector<f64>,
    zetas: &[DVector<f64>],
    n: usize,
) -> Vec<DVector<f64>> {
    assert!(zetas.len() >= n, "need {n} inputs, got {}", zetas.len());
    let mut out = Vec::with_capacity(n + 1);
    out.push(z0.clone());
    for zeta in zetas.iter().take(n) {
        let next = lls_step(a, b, out.last().unwrap(), zeta);
        out.push(next);
    }
    out
}

/// Reconstruct earlier lifted states from the final one:
/// z_k = A⁻¹ (z_{k+1} − B ζ_k). Chronological output, `out[n]` = z_end.
pub fn rollout_backward(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    z_end: &DVector<f64>,
    zetas: &[DVector<f64>],
    n: usize,
) -> Result<Vec<DVector<f64>>, LlsError> {
    assert!(zetas.len() >= n, "need {n} inputs, got {}", zetas.len());
    let cond = spectral_cond(a);
    if cond > BACKWARD_COND_LIMIT {
        return Err(LlsError::SingularA(cond));
    }
    let lu = a.clone().lu();
    let mut rev = Vec::with_capacity(n + 1);
    rev.push(z_end.clone());
    for k in (0..n).rev() {
        let rhs = rev.last().unwrap() - b * &zetas[k];
        let z = lu.solve(&rhs).ok_or(LlsError::SingularA(cond))?;
        rev.push(z);
    }
    rev.reverse();
    Ok(rev)
}

/// Ring buffer of the last `capacity` (χ, ζ) pairs, raw units,
/// chronological order.
#[derive(Clone, Debug)]
pub struct WindowBuffer {
    buf: VecDeque<(Vector6<f64>, Vector6<f64>)>,
    capacity: usize,
}

impl WindowBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { buf: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, chi: Vector6<f64>, zeta: Vector6<f64>) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back((chi, zeta));
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.buf.len() == self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Vector6<f64>, Vector6<f64>)> {
        self.buf.iter()
    }
}

/// Refit (A, B) on a full window: lift every χ in the window with the
/// model's embedding and solve the same least-squares problem as
/// training.
pub fn window_refit(
    buf: &WindowBuffer,
    model: &LiftedModel,
) -> Result<(DMatrix<f64>, DMatrix<f64>), LlsError> {
    if !buf.is_full() {
        return Err(LlsError::WindowNotFull { have: buf.len(), need: buf.capacity });
    }
    let t = buf.len();
    let k = model.k();
    let mut z = DMatrix::zeros(k, t);
    let mut u = DMatrix::zeros(6, t);
    for (i, (chi, zeta)) in buf.iter().enumerate() {
        z.set_column(i, &embed(&model.norm.normalize_chi(chi), &model.mlp));
        u.set_column(i, &DVector::from_iterator(6, model.norm.normalize_zeta(zeta).iter().copied()));
    }
    let z0 = z.view((0, 0), (k, t - 1)).into_owned();
    let z1 = z.view((0, 1), (k, t - 1)).into_owned();
    let u0 = u.view((0, 0), (6, t - 1)).into_owned();
    let fit = fit_ab(&z0, &z1, &u0, DEFAULT_RIDGE)?;
    Ok((fit.a, fit.b))
}

/// Predict the wrench over a horizon: z₋₁ = Φ(χ_prev), then
/// χ̂_i = C(A z_{i−1} + B ζ_{i−1}) for each provided ζ. `zetas[0]` is the
/// last measured ζ; later entries come from the controller's predicted
/// states. Raw units in, raw units out.
pub fn predict_wrench_horizon(
    model: &LiftedModel,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    chi_prev: &Wrench,
    zetas: &[Vector6<f64>],
) -> Vec<Wrench> {
    let mut z = model.lift(chi_prev);
    let mut out = Vec::with_capacity(zetas.len());
    for zeta in zetas {
        let zeta_n = model.norm.normalize_zeta(zeta);
        z = lls_step(a, b, &z, &DVector::from_iterator(6, zeta_n.iter().copied()));
        out.push(model.unlift(&z));
    }
    out
}
