//! Offline learning of the lifted linear system: segment the labeled
//! data, fit per-segment (A, B) by least squares, roll the LLS forward
//! and backward in time, and descend the combined loss
//!
//! ```text
//! L = β₁ L_fwd + β₂ L_bwd + β₃ L_rec
//! ```
//!
//! with exact reverse-mode gradients through the embedding, the decoder
//! and the rollouts. The per-segment (A, B) solution is treated as a
//! constant during backpropagation (the fit and the descent alternate).

use nalgebra::{DMatrix, DVector, Vector6};
use rand::seq::SliceRandom;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use crate::embed::{
    cap_spectral_norm, embed_cached, lipschitz_certificate, mlp_backward, Decoder, ForwardCache,
    MlpParams, SnMode,
};
use crate::labeling::LabeledSample;
use crate::lls::{fit_ab, lls_step, LiftedModel, LlsError, NormStats, WindowBuffer};
use crate::metrics::{rmse_wrench, RmseReport};
use crate::sim::Wrench;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("dataset too short: {len} samples for segment length {m}")]
    TooShort { len: usize, m: usize },
    #[error("loss went non-finite and learning-rate halving did not recover")]
    NanLoss,
    #[error(transparent)]
    Lls(#[from] LlsError),
}

/// Which index the multi-step discount exponent runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscountMode {
    /// μ^(j−1) on the j-step-ahead prediction error within a segment.
    StepIndex,
    /// μ^i on segment i of the batch, undiscounted within the segment.
    TrajectoryIndex,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub epochs: usize,
    pub batch_segments: usize,
    /// Segment length m.
    pub segment_len: usize,
    pub lr: f64,
    pub seed: u64,
    pub gamma: f64,
    pub k: usize,
    pub window_t: usize,
    pub ridge: f64,
    pub hidden: Vec<usize>,
    pub discount: DiscountMode,
    /// Sample time of the data [s].
    pub t_s: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1.0,
            mu1: 0.999,
            mu2: 0.999,
            epochs: 120,
            batch_segments: 16,
            segment_len: 40,
            lr: 1e-3,
            seed: 0,
            gamma: 10.0,
            k: 24,
            window_t: 40,
            ridge: 1e-8,
            hidden: vec![128, 128],
            discount: DiscountMode::StepIndex,
            t_s: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.beta1 < 0.0 || self.beta2 < 0.0 || self.beta3 < 0.0 {
            return Err(TrainError::BadConfig("betas must be nonnegative".into()));
        }
        if !(0.0 < self.mu1 && self.mu1 < 1.0) || !(0.0 < self.mu2 && self.mu2 < 1.0) {
            return Err(TrainError::BadConfig("mus must lie in (0, 1)".into()));
        }
        if self.segment_len < 3 {
            return Err(TrainError::BadConfig("segment length must be >= 3".into()));
        }
        if self.k == 0 || self.lr <= 0.0 || self.epochs == 0 || self.batch_segments == 0 {
            return Err(TrainError::BadConfig("k, lr, epochs, batch must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![6];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.k);
        dims
    }
}

/// A contiguous m-step slice of (χ, ζ) pairs.
#[derive(Clone, Debug)]
pub struct Segment {
    pub chi: Vec<Vector6<f64>>,
    pub zeta: Vec<Vector6<f64>>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.chi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chi.is_empty()
    }

    fn normalized(&self, norm: &NormStats) -> Segment {
        Segment {
            chi: self.chi.iter().map(|c| norm.normalize_chi(c)).collect(),
            zeta: self.zeta.iter().map(|z| norm.normalize_zeta(z)).collect(),
        }
    }
}

/// Overlapping segments of length m with stride m/2, chronological,
/// values copied bit-exactly.
pub fn make_segments(samples: &[LabeledSample], m: usize) -> Result<Vec<Segment>, TrainError> {
    if samples.len() < m {
        return Err(TrainError::TooShort { len: samples.len(), m });
    }
    let stride = (m / 2).max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start + m <= samples.len() {
        let slice = &samples[start..start + m];
        out.push(Segment {
            chi: slice.iter().map(|s| s.chi.to_vector()).collect(),
            zeta: slice.iter().map(|s| s.zeta).collect(),
        });
        start += stride;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub fwd: f64,
    pub bwd: f64,
    pub rec: f64,
    pub total: f64,
    /// Backward rollout skipped (singular A on this segment).
    pub bwd_skipped: bool,
}

/// Embed a (normalized) segment and cache activations.
fn embed_segment(seg: &Segment, mlp: &MlpParams) -> (Vec<ForwardCache>, Vec<DVector<f64>>) {
    let caches: Vec<ForwardCache> = seg
        .chi
        .iter()
        .map(|c| embed_cached(&DVector::from_iterator(6, c.iter().copied()), mlp))
        .collect();
    let zs = caches.iter().map(|c| c.acts.last().unwrap().clone()).collect();
    (caches, zs)
}

/// Fit (A, B) on one normalized segment, the training-time counterpart of
/// the online window refit.
pub fn fit_segment(
    seg: &Segment,
    mlp: &MlpParams,
    ridge: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), LlsError> {
    let m = seg.len();
    let k = mlp.k();
    let (_, zs) = embed_segment(seg, mlp);
    let z0 = DMatrix::from_fn(k, m - 1, |i, j| zs[j][i]);
    let z1 = DMatrix::from_fn(k, m - 1, |i, j| zs[j + 1][i]);
    let u0 = DMatrix::from_fn(6, m - 1, |i, j| seg.zeta[j][i]);
    // Relative Tikhonov floor: untrained embeddings produce nearly
    // rank-deficient segment regressors whose weak directions would
    // otherwise give the fitted A enormous gain and blow up the
    // multi-step rollouts.
    let mut g = DMatrix::zeros(k + 6, m - 1);
    g.view_mut((0, 0), (k, m - 1)).copy_from(&z0);
    g.view_mut((k, 0), (6, m - 1)).copy_from(&u0);
    let smax = g.singular_values().max();
    let ridge_eff = ridge.max(1e-6 * smax * smax);
    let fit = fit_ab(&z0, &z1, &u0, ridge_eff)?;
    // Project onto near-stable operators: the error-bound theory assumes
    // a stable lifted operator, and an overshooting segment fit would
    // blow up the multi-step rollouts it feeds.
    let mut a = fit.a;
    let (rho, _) = crate::lls::LiftedModel::stability(&a);
    if rho > 1.02 {
        a *= 1.02 / rho;
    }
    Ok((a, fit.b))
}

fn zeta_dv(seg: &Segment, k: usize) -> DVector<f64> {
    DVector::from_iterator(6, seg.zeta[k].iter().copied())
}

/// Whether A is treated as invertible for an m-step backward rollout:
/// the worst-case residual amplification (1/σ_min)^(m−1) must stay below
/// 1e6. Depends on A alone, so the skip decision is constant while
/// differentiating through a frozen fit.
fn backward_invertible(a: &DMatrix<f64>, m: usize) -> bool {
    let smin = a.clone().singular_values().min();
    smin > 0.0 && (m.saturating_sub(1)) as f64 * (1.0 / smin).ln() <= 6.0 * std::f64::consts::LN_10
}

/// The three loss terms on one normalized segment with (A, B) held fixed.
///
/// Per-step MSE is ‖·‖²/K. Forward: weight μ₁^(j−1) on the j-step-ahead
/// error; backward mirrors it from the far end; reconstruction is the
/// mean over the segment of ‖χ − C z‖².
pub fn compute_losses(
    seg: &Segment,
    mlp: &MlpParams,
    decoder: &Decoder,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> LossTerms {
    let (_, zs) = embed_segment(seg, mlp);
    let m = seg.len();
    let k_dim = zs[0].len() as f64;
    let step_weight = |mu: f64, j: usize| -> f64 {
        match cfg.discount {
            DiscountMode::StepIndex => mu.powi(j as i32 - 1),
            DiscountMode::TrajectoryIndex => 1.0,
        }
    };

    // Forward rollout from z_0; discounted average over the horizon.
    let steps = (m - 1) as f64;
    let mut fwd = 0.0;
    let mut zhat = zs[0].clone();
    for j in 1..m {
        zhat = lls_step(a, b, &zhat, &zeta_dv(seg, j - 1));
        fwd += step_weight(cfg.mu1, j) * (&zs[j] - &zhat).norm_squared() / (k_dim * steps);
    }

    // Backward rollout from z_{m−1}; skipped when inverting A would
    // amplify residuals beyond reason over this segment length.
    let mut bwd = 0.0;
    let mut bwd_skipped = true;
    if backward_invertible(a, m) {
        if let Some(a_inv) = a.clone().lu().try_inverse() {
            bwd_skipped = false;
            let mut zb = zs[m - 1].clone();
            for k in (0..m - 1).rev() {
                zb = &a_inv * (&zb - b * zeta_dv(seg, k));
                let j = m - 1 - k;
                bwd += step_weight(cfg.mu2, j) * (&zs[k] - &zb).norm_squared() / (k_dim * steps);
            }
        }
    }

    let mut rec = 0.0;
    for (chi, z) in seg.chi.iter().zip(&zs) {
        let r = decoder.decode(z) - DVector::from_iterator(6, chi.iter().copied());
        rec += r.norm_squared();
    }
    rec /= m as f64;

    let total = cfg.beta1 * fwd + cfg.beta2 * bwd + cfg.beta3 * rec;
    LossTerms { fwd, bwd, rec, total, bwd_skipped }
}

/// Gradients with respect to every trainable parameter.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub d_weights: Vec<DMatrix<f64>>,
    pub d_biases: Vec<DVector<f64>>,
    pub d_c: DMatrix<f64>,
}

impl Gradients {
    pub fn zeros(mlp: &MlpParams, decoder: &Decoder) -> Self {
        Self {
            d_weights: mlp.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            d_biases: mlp.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            d_c: DMatrix::zeros(decoder.c.nrows(), decoder.c.ncols()),
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = self.d_c.norm_squared();
        for w in &self.d_weights {
            acc += w.norm_squared();
        }
        for b in &self.d_biases {
            acc += b.norm_squared();
        }
        acc.sqrt()
    }

    /// Global-norm clipping: exploding multi-step losses early in
    /// training otherwise produce steps that wipe out the decoder.
    pub fn clip(&mut self, max_norm: f64) {
        let gn = self.global_norm();
        if gn > max_norm && gn > 0.0 {
            let s = max_norm / gn;
            for w in &mut self.d_weights {
                *w *= s;
            }
            for b in &mut self.d_biases {
                *b *= s;
            }
            self.d_c *= s;
        }
    }
}

/// Loss and exact gradients on one normalized segment, (A, B) frozen.
/// `weight` scales this segment's contribution per loss term.
fn backprop_segment(
    seg: &Segment,
    mlp: &MlpParams,
    decoder: &Decoder,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cfg: &TrainConfig,
    weight: (f64, f64, f64),
    grads: &mut Gradients,
) -> LossTerms {
    let m = seg.len();
    let (caches, zs) = embed_segment(seg, mlp);
    let k_dim = zs[0].len() as f64;
    let (w_fwd, w_bwd, w_rec) = weight;
    let step_weight = |mu: f64, j: usize| -> f64 {
        match cfg.discount {
            DiscountMode::StepIndex => mu.powi(j as i32 - 1),
            DiscountMode::TrajectoryIndex => 1.0,
        }
    };

    let mut d_z: Vec<DVector<f64>> = zs.iter().map(|z| DVector::zeros(z.len())).collect();

    // Forward rollout, keeping the predictions for the adjoint sweep.
    let steps = (m - 1) as f64;
    let mut zhats: Vec<DVector<f64>> = Vec::with_capacity(m);
    zhats.push(zs[0].clone());
    let mut fwd = 0.0;
    for j in 1..m {
        let next = lls_step(a, b, &zhats[j - 1], &zeta_dv(seg, j - 1));
        fwd += step_weight(cfg.mu1, j) * (&zs[j] - &next).norm_squared() / (k_dim * steps);
        zhats.push(next);
    }
    // Target-side gradients plus the adjoint back to z_0.
    let coef_f = cfg.beta1 * w_fwd * 2.0 / (k_dim * steps);
    let mut lambda = DVector::zeros(zs[0].len());
    for j in (1..m).rev() {
        let resid = &zs[j] - &zhats[j];
        let wj = step_weight(cfg.mu1, j);
        d_z[j] += &resid * (coef_f * wj);
        lambda += &resid * (-coef_f * wj);
        lambda = a.transpose() * lambda;
    }
    d_z[0] += &lambda;

    // Backward rollout and its adjoint to z_{m−1}; same skip rule as
    // `compute_losses`.
    let mut bwd = 0.0;
    let mut bwd_skipped = true;
    if backward_invertible(a, m) {
        if let Some(a_inv) = a.clone().lu().try_inverse() {
            bwd_skipped = false;
            let mut zbs: Vec<DVector<f64>> = vec![DVector::zeros(zs[0].len()); m];
            zbs[m - 1] = zs[m - 1].clone();
            for k in (0..m - 1).rev() {
                zbs[k] = &a_inv * (&zbs[k + 1] - b * zeta_dv(seg, k));
                let j = m - 1 - k;
                bwd += step_weight(cfg.mu2, j) * (&zs[k] - &zbs[k]).norm_squared() / (k_dim * steps);
            }
            let coef_b = cfg.beta2 * w_bwd * 2.0 / (k_dim * steps);
            let a_inv_t = a_inv.transpose();
            let mut mu_adj = DVector::zeros(zs[0].len());
            for k in 0..m - 1 {
                let j = m - 1 - k;
                let resid = &zs[k] - &zbs[k];
                let wj = step_weight(cfg.mu2, j);
                d_z[k] += &resid * (coef_b * wj);
                mu_adj += &resid * (-coef_b * wj);
                mu_adj = &a_inv_t * mu_adj;
            }
            d_z[m - 1] += &mu_adj;
        }
    }

    // Reconstruction loss and its gradients.
    let mut rec = 0.0;
    let coef_r = cfg.beta3 * w_rec * 2.0 / m as f64;
    for (k, z) in zs.iter().enumerate() {
        let chi = DVector::from_iterator(6, seg.chi[k].iter().copied());
        let r = decoder.decode(z) - &chi;
        rec += r.norm_squared();
        grads.d_c += (&r * z.transpose()) * coef_r;
        d_z[k] += decoder.c.transpose() * (&r * coef_r);
    }
    rec /= m as f64;

    // Push every accumulated ∂L/∂z_k through the MLP.
    for (cache, dz) in caches.iter().zip(&d_z) {
        mlp_backward(mlp, cache, dz, &mut grads.d_weights, &mut grads.d_biases);
    }

    LossTerms {
        fwd,
        bwd,
        rec,
        total: cfg.beta1 * fwd + cfg.beta2 * bwd + cfg.beta3 * rec,
        bwd_skipped,
    }
}

fn segment_weights(cfg: &TrainConfig, i: usize, n: usize) -> (f64, f64, f64) {
    match cfg.discount {
        DiscountMode::StepIndex => {
            let w = 1.0 / n as f64;
            (w, w, w)
        }
        DiscountMode::TrajectoryIndex => (cfg.mu1.powi(i as i32), cfg.mu2.powi(i as i32), 1.0),
    }
}

/// Batch loss with frozen per-segment fits: the exact function
/// `batch_gradients` differentiates, and therefore the one finite
/// differences must evaluate.
pub fn batch_loss(
    segments: &[Segment],
    mlp: &MlpParams,
    decoder: &Decoder,
    fits: &[(DMatrix<f64>, DMatrix<f64>)],
    cfg: &TrainConfig,
) -> LossTerms {
    let mut agg = LossTerms::default();
    for (i, (seg, (a, b))) in segments.iter().zip(fits).enumerate() {
        let terms = compute_losses(seg, mlp, decoder, a, b, cfg);
        let (wf, wb, wr) = segment_weights(cfg, i, segments.len());
        agg.fwd += wf * terms.fwd;
        agg.bwd += wb * terms.bwd;
        agg.rec += wr * terms.rec;
        agg.bwd_skipped |= terms.bwd_skipped;
    }
    agg.total = cfg.beta1 * agg.fwd + cfg.beta2 * agg.bwd + cfg.beta3 * agg.rec;
    agg
}

/// Exact gradients of `batch_loss` with respect to θ and C.
pub fn batch_gradients(
    segments: &[Segment],
    mlp: &MlpParams,
    decoder: &Decoder,
    fits: &[(DMatrix<f64>, DMatrix<f64>)],
    cfg: &TrainConfig,
) -> (LossTerms, Gradients) {
    let mut grads = Gradients::zeros(mlp, decoder);
    let mut agg = LossTerms::default();
    for (i, (seg, (a, b))) in segments.iter().zip(fits).enumerate() {
        let w = segment_weights(cfg, i, segments.len());
        let terms = backprop_segment(seg, mlp, decoder, a, b, cfg, w, &mut grads);
        agg.fwd += w.0 * terms.fwd;
        agg.bwd += w.1 * terms.bwd;
        agg.rec += w.2 * terms.rec;
        agg.bwd_skipped |= terms.bwd_skipped;
    }
    agg.total = cfg.beta1 * agg.fwd + cfg.beta2 * agg.bwd + cfg.beta3 * agg.rec;
    (agg, grads)
}

/// Adam with cosine learning-rate decay over the planned step budget.
struct Adam {
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
    m_c: DMatrix<f64>,
    v_c: DMatrix<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(mlp: &MlpParams, decoder: &Decoder) -> Self {
        Self {
            m_w: mlp.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            v_w: mlp.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            m_b: mlp.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            v_b: mlp.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            m_c: DMatrix::zeros(decoder.c.nrows(), decoder.c.ncols()),
            v_c: DMatrix::zeros(decoder.c.nrows(), decoder.c.ncols()),
            t: 0,
        }
    }

    fn step(&mut self, mlp: &mut MlpParams, decoder: &mut Decoder, g: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::B1.powi(self.t);
        let bc2 = 1.0 - Self::B2.powi(self.t);
        let upd = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
        };
        for l in 0..mlp.weights.len() {
            for i in 0..mlp.weights[l].len() {
                upd(
                    &mut mlp.weights[l][i],
                    &mut self.m_w[l][i],
                    &mut self.v_w[l][i],
                    g.d_weights[l][i],
                );
            }
        }
        for l in 0..mlp.biases.len() {
            for i in 0..mlp.biases[l].len() {
                upd(
                    &mut mlp.biases[l][i],
                    &mut self.m_b[l][i],
                    &mut self.v_b[l][i],
                    g.d_biases[l][i],
                );
            }
        }
        for i in 0..decoder.c.len() {
            upd(&mut decoder.c[i], &mut self.m_c[i], &mut self.v_c[i], g.d_c[i]);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossCurveRow {
    pub epoch: usize,
    pub total: f64,
    pub fwd: f64,
    pub bwd: f64,
    pub rec: f64,
}

/// Trained model plus training metadata.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: LiftedModel,
    pub loss_curve: Vec<LossCurveRow>,
    /// Certified Lipschitz bound of the exported embedding.
    pub lipschitz_bound: f64,
    pub config_hash: String,
    pub data_hash: String,
    /// Batches whose backward loss was skipped over the whole run.
    pub bwd_skip_count: usize,
}

fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Offline training: Adam on θ and C with spectral normalization applied
/// before every forward pass, per-segment (A, B) refits each step, early
/// stopping on stalled loss, and a full-dataset (A, B) refit at export.
pub fn train(samples: &[LabeledSample], cfg: &TrainConfig) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    let norm = NormStats::from_samples(samples);
    let raw_segments = make_segments(samples, cfg.segment_len)?;
    let segments: Vec<Segment> = raw_segments.iter().map(|s| s.normalized(&norm)).collect();

    let mut mlp = MlpParams::new_seeded_passthrough(&cfg.layer_dims(), cfg.gamma, cfg.seed);
    let mut decoder = Decoder::passthrough(cfg.k, 6);
    let mut adam = Adam::new(&mlp, &decoder);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));

    let mut lr = cfg.lr;
    let total_steps = (cfg.epochs * segments.len().div_ceil(cfg.batch_segments)).max(1);
    let mut step_count = 0usize;
    let mut curve: Vec<LossCurveRow> = Vec::new();
    let mut nan_retries = 0usize;
    let mut bwd_skips = 0usize;

    let mut epoch = 0;
    while epoch < cfg.epochs {
        let checkpoint = (mlp.clone(), decoder.clone());
        let mut order: Vec<usize> = (0..segments.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = LossTerms::default();
        let mut n_seen = 0usize;
        let mut nan_hit = false;
        for batch in order.chunks(cfg.batch_segments) {
            cap_spectral_norm(&mut mlp, SnMode::TrainStep);
            let batch_segs: Vec<Segment> = batch.iter().map(|&i| segments[i].clone()).collect();
            let mut fits = Vec::with_capacity(batch_segs.len());
            for seg in &batch_segs {
                fits.push(fit_segment(seg, &mlp, cfg.ridge)?);
            }
            let (terms, mut grads) = batch_gradients(&batch_segs, &mlp, &decoder, &fits, cfg);
            if !terms.total.is_finite() {
                nan_hit = true;
                break;
            }
            grads.clip(100.0);
            if terms.bwd_skipped {
                bwd_skips += 1;
            }
            let progress = (step_count as f64 / total_steps as f64).min(1.0);
            let lr_t = lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            adam.step(&mut mlp, &mut decoder, &grads, lr_t);
            step_count += 1;

            epoch_loss.fwd += terms.fwd * batch.len() as f64;
            epoch_loss.bwd += terms.bwd * batch.len() as f64;
            epoch_loss.rec += terms.rec * batch.len() as f64;
            epoch_loss.total += terms.total * batch.len() as f64;
            n_seen += batch.len();
        }

        if nan_hit {
            if nan_retries >= 2 {
                return Err(TrainError::NanLoss);
            }
            nan_retries += 1;
            lr *= 0.5;
            mlp = checkpoint.0;
            decoder = checkpoint.1;
            continue; // retry the epoch at the smaller rate
        }

        let inv = 1.0 / n_seen.max(1) as f64;
        curve.push(LossCurveRow {
            epoch,
            total: epoch_loss.total * inv,
            fwd: epoch_loss.fwd * inv,
            bwd: epoch_loss.bwd * inv,
            rec: epoch_loss.rec * inv,
        });

        // Early stop: no relative improvement on the best loss seen at
        // least 20 epochs ago.
        if curve.len() > 20 {
            let best_before: f64 = curve[..curve.len() - 20]
                .iter()
                .map(|r| r.total)
                .fold(f64::INFINITY, f64::min);
            let best_recent: f64 =
                curve[curve.len() - 20..].iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
            if (best_before - best_recent) / best_before.abs().max(1e-12) < 1e-5 {
                break;
            }
        }
        epoch += 1;
    }

    // Export: exact-SVD norm cap, then refit (A, B) on the full
    // standardized training set.
    cap_spectral_norm(&mut mlp, SnMode::Export);
    let n = samples.len();
    let k = cfg.k;
    let mut z = DMatrix::zeros(k, n);
    let mut u = DMatrix::zeros(6, n);
    for (i, s) in samples.iter().enumerate() {
        let chi_n = norm.normalize_chi(&s.chi.to_vector());
        z.set_column(i, &crate::embed::embed(&chi_n, &mlp));
        let zeta_n = norm.normalize_zeta(&s.zeta);
        u.set_column(i, &DVector::from_iterator(6, zeta_n.iter().copied()));
    }
    let z0 = z.view((0, 0), (k, n - 1)).into_owned();
    let z1 = z.view((0, 1), (k, n - 1)).into_owned();
    let u0 = u.view((0, 0), (6, n - 1)).into_owned();
    let fit = fit_ab(&z0, &z1, &u0, cfg.ridge)?;
    let (rho, stable) = LiftedModel::stability(&fit.a);

    let lipschitz_bound = lipschitz_certificate(&mlp);
    let config_hash = format!(
        "{:016x}",
        fnv1a(
            [
                cfg.beta1,
                cfg.beta2,
                cfg.beta3,
                cfg.mu1,
                cfg.mu2,
                cfg.lr,
                cfg.gamma,
                cfg.ridge,
                cfg.k as f64,
                cfg.segment_len as f64,
                cfg.seed as f64,
            ]
            .iter()
            .flat_map(|v| v.to_le_bytes()),
        )
    );
    let data_hash = format!(
        "{:016x}",
        fnv1a(
            samples
                .iter()
                .flat_map(|s| {
                    let mut vals: Vec<f64> = s.chi.to_vector().iter().copied().collect();
                    vals.extend(s.zeta.iter().copied());
                    vals
                })
                .flat_map(|v| v.to_le_bytes()),
        )
    );

    Ok(TrainedModel {
        model: LiftedModel {
            a: fit.a,
            b: fit.b,
            decoder,
            mlp,
            t_s: cfg.t_s,
            window_t: cfg.window_t,
            norm,
            spectral_radius: rho,
            stable,
        },
        loss_curve: curve,
        lipschitz_bound,
        config_hash,
        data_hash,
        bwd_skip_count: bwd_skips,
    })
}

/// Evaluation report: RMSEs of online (sliding-window refit) predictions
/// at each requested horizon. Horizon 1 is the one-step regime.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub horizons: Vec<(usize, RmseReport)>,
}

/// Evaluate a model on a labeled held-out set in the online regime: at
/// every instant refit (A, B) on the trailing window, then predict 1..n
/// steps ahead with the measured ζ sequence.
pub fn evaluate(
    model: &LiftedModel,
    samples: &[LabeledSample],
    horizons: &[usize],
) -> Result<EvalReport, TrainError> {
    let max_h = horizons.iter().copied().max().unwrap_or(1);
    let mut buf = WindowBuffer::new(model.window_t);
    let mut preds: Vec<Vec<Wrench>> = vec![Vec::new(); horizons.len()];
    let mut truths: Vec<Vec<Wrench>> = vec![Vec::new(); horizons.len()];

    for t in 0..samples.len() {
        buf.push(samples[t].chi.to_vector(), samples[t].zeta);
        if !buf.is_full() || t + max_h >= samples.len() {
            continue;
        }
        let (a, b) = crate::lls::window_refit(&buf, model)?;
        let zetas: Vec<Vector6<f64>> = (t..t + max_h).map(|i| samples[i].zeta).collect();
        let horizon_preds =
            crate::lls::predict_wrench_horizon(model, &a, &b, &samples[t].chi, &zetas);
        for (hi, &h) in horizons.iter().enumerate() {
            preds[hi].push(horizon_preds[h - 1]);
            truths[hi].push(samples[t + h].chi);
        }
    }

    let mut out = Vec::new();
    for (hi, &h) in horizons.iter().enumerate() {
        let report = rmse_wrench(&preds[hi], &truths[hi])
            .map_err(|e| TrainError::BadConfig(format!("evaluation produced no samples: {e}")))?;
        out.push((h, report));
    }
    Ok(EvalReport { horizons: out })
}
