//! The embedding network Φ(χ; θ): a small ReLU MLP mapping the 6-vector
//! wrench into the K-dimensional lifted space, with spectral
//! normalization to pin its Lipschitz constant, plus the linear decoder
//! C that reconstructs χ = C z.
//!
//! Spectral normalization is applied as a projection: weights are
//! rescaled in place (per layer, to γ^{1/(L+1)}) before every forward
//! pass during training and once more with exact singular values at
//! export, so loss gradients are taken at the normalized weights rather
//! than flowing through the normalization itself.

use nalgebra::{DMatrix, DVector, Vector6};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};

/// Parameters of the embedding MLP. Hidden layers carry biases and ReLU;
/// the output layer is linear and bias-free.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpParams {
    /// Layer widths, input first: e.g. `[6, 128, 128, 24]`.
    pub layer_dims: Vec<usize>,
    /// One weight matrix per layer, `dims[l+1] × dims[l]`.
    pub weights: Vec<DMatrix<f64>>,
    /// One bias per hidden layer (`layers − 1` entries).
    pub biases: Vec<DVector<f64>>,
    /// Target Lipschitz constant enforced by spectral normalization.
    pub gamma: f64,
    /// Persistent power-iteration vectors, one per layer.
    #[serde(skip)]
    pub sn_state: Vec<DVector<f64>>,
}

impl MlpParams {
    /// Kaiming-uniform initialization with a fixed seed.
    pub fn new_seeded(layer_dims: &[usize], gamma: f64, seed: u64) -> Self {
        assert!(layer_dims.len() >= 2, "need at least one layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_dims.len() - 1 {
            let (rows, cols) = (layer_dims[l + 1], layer_dims[l]);
            let bound = (6.0 / cols as f64).sqrt();
            weights.push(DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound)));
            if l + 2 < layer_dims.len() {
                biases.push(DVector::zeros(rows));
            }
        }
        let sn_state = layer_dims[1..]
            .iter()
            .map(|&rows| {
                let v = DVector::from_fn(rows, |i, _| 1.0 + 0.01 * (i as f64 + 1.0).sin());
                v.normalize()
            })
            .collect();
        Self { layer_dims: layer_dims.to_vec(), weights, biases, gamma, sn_state }
    }

    /// Kaiming initialization overlaid with an exact linear passthrough:
    /// paired ReLU features carry the input to the first `input_dim`
    /// lifted coordinates (relu(x) − relu(−x) = x), the remaining
    /// coordinates start as random features. Keeps early segment fits
    /// well conditioned instead of nearly rank-deficient.
    pub fn new_seeded_passthrough(layer_dims: &[usize], gamma: f64, seed: u64) -> Self {
        let mut p = Self::new_seeded(layer_dims, gamma, seed);
        let d = layer_dims[0];
        let n = layer_dims.len() - 1;
        if n == 1 {
            return p;
        }
        assert!(
            layer_dims[1..n].iter().all(|&w| w >= 2 * d) && layer_dims[n] >= d,
            "hidden layers need >= {} units for the passthrough",
            2 * d
        );
        // First layer: rows 0..d carry +x, rows d..2d carry −x.
        for i in 0..d {
            for j in 0..d {
                p.weights[0][(i, j)] = if i == j { 1.0 } else { 0.0 };
                p.weights[0][(i + d, j)] = if i == j { -1.0 } else { 0.0 };
            }
        }
        // Middle layers: identity on the first 2d units.
        for l in 1..n - 1 {
            for i in 0..2 * d {
                for j in 0..p.weights[l].ncols() {
                    p.weights[l][(i, j)] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
        // Output layer: z_i = relu(x_i) − relu(−x_i) = x_i on the first d
        // coordinates; the remaining feature rows start small so they
        // cannot dominate the early segment fits.
        for i in 0..p.weights[n - 1].nrows() {
            if i < d {
                for j in 0..p.weights[n - 1].ncols() {
                    p.weights[n - 1][(i, j)] = 0.0;
                }
                p.weights[n - 1][(i, i)] = 1.0;
                p.weights[n - 1][(i, i + d)] = -1.0;
            } else {
                for j in 0..p.weights[n - 1].ncols() {
                    p.weights[n - 1][(i, j)] *= 0.1;
                }
            }
        }
        p
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Lift dimension K.
    pub fn k(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    /// Number of trainable scalars (weights + biases).
    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }
}

/// Linear reconstruction χ = C z, no bias. C is 6 × K.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    pub c: DMatrix<f64>,
}

impl Decoder {
    pub fn new_seeded(k: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (1.0 / k as f64).sqrt();
        Self { c: DMatrix::from_fn(out_dim, k, |_, _| rng.random_range(-bound..=bound)) }
    }

    /// `[I | 0]`: exact inverse of the passthrough embedding at init.
    pub fn passthrough(k: usize, out_dim: usize) -> Self {
        Self { c: DMatrix::from_fn(out_dim, k, |i, j| if i == j { 1.0 } else { 0.0 }) }
    }

    pub fn decode(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.c * z
    }
}

/// Deterministic forward pass of the embedding network.
pub fn embed(chi: &Vector6<f64>, params: &MlpParams) -> DVector<f64> {
    let mut x = DVector::from_iterator(6, chi.iter().copied());
    let last = params.n_layers() - 1;
    for (l, w) in params.weights.iter().enumerate() {
        x = w * x;
        if l < last {
            x += &params.biases[l];
            x.apply(|v| *v = v.max(0.0));
        }
    }
    x
}

/// Forward pass keeping per-layer activations for backpropagation.
/// `acts[0]` is the input; `acts[l+1]` the output of layer l.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub acts: Vec<DVector<f64>>,
}

pub fn embed_cached(chi: &DVector<f64>, params: &MlpParams) -> ForwardCache {
    let mut acts = Vec::with_capacity(params.n_layers() + 1);
    acts.push(chi.clone());
    let last = params.n_layers() - 1;
    for (l, w) in params.weights.iter().enumerate() {
        let mut x = w * acts.last().unwrap();
        if l < last {
            x += &params.biases[l];
            x.apply(|v| *v = v.max(0.0));
        }
        acts.push(x);
    }
    ForwardCache { acts }
}

/// Reverse pass through the MLP for one sample: accumulates ∂L/∂W and
/// ∂L/∂b given ∂L/∂z, and returns ∂L/∂χ.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &ForwardCache,
    dz: &DVector<f64>,
    d_weights: &mut [DMatrix<f64>],
    d_biases: &mut [DVector<f64>],
) -> DVector<f64> {
    let last = params.n_layers() - 1;
    let mut g = dz.clone();
    for l in (0..params.n_layers()).rev() {
        if l < last {
            // ReLU mask from the cached post-activation (positive parts).
            let post = &cache.acts[l + 1];
            for (gi, pi) in g.iter_mut().zip(post.iter()) {
                if *pi <= 0.0 {
                    *gi = 0.0;
                }
            }
            d_biases[l] += &g;
        }
        d_weights[l] += &g * cache.acts[l].transpose();
        g = params.weights[l].transpose() * g;
    }
    g
}

/// Largest singular value via power iteration: iterates until the
/// estimate is stationary to 1e-10 relative (at least 50 iterations),
/// starting from `u0` when given (the persistent per-layer state).
pub fn spectral_norm_with(w: &DMatrix<f64>, u0: Option<&mut DVector<f64>>) -> f64 {
    if w.amax() == 0.0 {
        return 0.0;
    }
    let mut local = DVector::from_fn(w.nrows(), |i, _| 1.0 + 0.01 * (i as f64 + 1.0).sin());
    local.normalize_mut();
    let u = match u0 {
        Some(u) => u,
        None => &mut local,
    };
    let mut sigma_prev = 0.0;
    let mut sigma = 0.0;
    for it in 0..20_000 {
        let v = (w.transpose() * &*u).normalize();
        let wu = w * v;
        sigma = wu.norm();
        if sigma == 0.0 {
            return 0.0;
        }
        *u = wu / sigma;
        if it >= 50 && (sigma - sigma_prev).abs() <= 1e-10 * sigma.max(1.0) {
            break;
        }
        sigma_prev = sigma;
    }
    sigma
}

pub fn spectral_norm(w: &DMatrix<f64>) -> f64 {
    spectral_norm_with(w, None)
}

/// Exact largest singular value (full SVD); used at export so the
/// Lipschitz certificate is sound rather than power-iteration-tight.
pub fn spectral_norm_exact(w: &DMatrix<f64>) -> f64 {
    if w.amax() == 0.0 {
        return 0.0;
    }
    w.clone().singular_values().max()
}

/// How σ(W) is estimated when normalizing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnMode {
    /// One persistent power-iteration step per layer (training).
    TrainStep,
    /// Exact singular values (export).
    Export,
}

#[derive(Clone, Debug, Default)]
pub struct SnReport {
    /// Layers skipped because their weight matrix was identically zero.
    pub zero_layers: Vec<usize>,
}

/// Rescale every layer in place so each has spectral norm γ^{1/(L+1)};
/// the product over layers is then γ (Lipschitz bound of the network).
pub fn apply_spectral_normalization(params: &mut MlpParams, mode: SnMode) -> SnReport {
    let n = params.n_layers();
    let target = params.gamma.powf(1.0 / n as f64);
    let mut report = SnReport::default();
    for l in 0..n {
        let sigma = match mode {
            SnMode::Export => spectral_norm_exact(&params.weights[l]),
            SnMode::TrainStep => {
                if params.weights[l].amax() == 0.0 {
                    0.0
                } else {
                    let v = (params.weights[l].transpose() * &params.sn_state[l]).normalize();
                    let wu = &params.weights[l] * v;
                    let s = wu.norm();
                    if s > 0.0 {
                        params.sn_state[l] = wu / s;
                    }
                    s
                }
            }
        };
        if sigma == 0.0 {
            report.zero_layers.push(l);
            continue;
        }
        params.weights[l] *= target / sigma;
    }
    report
}

/// One-sided variant used inside the training loop: shrink a layer only
/// when it exceeds the per-layer target, never inflate. The Lipschitz
/// bound ∏σ ≤ γ holds either way, and inflating weights around fixed
/// biases would warp the function every step.
pub fn cap_spectral_norm(params: &mut MlpParams, mode: SnMode) -> SnReport {
    let n = params.n_layers();
    let target = params.gamma.powf(1.0 / n as f64);
    let mut report = SnReport::default();
    for l in 0..n {
        let sigma = match mode {
            SnMode::Export => spectral_norm_exact(&params.weights[l]),
            SnMode::TrainStep => {
                if params.weights[l].amax() == 0.0 {
                    0.0
                } else {
                    let v = (params.weights[l].transpose() * &params.sn_state[l]).normalize();
                    let wu = &params.weights[l] * v;
                    let s = wu.norm();
                    if s > 0.0 {
                        params.sn_state[l] = wu / s;
                    }
                    s
                }
            }
        };
        if sigma == 0.0 {
            report.zero_layers.push(l);
            continue;
        }
        if sigma > target {
            params.weights[l] *= target / sigma;
        }
    }
    report
}

/// Certified Lipschitz bound: the product of exact per-layer spectral
/// norms (ReLU is 1-Lipschitz).
pub fn lipschitz_certificate(params: &MlpParams) -> f64 {
    params.weights.iter().map(spectral_norm_exact).product()
}
