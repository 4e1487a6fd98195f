//! The global prediction-error bound: build the certificate constant
//!
//! ```text
//! c = (‖CA‖ L_Φ + 1) α_χ + ‖CB‖ α_ζ + max_χ̄ ‖χ̄ − CΦ(χ̄)‖
//! ```
//!
//! and verify empirically that the n-step lifted prediction error stays
//! below c · Σ_{i<n} ‖Aⁱ‖ on held-out data. All arithmetic runs in the
//! normalized space the model was trained in.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embed::{embed, lipschitz_certificate, spectral_norm_exact};
use crate::labeling::LabeledSample;
use crate::lls::{lls_step, LiftedModel};

/// Everything needed to evaluate the bound, plus provenance scalars.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundCertificate {
    /// Max one-step change of the normalized label χ over the data.
    pub alpha_chi: f64,
    /// Max one-step change of the normalized input ζ over the data.
    pub alpha_zeta: f64,
    /// Certified Lipschitz bound of the embedding.
    pub l_phi: f64,
    pub c_norm: f64,
    pub ca_norm: f64,
    pub cb_norm: f64,
    /// Largest reconstruction residual over the evaluation set.
    pub recon_sup: f64,
    /// The local-error bound c.
    pub c: f64,
    pub spectral_radius: f64,
    pub stable: bool,
    /// Σ_{i<n} ‖Aⁱ‖ for n = 1..=n_max.
    pub partial_sums: Vec<f64>,
}

impl BoundCertificate {
    /// Bound on ‖E_n‖ for an n-step prediction.
    pub fn bound(&self, n: usize) -> f64 {
        assert!(n >= 1 && n <= self.partial_sums.len(), "n = {n} out of range");
        self.c * self.partial_sums[n - 1]
    }
}

/// Maxima of consecutive-sample norm differences, in normalized space.
pub fn estimate_alphas(samples: &[LabeledSample], model: &LiftedModel) -> (f64, f64) {
    let mut alpha_chi: f64 = 0.0;
    let mut alpha_zeta: f64 = 0.0;
    for pair in samples.windows(2) {
        let c0 = model.norm.normalize_chi(&pair[0].chi.to_vector());
        let c1 = model.norm.normalize_chi(&pair[1].chi.to_vector());
        let z0 = model.norm.normalize_zeta(&pair[0].zeta);
        let z1 = model.norm.normalize_zeta(&pair[1].zeta);
        alpha_chi = alpha_chi.max((c1 - c0).norm());
        alpha_zeta = alpha_zeta.max((z1 - z0).norm());
    }
    (alpha_chi, alpha_zeta)
}

/// Assemble the certificate from the exported model and an evaluation
/// set (used for the α constants and the reconstruction supremum).
pub fn build_certificate(
    model: &LiftedModel,
    eval_set: &[LabeledSample],
    n_max: usize,
) -> BoundCertificate {
    let (alpha_chi, alpha_zeta) = estimate_alphas(eval_set, model);
    let l_phi = lipschitz_certificate(&model.mlp);
    let c_mat = &model.decoder.c;
    let ca = c_mat * &model.a;
    let cb = c_mat * &model.b;
    let ca_norm = spectral_norm_exact(&ca);
    let cb_norm = spectral_norm_exact(&cb);
    let c_norm = spectral_norm_exact(c_mat);

    let mut recon_sup: f64 = 0.0;
    for s in eval_set {
        let chi_n = model.norm.normalize_chi(&s.chi.to_vector());
        let z = embed(&chi_n, &model.mlp);
        let recon = model.decoder.decode(&z);
        let chi_dv = DVector::from_iterator(6, chi_n.iter().copied());
        recon_sup = recon_sup.max((recon - chi_dv).norm());
    }

    let c = (ca_norm * l_phi + 1.0) * alpha_chi + cb_norm * alpha_zeta + recon_sup;

    // Partial sums of ‖Aⁱ‖ (the finite-dimensional operator powers).
    let k = model.k();
    let mut partial_sums = Vec::with_capacity(n_max);
    let mut a_pow = DMatrix::identity(k, k);
    let mut acc = 0.0;
    for _ in 0..n_max {
        acc += spectral_norm_exact(&a_pow);
        partial_sums.push(acc);
        a_pow = &a_pow * &model.a;
    }

    let (rho, stable) = LiftedModel::stability(&model.a);
    BoundCertificate {
        alpha_chi,
        alpha_zeta,
        l_phi,
        c_norm,
        ca_norm,
        cb_norm,
        recon_sup,
        c,
        spectral_radius: rho,
        stable,
        partial_sums,
    }
}

/// One row of the verification report.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VerifyRow {
    pub n: usize,
    pub starts: usize,
    pub violations: usize,
    pub max_ratio: f64,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
}

impl VerifyReport {
    pub fn total_violations(&self) -> usize {
        self.rows.iter().map(|r| r.violations).sum()
    }

    pub fn max_ratio(&self) -> f64 {
        self.rows.iter().map(|r| r.max_ratio).fold(0.0, f64::max)
    }
}

/// Check ‖E_n‖ = ‖Φ(χ(t₀+n t_s)) − n-step rollout‖ ≤ c · Σ_{i<n} ‖Aⁱ‖
/// from every admissible start index of a labeled log.
pub fn verify_global_bound(
    model: &LiftedModel,
    cert: &BoundCertificate,
    samples: &[LabeledSample],
    n_list: &[usize],
) -> VerifyReport {
    let mut report = VerifyReport::default();
    // Lift and normalize once.
    let zs: Vec<DVector<f64>> = samples
        .iter()
        .map(|s| embed(&model.norm.normalize_chi(&s.chi.to_vector()), &model.mlp))
        .collect();
    let zetas: Vec<DVector<f64>> = samples
        .iter()
        .map(|s| {
            DVector::from_iterator(6, model.norm.normalize_zeta(&s.zeta).iter().copied())
        })
        .collect();

    for &n in n_list {
        if n == 0 || n > cert.partial_sums.len() || samples.len() <= n {
            continue;
        }
        let bound = cert.bound(n);
        let mut violations = 0usize;
        let mut max_ratio: f64 = 0.0;
        let mut starts = 0usize;
        for t0 in 0..samples.len() - n {
            let mut z = zs[t0].clone();
            for i in 0..n {
                z = lls_step(&model.a, &model.b, &z, &zetas[t0 + i]);
            }
            let err = (&zs[t0 + n] - z).norm();
            let ratio = err / bound;
            max_ratio = max_ratio.max(ratio);
            if err > bound {
                violations += 1;
            }
            starts += 1;
        }
        report.rows.push(VerifyRow { n, starts, violations, max_ratio });
    }
    report
}
