//! Population identification strength and variance components of a design.

use serde::Serialize;

use crate::artest::naive_shift_constant;
use crate::dist::{norm_cdf, norm_quantile};
use crate::kernels::ProjectionCache;
use crate::scalar::{dot, hadamard};

use super::design::TrueMoments;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StrengthReport {
    /// `μ² = Σ_{i≠j} P_ij Π_i Π_j`
    pub mu2: f64,
    pub k: usize,
    pub mu2_over_sqrt_k: f64,
    /// `Υ = (2/K) Σ P² ς_i² ς_j² + (4/K) Σ ς_i² w_i²`
    pub upsilon: f64,
    /// `Ψ = (1/K) Σ P² γ_i γ_j + (1/K) Σ P² σ_i² ς_j² + (1/K) Σ σ_i² w_i²`
    pub psi: f64,
    /// `τ = (2/K) Σ P² ς_i² γ_j + (2/K) Σ γ_i w_i²`
    pub tau: f64,
    /// `ϱ = τ / (√Ψ √Υ)`
    pub rho: f64,
    /// `S = μ² / (√K √Υ)`
    pub s: f64,
    /// `Φ` of the AR numerator under the null.
    pub phi: f64,
    /// `c = (2/K) Σ P² Π_i² Π_j²`
    pub naive_shift_c: f64,
    pub delta_max: f64,
    /// `μ²` is negative, which only happens in pathological designs.
    pub negative_mu2: bool,
}

/// `w_i = Σ_{j≠i} P_ij Π_j`
fn loo_fit(c: &ProjectionCache<f64>, pi: &[f64]) -> Vec<f64> {
    c.offdiag_apply(pi)
}

pub fn strength(c: &ProjectionCache<f64>, m: &TrueMoments) -> StrengthReport {
    let k = c.k() as f64;
    let w = loo_fit(c, &m.pi);
    let mu2 = dot(&m.pi, &w);
    let w2 = hadamard(&w, &w);

    let p = c.sq_apply(&[&m.varsigma2, &m.gamma], true, false).psq;
    let (p_vs, p_g) = (&p[0], &p[1]);
    let upsilon = 2.0 / k * dot(&m.varsigma2, p_vs) + 4.0 / k * dot(&m.varsigma2, &w2);
    let psi = 1.0 / k * dot(&m.gamma, p_g) + 1.0 / k * dot(&m.sigma2, p_vs) + 1.0 / k * dot(&m.sigma2, &w2);
    let tau = 2.0 / k * dot(&m.varsigma2, p_g) + 2.0 / k * dot(&m.gamma, &w2);
    let rho = tau / (psi.sqrt() * upsilon.sqrt());

    StrengthReport {
        mu2,
        k: c.k(),
        mu2_over_sqrt_k: mu2 / k.sqrt(),
        upsilon,
        psi,
        tau,
        rho,
        s: mu2 / (k.sqrt() * upsilon.sqrt()),
        phi: phi_at(c, m, 0.0),
        naive_shift_c: naive_shift_constant(c, &m.pi),
        delta_max: c.delta_max(),
        negative_mu2: mu2 < 0.0,
    }
}

/// `Φ(Δ) = (2/K) Σ_{i≠j} P²_ij Var(η_i) Var(η_j)` with `η = e + Δv`.
pub fn phi_at(c: &ProjectionCache<f64>, m: &TrueMoments, delta: f64) -> f64 {
    let var_eta: Vec<f64> = (0..m.pi.len())
        .map(|i| m.sigma2[i] + 2.0 * delta * m.gamma[i] + delta * delta * m.varsigma2[i])
        .collect();
    2.0 / c.k() as f64 * c.qform_sq_offdiag(&var_eta, &var_eta, crate::kernels::PairKernel::Psq)
}

/// Local power `1 − F(z_{1−α} − Δ²μ²/√(KΦ(Δ)))`.
pub fn local_power(mu2: f64, k: usize, phi: f64, delta: f64, alpha: f64) -> f64 {
    let shift = delta * delta * mu2 / (k as f64 * phi).sqrt();
    1.0 - norm_cdf(norm_quantile(1.0 - alpha) - shift)
}
