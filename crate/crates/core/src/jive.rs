//! JIVE point estimate, its cross-fit variance, and the Wald test.

use serde::Serialize;

use crate::confset::ConfidenceSet;
use crate::dataio::Dataset;
use crate::dist::{chi2_quantile, normal_two_sided};
use crate::error::{Error, Result};
use crate::forms::{check_hat_m, JackknifeForms};
use crate::kernels::{PairKernel, ProjectionCache};
use crate::scalar::{dot, hadamard, Real};

/// Relative size below which the JIVE denominator counts as zero. The scale
/// is `|X'PX| + Σ_i P_ii X_i²`, which bounds the denominator.
pub const DENOMINATOR_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JiveResult<T> {
    pub beta_hat: T,
    /// Cross-fit variance `V̂`; may be non-positive in finite samples.
    pub var_hat: T,
    /// `√V̂`, NaN when `V̂ ≤ 0`.
    pub se: T,
    pub numerator: T,
    pub denominator: T,
}

impl<T: Real> JiveResult<T> {
    pub fn variance_ok(&self) -> bool {
        self.var_hat > T::zero() && self.var_hat.is_finite()
    }

    fn positive_variance(&self) -> Result<T> {
        if self.variance_ok() {
            Ok(self.var_hat)
        } else {
            Err(Error::NonPositiveVariance(self.var_hat.to_f64_lossy()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldResult<T> {
    pub beta0: T,
    pub statistic: T,
    pub critical_value: f64,
    pub alpha: f64,
    pub reject: bool,
}

fn check_denominator<T: Real>(den: T, diag: T, x_p_x: T) -> Result<()> {
    let scale = x_p_x.abs() + diag.abs();
    if !(den.abs() > T::lit(DENOMINATOR_TOLERANCE) * scale) {
        return Err(Error::NearSingularDenominator {
            denominator: den.to_f64_lossy(),
        });
    }
    Ok(())
}

fn assemble<T: Real>(numerator: T, denominator: T, var_num: T) -> JiveResult<T> {
    let var_hat = var_num / (denominator * denominator);
    JiveResult {
        beta_hat: numerator / denominator,
        var_hat,
        se: if var_hat > T::zero() { var_hat.sqrt() } else { T::nan() },
        numerator,
        denominator,
    }
}

/// `β̂ = Σ_{i≠j} P_ij Y_i X_j / Σ_{i≠j} P_ij X_i X_j` with
/// `V̂ = [Σ_i (Σ_{j≠i} P_ij X_j)² ê_i (Mê)_i / M_ii + Σ_{i≠j} P̃²_ij (MX)_i ê_i (MX)_j ê_j] / den²`.
pub fn jive_estimate<T: Real>(d: &Dataset<T>, c: &ProjectionCache<T>) -> Result<JiveResult<T>> {
    check_hat_m(c)?;
    let (y, x) = (d.y(), d.x());
    let w = c.offdiag_apply(x);
    let numerator = dot(y, &w);
    let denominator = dot(x, &w);
    let diag: T = (0..x.len()).map(|i| c.hat_p()[i] * x[i] * x[i]).sum();
    check_denominator(denominator, diag, denominator + diag)?;
    let beta = numerator / denominator;

    let e: Vec<T> = y.iter().zip(x).map(|(&y, &x)| y - beta * x).collect();
    let me = c.annihilate(&e);
    let first: T = (0..e.len()).map(|i| w[i] * w[i] * e[i] * me[i] / c.hat_m()[i]).sum();
    let b = hadamard(&c.annihilate(x), &e);
    let second = c.qform_sq_offdiag(&b, &b, PairKernel::PtildeSq);
    Ok(assemble(numerator, denominator, first + second))
}

/// Same estimate from precomputed forms.
pub fn jive_from_forms<T: Real>(f: &JackknifeForms<T>) -> Result<JiveResult<T>> {
    let (num, den, diag) = (f.jive_numerator(), f.jive_denominator(), f.jive_denominator_diagonal());
    check_denominator(den, diag, den + diag)?;
    Ok(assemble(num, den, f.jive_variance_numerator(num / den)))
}

/// `Wald(β₀) = (β̂ − β₀)² / V̂`, rejecting at `χ²_{1,1−α}`.
pub fn wald_test<T: Real>(r: &JiveResult<T>, beta0: T, alpha: f64) -> Result<WaldResult<T>> {
    let v = r.positive_variance()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let dev = r.beta_hat - beta0;
    let statistic = dev * dev / v;
    let critical_value = chi2_quantile(1.0 - alpha, 1.0);
    Ok(WaldResult {
        beta0,
        statistic,
        critical_value,
        alpha,
        reject: statistic.to_f64_lossy() >= critical_value,
    })
}

/// `β̂ ± z_{1−α/2} se`
pub fn jive_ci<T: Real>(r: &JiveResult<T>, alpha: f64) -> Result<ConfidenceSet> {
    let v = r.positive_variance()?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let half = normal_two_sided(alpha) * v.sqrt().to_f64_lossy();
    let b = r.beta_hat.to_f64_lossy();
    Ok(ConfidenceSet::interval(b - half, b + half, 1.0 - alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(beta_hat: f64, se: f64) -> JiveResult<f64> {
        JiveResult {
            beta_hat,
            var_hat: se * se,
            se,
            numerator: beta_hat,
            denominator: 1.0,
        }
    }

    #[test]
    fn ci_arithmetic() {
        let ci = jive_ci(&fake(0.5, 0.1), 0.05).unwrap();
        let (lo, hi) = ci.intervals()[0];
        assert!((lo - 0.304).abs() < 5e-4 && (hi - 0.696).abs() < 5e-4);
        let pt = jive_ci(&fake(0.5, 0.1), 1.0).unwrap();
        assert_eq!(pt.intervals(), &[(0.5, 0.5)]);
    }

    #[test]
    fn wald_identities() {
        let r = fake(0.3, 0.2);
        let w = wald_test(&r, 0.3, 0.05).unwrap();
        assert_eq!(w.statistic, 0.0);
        assert!(!w.reject);
        let w = wald_test(&r, -0.1, 0.05).unwrap();
        assert!((w.statistic - ((0.3f64 + 0.1) / 0.2).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_variance_is_reported() {
        let mut r = fake(0.3, 0.2);
        r.var_hat = -1.0;
        assert!(matches!(wald_test(&r, 0.0, 0.05), Err(Error::NonPositiveVariance(_))));
        assert!(matches!(jive_ci(&r, 0.05), Err(Error::NonPositiveVariance(_))));
    }
}
