//! Jackknife Anderson-Rubin test with cross-fit or naive variance, and its
//! inversion into a confidence set.

use serde::Serialize;

use crate::confset::{ConfidenceSet, Grid, GridMeta};
use crate::dataio::Dataset;
use crate::dist::norm_quantile;
use crate::error::{Error, Result};
use crate::forms::{check_hat_m, JackknifeForms};
use crate::kernels::ProjectionCache;
use crate::scalar::{dot, hadamard, Real};

/// Variance estimator for the AR statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    Crossfit,
    Naive,
}

impl std::str::FromStr for VarianceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossfit" => Ok(Self::Crossfit),
            "naive" => Ok(Self::Naive),
            other => Err(Error::InvalidArgument(format!("unknown variance method {other:?}"))),
        }
    }
}

/// Cross-fit values at or below this multiple of the naive value are
/// replaced by the naive value.
pub const CROSSFIT_RELATIVE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArVariance<T> {
    /// Estimator requested by the caller.
    pub method: VarianceMethod,
    /// Value actually used (the naive value after a fallback).
    pub value: T,
    /// The requested estimate was at or below the floor.
    pub degenerate: bool,
    /// The naive value was substituted for a degenerate cross-fit value.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArResult<T> {
    pub beta0: T,
    pub statistic: T,
    pub numerator: T,
    pub variance: ArVariance<T>,
    pub critical_value: f64,
    pub alpha: f64,
    pub reject: bool,
}

/// `e(β₀) = Y − β₀ X`
pub fn implied_error<T: Real>(d: &Dataset<T>, beta0: T) -> Vec<T> {
    d.y().iter().zip(d.x()).map(|(&y, &x)| y - beta0 * x).collect()
}

/// `Σ_{i≠j} P_ij e_i e_j`
pub fn ar_numerator<T: Real>(c: &ProjectionCache<T>, e: &[T]) -> T {
    c.qform_offdiag(e, e)
}

/// Cross-fit `Φ̂ = (2/K) Σ_{i≠j} P̃²_ij [e_i (Me)_i][e_j (Me)_j]`.
pub fn crossfit_variance<T: Real>(c: &ProjectionCache<T>, e: &[T]) -> Result<ArVariance<T>> {
    check_hat_m(c)?;
    let a = hadamard(e, &c.annihilate(e));
    let w = c.sq_apply(&[&a], false, true).ptilde.remove(0);
    let value = T::lit(2.0) / T::lit(c.k() as f64) * dot(&a, &w);
    Ok(ArVariance {
        method: VarianceMethod::Crossfit,
        value,
        degenerate: value <= T::floor_abs(),
        fallback: false,
    })
}

/// Naive `Φ̂₁ = (2/K) Σ_{i≠j} P²_ij e_i² e_j²`, never negative.
pub fn naive_variance<T: Real>(c: &ProjectionCache<T>, e: &[T]) -> ArVariance<T> {
    let e2 = hadamard(e, e);
    let w = c.sq_apply(&[&e2], true, false).psq.remove(0);
    let value = (T::lit(2.0) / T::lit(c.k() as f64) * dot(&e2, &w)).max(T::zero());
    ArVariance {
        method: VarianceMethod::Naive,
        value,
        degenerate: value <= T::floor_abs(),
        fallback: false,
    }
}

/// Applies the variance floor: a cross-fit value at or below
/// `CROSSFIT_RELATIVE_FLOOR` times the naive value is replaced by the naive
/// one, and an error is returned only when both are at or below the
/// absolute floor.
pub fn resolve_variance<T: Real>(
    method: VarianceMethod,
    crossfit: impl FnOnce() -> T,
    naive: impl FnOnce() -> T,
) -> Result<ArVariance<T>> {
    let floor = T::floor_abs();
    match method {
        VarianceMethod::Naive => {
            let n = naive();
            if n <= floor {
                return Err(Error::DegenerateVariance {
                    crossfit: f64::NAN,
                    naive: n.to_f64_lossy(),
                });
            }
            Ok(ArVariance {
                method,
                value: n,
                degenerate: false,
                fallback: false,
            })
        }
        VarianceMethod::Crossfit => {
            let cf = crossfit();
            let n = naive();
            if cf > floor && cf > T::lit(CROSSFIT_RELATIVE_FLOOR) * n {
                return Ok(ArVariance {
                    method,
                    value: cf,
                    degenerate: false,
                    fallback: false,
                });
            }
            if n <= floor {
                return Err(Error::DegenerateVariance {
                    crossfit: cf.to_f64_lossy(),
                    naive: n.to_f64_lossy(),
                });
            }
            Ok(ArVariance {
                method,
                value: n,
                degenerate: true,
                fallback: true,
            })
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// One-sided jackknife AR test: reject when `AR(β₀) ≥ z_{1−α}`.
pub fn ar_test<T: Real>(
    d: &Dataset<T>,
    c: &ProjectionCache<T>,
    beta0: T,
    alpha: f64,
    method: VarianceMethod,
) -> Result<ArResult<T>> {
    check_alpha(alpha)?;
    let e = implied_error(d, beta0);
    let numerator = ar_numerator(c, &e);
    let crossfit = match method {
        VarianceMethod::Crossfit => Some(crossfit_variance(c, &e)?.value),
        VarianceMethod::Naive => None,
    };
    let variance = resolve_variance(method, || crossfit.unwrap_or(T::zero()), || naive_variance(c, &e).value)?;
    Ok(finish(beta0, numerator, variance, c.k(), alpha))
}

fn finish<T: Real>(beta0: T, numerator: T, variance: ArVariance<T>, k: usize, alpha: f64) -> ArResult<T> {
    let statistic = numerator / (T::lit(k as f64).sqrt() * variance.value.sqrt());
    let critical_value = norm_quantile(1.0 - alpha);
    ArResult {
        beta0,
        statistic,
        numerator,
        variance,
        critical_value,
        alpha,
        reject: statistic.to_f64_lossy() >= critical_value,
    }
}

/// The AR statistic as a function of β, evaluated from precomputed forms.
#[derive(Debug, Clone)]
pub struct ArCurve<'a, T> {
    forms: &'a JackknifeForms<T>,
    method: VarianceMethod,
    k: usize,
}

impl<'a, T: Real> ArCurve<'a, T> {
    pub fn new(forms: &'a JackknifeForms<T>, method: VarianceMethod, k: usize) -> Self {
        Self { forms, method, k }
    }

    pub fn test(&self, beta0: T, alpha: f64) -> Result<ArResult<T>> {
        check_alpha(alpha)?;
        let variance = resolve_variance(
            self.method,
            || self.forms.crossfit_phi(beta0),
            || self.forms.naive_phi(beta0).max(T::zero()),
        )?;
        Ok(finish(beta0, self.forms.ar_numerator(beta0), variance, self.k, alpha))
    }

    /// Tests against an explicit critical value instead of `z_{1−α}`.
    pub fn test_at(&self, beta0: T, critical_value: f64, alpha: f64) -> Result<ArResult<T>> {
        let mut r = self.test(beta0, alpha)?;
        r.critical_value = critical_value;
        r.reject = r.statistic.to_f64_lossy() >= critical_value;
        Ok(r)
    }

    /// A point whose variance is degenerate cannot be rejected.
    fn accepts(&self, beta: f64, critical_value: f64) -> bool {
        let beta = T::lit(beta);
        resolve_variance(
            self.method,
            || self.forms.crossfit_phi(beta),
            || self.forms.naive_phi(beta).max(T::zero()),
        )
        .map_or(true, |v| {
            let stat = self.forms.ar_numerator(beta) / (T::lit(self.k as f64).sqrt() * v.value.sqrt());
            stat.to_f64_lossy() < critical_value
        })
    }
}

/// Default inversion grid: `β̂_JIVE ± 50 se` when the JIVE variance is
/// usable, `±10⁴` otherwise, with 2001 points.
pub fn default_grid<T: Real>(forms: &JackknifeForms<T>) -> Grid {
    const POINTS: usize = 2001;
    let den = forms.jive_denominator();
    if den != T::zero() {
        let b = forms.jive_numerator() / den;
        let v = forms.jive_variance_numerator(b) / (den * den);
        let (b, v) = (b.to_f64_lossy(), v.to_f64_lossy());
        if v > 0.0 && v.is_finite() && b.is_finite() {
            let half = 50.0 * v.sqrt();
            return Grid::new(b - half, b + half, POINTS);
        }
    }
    Grid::new(-1e4, 1e4, POINTS)
}

fn check_grid(grid: &Grid) -> Result<()> {
    if !(grid.lo < grid.hi) || !grid.lo.is_finite() || !grid.hi.is_finite() {
        return Err(Error::InvalidArgument(format!("grid needs lo < hi, got [{}, {}]", grid.lo, grid.hi)));
    }
    if grid.points < 100 {
        return Err(Error::InvalidArgument(format!("grid needs at least 100 points, got {}", grid.points)));
    }
    Ok(())
}

/// Inverts the AR test over a grid, refining each boundary by bisection.
pub fn invert_ar<T: Real>(
    d: &Dataset<T>,
    c: &ProjectionCache<T>,
    alpha: f64,
    method: VarianceMethod,
    grid: Option<Grid>,
) -> Result<ConfidenceSet> {
    let forms = JackknifeForms::new(c, d.y(), d.x())?;
    let grid = grid.unwrap_or_else(|| default_grid(&forms));
    invert_curve(&ArCurve::new(&forms, method, c.k()), alpha, grid)
}

pub fn invert_curve<T: Real>(curve: &ArCurve<'_, T>, alpha: f64, grid: Grid) -> Result<ConfidenceSet> {
    check_alpha(alpha)?;
    invert_curve_at(curve, norm_quantile(1.0 - alpha), 1.0 - alpha, grid)
}

/// Inverts against an explicit critical value; `level` is recorded on the set.
pub fn invert_curve_at<T: Real>(curve: &ArCurve<'_, T>, critical_value: f64, level: f64, grid: Grid) -> Result<ConfidenceSet> {
    check_grid(&grid)?;
    let n = grid.points;
    let accept: Vec<bool> = (0..n).map(|i| curve.accepts(grid.value(i), critical_value)).collect();
    let flips = accept.windows(2).filter(|w| w[0] != w[1]).count();
    if flips > n / 4 {
        return Err(Error::GridTooCoarse { flips, limit: n / 4 });
    }
    let tol = 1e-8 * (grid.hi - grid.lo);
    let boundary = |i: usize| {
        // accept[i] != accept[i + 1]
        let (mut a, mut b) = (grid.value(i), grid.value(i + 1));
        let left = accept[i];
        for _ in 0..200 {
            if b - a <= tol {
                break;
            }
            let mid = 0.5 * (a + b);
            if curve.accepts(mid, critical_value) == left {
                a = mid;
            } else {
                b = mid;
            }
        }
        if left {
            a
        } else {
            b
        }
    };

    let mut intervals = Vec::new();
    let mut open: Option<f64> = accept[0].then_some(f64::NEG_INFINITY);
    for i in 0..n - 1 {
        if accept[i] == accept[i + 1] {
            continue;
        }
        let x = boundary(i);
        match open.take() {
            Some(lo) => intervals.push((lo, x)),
            None => open = Some(x),
        }
    }
    if let Some(lo) = open {
        intervals.push((lo, f64::INFINITY));
    }
    Ok(ConfidenceSet::new(
        intervals,
        level,
        Some(GridMeta {
            grid,
            step: grid.step(),
            tolerance: tol,
        }),
    ))
}

/// `c = (2/K) Σ_{i≠j} P²_ij Π_i² Π_j²`
pub fn naive_shift_constant<T: Real>(c: &ProjectionCache<T>, pi: &[T]) -> T {
    let p2 = hadamard(pi, pi);
    T::lit(2.0) / T::lit(c.k() as f64) * c.qform_sq_offdiag(&p2, &p2, crate::kernels::PairKernel::Psq)
}
