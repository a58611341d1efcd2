//! Weak-identification pre-test, the limit experiment behind the worst-case
//! Wald rejection rate, the calibrated two-step configurations, and the
//! two-step test and confidence set.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::artest::{invert_curve_at, resolve_variance, ArCurve, ArResult, VarianceMethod};
use crate::confset::{ConfidenceSet, Grid};
use crate::dataio::Dataset;
use crate::dist::{chi2_quantile, norm_quantile};
use crate::error::{Error, Result};
use crate::forms::JackknifeForms;
use crate::jive::{jive_from_forms, JiveResult, WaldResult};
use crate::kernels::ProjectionCache;
use crate::rng;
use crate::scalar::Real;

/// Default pre-test cutoff for the 15% size guarantee.
pub const DEFAULT_CUTOFF: f64 = 4.14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PretestResult<T> {
    pub f_tilde: T,
    pub upsilon_hat: T,
    /// The naive `Υ̂₁` replaced a degenerate cross-fit `Υ̂`.
    pub fallback: bool,
    pub cutoff: f64,
    pub strong: bool,
}

/// `F̃ = Σ_{i≠j} P_ij X_i X_j / (√K √Υ̂)`.
pub fn pretest_f<T: Real>(d: &Dataset<T>, c: &ProjectionCache<T>, cutoff: f64) -> Result<PretestResult<T>> {
    let f = JackknifeForms::new(c, d.y(), d.x())?;
    pretest_from_forms(&f, c.k(), cutoff)
}

pub fn pretest_from_forms<T: Real>(f: &JackknifeForms<T>, k: usize, cutoff: f64) -> Result<PretestResult<T>> {
    let v = resolve_variance(VarianceMethod::Crossfit, || f.upsilon(), || f.upsilon_naive().max(T::zero()))?;
    let f_tilde = f.jive_denominator() / (T::lit(k as f64).sqrt() * v.value.sqrt());
    Ok(PretestResult {
        f_tilde,
        upsilon_hat: v.value,
        fallback: v.fallback,
        cutoff,
        strong: f_tilde.to_f64_lossy() > cutoff,
    })
}

/// `cutoff = S* + z_{1−level}`: the limit of `F̃` is `N(S, 1)`, so this is a
/// one-sided level-`level` test of `S ≤ S*`.
pub fn calibrate_cutoff(s_star: f64, pretest_level: f64) -> f64 {
    s_star + norm_quantile(1.0 - pretest_level)
}

/// The normal pair `(ξ, ν)` of the limit experiment, `ν` centered at `S`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitExperiment {
    pub s: f64,
    pub rho: f64,
    pub draws: usize,
    pub seed: u64,
}

const CHUNK: usize = 1 << 16;

/// Common standard normal draws `(z₁, z₂)`, reused across `S` and `ϱ` so
/// that curves in either argument are smooth.
#[derive(Debug, Clone)]
pub struct LimitDraws {
    z1: Vec<f64>,
    z2: Vec<f64>,
}

impl LimitDraws {
    pub fn new(draws: usize, seed: u64) -> Self {
        let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..draws.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let len = CHUNK.min(draws - c * CHUNK);
                let mut r = rng::stream(seed, "limit-experiment", c as u64);
                let mut a = Vec::with_capacity(len);
                let mut b = Vec::with_capacity(len);
                for _ in 0..len {
                    a.push(r.sample(StandardNormal));
                    b.push(r.sample(StandardNormal));
                }
                (a, b)
            })
            .collect();
        let mut z1 = Vec::with_capacity(draws);
        let mut z2 = Vec::with_capacity(draws);
        for (a, b) in chunks {
            z1.extend(a);
            z2.extend(b);
        }
        Self { z1, z2 }
    }

    pub fn len(&self) -> usize {
        self.z1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z1.is_empty()
    }

    /// `P{ ξ² / (1 − 2ϱξ/ν + ξ²/ν²) ≥ crit }` with `ξ = z₁`,
    /// `ν = S + ϱ z₁ + √(1−ϱ²) z₂`.
    pub fn rejection(&self, s: f64, rho: f64, crit: f64) -> f64 {
        let q = (1.0 - rho * rho).max(0.0).sqrt();
        let hits: usize = self
            .z1
            .par_chunks(CHUNK)
            .zip(self.z2.par_chunks(CHUNK))
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .filter(|&(&xi, &e)| {
                        let nu = s + rho * xi + q * e;
                        let r = xi / nu;
                        let den = 1.0 - 2.0 * rho * r + r * r;
                        xi * xi >= crit * den
                    })
                    .count()
            })
            .sum();
        hits as f64 / self.len() as f64
    }

    /// Worst-case rejection of the level-`alpha` Wald test, taken at `ϱ = 1`.
    pub fn rmax(&self, s: f64, alpha: f64) -> f64 {
        self.rejection(s, 1.0, chi2_quantile(1.0 - alpha, 1.0))
    }
}

/// Monte Carlo `R_max_α(S)` at `ϱ = 1`.
pub fn simulate_rmax(s: f64, alpha: f64, draws: usize, seed: u64) -> f64 {
    LimitDraws::new(draws, seed).rmax(s, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoScan {
    pub s: f64,
    pub alpha: f64,
    pub draws: usize,
    /// `(ϱ, rejection)` on `ϱ = −1, −0.9, …, 1`
    pub points: Vec<(f64, f64)>,
    pub argmax_rho: f64,
    pub max: f64,
    /// Two Monte Carlo standard errors at the maximum.
    pub tolerance: f64,
    /// `|ϱ| = 1` attains the maximum within `tolerance`.
    pub max_at_unit_rho: bool,
}

/// Scans `ϱ` to check that the rejection rate peaks at `|ϱ| = 1`. The
/// problem is symmetric under `(ξ, ϱ) → (−ξ, −ϱ)`, so `ϱ = ±1` tie.
pub fn rmax_rho_scan(s: f64, alpha: f64, draws: usize, seed: u64) -> RhoScan {
    let d = LimitDraws::new(draws, seed);
    let crit = chi2_quantile(1.0 - alpha, 1.0);
    let points: Vec<(f64, f64)> = (0..=20)
        .map(|i| {
            let rho = -1.0 + 0.1 * i as f64;
            (rho, d.rejection(s, rho, crit))
        })
        .collect();
    let (argmax_rho, max) = points.iter().copied().fold((0.0, -1.0), |a, p| if p.1 > a.1 { p } else { a });
    let at_one = points[20].1.max(points[0].1);
    let tolerance = 2.0 * (max * (1.0 - max) / draws as f64).sqrt();
    RhoScan {
        s,
        alpha,
        draws,
        points,
        argmax_rho,
        max,
        tolerance,
        max_at_unit_rho: max - at_one <= tolerance,
    }
}

/// One calibrated two-step configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoStepConfig {
    pub cutoff: f64,
    pub wald_critical: f64,
    pub wald_level: f64,
    pub ar_critical: f64,
    pub ar_level: f64,
    /// Declared overall size.
    pub overall: f64,
}

/// Calibrated configurations with declared overall sizes of 5% and 10%.
pub const TABLE2: [TwoStepConfig; 5] = [
    TwoStepConfig {
        cutoff: 7.15,
        wald_critical: 5.41,
        wald_level: 0.02,
        ar_critical: 2.32,
        ar_level: 0.01,
        overall: 0.05,
    },
    TwoStepConfig {
        cutoff: 9.98,
        wald_critical: 5.41,
        wald_level: 0.02,
        ar_critical: 2.05,
        ar_level: 0.02,
        overall: 0.05,
    },
    TwoStepConfig {
        cutoff: 12.86,
        wald_critical: 5.41,
        wald_level: 0.02,
        ar_critical: 1.96,
        ar_level: 0.025,
        overall: 0.05,
    },
    TwoStepConfig {
        cutoff: 5.01,
        wald_critical: 3.84,
        wald_level: 0.05,
        ar_critical: 2.05,
        ar_level: 0.02,
        overall: 0.10,
    },
    TwoStepConfig {
        cutoff: 7.65,
        wald_critical: 3.84,
        wald_level: 0.05,
        ar_critical: 1.75,
        ar_level: 0.04,
        overall: 0.10,
    },
];

impl TwoStepConfig {
    /// Cutoff 4.14 with 5% Wald and 5% AR tests; overall size at most 15%.
    pub fn default_15() -> Self {
        Self {
            cutoff: DEFAULT_CUTOFF,
            wald_critical: chi2_quantile(0.95, 1.0),
            wald_level: 0.05,
            ar_critical: norm_quantile(0.95),
            ar_level: 0.05,
            overall: 0.15,
        }
    }

    /// Selects a configuration by declared overall size in percent. `row`
    /// indexes the rows for that size; the default for 5% is the middle row.
    pub fn from_table(overall_pct: u32, row: Option<usize>) -> Result<Self> {
        let rows: Vec<TwoStepConfig> = match overall_pct {
            15 => vec![Self::default_15()],
            5 | 10 => TABLE2
                .iter()
                .copied()
                .filter(|c| (c.overall * 100.0).round() as u32 == overall_pct)
                .collect(),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "no calibrated configuration for overall size {other}%, use 15, 5 or 10"
                )))
            }
        };
        let default_row = if overall_pct == 5 { 1 } else { 0 };
        let i = row.unwrap_or(default_row);
        rows.get(i).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("row {i} out of range, {} rows for {overall_pct}%", rows.len()))
        })
    }

    /// Checks that each critical value is its nominal quantile up to two
    /// decimals (the table truncates as well as rounds).
    pub fn validate(&self) -> Result<()> {
        let w = chi2_quantile(1.0 - self.wald_level, 1.0);
        let a = norm_quantile(1.0 - self.ar_level);
        let ok = (w - self.wald_critical).abs() < 0.01
            && (a - self.ar_critical).abs() < 0.01
            && self.cutoff.is_finite()
            && self.overall > 0.0
            && self.overall < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "critical values do not match their levels: Wald {} vs {w:.4}, AR {} vs {a:.4}",
                self.wald_critical, self.ar_critical
            )))
        }
    }
}

/// Bonferroni bound on the overall size of a configuration.
///
/// Pick a pre-test level `γ` and let `S* = cutoff − z_{1−γ}`. When `S ≤ S*`
/// the Wald branch is entered with probability at most `γ`; when `S > S*`
/// the Wald branch rejects with probability at most `R_max(S*)`. Either way
/// the AR branch adds at most its own level. The bound minimizes over `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TableAudit {
    pub config: TwoStepConfig,
    pub pretest_level: f64,
    pub s_star: f64,
    pub rmax: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn audit_config(config: &TwoStepConfig, draws: &LimitDraws, tolerance: f64) -> TableAudit {
    let crit = config.wald_critical;
    let r_at = |gamma: f64| draws.rejection(config.cutoff - norm_quantile(1.0 - gamma), 1.0, crit);
    // R(S*(γ)) falls as γ grows; find the crossing with γ by bisection
    let (mut lo, mut hi) = (1e-6_f64, 0.5_f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if r_at(mid) > mid {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let gamma = hi;
    let rmax = r_at(gamma);
    let bound = config.ar_level + gamma.max(rmax);
    TableAudit {
        config: *config,
        pretest_level: gamma,
        s_star: config.cutoff - norm_quantile(1.0 - gamma),
        rmax,
        bound,
        tolerance,
        pass: bound <= config.overall + tolerance,
    }
}

pub fn audit_table2(draws: usize, seed: u64) -> Vec<TableAudit> {
    let d = LimitDraws::new(draws, seed);
    TABLE2.iter().map(|c| audit_config(c, &d, 0.005)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Wald,
    Ar,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoStepResult<T> {
    pub branch: Branch,
    pub pretest: PretestResult<T>,
    pub jive: Option<JiveResult<T>>,
    pub wald: Option<WaldResult<T>>,
    pub ar: Option<ArResult<T>>,
    pub reject: bool,
    pub config: TwoStepConfig,
    pub warning: Option<String>,
}

const FALLTHROUGH: &str = "JIVE variance is not positive; using the AR branch";

/// Two-step test of `β = β₀`.
pub fn two_step<T: Real>(
    d: &Dataset<T>,
    c: &ProjectionCache<T>,
    beta0: T,
    config: &TwoStepConfig,
) -> Result<TwoStepResult<T>> {
    let f = JackknifeForms::new(c, d.y(), d.x())?;
    let pre = pretest_from_forms(&f, c.k(), config.cutoff)?;
    two_step_given_pretest(&f, c.k(), pre, beta0, config)
}

/// Second step given a pre-test outcome, which may come from elsewhere.
pub fn two_step_given_pretest<T: Real>(
    f: &JackknifeForms<T>,
    k: usize,
    pretest: PretestResult<T>,
    beta0: T,
    config: &TwoStepConfig,
) -> Result<TwoStepResult<T>> {
    let mut warning = None;
    if pretest.strong {
        let j = jive_from_forms(f)?;
        if j.variance_ok() {
            let dev = j.beta_hat - beta0;
            let statistic = dev * dev / j.var_hat;
            let reject = statistic.to_f64_lossy() >= config.wald_critical;
            return Ok(TwoStepResult {
                branch: Branch::Wald,
                pretest,
                jive: Some(j),
                wald: Some(WaldResult {
                    beta0,
                    statistic,
                    critical_value: config.wald_critical,
                    alpha: config.wald_level,
                    reject,
                }),
                ar: None,
                reject,
                config: *config,
                warning,
            });
        }
        warning = Some(FALLTHROUGH.to_string());
    }
    let ar = ArCurve::new(f, VarianceMethod::Crossfit, k).test_at(beta0, config.ar_critical, config.ar_level)?;
    Ok(TwoStepResult {
        branch: Branch::Ar,
        pretest,
        jive: None,
        wald: None,
        reject: ar.reject,
        ar: Some(ar),
        config: *config,
        warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoStepCi<T> {
    pub branch: Branch,
    pub pretest: PretestResult<T>,
    pub set: ConfidenceSet,
    pub config: TwoStepConfig,
    pub warning: Option<String>,
}

/// Confidence set from the branch the pre-test selects: the Wald interval
/// `β̂ ± √(c_W V̂)` or the inverted AR test, each at its own level.
pub fn two_step_ci<T: Real>(
    d: &Dataset<T>,
    c: &ProjectionCache<T>,
    config: &TwoStepConfig,
    grid: Option<Grid>,
) -> Result<TwoStepCi<T>> {
    let f = JackknifeForms::new(c, d.y(), d.x())?;
    let pretest = pretest_from_forms(&f, c.k(), config.cutoff)?;
    let mut warning = None;
    if pretest.strong {
        let j = jive_from_forms(&f)?;
        if j.variance_ok() {
            let half = (config.wald_critical * j.var_hat.to_f64_lossy()).sqrt();
            let b = j.beta_hat.to_f64_lossy();
            return Ok(TwoStepCi {
                branch: Branch::Wald,
                pretest,
                set: ConfidenceSet::interval(b - half, b + half, 1.0 - config.wald_level),
                config: *config,
                warning,
            });
        }
        warning = Some(FALLTHROUGH.to_string());
    }
    let grid = grid.unwrap_or_else(|| crate::artest::default_grid(&f));
    let curve = ArCurve::new(&f, VarianceMethod::Crossfit, c.k());
    let set = invert_curve_at(&curve, config.ar_critical, 1.0 - config.ar_level, grid)?;
    Ok(TwoStepCi {
        branch: Branch::Ar,
        pretest,
        set,
        config: *config,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_arithmetic() {
        assert!((calibrate_cutoff(2.5, 0.05) - 4.144_853_626_951_472).abs() < 1e-12);
        assert!((calibrate_cutoff(0.0, 0.05) - 1.644_853_626_951_472).abs() < 1e-12);
        assert!(calibrate_cutoff(3.0, 0.05) > calibrate_cutoff(2.5, 0.05));
        assert!(calibrate_cutoff(2.5, 0.01) > calibrate_cutoff(2.5, 0.05));
    }

    #[test]
    fn table_rows_validate() {
        for row in TABLE2 {
            row.validate().unwrap();
        }
        TwoStepConfig::default_15().validate().unwrap();
        assert_eq!(TwoStepConfig::from_table(5, None).unwrap().cutoff, 9.98);
        assert_eq!(TwoStepConfig::from_table(10, Some(1)).unwrap().cutoff, 7.65);
        assert!(TwoStepConfig::from_table(10, Some(2)).is_err());
        assert!(TwoStepConfig::from_table(7, None).is_err());
    }

    #[test]
    fn rho_sign_symmetry() {
        let d = LimitDraws::new(20_000, 1);
        let crit = chi2_quantile(0.95, 1.0);
        // not exact on a finite sample, but close
        let (a, b) = (d.rejection(2.0, 0.7, crit), d.rejection(2.0, -0.7, crit));
        assert!((a - b).abs() < 0.01);
    }

    #[test]
    fn rmax_is_reproducible() {
        assert_eq!(simulate_rmax(1.0, 0.05, 10_000, 3), simulate_rmax(1.0, 0.05, 10_000, 3));
    }
}
