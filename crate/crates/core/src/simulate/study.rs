//! Monte Carlo studies: rejection rates, bias and confidence-set summaries
//! per method, and power curves for the two AR variance estimators.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artest::{default_grid, invert_curve, ArCurve, VarianceMethod};
use crate::confset::{ConfidenceSet, Extended, Grid};
use crate::dist::norm_quantile;
use crate::error::{Error, Result};
use crate::forms::JackknifeForms;
use crate::jive::{jive_ci, jive_from_forms, wald_test};
use crate::kernels::{CacheOptions, ProjectionCache};
use crate::pretest::{pretest_from_forms, two_step_given_pretest, Branch, TwoStepConfig, DEFAULT_CUTOFF};

use super::baselines::{ols, tsls, Estimate};
use super::design::{Ak91StyleDesign, Design, GroupDesign, GroupInstance};
use super::strength::{local_power, phi_at, strength, StrengthReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ols,
    Tsls,
    JiveWald,
    JackknifeArCrossfit,
    JackknifeArNaive,
    Pretest,
    TwoStep,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ols,
        Method::Tsls,
        Method::JiveWald,
        Method::JackknifeArCrossfit,
        Method::JackknifeArNaive,
        Method::Pretest,
        Method::TwoStep,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DesignSpec {
    Group(GroupDesign),
    Ak91(Ak91StyleDesign),
}

impl DesignSpec {
    pub fn instantiate(&self) -> Result<Box<dyn Design>> {
        Ok(match self {
            DesignSpec::Group(g) => Box::new(GroupInstance::new(g.clone())?),
            DesignSpec::Ak91(a) => Box::new(a.build()?),
        })
    }
}

fn default_name() -> String {
    "study".into()
}
fn default_reps() -> usize {
    1000
}
fn default_alpha() -> f64 {
    0.05
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_cutoff() -> f64 {
    DEFAULT_CUTOFF
}
fn default_overall() -> u32 {
    15
}
fn default_points() -> usize {
    2001
}

/// Declarative description of a study, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Also summarize confidence sets.
    #[serde(default)]
    pub ci: bool,
    /// Tests `β₀ = β − Δ`; zero gives size.
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default = "default_overall")]
    pub twostep_overall: u32,
    #[serde(default)]
    pub twostep_row: Option<usize>,
    #[serde(default = "default_points")]
    pub grid_points: usize,
    pub design: DesignSpec,
}

impl SimulationSpec {
    pub fn new(design: DesignSpec, reps: usize, seed: u64) -> Self {
        Self {
            name: default_name(),
            seed,
            reps,
            alpha: default_alpha(),
            methods: default_methods(),
            ci: false,
            delta: 0.0,
            cutoff: default_cutoff(),
            twostep_overall: default_overall(),
            twostep_row: None,
            grid_points: default_points(),
            design,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidArgument("reps must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// A Monte Carlo proportion with its standard error `√(p(1−p)/n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rate {
    pub rate: f64,
    pub se: f64,
    pub count: usize,
    pub total: usize,
}

impl Rate {
    pub fn new(count: usize, total: usize) -> Self {
        let p = if total == 0 { f64::NAN } else { count as f64 / total as f64 };
        Self {
            rate: p,
            se: (p * (1.0 - p) / total as f64).sqrt(),
            count,
            total,
        }
    }

    fn of(flags: impl Iterator<Item = bool>) -> Option<Self> {
        let (mut c, mut t) = (0, 0);
        for f in flags {
            t += 1;
            c += f as usize;
        }
        (t > 0).then(|| Self::new(c, t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub reps_ok: usize,
    pub failures: usize,
    pub rejection: Option<Rate>,
    pub mean_bias: Option<f64>,
    pub median_bias: Option<f64>,
    pub median_ci_length: Option<Extended>,
    pub infinite_ci: Option<Rate>,
    /// Share of replications declared strongly identified (pre-test) or
    /// routed to the Wald branch (two-step).
    pub strong: Option<Rate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub name: String,
    pub design: String,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub reps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub beta0: f64,
    pub strength: StrengthReport,
    pub methods: Vec<MethodSummary>,
    /// Error messages by method and text, with counts.
    pub failures: BTreeMap<String, usize>,
}

impl SimulationReport {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct CiSummary {
    length: f64,
    unbounded: bool,
}

impl From<&ConfidenceSet> for CiSummary {
    fn from(s: &ConfidenceSet) -> Self {
        Self {
            length: s.length(),
            unbounded: s.is_unbounded(),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct MethodOutcome {
    reject: Option<bool>,
    estimate: Option<f64>,
    ci: Option<CiSummary>,
    strong: Option<bool>,
    error: Option<String>,
}

impl MethodOutcome {
    fn failed(e: impl std::fmt::Display) -> Self {
        Self {
            error: Some(e.to_string()),
            ..Self::default()
        }
    }
}

struct RepContext<'a> {
    spec: &'a SimulationSpec,
    design: &'a dyn Design,
    cache: &'a ProjectionCache<f64>,
    twostep: TwoStepConfig,
    z_two: f64,
}

impl RepContext<'_> {
    fn grid(&self, f: &JackknifeForms<f64>) -> Grid {
        let g = default_grid(f);
        Grid::new(g.lo, g.hi, self.spec.grid_points)
    }

    fn baseline(&self, e: Estimate, beta0: f64) -> MethodOutcome {
        MethodOutcome {
            reject: Some(e.t(beta0).abs() >= self.z_two),
            estimate: Some(e.beta),
            ..MethodOutcome::default()
        }
    }

    fn evaluate(&self, rep: u64) -> Vec<(Method, MethodOutcome)> {
        let s = self.spec;
        let (y, x) = self.design.draw(s.seed, rep);
        let beta0 = self.design.beta() - s.delta;
        let k = self.cache.k();
        let forms = JackknifeForms::new(self.cache, &y, &x);
        let mut out = Vec::with_capacity(s.methods.len());
        for &m in &s.methods {
            let o = match m {
                Method::Ols => self.baseline(ols(&y, &x), beta0),
                Method::Tsls => self.baseline(tsls(self.cache, &y, &x), beta0),
                _ => match &forms {
                    Err(e) => MethodOutcome::failed(e),
                    Ok(f) => self.jackknife(m, f, k, beta0),
                },
            };
            out.push((m, o));
        }
        out
    }

    fn jackknife(&self, m: Method, f: &JackknifeForms<f64>, k: usize, beta0: f64) -> MethodOutcome {
        let s = self.spec;
        let run = || -> Result<MethodOutcome> {
            Ok(match m {
                Method::JiveWald => {
                    let j = jive_from_forms(f)?;
                    let w = wald_test(&j, beta0, s.alpha)?;
                    MethodOutcome {
                        reject: Some(w.reject),
                        estimate: Some(j.beta_hat),
                        ci: if s.ci { Some((&jive_ci(&j, s.alpha)?).into()) } else { None },
                        ..MethodOutcome::default()
                    }
                }
                Method::JackknifeArCrossfit | Method::JackknifeArNaive => {
                    let method = if m == Method::JackknifeArCrossfit {
                        VarianceMethod::Crossfit
                    } else {
                        VarianceMethod::Naive
                    };
                    let curve = ArCurve::new(f, method, k);
                    let r = curve.test(beta0, s.alpha)?;
                    MethodOutcome {
                        reject: Some(r.reject),
                        ci: if s.ci {
                            Some((&invert_curve(&curve, s.alpha, self.grid(f))?).into())
                        } else {
                            None
                        },
                        ..MethodOutcome::default()
                    }
                }
                Method::Pretest => {
                    let p = pretest_from_forms(f, k, s.cutoff)?;
                    MethodOutcome {
                        strong: Some(p.strong),
                        ..MethodOutcome::default()
                    }
                }
                Method::TwoStep => {
                    let p = pretest_from_forms(f, k, self.twostep.cutoff)?;
                    let r = two_step_given_pretest(f, k, p, beta0, &self.twostep)?;
                    MethodOutcome {
                        reject: Some(r.reject),
                        strong: Some(r.branch == Branch::Wald),
                        ..MethodOutcome::default()
                    }
                }
                Method::Ols | Method::Tsls => unreachable!("baselines do not use the jackknife forms"),
            })
        };
        run().unwrap_or_else(MethodOutcome::failed)
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a.is_infinite() || b.is_infinite() {
            if a == b {
                a
            } else {
                b
            }
        } else {
            0.5 * (a + b)
        }
    })
}

pub fn build_cache(design: &dyn Design) -> Result<ProjectionCache<f64>> {
    ProjectionCache::from_instruments(&design.instruments(), CacheOptions::default())
}

/// Runs a study. Failed replications are counted per method, never fatal.
pub fn run_study(spec: &SimulationSpec) -> Result<SimulationReport> {
    spec.validate()?;
    let design = spec.design.instantiate()?;
    let cache = build_cache(design.as_ref())?;
    run_study_with(spec, design.as_ref(), &cache)
}

/// Runs a study on an already instantiated design and cache.
pub fn run_study_with(
    spec: &SimulationSpec,
    design: &dyn Design,
    cache: &ProjectionCache<f64>,
) -> Result<SimulationReport> {
    spec.validate()?;
    let ctx = RepContext {
        spec,
        design,
        cache,
        twostep: TwoStepConfig::from_table(spec.twostep_overall, spec.twostep_row)?,
        z_two: norm_quantile(1.0 - spec.alpha / 2.0),
    };
    let outcomes: Vec<Vec<(Method, MethodOutcome)>> =
        (0..spec.reps as u64).into_par_iter().map(|rep| ctx.evaluate(rep)).collect();

    let beta = design.beta();
    let mut failures = BTreeMap::new();
    let methods = spec
        .methods
        .iter()
        .enumerate()
        .map(|(col, &m)| {
            let per: Vec<&MethodOutcome> = outcomes.iter().map(|r| &r[col].1).collect();
            let ok: Vec<&MethodOutcome> = per.iter().copied().filter(|o| o.error.is_none()).collect();
            for o in &per {
                if let Some(e) = &o.error {
                    *failures.entry(format!("{m:?}: {e}")).or_insert(0) += 1;
                }
            }
            let bias: Vec<f64> = ok.iter().filter_map(|o| o.estimate).map(|b| b - beta).collect();
            let cis: Vec<CiSummary> = ok.iter().filter_map(|o| o.ci).collect();
            MethodSummary {
                method: m,
                reps_ok: ok.len(),
                failures: per.len() - ok.len(),
                rejection: Rate::of(ok.iter().filter_map(|o| o.reject)),
                mean_bias: (!bias.is_empty()).then(|| bias.iter().sum::<f64>() / bias.len() as f64),
                median_bias: median(bias),
                median_ci_length: median(cis.iter().map(|c| c.length).collect()).map(Extended),
                infinite_ci: Rate::of(cis.iter().map(|c| c.unbounded)),
                strong: Rate::of(ok.iter().filter_map(|o| o.strong)),
            }
        })
        .collect();

    Ok(SimulationReport {
        name: spec.name.clone(),
        design: design.label(),
        n: design.n(),
        k: cache.k(),
        seed: spec.seed,
        reps: spec.reps,
        alpha: spec.alpha,
        beta,
        beta0: beta - spec.delta,
        strength: strength(cache, &design.moments()),
        methods,
        failures,
    })
}

/// One row of a power curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerRow {
    pub delta: f64,
    pub crossfit_rate: f64,
    pub crossfit_se: f64,
    pub naive_rate: f64,
    pub naive_se: f64,
    /// Local-power approximation for the cross-fit test.
    pub predicted: f64,
    /// Population `Φ(Δ)`.
    pub phi: f64,
    pub median_crossfit_ratio: f64,
    pub median_naive_ratio: f64,
    /// Mean of `Δ² μ² / (√K √Φ̂₁)`.
    pub mean_naive_shift: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerTable {
    pub design: String,
    pub alpha: f64,
    pub reps: usize,
    pub seed: u64,
    pub strength: StrengthReport,
    pub rows: Vec<PowerRow>,
}

impl PowerTable {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct PowerCell {
    crossfit: Option<(bool, f64)>,
    naive: Option<(bool, f64)>,
}

/// Rejection rates of both AR variants at `β₀ = β − Δ` for each `Δ`, using
/// the same replications at every `Δ`.
pub fn power_curve(
    design: &dyn Design,
    cache: &ProjectionCache<f64>,
    deltas: &[f64],
    alpha: f64,
    reps: usize,
    seed: u64,
) -> Result<PowerTable> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("deltas must be finite".into()));
    }
    let k = cache.k();
    let beta = design.beta();
    let cells: Vec<Vec<PowerCell>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let (y, x) = design.draw(seed, rep);
            let Ok(f) = JackknifeForms::new(cache, &y, &x) else {
                return vec![PowerCell::default(); deltas.len()];
            };
            let cf = ArCurve::new(&f, VarianceMethod::Crossfit, k);
            let nv = ArCurve::new(&f, VarianceMethod::Naive, k);
            deltas
                .iter()
                .map(|&d| {
                    let b0 = beta - d;
                    PowerCell {
                        crossfit: cf.test(b0, alpha).ok().map(|r| (r.reject, r.variance.value)),
                        naive: nv.test(b0, alpha).ok().map(|r| (r.reject, r.variance.value)),
                    }
                })
                .collect()
        })
        .collect();

    let moments = design.moments();
    let st = strength(cache, &moments);
    let rows = deltas
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            let phi = phi_at(cache, &moments, d);
            let col: Vec<PowerCell> = cells.iter().map(|r| r[j]).collect();
            let cf = Rate::of(col.iter().filter_map(|c| c.crossfit.map(|v| v.0))).unwrap_or(Rate::new(0, 0));
            let nv = Rate::of(col.iter().filter_map(|c| c.naive.map(|v| v.0))).unwrap_or(Rate::new(0, 0));
            let cf_ratio = median(col.iter().filter_map(|c| c.crossfit.map(|v| v.1 / phi)).collect());
            let nv_vals: Vec<f64> = col.iter().filter_map(|c| c.naive.map(|v| v.1)).collect();
            let nv_ratio = median(nv_vals.iter().map(|v| v / phi).collect());
            let shift = nv_vals.iter().map(|v| d * d * st.mu2 / ((k as f64).sqrt() * v.sqrt())).sum::<f64>()
                / nv_vals.len().max(1) as f64;
            PowerRow {
                delta: d,
                crossfit_rate: cf.rate,
                crossfit_se: cf.se,
                naive_rate: nv.rate,
                naive_se: nv.se,
                predicted: local_power(st.mu2, k, phi, d, alpha),
                phi,
                median_crossfit_ratio: cf_ratio.unwrap_or(f64::NAN),
                median_naive_ratio: nv_ratio.unwrap_or(f64::NAN),
                mean_naive_shift: shift,
                failures: col.iter().filter(|c| c.crossfit.is_none() || c.naive.is_none()).count(),
            }
        })
        .collect();
    Ok(PowerTable {
        design: design.label(),
        alpha,
        reps,
        seed,
        strength: st,
        rows,
    })
}
