//! Data-generating processes: group designs with a linear first stage and a
//! synthetic analog of the quarter-of-birth returns-to-schooling design.

use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{rank_tolerance, Dataset, Provenance};
use crate::dist::{norm_cdf, norm_pdf, norm_quantile};
use crate::error::{Error, Result};
use crate::kernels::group_indicators;
use crate::linalg::{Mat, PivotedQr};
use crate::rng;

/// Conditional moments of each observation given the instruments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueMoments {
    /// `Π_i = E[X_i | Z]`
    pub pi: Vec<f64>,
    /// `σ_i² = Var(e_i)`
    pub sigma2: Vec<f64>,
    /// `ς_i² = Var(v_i)`
    pub varsigma2: Vec<f64>,
    /// `γ_i = Cov(e_i, v_i)`
    pub gamma: Vec<f64>,
}

/// A design with instruments held fixed across replications.
pub trait Design: Send + Sync {
    fn label(&self) -> String;
    fn n(&self) -> usize;
    fn beta(&self) -> f64;
    fn instruments(&self) -> Arc<Mat<f64>>;
    /// `(Y, X)` for one replication, after any partialling the design applies.
    fn draw(&self, seed: u64, rep: u64) -> (Vec<f64>, Vec<f64>);
    fn moments(&self) -> TrueMoments;

    fn dataset(&self, seed: u64, rep: u64) -> Result<Dataset<f64>> {
        let (y, x) = self.draw(seed, rep);
        Dataset::from_shared(y, x, self.instruments(), self.provenance())
    }

    fn provenance(&self) -> Provenance {
        Provenance::default()
    }
}

/// First-stage coefficients of a group design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type", content = "value")]
pub enum FirstStage {
    /// `π_k = 0.001` except `π_K = 2`.
    Sparse,
    /// `π_k = 0.316` for all groups.
    Dense,
    /// Equal coefficients scaled so that `μ²/√K` equals the given value.
    Strength(f64),
    /// `Π = 0`.
    Zero,
    Custom(Vec<f64>),
}

/// `N` observations in `K` equal groups, `X = Zπ + v`, `Y = βX + e`, with
/// `(e, v)` standard bivariate normal with correlation `ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDesign {
    pub n: usize,
    pub k: usize,
    pub rho: f64,
    pub first_stage: FirstStage,
    #[serde(default)]
    pub beta: f64,
}

impl GroupDesign {
    pub fn new(n: usize, k: usize, rho: f64, first_stage: FirstStage) -> Result<Self> {
        let d = Self {
            n,
            k,
            rho,
            first_stage,
            beta: 0.0,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n % self.k != 0 || self.n / self.k < 2 {
            return Err(Error::InvalidArgument(format!(
                "group design needs N divisible by K with groups of at least 2, got N={} K={}",
                self.n, self.k
            )));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::InvalidArgument(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if let FirstStage::Custom(p) = &self.first_stage {
            if p.len() != self.k {
                return Err(Error::DimensionMismatch {
                    expected: self.k,
                    got: p.len(),
                });
            }
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n / self.k
    }

    /// First-stage coefficient of each group.
    pub fn pi(&self) -> Vec<f64> {
        let k = self.k;
        match &self.first_stage {
            FirstStage::Sparse => (0..k).map(|g| if g + 1 == k { 2.0 } else { 0.001 }).collect(),
            FirstStage::Dense => vec![0.316; k],
            FirstStage::Strength(target) => {
                // μ² = K π² (g − 1) for equal coefficients
                let g = self.group_size() as f64;
                let kf = k as f64;
                vec![(target * kf.sqrt() / (kf * (g - 1.0))).sqrt(); k]
            }
            FirstStage::Zero => vec![0.0; k],
            FirstStage::Custom(p) => p.clone(),
        }
    }

    fn group_of(&self, i: usize) -> usize {
        i / self.group_size()
    }
}

/// Group design with its instrument matrix built once.
#[derive(Debug, Clone)]
pub struct GroupInstance {
    pub spec: GroupDesign,
    z: Arc<Mat<f64>>,
    pi: Vec<f64>,
}

impl GroupInstance {
    pub fn new(spec: GroupDesign) -> Result<Self> {
        spec.validate()?;
        let groups: Vec<usize> = (0..spec.n).map(|i| spec.group_of(i)).collect();
        let z = Arc::new(group_indicators(&groups, spec.k));
        let pi = spec.pi();
        Ok(Self { spec, z, pi })
    }
}

impl Design for GroupInstance {
    fn label(&self) -> String {
        format!("group(N={}, K={}, rho={}, {:?})", self.spec.n, self.spec.k, self.spec.rho, self.spec.first_stage)
    }

    fn n(&self) -> usize {
        self.spec.n
    }

    fn beta(&self) -> f64 {
        self.spec.beta
    }

    fn instruments(&self) -> Arc<Mat<f64>> {
        Arc::clone(&self.z)
    }

    fn draw(&self, seed: u64, rep: u64) -> (Vec<f64>, Vec<f64>) {
        let s = &self.spec;
        let mut r = rng::stream(seed, "group", rep);
        let q = (1.0 - s.rho * s.rho).sqrt();
        let mut y = Vec::with_capacity(s.n);
        let mut x = Vec::with_capacity(s.n);
        for i in 0..s.n {
            let e: f64 = r.sample(StandardNormal);
            let w: f64 = r.sample(StandardNormal);
            let v = s.rho * e + q * w;
            let xi = self.pi[s.group_of(i)] + v;
            x.push(xi);
            y.push(s.beta * xi + e);
        }
        (y, x)
    }

    fn moments(&self) -> TrueMoments {
        let n = self.spec.n;
        TrueMoments {
            pi: (0..n).map(|i| self.pi[self.spec.group_of(i)]).collect(),
            sigma2: vec![1.0; n],
            varsigma2: vec![1.0; n],
            gamma: vec![self.spec.rho; n],
        }
    }
}

/// Source of the cell-level calibration of the schooling design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "type", content = "path")]
pub enum Calibration {
    #[default]
    Synthetic,
    /// CSV with columns `qob,yob,pob,share,index,omega`: population share,
    /// first-stage index `γ₀ + γ_Z'Z` and noise scale per cell.
    File(PathBuf),
}

/// Synthetic analog of the quarter-of-birth design.
///
/// Each person has a quarter (4), cohort (10) and state (50) of birth.
/// Instruments are quarter × cohort and quarter × state dummies for quarters
/// 2–4 (one state per quarter omitted), dropping those with fewer than
/// `min_cell` ones. Schooling is `s̃ ~ Poisson(max{1, γ₀ + γ_Z'Z + κ₁ν})` and
/// the outcome `ȳ + β s̃ + ω(ν + κ₂ε)`; the intercept is partialled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ak91StyleDesign {
    pub n: usize,
    pub beta: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub gamma0: f64,
    /// Scale of the instrument effects `γ_Z`.
    pub gamma_scale: f64,
    /// Relative scale of the quarter × cohort effects.
    pub cohort_scale: f64,
    /// Log-scale spread of state population shares.
    pub state_spread: f64,
    pub omega_scale: f64,
    /// Log-sd of the per-cell noise scale `ω`.
    pub omega_spread: f64,
    pub ybar: f64,
    pub min_cell: usize,
    /// Seed for the layout, effects and `ω`; fixed across replications.
    pub design_seed: u64,
    pub calibration: Calibration,
}

impl Default for Ak91StyleDesign {
    fn default() -> Self {
        Self {
            n: 4923,
            beta: 0.1,
            kappa1: 6.5,
            kappa2: 0.1,
            gamma0: 12.5,
            gamma_scale: 1.4,
            cohort_scale: 0.0,
            state_spread: 1.0,
            omega_scale: 2.0,
            omega_spread: 0.35,
            ybar: 5.9,
            min_cell: 5,
            design_seed: 20_240_101,
            calibration: Calibration::Synthetic,
        }
    }
}

/// Population sizes of the four scaled-down samples.
pub const AK91_SCALES: [usize; 4] = [4923, 3209, 1599, 796];

const QUARTERS: usize = 4;
const COHORTS: usize = 10;
const STATES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Cohort(usize, usize),
    State(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CellParams {
    share: f64,
    index: f64,
    omega: f64,
}

impl Ak91StyleDesign {
    pub fn synthetic(n: usize) -> Self {
        Self {
            n,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa1 < 0.0 || self.kappa2 < 0.0 {
            return Err(Error::InvalidArgument("kappa1 and kappa2 must be non-negative".into()));
        }
        if !(self.omega_scale > 0.0) {
            return Err(Error::InvalidArgument("omega_scale must be positive".into()));
        }
        if self.n < 2 {
            return Err(Error::TooFewRows {
                rows: self.n,
                required: 2,
            });
        }
        Ok(())
    }

    /// Draws the layout and builds the fixed instrument matrix.
    pub fn build(&self) -> Result<Ak91Instance> {
        self.validate()?;
        let cells = self.cell_params()?;
        let mut r = rng::stream(self.design_seed, "ak91-layout", self.n as u64);

        // person → (q, y, s) by inverse cdf over the flattened cell shares
        let mut cdf = Vec::with_capacity(cells.len());
        let mut acc = 0.0;
        for c in &cells {
            acc += c.share;
            cdf.push(acc);
        }
        let n = self.n;
        let mut person = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = r.random::<f64>() * acc;
            let idx = cdf.partition_point(|&c| c <= u).min(cells.len() - 1);
            person.push(idx);
        }
        let decode = |idx: usize| (idx / (COHORTS * STATES), (idx / STATES) % COHORTS, idx % STATES);

        let mut candidates = Vec::new();
        for q in 1..QUARTERS {
            for y in 0..COHORTS {
                candidates.push(Cell::Cohort(q, y));
            }
            for s in 0..STATES - 1 {
                candidates.push(Cell::State(q, s));
            }
        }
        let mut columns: Vec<(Cell, Vec<f64>)> = Vec::new();
        for cell in candidates {
            let col: Vec<f64> = person
                .iter()
                .map(|&idx| {
                    let (q, y, s) = decode(idx);
                    let hit = match cell {
                        Cell::Cohort(cq, cy) => q == cq && y == cy,
                        Cell::State(cq, cs) => q == cq && s == cs,
                    };
                    if hit {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            if col.iter().sum::<f64>() >= self.min_cell as f64 {
                columns.push((cell, col));
            }
        }

        // intercept partialled out; drop any columns that become dependent
        let mut z_cols: Vec<Vec<f64>> = columns.iter().map(|(_, c)| demean(c)).collect();
        let qr = PivotedQr::new(&Mat::from_columns(&z_cols), rank_tolerance::<f64>());
        if qr.rank() < z_cols.len() {
            let mut keep: Vec<usize> = qr.permutation()[..qr.rank()].to_vec();
            keep.sort_unstable();
            z_cols = keep.iter().map(|&j| z_cols[j].clone()).collect();
        }
        if z_cols.is_empty() {
            return Err(Error::InvalidArgument("no instrument survives the cell-size filter".into()));
        }

        let index: Vec<f64> = person.iter().map(|&c| cells[c].index).collect();
        let omega: Vec<f64> = person.iter().map(|&c| cells[c].omega).collect();
        Ok(Ak91Instance {
            spec: self.clone(),
            z: Arc::new(Mat::from_columns(&z_cols)),
            index,
            omega,
        })
    }

    /// Shares, first-stage index and `ω` of every `(q, y, s)` cell.
    fn cell_params(&self) -> Result<Vec<CellParams>> {
        match &self.calibration {
            Calibration::Synthetic => Ok(self.synthetic_cells()),
            Calibration::File(path) => load_calibration(path),
        }
    }

    fn synthetic_cells(&self) -> Vec<CellParams> {
        let mut r = rng::stream(self.design_seed, "ak91-effects", 0);
        let state_w: Vec<f64> = (0..STATES)
            .map(|s| (self.state_spread * norm_quantile((s as f64 + 0.5) / STATES as f64)).exp())
            .collect();
        let total: f64 = state_w.iter().sum();
        let mut cohort_fx = [[0.0; COHORTS]; QUARTERS];
        let mut state_fx = [[0.0; STATES]; QUARTERS];
        for q in 1..QUARTERS {
            for y in 0..COHORTS {
                cohort_fx[q][y] = self.cohort_scale * self.gamma_scale * r.sample::<f64, _>(StandardNormal);
            }
            for s in 0..STATES - 1 {
                state_fx[q][s] = self.gamma_scale * r.sample::<f64, _>(StandardNormal);
            }
        }
        let mut cells = Vec::with_capacity(QUARTERS * COHORTS * STATES);
        for q in 0..QUARTERS {
            for y in 0..COHORTS {
                for s in 0..STATES {
                    let g: f64 = r.sample(StandardNormal);
                    let sd = self.omega_spread;
                    cells.push(CellParams {
                        share: state_w[s] / total / (QUARTERS * COHORTS) as f64,
                        index: self.gamma0 + cohort_fx[q][y] + state_fx[q][s],
                        omega: self.omega_scale * (sd * g - 0.5 * sd * sd).exp(),
                    });
                }
            }
        }
        cells
    }
}

fn load_calibration(path: &std::path::Path) -> Result<Vec<CellParams>> {
    if !path.exists() {
        return Err(Error::CalibrationMissing(path.display().to_string()));
    }
    let mut cells = vec![
        CellParams {
            share: 0.0,
            index: 1.0,
            omega: 1.0,
        };
        QUARTERS * COHORTS * STATES
    ];
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    #[derive(Deserialize)]
    struct Row {
        qob: usize,
        yob: usize,
        pob: usize,
        share: f64,
        index: f64,
        omega: f64,
    }
    for row in rdr.deserialize() {
        let row: Row = row?;
        if row.qob < 1 || row.qob > QUARTERS || row.yob >= COHORTS || row.pob >= STATES {
            return Err(Error::Config(format!(
                "calibration cell out of range: qob={} yob={} pob={}",
                row.qob, row.yob, row.pob
            )));
        }
        if !(row.share >= 0.0 && row.omega > 0.0 && row.index.is_finite()) {
            return Err(Error::Config("calibration needs share ≥ 0, omega > 0, finite index".into()));
        }
        cells[((row.qob - 1) * COHORTS + row.yob) * STATES + row.pob] = CellParams {
            share: row.share,
            index: row.index,
            omega: row.omega,
        };
    }
    if cells.iter().all(|c| c.share == 0.0) {
        return Err(Error::Config("calibration file has no positive shares".into()));
    }
    Ok(cells)
}

fn demean(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

/// Schooling design with its layout drawn.
#[derive(Debug, Clone)]
pub struct Ak91Instance {
    pub spec: Ak91StyleDesign,
    z: Arc<Mat<f64>>,
    /// `γ₀ + γ_Z'Z_i`
    index: Vec<f64>,
    omega: Vec<f64>,
}

impl Ak91Instance {
    pub fn k(&self) -> usize {
        self.z.cols()
    }

    /// `(E[X|Z], Var(X|Z), Cov(ω ν, X | Z))` for first-stage index `m`.
    fn first_stage_moments(&self, m: f64) -> (f64, f64, f64) {
        let k1 = self.spec.kappa1;
        if k1 == 0.0 {
            let mu = m.max(1.0);
            return (mu, mu, 0.0);
        }
        // μ = 1 + κ₁ (t + ν)⁺ with t = (m − 1)/κ₁
        let t = (m - 1.0) / k1;
        let (cdf, pdf) = (norm_cdf(t), norm_pdf(t));
        let eu = k1 * (t * cdf + pdf);
        let eu2 = k1 * k1 * ((t * t + 1.0) * cdf + t * pdf);
        let mean = 1.0 + eu;
        // Poisson given μ: Var X = E μ + Var μ; Cov(ν, μ) = κ₁ P(t + ν > 0)
        (mean, mean + eu2 - eu * eu, k1 * cdf)
    }
}

impl Design for Ak91Instance {
    fn label(&self) -> String {
        format!("ak91-style(N={}, K={})", self.spec.n, self.k())
    }

    fn n(&self) -> usize {
        self.spec.n
    }

    fn beta(&self) -> f64 {
        self.spec.beta
    }

    fn instruments(&self) -> Arc<Mat<f64>> {
        Arc::clone(&self.z)
    }

    fn draw(&self, seed: u64, rep: u64) -> (Vec<f64>, Vec<f64>) {
        let s = &self.spec;
        let mut r = rng::stream(seed, "ak91", rep);
        let n = s.n;
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        for i in 0..n {
            let nu: f64 = r.sample(StandardNormal);
            let eps: f64 = r.sample(StandardNormal);
            let mu = (self.index[i] + s.kappa1 * nu).max(1.0);
            let school = Poisson::new(mu).map(|p| p.sample(&mut r)).unwrap_or(mu);
            x.push(school);
            y.push(s.ybar + s.beta * school + self.omega[i] * (nu + s.kappa2 * eps));
        }
        (demean(&y), demean(&x))
    }

    fn moments(&self) -> TrueMoments {
        let s = &self.spec;
        let n = s.n;
        let mut pi = Vec::with_capacity(n);
        let mut varsigma2 = Vec::with_capacity(n);
        let mut gamma = Vec::with_capacity(n);
        let mut sigma2 = Vec::with_capacity(n);
        for i in 0..n {
            let (m, v, c) = self.first_stage_moments(self.index[i]);
            pi.push(m);
            varsigma2.push(v);
            gamma.push(self.omega[i] * c);
            sigma2.push(self.omega[i] * self.omega[i] * (1.0 + s.kappa2 * s.kappa2));
        }
        TrueMoments {
            pi: demean(&pi),
            sigma2,
            varsigma2,
            gamma,
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            instrument_names: (0..self.k()).map(|j| format!("cell{j}")).collect(),
            controls: Vec::new(),
            intercept: true,
        }
    }
}
