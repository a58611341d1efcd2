//! Tabular input: CSV ingestion, role validation, and partialling out of
//! exogenous controls.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{residualize, Mat, PivotedQr};
use crate::scalar::{dot, Real};

/// Relative threshold below which a pivot of `R` counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

pub(crate) fn rank_tolerance<T: Real>() -> T {
    T::lit(RANK_TOLERANCE).max(T::lit(64.0) * T::epsilon())
}

/// How the instrument columns are named.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstrumentSelector {
    Columns(Vec<String>),
    /// Every column whose name starts with the prefix, in header order,
    /// excluding columns already claimed by another role.
    Prefix(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roles {
    pub outcome: String,
    pub endogenous: String,
    pub instruments: InstrumentSelector,
    pub controls: Vec<String>,
}

/// Validated numeric columns, assigned to their roles.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub outcome: (String, Vec<f64>),
    pub endogenous: (String, Vec<f64>),
    pub instruments: Vec<(String, Vec<f64>)>,
    pub controls: Vec<(String, Vec<f64>)>,
}

impl RawTable {
    pub fn rows(&self) -> usize {
        self.outcome.1.len()
    }

    pub fn k(&self) -> usize {
        self.instruments.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.rows();
        let all = std::iter::once(&self.outcome)
            .chain(std::iter::once(&self.endogenous))
            .chain(&self.instruments)
            .chain(&self.controls);
        for (name, col) in all {
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: col.len(),
                });
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    row,
                    column: name.clone(),
                });
            }
        }
        if self.instruments.is_empty() {
            return Err(Error::InvalidRoles("at least one instrument is required".into()));
        }
        let required = self.k() + self.controls.len();
        if n <= required {
            return Err(Error::TooFewRows { rows: n, required });
        }
        Ok(())
    }
}

/// Reads a CSV file with a header row.
pub fn load_csv(path: impl AsRef<Path>, roles: &Roles) -> Result<RawTable> {
    let file = std::fs::File::open(path)?;
    read_csv(file, roles)
}

/// Same as [`load_csv`] for any reader.
pub fn read_csv<R: Read>(reader: R, roles: &Roles) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::EmptyFile);
    }
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };

    let y_idx = find(&roles.outcome)?;
    let x_idx = find(&roles.endogenous)?;
    let w_idx = roles
        .controls
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let z_idx: Vec<usize> = match &roles.instruments {
        InstrumentSelector::Columns(names) => names.iter().map(|c| find(c)).collect::<Result<_>>()?,
        InstrumentSelector::Prefix(prefix) => header
            .iter()
            .enumerate()
            .filter(|(i, h)| {
                h.starts_with(prefix.as_str()) && *i != y_idx && *i != x_idx && !w_idx.contains(i)
            })
            .map(|(i, _)| i)
            .collect(),
    };
    if z_idx.is_empty() {
        return Err(Error::InvalidRoles("no instrument columns matched".into()));
    }

    let wanted: Vec<usize> = [y_idx, x_idx]
        .into_iter()
        .chain(z_idx.iter().copied())
        .chain(w_idx.iter().copied())
        .collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (slot, &ci) in wanted.iter().enumerate() {
            let raw = rec.get(ci).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::NonFiniteValue {
                row,
                column: header[ci].clone(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    row,
                    column: header[ci].clone(),
                });
            }
            cols[slot].push(v);
        }
    }
    if cols[0].is_empty() {
        return Err(Error::EmptyFile);
    }

    let mut it = cols.into_iter();
    let mut named = |ci: usize| (header[ci].clone(), it.next().expect("column count"));
    let outcome = named(y_idx);
    let endogenous = named(x_idx);
    let instruments = z_idx.iter().map(|&c| named(c)).collect();
    let controls = w_idx.iter().map(|&c| named(c)).collect();
    let table = RawTable {
        outcome,
        endogenous,
        instruments,
        controls,
    };
    table.validate()?;
    Ok(table)
}

/// Where the dataset came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub instrument_names: Vec<String>,
    /// Names of the controls that were partialled out (intercept not listed).
    pub controls: Vec<String>,
    /// True when an intercept was partialled out along with the controls.
    pub intercept: bool,
}

impl Provenance {
    pub fn partialled(&self) -> bool {
        self.intercept || !self.controls.is_empty()
    }
}

/// Controls-free IV data: outcome `y`, endogenous regressor `x`,
/// full-rank instrument matrix `z` (N × K).
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    y: Vec<T>,
    x: Vec<T>,
    z: Arc<Mat<T>>,
    provenance: Provenance,
}

impl<T: Real> Dataset<T> {
    /// Validates lengths, finiteness and the column rank of `z`.
    pub fn new(y: Vec<T>, x: Vec<T>, z: Mat<T>) -> Result<Self> {
        let d = Self::from_shared(y, x, Arc::new(z), Provenance::default())?;
        let rank = PivotedQr::new(&d.z, rank_tolerance()).rank();
        if rank < d.k() {
            return Err(Error::RankDeficient { rank, k: d.k() });
        }
        Ok(d)
    }

    /// Like [`Dataset::new`] but trusts that `z` has already been rank
    /// checked, so that replications can share one instrument matrix.
    pub fn from_shared(y: Vec<T>, x: Vec<T>, z: Arc<Mat<T>>, provenance: Provenance) -> Result<Self> {
        let n = z.rows();
        for v in [&y, &x] {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        if z.cols() == 0 {
            return Err(Error::InvalidRoles("at least one instrument is required".into()));
        }
        if n <= z.cols() {
            return Err(Error::TooFewRows {
                rows: n,
                required: z.cols(),
            });
        }
        for (name, col) in [("y", &y[..]), ("x", &x[..])] {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    row,
                    column: name.into(),
                });
            }
        }
        Ok(Self { y, x, z, provenance })
    }

    #[inline]
    pub fn y(&self) -> &[T] {
        &self.y
    }

    #[inline]
    pub fn x(&self) -> &[T] {
        &self.x
    }

    #[inline]
    pub fn z(&self) -> &Mat<T> {
        &self.z
    }

    pub fn shared_z(&self) -> Arc<Mat<T>> {
        Arc::clone(&self.z)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.z.cols()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Same instruments, new outcome and regressor.
    pub fn with_data(&self, y: Vec<T>, x: Vec<T>) -> Result<Self> {
        Self::from_shared(y, x, Arc::clone(&self.z), self.provenance.clone())
    }
}

/// Residualizes outcome, regressor and instruments on `[1, W]`.
///
/// With no controls declared the data pass through unchanged and no
/// intercept is added.
pub fn partial_out<T: Real>(raw: &RawTable) -> Result<Dataset<T>> {
    raw.validate()?;
    let conv = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
    let n = raw.rows();
    let mut y = conv(&raw.outcome.1);
    let mut x = conv(&raw.endogenous.1);
    let mut z_cols: Vec<Vec<T>> = raw.instruments.iter().map(|(_, c)| conv(c)).collect();
    let k = z_cols.len();

    let mut provenance = Provenance {
        instrument_names: raw.instruments.iter().map(|(n, _)| n.clone()).collect(),
        ..Provenance::default()
    };

    if !raw.controls.is_empty() {
        let mut w_cols = vec![vec![T::one(); n]];
        w_cols.extend(raw.controls.iter().map(|(_, c)| conv(c)));
        let w = Mat::from_columns(&w_cols);
        let qr = PivotedQr::new(&w, rank_tolerance());
        if qr.rank() < w.cols() {
            return Err(Error::RankDeficientControls {
                rank: qr.rank(),
                cols: w.cols(),
            });
        }
        let basis = qr.orthonormal_basis();
        y = residualize(&basis, &y);
        x = residualize(&basis, &x);
        for c in z_cols.iter_mut() {
            *c = residualize(&basis, c);
        }
        provenance.intercept = true;
        provenance.controls = raw.controls.iter().map(|(n, _)| n.clone()).collect();
    }

    // Rank is judged on columns scaled by their norms before partialling,
    // so a residual that is pure rounding noise cannot pass.
    let scaled: Vec<Vec<T>> = z_cols
        .iter()
        .zip(&raw.instruments)
        .map(|(c, (_, orig))| {
            let s = T::lit(orig.iter().map(|v| v * v).sum::<f64>().sqrt());
            let s = if s > T::zero() { s } else { T::one() };
            c.iter().map(|&v| v / s).collect()
        })
        .collect();
    let rank = PivotedQr::new(&Mat::from_columns(&scaled), rank_tolerance()).rank();
    if rank < k {
        return Err(if raw.controls.is_empty() {
            Error::RankDeficient { rank, k }
        } else {
            Error::RankDeficientInstrumentsAfterPartialling { rank, k }
        });
    }
    Dataset::from_shared(y, x, Arc::new(Mat::from_columns(&z_cols)), provenance)
}

/// Largest normalized inner product `|w'v| / (‖w‖‖v‖)` between the given
/// controls (plus intercept) and the dataset columns.
pub fn control_orthogonality<T: Real>(d: &Dataset<T>, controls: &[Vec<T>]) -> T {
    let n = d.n();
    let ones = vec![T::one(); n];
    let mut worst = T::zero();
    let targets = std::iter::once(d.y())
        .chain(std::iter::once(d.x()))
        .chain(d.z().columns());
    let targets: Vec<&[T]> = targets.collect();
    for w in std::iter::once(&ones).chain(controls) {
        let nw = dot(w, w).sqrt();
        for v in &targets {
            let nv = dot(v, v).sqrt();
            if nw == T::zero() || nv == T::zero() {
                continue;
            }
            worst = worst.max(dot(w, v).abs() / (nw * nv));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roles(z: &[&str], w: &[&str]) -> Roles {
        Roles {
            outcome: "y".into(),
            endogenous: "x".into(),
            instruments: InstrumentSelector::Columns(z.iter().map(|s| s.to_string()).collect()),
            controls: w.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn parses_small_file() {
        let csv = "y,x,z1,z2\n1,2,1,0\n2,3,0,1\n3,1,1,0\n4,5,0,1\n";
        let t = read_csv(csv.as_bytes(), &roles(&["z1", "z2"], &[])).unwrap();
        assert_eq!(t.rows(), 4);
        assert_eq!(t.k(), 2);
    }

    #[test]
    fn prefix_selection_skips_claimed_columns() {
        let csv = "zy,x,z1,z2\n1,2,1,0\n2,3,0,1\n3,1,1,0\n4,5,0,1\n";
        let r = Roles {
            outcome: "zy".into(),
            endogenous: "x".into(),
            instruments: InstrumentSelector::Prefix("z".into()),
            controls: vec![],
        };
        let t = read_csv(csv.as_bytes(), &r).unwrap();
        let names: Vec<_> = t.instruments.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["z1", "z2"]);
    }

    #[test]
    fn nan_is_rejected() {
        let csv = "y,x,z1\n1,2,1\n2,NaN,0\n3,1,1\n";
        let err = read_csv(csv.as_bytes(), &roles(&["z1"], &[])).unwrap_err();
        match err {
            Error::NonFiniteValue { row, column } => {
                assert_eq!(row, 1);
                assert_eq!(column, "x");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_and_missing() {
        let err = read_csv("y,x,z1\n".as_bytes(), &roles(&["z1"], &[])).unwrap_err();
        assert!(matches!(err, Error::EmptyFile));
        let err = read_csv("".as_bytes(), &roles(&["z1"], &[])).unwrap_err();
        assert!(matches!(err, Error::EmptyFile));
        let err = read_csv("y,x\n1,2\n".as_bytes(), &roles(&["z1"], &[])).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "z1"));
    }

    #[test]
    fn zero_controls_is_identity() {
        let csv = "y,x,z1,z2\n1,2,1,0\n2,3,0,1\n3,1,1,0\n4,5,0,1\n";
        let t = read_csv(csv.as_bytes(), &roles(&["z1", "z2"], &[])).unwrap();
        let d = partial_out::<f64>(&t).unwrap();
        assert_eq!(d.y(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d.x(), &[2.0, 3.0, 1.0, 5.0]);
        assert_eq!(d.z().col(0), &[1.0, 0.0, 1.0, 0.0]);
        assert!(!d.provenance().partialled());
    }

    #[test]
    fn constant_control_demeans() {
        // y has mean 3
        let csv = "y,x,z1,c\n1,2,0.5,1\n2,3,-1,1\n4,1,2,1\n5,5,0.1,1\n";
        let t = read_csv(csv.as_bytes(), &roles(&["z1"], &["c"]));
        // [1, c] is rank one: the control duplicates the intercept
        let err = partial_out::<f64>(&t.unwrap()).unwrap_err();
        assert!(matches!(err, Error::RankDeficientControls { .. }));

        let csv = "y,x,z1,w\n1,2,0.5,0.3\n2,3,-1,0.1\n4,1,2,-0.7\n5,5,0.1,0.2\n3,0,1,1.0\n";
        let t = read_csv(csv.as_bytes(), &roles(&["z1"], &["w"])).unwrap();
        let d = partial_out::<f64>(&t).unwrap();
        let mean: f64 = d.y().iter().sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        let w: Vec<f64> = t.controls[0].1.clone();
        assert!(control_orthogonality(&d, &[w]) <= 1e-8);
    }

    #[test]
    fn control_equal_to_instrument_is_rank_deficient() {
        let csv = "y,x,z1,z2,w\n1,2,1,0.3,0.3\n2,3,0,0.1,0.1\n3,1,1,-0.7,-0.7\n4,5,0,0.2,0.2\n5,1,1,0.9,0.9\n6,2,0,0.4,0.4\n";
        let t = read_csv(csv.as_bytes(), &roles(&["z1", "z2"], &["w"])).unwrap();
        let err = partial_out::<f64>(&t).unwrap_err();
        assert!(matches!(err, Error::RankDeficientInstrumentsAfterPartialling { rank: 1, k: 2 }));
    }

    #[test]
    fn too_few_rows() {
        let csv = "y,x,z1,z2\n1,2,1,0\n2,3,0,1\n";
        let err = read_csv(csv.as_bytes(), &roles(&["z1", "z2"], &[])).unwrap_err();
        assert!(matches!(err, Error::TooFewRows { rows: 2, required: 2 }));
    }
}
