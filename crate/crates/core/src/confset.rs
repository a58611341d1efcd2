//! Confidence sets as finite unions of closed intervals on the extended line.

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

/// Grid used to invert a pointwise test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, points: usize) -> Self {
        Self { lo, hi, points }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn value(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridMeta {
    pub grid: Grid,
    pub step: f64,
    pub tolerance: f64,
}

/// Sorted, disjoint closed intervals. Endpoints may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSet {
    intervals: Vec<(f64, f64)>,
    level: f64,
    grid: Option<GridMeta>,
}

impl ConfidenceSet {
    /// Builds a set from intervals, which must already be sorted and disjoint.
    pub fn new(intervals: Vec<(f64, f64)>, level: f64, grid: Option<GridMeta>) -> Self {
        debug_assert!(intervals.iter().all(|&(a, b)| a <= b));
        debug_assert!(intervals.windows(2).all(|w| w[0].1 < w[1].0));
        Self {
            intervals,
            level,
            grid,
        }
    }

    pub fn interval(lo: f64, hi: f64, level: f64) -> Self {
        Self::new(vec![(lo, hi)], level, None)
    }

    pub fn whole_line(level: f64) -> Self {
        Self::interval(f64::NEG_INFINITY, f64::INFINITY, level)
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Nominal coverage `1 − α`.
    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn grid(&self) -> Option<&GridMeta> {
        self.grid.as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn is_unbounded(&self) -> bool {
        self.intervals.iter().any(|&(a, b)| a.is_infinite() || b.is_infinite())
    }

    pub fn contains(&self, b: f64) -> bool {
        self.intervals.iter().any(|&(lo, hi)| lo <= b && b <= hi)
    }

    /// Lebesgue measure; infinite for unbounded sets.
    pub fn length(&self) -> f64 {
        self.intervals.iter().map(|&(a, b)| b - a).sum()
    }

    /// Shifts every endpoint by `by`.
    pub fn shifted(&self, by: f64) -> Self {
        Self {
            intervals: self.intervals.iter().map(|&(a, b)| (a + by, b + by)).collect(),
            level: self.level,
            grid: self.grid,
        }
    }
}

/// Extended real number that serializes infinities as `"-inf"` / `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extended(pub f64);

impl Serialize for Extended {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            v if v == f64::INFINITY => s.serialize_str("inf"),
            v if v == f64::NEG_INFINITY => s.serialize_str("-inf"),
            v if v.is_nan() => s.serialize_str("nan"),
            v => s.serialize_f64(v),
        }
    }
}

impl Serialize for ConfidenceSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("ConfidenceSet", 5)?;
        let iv: Vec<[Extended; 2]> = self.intervals.iter().map(|&(a, b)| [Extended(a), Extended(b)]).collect();
        st.serialize_field("intervals", &iv)?;
        st.serialize_field("level", &self.level)?;
        st.serialize_field("unbounded", &self.is_unbounded())?;
        st.serialize_field("length", &Extended(self.length()))?;
        st.serialize_field("grid", &self.grid)?;
        st.end()
    }
}
