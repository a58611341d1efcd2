//! Hat values, pairwise projection kernels, and the leave-one-out quadratic
//! forms `Σ_{i≠j} κ_ij a_i b_j` that every statistic reduces to.
//!
//! Two representations are supported. When the instruments are mutually
//! exclusive 0/1 group indicators, `P_ij = 1/g` inside a group of size `g`
//! and everything is a per-group closed form. Otherwise the cache keeps an
//! orthonormal basis `Q` of the instrument span (so `P = QQ'`) and either the
//! packed strict upper triangle of `P` or nothing, recomputing row panels of
//! `P` on demand.

use rayon::prelude::*;

use crate::dataio::{rank_tolerance, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{Mat, PivotedQr};
use crate::scalar::{dot, Real};

/// Pairwise weight used by the squared quadratic forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairKernel {
    /// `P_ij²`
    Psq,
    /// `P_ij² / (M_ii M_jj + M_ij²)` with `M_ij = -P_ij`
    PtildeSq,
}

/// Dense storage policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseStorage {
    /// Store the packed upper triangle when it fits in `full_limit_bytes`.
    Auto,
    Full,
    Blocked,
}

#[derive(Debug, Clone, Copy)]
pub struct CacheOptions {
    pub block_rows: usize,
    pub storage: DenseStorage,
    pub full_limit_bytes: usize,
    /// Use the closed forms when `Z` is a set of group indicators.
    pub detect_groups: bool,
}

impl Default for CacheOptions {
    fn default() -> Self {
        Self {
            block_rows: 256,
            storage: DenseStorage::Auto,
            full_limit_bytes: 512 << 20,
            detect_groups: true,
        }
    }
}

#[derive(Debug, Clone)]
enum Repr<T> {
    Groups {
        /// group index per row, `None` for rows with no indicator set
        member: Vec<Option<usize>>,
        sizes: Vec<usize>,
    },
    Dense {
        basis: Mat<T>,
        /// row-major copy of the basis
        rows: Vec<T>,
        /// packed strict upper triangle of `P`, row by row
        packed: Option<Vec<T>>,
    },
}

/// Hat values and pair kernels of `P = Z (Z'Z)^{-1} Z'`.
#[derive(Debug, Clone)]
pub struct ProjectionCache<T> {
    n: usize,
    k: usize,
    hat_p: Vec<T>,
    hat_m: Vec<T>,
    delta_max: T,
    block_rows: usize,
    repr: Repr<T>,
}

/// Outcome of checking the balanced-design condition `max_i P_ii ≤ δ`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BalanceReport {
    pub delta_max: f64,
    pub threshold: f64,
    pub n_above: usize,
    pub balanced: bool,
}

/// Products `w_i = Σ_{j≠i} κ_ij v_j` for a batch of vectors.
#[derive(Debug, Clone, Default)]
pub struct SqProducts<T> {
    pub psq: Vec<Vec<T>>,
    pub ptilde: Vec<Vec<T>>,
}

impl<T: Real> ProjectionCache<T> {
    pub fn build(d: &Dataset<T>) -> Result<Self> {
        Self::from_instruments(d.z(), CacheOptions::default())
    }

    pub fn build_with(d: &Dataset<T>, opts: CacheOptions) -> Result<Self> {
        Self::from_instruments(d.z(), opts)
    }

    pub fn from_instruments(z: &Mat<T>, opts: CacheOptions) -> Result<Self> {
        let (n, k) = (z.rows(), z.cols());
        let block_rows = opts.block_rows.max(1);
        if opts.detect_groups {
            if let Some((member, sizes)) = group_layout(z) {
                let hat_p: Vec<T> = member
                    .iter()
                    .map(|g| g.map_or(T::zero(), |g| T::one() / T::lit(sizes[g] as f64)))
                    .collect();
                return Ok(Self::assemble(n, k, hat_p, block_rows, Repr::Groups { member, sizes }));
            }
        }

        let qr = PivotedQr::new(z, rank_tolerance());
        if qr.rank() < k {
            return Err(Error::RankDeficient { rank: qr.rank(), k });
        }
        let basis = qr.orthonormal_basis();
        let mut rows = vec![T::zero(); n * k];
        for j in 0..k {
            for (i, &v) in basis.col(j).iter().enumerate() {
                rows[i * k + j] = v;
            }
        }
        let hat_p: Vec<T> = rows.chunks_exact(k).map(|r| dot(r, r).min(T::one())).collect();
        let packed_bytes = n * n.saturating_sub(1) / 2 * std::mem::size_of::<T>();
        let store = match opts.storage {
            DenseStorage::Full => true,
            DenseStorage::Blocked => false,
            DenseStorage::Auto => packed_bytes <= opts.full_limit_bytes,
        };
        let packed = store.then(|| pack_upper(&rows, n, k, block_rows));
        Ok(Self::assemble(
            n,
            k,
            hat_p,
            block_rows,
            Repr::Dense {
                basis,
                rows,
                packed,
            },
        ))
    }

    fn assemble(n: usize, k: usize, hat_p: Vec<T>, block_rows: usize, repr: Repr<T>) -> Self {
        let hat_m = hat_p.iter().map(|&p| T::one() - p).collect();
        let delta_max = hat_p.iter().fold(T::zero(), |m, &p| m.max(p));
        Self {
            n,
            k,
            hat_p,
            hat_m,
            delta_max,
            block_rows,
            repr,
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn hat_p(&self) -> &[T] {
        &self.hat_p
    }

    #[inline]
    pub fn hat_m(&self) -> &[T] {
        &self.hat_m
    }

    #[inline]
    pub fn delta_max(&self) -> T {
        self.delta_max
    }

    pub fn is_group(&self) -> bool {
        matches!(self.repr, Repr::Groups { .. })
    }

    pub fn stores_full(&self) -> bool {
        matches!(self.repr, Repr::Dense { packed: Some(_), .. })
    }

    /// Group sizes when the group representation is in use.
    pub fn group_sizes(&self) -> Option<&[usize]> {
        match &self.repr {
            Repr::Groups { sizes, .. } => Some(sizes),
            Repr::Dense { .. } => None,
        }
    }

    /// `P_ij`
    pub fn p(&self, i: usize, j: usize) -> T {
        if i == j {
            return self.hat_p[i];
        }
        match &self.repr {
            Repr::Groups { member, sizes } => match (member[i], member[j]) {
                (Some(a), Some(b)) if a == b => T::one() / T::lit(sizes[a] as f64),
                _ => T::zero(),
            },
            Repr::Dense { rows, packed, .. } => {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                match packed {
                    Some(p) => p[packed_index(self.n, a, b)],
                    None => dot(&rows[a * self.k..(a + 1) * self.k], &rows[b * self.k..(b + 1) * self.k]),
                }
            }
        }
    }

    /// `M_ij` for `i ≠ j` is `-P_ij`; on the diagonal it is `1 - P_ii`.
    pub fn m(&self, i: usize, j: usize) -> T {
        if i == j {
            self.hat_m[i]
        } else {
            -self.p(i, j)
        }
    }

    /// Pair kernel value for `i ≠ j`.
    pub fn kernel(&self, i: usize, j: usize, kind: PairKernel) -> T {
        let p = self.p(i, j);
        let p2 = p * p;
        match kind {
            PairKernel::Psq => p2,
            PairKernel::PtildeSq => ptilde(p2, self.hat_m[i], self.hat_m[j]),
        }
    }

    /// `P v`
    pub fn project(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.n);
        match &self.repr {
            Repr::Groups { member, sizes } => {
                let sums = group_sums(member, sizes.len(), v);
                member
                    .iter()
                    .map(|g| g.map_or(T::zero(), |g| sums[g] / T::lit(sizes[g] as f64)))
                    .collect()
            }
            Repr::Dense { basis, .. } => crate::linalg::project(basis, v),
        }
    }

    /// `M v = v - P v`
    pub fn annihilate(&self, v: &[T]) -> Vec<T> {
        let p = self.project(v);
        v.iter().zip(&p).map(|(&a, &b)| a - b).collect()
    }

    /// `w_i = Σ_{j≠i} P_ij v_j`
    pub fn offdiag_apply(&self, v: &[T]) -> Vec<T> {
        let mut p = self.project(v);
        for ((pi, &h), &vi) in p.iter_mut().zip(&self.hat_p).zip(v) {
            *pi -= h * vi;
        }
        p
    }

    /// `Σ_{i≠j} P_ij a_i b_j`, evaluated as `a'Pb − Σ_i P_ii a_i b_i`.
    pub fn qform_offdiag(&self, a: &[T], b: &[T]) -> T {
        assert_eq!(a.len(), self.n);
        assert_eq!(b.len(), self.n);
        let pb = self.project(b);
        let mut s = T::zero();
        for i in 0..self.n {
            s += a[i] * (pb[i] - self.hat_p[i] * b[i]);
        }
        s
    }

    /// `Σ_{i≠j} κ_ij a_i b_j` for `κ = P²` or `κ = P̃²`.
    pub fn qform_sq_offdiag(&self, a: &[T], b: &[T], kind: PairKernel) -> T {
        assert_eq!(a.len(), self.n);
        let prods = self.sq_apply(&[b], kind == PairKernel::Psq, kind == PairKernel::PtildeSq);
        let w = match kind {
            PairKernel::Psq => &prods.psq[0],
            PairKernel::PtildeSq => &prods.ptilde[0],
        };
        dot(a, w)
    }

    /// Applies the off-diagonal squared kernels to a batch of vectors in a
    /// single pass over the pairs.
    pub fn sq_apply(&self, vs: &[&[T]], want_psq: bool, want_ptilde: bool) -> SqProducts<T> {
        for v in vs {
            assert_eq!(v.len(), self.n);
        }
        if vs.is_empty() || !(want_psq || want_ptilde) {
            return SqProducts::default();
        }
        match &self.repr {
            Repr::Groups { member, sizes } => group_sq_apply(member, sizes, vs, want_psq, want_ptilde),
            Repr::Dense { rows, packed, .. } => {
                self.dense_sq_apply(rows, packed.as_deref(), vs, want_psq, want_ptilde)
            }
        }
    }

    fn dense_sq_apply(
        &self,
        rows: &[T],
        packed: Option<&[T]>,
        vs: &[&[T]],
        want_psq: bool,
        want_ptilde: bool,
    ) -> SqProducts<T> {
        let (n, k, m) = (self.n, self.k, vs.len());
        // interleaved copy of the inputs: inter[j * m + c] = vs[c][j]
        let mut inter = vec![T::zero(); n * m];
        for (c, v) in vs.iter().enumerate() {
            for (j, &x) in v.iter().enumerate() {
                inter[j * m + c] = x;
            }
        }
        let hat_m = &self.hat_m;
        let blocks: Vec<(usize, usize)> = (0..n)
            .step_by(self.block_rows)
            .map(|r0| (r0, (r0 + self.block_rows).min(n)))
            .collect();

        let partials: Vec<(Vec<T>, Vec<T>)> = blocks
            .par_iter()
            .map(|&(r0, r1)| {
                let mut acc_sq = if want_psq { vec![T::zero(); n * m] } else { Vec::new() };
                let mut acc_pt = if want_ptilde { vec![T::zero(); n * m] } else { Vec::new() };
                let mut panel = Vec::new();
                for i in r0..r1 {
                    let row: &[T] = match packed {
                        Some(p) => {
                            let start = i * (2 * n - i - 1) / 2;
                            &p[start..start + (n - 1 - i)]
                        }
                        None => {
                            panel.clear();
                            let qi = &rows[i * k..(i + 1) * k];
                            panel.extend((i + 1..n).map(|j| dot(qi, &rows[j * k..(j + 1) * k])));
                            &panel
                        }
                    };
                    let mi = hat_m[i];
                    for (off, &p) in row.iter().enumerate() {
                        let p2 = p * p;
                        if p2 == T::zero() {
                            continue;
                        }
                        let j = i + 1 + off;
                        if want_psq {
                            pair_update(&mut acc_sq, &inter, m, i, j, p2);
                        }
                        if want_ptilde {
                            pair_update(&mut acc_pt, &inter, m, i, j, ptilde(p2, mi, hat_m[j]));
                        }
                    }
                }
                (acc_sq, acc_pt)
            })
            .collect();

        // fixed reduction order
        let mut sq = if want_psq { vec![T::zero(); n * m] } else { Vec::new() };
        let mut pt = if want_ptilde { vec![T::zero(); n * m] } else { Vec::new() };
        for (a, b) in partials {
            for (s, x) in sq.iter_mut().zip(a) {
                *s += x;
            }
            for (s, x) in pt.iter_mut().zip(b) {
                *s += x;
            }
        }
        let split = |flat: Vec<T>| -> Vec<Vec<T>> {
            if flat.is_empty() {
                return Vec::new();
            }
            (0..m).map(|c| (0..n).map(|j| flat[j * m + c]).collect()).collect()
        };
        SqProducts {
            psq: split(sq),
            ptilde: split(pt),
        }
    }

    /// `Σ_{i≠j} P_ij² = K − Σ_i P_ii²` (idempotence and symmetry of `P`).
    pub fn offdiag_psq_total(&self) -> T {
        T::lit(self.k as f64) - self.hat_p.iter().map(|&p| p * p).sum::<T>()
    }

    /// Checks `(1−δ) ≤ (1/K) Σ_{i≠j} P_ij² ≤ 1` with `δ = max_i P_ii`.
    pub fn kernel_bounds_hold(&self) -> bool {
        let k = T::lit(self.k as f64);
        let avg = self.offdiag_psq_total() / k;
        let slack = T::lit(1e-9).max(T::lit(64.0) * T::epsilon());
        avg <= T::one() + slack && avg >= T::one() - self.delta_max - slack
    }

    pub fn check_balance(&self, threshold: f64) -> BalanceReport {
        let n_above = self.hat_p.iter().filter(|p| p.to_f64_lossy() > threshold).count();
        BalanceReport {
            delta_max: self.delta_max.to_f64_lossy(),
            threshold,
            n_above,
            balanced: n_above == 0,
        }
    }
}

/// Adds the symmetric pair `(i, j)` with weight `w` to both rows.
#[inline]
fn pair_update<T: Real>(acc: &mut [T], inter: &[T], m: usize, i: usize, j: usize, w: T) {
    for c in 0..m {
        let (vi, vj) = (inter[i * m + c], inter[j * m + c]);
        acc[i * m + c] += w * vj;
        acc[j * m + c] += w * vi;
    }
}

#[inline]
fn ptilde<T: Real>(p2: T, mi: T, mj: T) -> T {
    let den = mi * mj + p2;
    if den == T::zero() {
        T::zero()
    } else {
        p2 / den
    }
}

/// Offset of `P_ab` (a < b) in the packed strict upper triangle.
#[inline]
fn packed_index(n: usize, a: usize, b: usize) -> usize {
    debug_assert!(a < b && b < n);
    a * (2 * n - a - 1) / 2 + (b - a - 1)
}

fn pack_upper<T: Real>(rows: &[T], n: usize, k: usize, block_rows: usize) -> Vec<T> {
    let row_chunks: Vec<Vec<T>> = (0..n)
        .step_by(block_rows)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&r0| {
            let r1 = (r0 + block_rows).min(n);
            let mut out = Vec::new();
            for i in r0..r1 {
                let qi = &rows[i * k..(i + 1) * k];
                out.extend((i + 1..n).map(|j| dot(qi, &rows[j * k..(j + 1) * k])));
            }
            out
        })
        .collect();
    let mut packed = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for c in row_chunks {
        packed.extend(c);
    }
    packed
}

/// Recognizes mutually exclusive 0/1 group indicators.
fn group_layout<T: Real>(z: &Mat<T>) -> Option<(Vec<Option<usize>>, Vec<usize>)> {
    let (n, k) = (z.rows(), z.cols());
    let mut member = vec![None; n];
    let mut sizes = vec![0usize; k];
    for (g, col) in z.columns().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            if v == T::one() {
                if member[i].is_some() {
                    return None;
                }
                member[i] = Some(g);
                sizes[g] += 1;
            } else if v != T::zero() {
                return None;
            }
        }
    }
    if sizes.iter().any(|&s| s == 0) {
        return None;
    }
    Some((member, sizes))
}

fn group_sums<T: Real>(member: &[Option<usize>], groups: usize, v: &[T]) -> Vec<T> {
    let mut sums = vec![T::zero(); groups];
    for (g, &x) in member.iter().zip(v) {
        if let Some(g) = g {
            sums[*g] += x;
        }
    }
    sums
}

fn group_sq_apply<T: Real>(
    member: &[Option<usize>],
    sizes: &[usize],
    vs: &[&[T]],
    want_psq: bool,
    want_ptilde: bool,
) -> SqProducts<T> {
    // inside a group of size g: P_ij = 1/g, M_ii = 1 − 1/g, M_ij = −1/g
    let weights: Vec<(T, T)> = sizes
        .iter()
        .map(|&g| {
            let inv = T::one() / T::lit(g as f64);
            let p2 = inv * inv;
            let m = T::one() - inv;
            (p2, ptilde(p2, m, m))
        })
        .collect();
    let mut out = SqProducts::default();
    for v in vs {
        let sums = group_sums(member, sizes.len(), v);
        let apply = |pick: fn(&(T, T)) -> T| -> Vec<T> {
            member
                .iter()
                .zip(v.iter())
                .map(|(g, &vi)| g.map_or(T::zero(), |g| pick(&weights[g]) * (sums[g] - vi)))
                .collect()
        };
        if want_psq {
            out.psq.push(apply(|w| w.0));
        }
        if want_ptilde {
            out.ptilde.push(apply(|w| w.1));
        }
    }
    out
}

/// Group-indicator instrument matrix for the given group of each row.
pub fn group_indicators<T: Real>(groups: &[usize], k: usize) -> Mat<T> {
    let mut z = Mat::zeros(groups.len(), k);
    for (i, &g) in groups.iter().enumerate() {
        z.set(i, g, T::one());
    }
    z
}
