//! Small dense linear algebra kernel: a column-major matrix, Householder QR
//! with column pivoting, and orthogonal projections onto a column span.

use crate::scalar::{dot, Real};

/// Column-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Builds a matrix from equally long columns.
    ///
    /// Panics if the columns differ in length.
    pub fn from_columns(columns: &[Vec<T>]) -> Self {
        let rows = columns.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows * columns.len());
        for c in columns {
            assert_eq!(c.len(), rows, "ragged columns");
            data.extend_from_slice(c);
        }
        Self {
            rows,
            cols: columns.len(),
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.data[j * rows + i] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[j * self.rows + i] = v;
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[T] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [T] {
        let r = self.rows;
        &mut self.data[j * r..(j + 1) * r]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[T]> {
        (0..self.cols).map(move |j| self.col(j))
    }

    pub fn row(&self, i: usize) -> Vec<T> {
        (0..self.cols).map(|j| self.get(i, j)).collect()
    }

    /// `self' v`
    pub fn t_mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.rows);
        self.columns().map(|c| dot(c, v)).collect()
    }

    /// `self w`
    pub fn mul_vec(&self, w: &[T]) -> Vec<T> {
        assert_eq!(w.len(), self.cols);
        let mut out = vec![T::zero(); self.rows];
        for (c, &wj) in self.columns().zip(w) {
            if wj == T::zero() {
                continue;
            }
            for (o, &cij) in out.iter_mut().zip(c) {
                *o += cij * wj;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Self {
        let cols: Vec<Vec<T>> = keep.iter().map(|&j| self.col(j).to_vec()).collect();
        let mut m = Self::from_columns(&cols);
        m.rows = self.rows;
        m
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// Householder QR factorization with column pivoting, `A Π = Q R`.
#[derive(Debug, Clone)]
pub struct PivotedQr<T> {
    rows: usize,
    /// Householder vectors, `reflectors[j]` acts on rows `j..`.
    reflectors: Vec<Vec<T>>,
    betas: Vec<T>,
    r_diag: Vec<T>,
    perm: Vec<usize>,
    rank: usize,
}

impl<T: Real> PivotedQr<T> {
    /// Factorizes `a`. A diagonal entry of `R` counts toward the rank when
    /// its magnitude exceeds `rel_tol` times the largest one.
    pub fn new(a: &Mat<T>, rel_tol: T) -> Self {
        let (n, k) = (a.rows(), a.cols());
        let mut work = a.clone();
        let mut perm: Vec<usize> = (0..k).collect();
        let steps = n.min(k);
        let mut reflectors = Vec::with_capacity(steps);
        let mut betas = Vec::with_capacity(steps);
        let mut r_diag = Vec::with_capacity(steps);

        for j in 0..steps {
            // pivot: remaining column with the largest trailing norm
            let (best, _) = (j..k)
                .map(|c| {
                    let tail = &work.col(c)[j..];
                    (c, dot(tail, tail))
                })
                .fold((j, -T::one()), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
            if best != j {
                perm.swap(j, best);
                for i in 0..n {
                    let tmp = work.get(i, j);
                    work.set(i, j, work.get(i, best));
                    work.set(i, best, tmp);
                }
            }

            let x = &work.col(j)[j..];
            let norm = dot(x, x).sqrt();
            let mut v = x.to_vec();
            let (alpha, beta) = if norm == T::zero() {
                (T::zero(), T::zero())
            } else {
                let alpha = if x[0] >= T::zero() { -norm } else { norm };
                v[0] -= alpha;
                let vtv = dot(&v, &v);
                let beta = if vtv == T::zero() { T::zero() } else { T::lit(2.0) / vtv };
                (alpha, beta)
            };
            r_diag.push(alpha);
            // apply H = I - beta v v' to the trailing columns
            for c in (j + 1)..k {
                let col = &mut work.col_mut(c)[j..];
                let s = beta * dot(&v, col);
                if s != T::zero() {
                    for (ci, &vi) in col.iter_mut().zip(&v) {
                        *ci -= s * vi;
                    }
                }
            }
            reflectors.push(v);
            betas.push(beta);
        }

        let rmax = r_diag.iter().fold(T::zero(), |m, r| m.max(r.abs()));
        let rank = if rmax == T::zero() {
            0
        } else {
            r_diag.iter().take_while(|r| r.abs() > rel_tol * rmax).count()
        };
        Self {
            rows: n,
            reflectors,
            betas,
            r_diag,
            perm,
            rank,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Column permutation: position `j` of the factorization holds original column `perm[j]`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn r_diagonal(&self) -> &[T] {
        &self.r_diag
    }

    /// Orthonormal basis (N × rank) for the numerical column span.
    pub fn orthonormal_basis(&self) -> Mat<T> {
        let n = self.rows;
        let r = self.rank;
        let mut q = Mat::from_fn(n, r, |i, j| if i == j { T::one() } else { T::zero() });
        for j in (0..r).rev() {
            let v = &self.reflectors[j];
            let beta = self.betas[j];
            for c in 0..r {
                let col = &mut q.col_mut(c)[j..];
                let s = beta * dot(v, col);
                if s != T::zero() {
                    for (ci, &vi) in col.iter_mut().zip(v) {
                        *ci -= s * vi;
                    }
                }
            }
        }
        q
    }
}

/// Orthogonal projection `Q Q' v` onto the span of an orthonormal basis.
pub fn project<T: Real>(basis: &Mat<T>, v: &[T]) -> Vec<T> {
    basis.mul_vec(&basis.t_mul_vec(v))
}

/// Least-squares residual `v - Q Q' v`.
pub fn residualize<T: Real>(basis: &Mat<T>, v: &[T]) -> Vec<T> {
    let p = project(basis, v);
    v.iter().zip(&p).map(|(&a, &b)| a - b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    }

    #[test]
    fn basis_is_orthonormal_and_spans_columns() {
        let mut s = 11;
        let a = Mat::from_fn(9, 3, |_, _| lcg(&mut s));
        let qr = PivotedQr::new(&a, 1e-10);
        assert_eq!(qr.rank(), 3);
        let q = qr.orthonormal_basis();
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(q.col(i), q.col(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-13);
            }
        }
        for c in a.columns() {
            let r = residualize(&q, c);
            assert!(norm_inf(&r) < 1e-13);
        }
    }

    #[test]
    fn detects_collinear_column() {
        let mut s = 5;
        let c0: Vec<f64> = (0..7).map(|_| lcg(&mut s)).collect();
        let c1: Vec<f64> = (0..7).map(|_| lcg(&mut s)).collect();
        let c2: Vec<f64> = c0.iter().zip(&c1).map(|(a, b)| 2.0 * a - b).collect();
        let qr = PivotedQr::new(&Mat::from_columns(&[c0, c1, c2]), 1e-10);
        assert_eq!(qr.rank(), 2);
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let qr = PivotedQr::new(&Mat::<f64>::zeros(4, 2), 1e-10);
        assert_eq!(qr.rank(), 0);
        assert_eq!(qr.orthonormal_basis().cols(), 0);
    }

    fn norm_inf(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}
