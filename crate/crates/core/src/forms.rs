//! Every statistic of the jackknife family, collected from one pass over
//! the pairs.
//!
//! With `e(β) = Y − βX` the cross-fit bracket `e_i (M e)_i` is a quadratic
//! in β with coefficient vectors `A0 = Y∘MY`, `A1 = Y∘MX + X∘MY` and
//! `A2 = X∘MX`, and `e_i²` is a quadratic in `Y², XY, X²`. The AR numerator
//! and both variance estimators are therefore polynomials in β whose
//! coefficients are a handful of pair sums. JIVE's variance additionally
//! needs `B = Y∘MX` and the leave-one-out first-stage fits.

use crate::error::{Error, Result};
use crate::kernels::ProjectionCache;
use crate::scalar::{dot, hadamard, Real};

#[derive(Debug, Clone)]
pub struct JackknifeForms<T> {
    k: T,
    q_yy: T,
    q_xy: T,
    q_xx: T,
    /// `Σ_i P_ii X_i²`
    d_xx: T,
    /// `Σ_{i≠j} P̃²_ij u_i v_j` over `u, v ∈ {A0, A1, A2, B}`
    cross: [[T; 4]; 4],
    /// `Σ_{i≠j} P²_ij u_i v_j` over `u, v ∈ {Y², XY, X²}`
    naive: [[T; 3]; 3],
    /// `Σ_i w_i² A_ki / M_ii` with `w_i = Σ_{j≠i} P_ij X_j`
    lev: [T; 3],
}

impl<T: Real> JackknifeForms<T> {
    /// Requires `M_ii > 0` for every observation.
    pub fn new(c: &ProjectionCache<T>, y: &[T], x: &[T]) -> Result<Self> {
        check_hat_m(c)?;
        let my = c.annihilate(y);
        let mx = c.annihilate(x);
        let a0 = hadamard(y, &my);
        let a1: Vec<T> = (0..y.len()).map(|i| y[i] * mx[i] + x[i] * my[i]).collect();
        let a2 = hadamard(x, &mx);
        let b = hadamard(y, &mx);
        let y2 = hadamard(y, y);
        let xy = hadamard(x, y);
        let x2 = hadamard(x, x);

        let prods = c.sq_apply(&[&a0, &a1, &a2, &b], false, true);
        let cross_in = [&a0, &a1, &a2, &b];
        let mut cross = [[T::zero(); 4]; 4];
        for (r, u) in cross_in.iter().enumerate() {
            for (s, w) in prods.ptilde.iter().enumerate() {
                cross[r][s] = dot(u, w);
            }
        }
        symmetrize(&mut cross);

        let prods = c.sq_apply(&[&y2, &xy, &x2], true, false);
        let naive_in = [&y2, &xy, &x2];
        let mut naive = [[T::zero(); 3]; 3];
        for (r, u) in naive_in.iter().enumerate() {
            for (s, w) in prods.psq.iter().enumerate() {
                naive[r][s] = dot(u, w);
            }
        }
        symmetrize(&mut naive);

        let w = c.offdiag_apply(x);
        let mut lev = [T::zero(); 3];
        for (l, a) in lev.iter_mut().zip([&a0, &a1, &a2]) {
            *l = (0..w.len()).map(|i| w[i] * w[i] * a[i] / c.hat_m()[i]).sum();
        }

        Ok(Self {
            k: T::lit(c.k() as f64),
            q_yy: dot(y, &c.offdiag_apply(y)),
            q_xy: dot(y, &w),
            q_xx: dot(x, &w),
            d_xx: (0..x.len()).map(|i| c.hat_p()[i] * x[i] * x[i]).sum(),
            cross,
            naive,
            lev,
        })
    }

    pub fn k(&self) -> T {
        self.k
    }

    /// `Σ_{i≠j} P_ij e_i(β) e_j(β)`
    pub fn ar_numerator(&self, beta: T) -> T {
        self.q_yy - T::lit(2.0) * beta * self.q_xy + beta * beta * self.q_xx
    }

    /// Cross-fit `Φ̂(β)`.
    pub fn crossfit_phi(&self, beta: T) -> T {
        let u = [T::one(), -beta, beta * beta, T::zero()];
        T::lit(2.0) / self.k * bilinear(&self.cross, &u)
    }

    /// Naive `Φ̂₁(β)`.
    pub fn naive_phi(&self, beta: T) -> T {
        let u = [T::one(), -T::lit(2.0) * beta, beta * beta];
        T::lit(2.0) / self.k * bilinear(&self.naive, &u)
    }

    /// `Σ_{i≠j} P_ij Y_i X_j`
    pub fn jive_numerator(&self) -> T {
        self.q_xy
    }

    /// `Σ_{i≠j} P_ij X_i X_j`
    pub fn jive_denominator(&self) -> T {
        self.q_xx
    }

    /// `Σ_i P_ii X_i²`, the diagonal part dropped from the denominator.
    pub fn jive_denominator_diagonal(&self) -> T {
        self.d_xx
    }

    /// Unnormalized cross-fit JIVE variance numerator at `beta`; divide by
    /// the squared denominator to get `V̂`.
    pub fn jive_variance_numerator(&self, beta: T) -> T {
        let u = [T::one(), -beta, beta * beta];
        let first: T = (0..3).map(|k| u[k] * self.lev[k]).sum();
        let second = self.cross[3][3] - T::lit(2.0) * beta * self.cross[3][2] + beta * beta * self.cross[2][2];
        first + second
    }

    /// Cross-fit `Υ̂`.
    pub fn upsilon(&self) -> T {
        T::lit(2.0) / self.k * self.cross[2][2]
    }

    /// Naive `Υ̂₁ = (2/K) Σ_{i≠j} P²_ij X_i² X_j²`.
    pub fn upsilon_naive(&self) -> T {
        T::lit(2.0) / self.k * self.naive[2][2]
    }
}

pub(crate) fn check_hat_m<T: Real>(c: &ProjectionCache<T>) -> Result<()> {
    let tiny = T::lit(64.0) * T::epsilon();
    match c.hat_m().iter().position(|&m| m <= tiny) {
        Some(index) => Err(Error::DivideByZeroHatValue { index }),
        None => Ok(()),
    }
}

fn symmetrize<T: Real, const N: usize>(m: &mut [[T; N]; N]) {
    let half = T::lit(0.5);
    for r in 0..N {
        for s in r + 1..N {
            let v = half * (m[r][s] + m[s][r]);
            m[r][s] = v;
            m[s][r] = v;
        }
    }
}

fn bilinear<T: Real, const N: usize>(m: &[[T; N]; N], u: &[T; N]) -> T {
    let mut s = T::zero();
    for r in 0..N {
        for c in 0..N {
            s += u[r] * u[c] * m[r][c];
        }
    }
    s
}
