//! Literal double- and triple-loop oracles over an explicit projection
//! matrix `Z(Z'Z)⁻¹Z'`, plus random test instances.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mwiv::linalg::Mat;
use mwiv::Dataset64;

pub struct Instance {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub p: DMatrix<f64>,
}

impl Instance {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.z.len()
    }

    pub fn mat(&self) -> Mat<f64> {
        Mat::from_columns(&self.z)
    }

    pub fn dataset(&self) -> Dataset64 {
        Dataset64::new(self.y.clone(), self.x.clone(), self.mat()).unwrap()
    }

    pub fn m(&self, i: usize, j: usize) -> f64 {
        (i == j) as u8 as f64 - self.p[(i, j)]
    }

    pub fn ptilde2(&self, i: usize, j: usize) -> f64 {
        let p2 = self.p[(i, j)].powi(2);
        p2 / (self.m(i, i) * self.m(j, j) + self.m(i, j).powi(2))
    }
}

pub fn projection(z: &[Vec<f64>]) -> DMatrix<f64> {
    let n = z[0].len();
    let zm = DMatrix::from_fn(n, z.len(), |i, j| z[j][i]);
    let g = (zm.transpose() * &zm).try_inverse().expect("Z'Z invertible");
    &zm * g * zm.transpose()
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

/// Gaussian instruments with an endogenous regressor and heteroscedastic
/// errors. With `groups`, `Z` is a set of group dummies instead.
pub fn random_instance(seed: u64, groups: bool) -> Instance {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.random_range(8..=32);
    let k = r.random_range(1..=n / 3);
    let z: Vec<Vec<f64>> = if groups {
        let mut cols = vec![vec![0.0; n]; k];
        for i in 0..n {
            cols[i % k][i] = 1.0;
        }
        cols
    } else {
        (0..k).map(|_| (0..n).map(|_| normal(&mut r)).collect()).collect()
    };
    let pi: Vec<f64> = (0..k).map(|_| 0.5 * normal(&mut r)).collect();
    let beta = normal(&mut r);
    let mut y = vec![0.0; n];
    let mut x = vec![0.0; n];
    for i in 0..n {
        let fit: f64 = (0..k).map(|j| z[j][i] * pi[j]).sum();
        let v = normal(&mut r);
        let scale = 0.5 + r.random::<f64>();
        let e = scale * (0.6 * v + 0.8 * normal(&mut r));
        x[i] = fit + v;
        y[i] = beta * x[i] + e;
    }
    let p = projection(&z);
    Instance { y, x, z, p }
}

pub fn implied(inst: &Instance, beta: f64) -> Vec<f64> {
    inst.y.iter().zip(&inst.x).map(|(y, x)| y - beta * x).collect()
}

/// `(M a)_i`
pub fn m_row(inst: &Instance, a: &[f64], i: usize) -> f64 {
    (0..inst.n()).map(|j| inst.m(i, j) * a[j]).sum()
}

/// `Σ_i Σ_{j≠i} P_ij a_i b_j`
pub fn offdiag(inst: &Instance, a: &[f64], b: &[f64]) -> f64 {
    let n = inst.n();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += inst.p[(i, j)] * a[i] * b[j];
            }
        }
    }
    s
}

/// `(2/K) Σ_i Σ_{j≠i} P̃²_ij [a_i (M a)_i][a_j (M a)_j]`
pub fn crossfit(inst: &Instance, a: &[f64]) -> f64 {
    let n = inst.n();
    let t: Vec<f64> = (0..n).map(|i| a[i] * m_row(inst, a, i)).collect();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += inst.ptilde2(i, j) * t[i] * t[j];
            }
        }
    }
    2.0 / inst.k() as f64 * s
}

/// `(2/K) Σ_i Σ_{j≠i} P²_ij a_i² a_j²`
pub fn naive(inst: &Instance, a: &[f64]) -> f64 {
    let n = inst.n();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += inst.p[(i, j)].powi(2) * a[i].powi(2) * a[j].powi(2);
            }
        }
    }
    2.0 / inst.k() as f64 * s
}

pub fn jive_beta(inst: &Instance) -> f64 {
    offdiag(inst, &inst.y, &inst.x) / offdiag(inst, &inst.x, &inst.x)
}

/// The cross-fit JIVE variance, summed literally.
pub fn jive_variance(inst: &Instance) -> f64 {
    let n = inst.n();
    let b = jive_beta(inst);
    let e = implied(inst, b);
    let x = &inst.x;
    let mut first = 0.0;
    for i in 0..n {
        let w: f64 = (0..n).filter(|&j| j != i).map(|j| inst.p[(i, j)] * x[j]).sum();
        first += w * w * e[i] * m_row(inst, &e, i) / inst.m(i, i);
    }
    let mx: Vec<f64> = (0..n).map(|i| m_row(inst, x, i)).collect();
    let mut second = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                second += inst.ptilde2(i, j) * mx[i] * e[i] * mx[j] * e[j];
            }
        }
    }
    let den = offdiag(inst, x, x);
    (first + second) / (den * den)
}

pub fn f_tilde(inst: &Instance) -> f64 {
    let k = inst.k() as f64;
    offdiag(inst, &inst.x, &inst.x) / (k.sqrt() * crossfit(inst, &inst.x).sqrt())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs()
    }
}
