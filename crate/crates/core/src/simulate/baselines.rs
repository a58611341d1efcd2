//! OLS and two-stage least squares with heteroscedasticity-robust (HC0)
//! standard errors, used only as comparison columns in studies.

use crate::kernels::ProjectionCache;
use crate::scalar::dot;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub beta: f64,
    pub se: f64,
}

impl Estimate {
    pub fn t(&self, beta0: f64) -> f64 {
        (self.beta - beta0) / self.se
    }
}

/// OLS slope with an intercept.
pub fn ols(y: &[f64], x: &[f64]) -> Estimate {
    let n = y.len() as f64;
    let (my, mx) = (y.iter().sum::<f64>() / n, x.iter().sum::<f64>() / n);
    let xc: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
    let sxx = dot(&xc, &xc);
    let beta = dot(&xc, &yc) / sxx;
    let meat: f64 = xc.iter().zip(&yc).map(|(&a, &b)| (a * (b - beta * a)).powi(2)).sum();
    Estimate {
        beta,
        se: meat.sqrt() / sxx,
    }
}

/// `β̂ = X'PY / X'PX` with sandwich variance `Σ (PX)_i² û_i² / (X'PX)²`.
pub fn tsls(c: &ProjectionCache<f64>, y: &[f64], x: &[f64]) -> Estimate {
    let px = c.project(x);
    let den = dot(&px, x);
    let beta = dot(&px, y) / den;
    let meat: f64 = (0..y.len()).map(|i| (px[i] * (y[i] - beta * x[i])).powi(2)).sum();
    Estimate {
        beta,
        se: meat.sqrt() / den,
    }
}
