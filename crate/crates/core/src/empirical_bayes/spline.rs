use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats::quantile_sorted;

/// Natural cubic spline least-squares fit with `df` basis functions.
///
/// The basis is the truncated-power one of Hastie, Tibshirani and Friedman:
/// `1, u, d₁ − d_{K−1}, …, d_{K−2} − d_{K−1}` with
/// `d_k(u) = ((u − κ_k)³₊ − (u − κ_K)³₊)/(κ_K − κ_k)` on `K = df` knots, in a
/// coordinate `u` that maps the outer knots to 0 and 1. Every basis element
/// is linear outside the outer knots, which gives the linear tails.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineScore {
    /// Knots in data coordinates.
    pub knots: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub df: usize,
}

impl SplineScore {
    /// Least-squares fit of `y` on the basis, knots at equally spaced
    /// quantiles of `x`.
    pub fn fit(x: &[f64], y: &[f64], df: usize) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::domain("spline fit needs x and y of equal length"));
        }
        if df < 2 {
            return Err(Error::domain(format!("spline needs df ≥ 2, got {df}")));
        }
        if x.len() < df + 1 {
            return Err(Error::RankDeficient(format!(
                "{} points cannot support a spline with {df} degrees of freedom; lower df",
                x.len()
            )));
        }
        let sorted = crate::stats::sorted(x);
        let knots: Vec<f64> = (0..df)
            .map(|j| quantile_sorted(&sorted, j as f64 / (df - 1) as f64))
            .collect();
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::RankDeficient(format!(
                "knots at quantiles of x are not distinct; lower df below {df}"
            )));
        }
        let mut model = Self {
            knots,
            coefficients: vec![0.0; df],
            df,
        };
        let design = DMatrix::from_fn(x.len(), df, |i, j| model.basis(x[i])[j]);
        let rhs = DVector::from_column_slice(y);
        let svd = design.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-12 * smax) {
            return Err(Error::RankDeficient(format!(
                "spline design has singular values down to {smin:e} (max {smax:e}); lower df"
            )));
        }
        let c = svd
            .solve(&rhs, 0.0)
            .map_err(|e| Error::RankDeficient(e.to_string()))?;
        model.coefficients = c.iter().copied().collect();
        Ok(model)
    }

    fn unit(&self) -> (f64, f64) {
        let a = self.knots[0];
        let b = self.knots[self.df - 1];
        (a, b - a)
    }

    fn basis(&self, x: f64) -> Vec<f64> {
        self.basis_with(x, |d, k_span| d.max(0.0).powi(3) / k_span)
    }

    fn basis_deriv(&self, x: f64) -> Vec<f64> {
        let mut out = self.basis_with(x, |d, k_span| 3.0 * d.max(0.0).powi(2) / k_span);
        out[0] = 0.0;
        out[1] = 1.0;
        out
    }

    fn basis_with<F: Fn(f64, f64) -> f64>(&self, x: f64, f: F) -> Vec<f64> {
        let (a, w) = self.unit();
        let u = (x - a) / w;
        let k = self.df;
        let kappa: Vec<f64> = self.knots.iter().map(|v| (v - a) / w).collect();
        let last = kappa[k - 1];
        let d = |j: usize| {
            let span = last - kappa[j];
            f(u - kappa[j], span) - f(u - last, span)
        };
        let mut out = Vec::with_capacity(k);
        out.push(1.0);
        out.push(u);
        if k > 2 {
            let tail = d(k - 2);
            for j in 0..k - 2 {
                out.push(d(j) - tail);
            }
        }
        out
    }

    /// The fitted curve.
    pub fn eval(&self, x: f64) -> f64 {
        dot(&self.basis(x), &self.coefficients)
    }

    /// Its derivative, the score estimate.
    pub fn deriv(&self, x: f64) -> f64 {
        dot(&self.basis_deriv(x), &self.coefficients) / self.unit().1
    }

    /// Whether `x` lies outside the outer knots, where the fit is linear.
    pub fn extrapolates(&self, x: f64) -> bool {
        x < self.knots[0] || x > self.knots[self.df - 1]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
