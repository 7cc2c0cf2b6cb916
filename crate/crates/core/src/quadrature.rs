//! Adaptive Gauss–Kronrod quadrature.
//!
//! A 7/15-point Gauss–Kronrod pair with global error-driven bisection, plus
//! a frozen-partition mode. The latter integrates on a fixed set of panels so
//! that the result is a smooth function of any parameter the integrand
//! depends on, which is what finite differences of a quadrature marginal need.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];

// Gauss weights for the odd Kronrod nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    roundoff: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}

impl Eq for Panel {}

impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Panel {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    let mut abs_sum = kronrod.abs();
    let mut values = [0.0_f64; 14];
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        values[2 * j] = f1;
        values[2 * j + 1] = f2;
        kronrod += WGK[j] * (f1 + f2);
        abs_sum += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * kronrod;
    let mut asc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        asc += WGK[j] * ((values[2 * j] - mean).abs() + (values[2 * j + 1] - mean).abs());
    }
    let value = kronrod * half;
    let abs_value = abs_sum * half.abs();
    let asc = asc * half.abs();
    let mut error = ((kronrod - gauss) * half).abs();
    if asc != 0.0 && error != 0.0 {
        error = asc * (200.0 * error / asc).powf(1.5).min(1.0);
    }
    let roundoff = 50.0 * f64::EPSILON * abs_value;
    if roundoff > f64::MIN_POSITIVE {
        error = error.max(roundoff);
    }
    Panel {
        a,
        b,
        value,
        error,
        roundoff,
    }
}

/// Result of an integration: estimate, error estimate and panel count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub intervals: usize,
}

/// Tolerances for adaptive integration.
///
/// A panel set is accepted once the summed error estimate falls below
/// `max(abs_tol, rel_tol · |value|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-12,
            max_intervals: 4000,
        }
    }
}

impl Quadrature {
    pub fn new(abs_tol: f64, rel_tol: f64) -> Self {
        Self {
            abs_tol,
            rel_tol,
            ..Self::default()
        }
    }

    /// `∫ f` over `[lo, hi]`, with optional interior breakpoints.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, lo: f64, hi: f64) -> Result<Integral> {
        self.integrate_with_breaks(f, &[lo, hi])
    }

    /// `∫ f` over `[points[0], points[last]]`, initially split at every point.
    pub fn integrate_with_breaks<F: Fn(f64) -> f64>(&self, f: F, points: &[f64]) -> Result<Integral> {
        let (panels, total) = self.refine(&f, points)?;
        Ok(Integral {
            value: total.value,
            error: total.error,
            intervals: panels.len(),
        })
    }

    /// `∫ f` over `[lo, ∞)` through `x = lo + s/(1−s)`.
    pub fn integrate_semi_infinite<F: Fn(f64) -> f64>(&self, f: F, lo: f64) -> Result<Integral> {
        let g = |s: f64| {
            let one_minus = 1.0 - s;
            let x = lo + s / one_minus;
            let v = f(x);
            if v == 0.0 {
                0.0
            } else {
                v / (one_minus * one_minus)
            }
        };
        self.integrate(g, 0.0, 1.0)
    }

    /// Adaptive partition of `[points[0], points[last]]` for `f`.
    ///
    /// Feeding the partition to [`Quadrature::fixed`] with a perturbed
    /// integrand gives a result that depends smoothly on the perturbation.
    pub fn partition<F: Fn(f64) -> f64>(&self, f: F, points: &[f64]) -> Result<Vec<(f64, f64)>> {
        let (mut panels, _) = self.refine(&f, points)?;
        panels.sort_by(|p, q| p.a.total_cmp(&q.a));
        Ok(panels.into_iter().map(|p| (p.a, p.b)).collect())
    }

    /// Kronrod sum of `f` over a frozen partition.
    pub fn fixed<F: Fn(f64) -> f64>(f: F, partition: &[(f64, f64)]) -> Integral {
        let mut value = 0.0;
        let mut error = 0.0;
        for &(a, b) in partition {
            let p = kronrod15(&f, a, b);
            value += p.value;
            error += p.error;
        }
        Integral {
            value,
            error,
            intervals: partition.len(),
        }
    }

    /// Kronrod nodes and weights of a frozen partition, for integrating
    /// several integrands that share expensive factors.
    pub fn nodes(partition: &[(f64, f64)]) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(15 * partition.len());
        for &(a, b) in partition {
            let c = 0.5 * (a + b);
            let h = 0.5 * (b - a);
            for j in 0..7 {
                out.push((c - h * XGK[j], h * WGK[j]));
                out.push((c + h * XGK[j], h * WGK[j]));
            }
            out.push((c, h * WGK[7]));
        }
        out
    }

    fn refine<F: Fn(f64) -> f64>(&self, f: &F, points: &[f64]) -> Result<(Vec<Panel>, Integral)> {
        if points.len() < 2 {
            return Err(Error::domain("integration needs at least two end points"));
        }
        if points.iter().any(|p| p.is_nan()) || points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain(format!(
                "integration points must be strictly increasing, got {points:?}"
            )));
        }
        let mut heap = BinaryHeap::new();
        let mut value = 0.0;
        let mut error = 0.0;
        let mut roundoff = 0.0;
        for w in points.windows(2) {
            let p = kronrod15(f, w[0], w[1]);
            value += p.value;
            error += p.error;
            roundoff += p.roundoff;
            heap.push(p);
        }
        // Error estimates never fall below the accumulated rounding floor.
        while error > self.abs_tol.max(self.rel_tol * value.abs()).max(1.01 * roundoff) {
            if heap.len() >= self.max_intervals || !value.is_finite() {
                return Err(Error::Quadrature {
                    value,
                    error,
                    intervals: heap.len(),
                });
            }
            let worst = heap.pop().expect("heap holds at least one panel");
            let mid = 0.5 * (worst.a + worst.b);
            if mid <= worst.a || mid >= worst.b {
                // Panel is at floating-point resolution; accept its error as is.
                heap.push(worst);
                return Err(Error::Quadrature {
                    value,
                    error,
                    intervals: heap.len(),
                });
            }
            let left = kronrod15(f, worst.a, mid);
            let right = kronrod15(f, mid, worst.b);
            value += left.value + right.value - worst.value;
            error += left.error + right.error - worst.error;
            roundoff += left.roundoff + right.roundoff - worst.roundoff;
            heap.push(left);
            heap.push(right);
        }
        // Re-sum to remove drift from the running updates.
        let panels: Vec<Panel> = heap.into_vec();
        let value = panels.iter().map(|p| p.value).sum();
        let error = panels.iter().map(|p| p.error).sum();
        let intervals = panels.len();
        Ok((
            panels,
            Integral {
                value,
                error,
                intervals,
            },
        ))
    }
}

/// Breakpoints for `[lo, hi]`: uniform when the interval is narrow relative
/// to its position, geometric otherwise, so that a single wide panel cannot
/// step over a narrow peak.
pub fn spread_breaks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(1);
    let mut pts = Vec::with_capacity(n + 2);
    if lo > 0.0 && hi / lo > 10.0 {
        let (a, b) = (lo.ln(), hi.ln());
        for i in 0..=n {
            pts.push((a + (b - a) * i as f64 / n as f64).exp());
        }
    } else if lo == 0.0 && hi > 0.0 {
        pts.push(0.0);
        let a = (hi * 1e-8).ln();
        let b = hi.ln();
        for i in 0..=n {
            pts.push((a + (b - a) * i as f64 / n as f64).exp());
        }
    } else {
        for i in 0..=n {
            pts.push(lo + (hi - lo) * i as f64 / n as f64);
        }
    }
    pts[0] = lo;
    let last = pts.len() - 1;
    pts[last] = hi;
    pts.dedup();
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        let q = Quadrature::default();
        let r = q.integrate(|x| x.powi(5) - 2.0 * x * x + 1.0, -1.0, 2.0).unwrap();
        let exact = (64.0 - 1.0) / 6.0 - 2.0 * (8.0 + 1.0) / 3.0 + 3.0;
        assert!((r.value - exact).abs() < 1e-13);
        assert_eq!(r.intervals, 1);
    }

    #[test]
    fn gaussian_over_half_line() {
        let q = Quadrature::default();
        let r = q
            .integrate_semi_infinite(|x| (-0.5 * x * x).exp(), 0.0)
            .unwrap();
        let exact = (std::f64::consts::PI / 2.0).sqrt();
        assert!((r.value - exact).abs() < 1e-10, "{}", r.value);
    }

    #[test]
    fn square_root_singularity() {
        let q = Quadrature::new(1e-12, 1e-12);
        let r = q.integrate(|x| 1.0 / x.sqrt(), 0.0, 1.0).unwrap();
        assert!((r.value - 2.0).abs() < 1e-10);
    }

    #[test]
    fn frozen_partition_reproduces_adaptive_value() {
        let q = Quadrature::default();
        let f = |x: f64| (-(x - 3.0).powi(2) * 40.0).exp();
        let parts = q.partition(f, &[0.0, 10.0]).unwrap();
        let adaptive = q.integrate(f, 0.0, 10.0).unwrap();
        let frozen = Quadrature::fixed(f, &parts);
        assert!((adaptive.value - frozen.value).abs() < 1e-14);
        assert!(parts.windows(2).all(|w| w[0].1 == w[1].0));
    }

    #[test]
    fn rejects_bad_bounds() {
        let q = Quadrature::default();
        assert!(q.integrate(|x| x, 1.0, 0.0).is_err());
        assert!(q.integrate(|x| x, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn reports_non_convergence() {
        let q = Quadrature {
            abs_tol: 1e-14,
            rel_tol: 0.0,
            max_intervals: 8,
        };
        match q.integrate(|x| (1.0 / x).sin(), 1e-6, 1.0) {
            Err(Error::Quadrature { intervals, .. }) => assert!(intervals <= 9),
            other => panic!("expected quadrature error, got {other:?}"),
        }
    }
}
