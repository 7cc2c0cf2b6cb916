//! Time-dependent coefficients with exact running integrals.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quadrature::Quadrature;

/// Which running integral [`CoefficientSchedule::integral`] reports.
///
/// Diffusion coefficients enter the transition laws through `∫σ²`, drift
/// coefficients through `∫α` or `∫μ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegralKind {
    SigmaSquared,
    Plain,
}

/// Functional form of a schedule.
#[derive(Clone)]
pub enum Shape {
    Constant(f64),
    /// `a + b·t`
    Affine { a: f64, b: f64 },
    /// `a + b·t^p`, `p > −1`
    Power { a: f64, b: f64, p: f64 },
    /// `a·b^t`, `b > 0`
    Exponential { a: f64, b: f64 },
    /// `scale·base(t)² + offset`, e.g. `μ = σ²/2 − 0.25`
    ScaledSquare {
        base: Box<Shape>,
        scale: f64,
        offset: f64,
    },
    /// `√(scale·base(t))`, e.g. `σ = √(2α)`
    ScaledSqrt { base: Box<Shape>, scale: f64 },
    /// Arbitrary integrand; integrals fall back to adaptive quadrature.
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Constant(c) => write!(f, "Constant({c})"),
            Shape::Affine { a, b } => write!(f, "Affine({a} + {b}·t)"),
            Shape::Power { a, b, p } => write!(f, "Power({a} + {b}·t^{p})"),
            Shape::Exponential { a, b } => write!(f, "Exponential({a}·{b}^t)"),
            Shape::ScaledSquare {
                base,
                scale,
                offset,
            } => write!(f, "ScaledSquare({scale}·{base:?}² + {offset})"),
            Shape::ScaledSqrt { base, scale } => write!(f, "ScaledSqrt(√({scale}·{base:?}))"),
            Shape::Custom(_) => write!(f, "Custom"),
        }
    }
}

fn quad_integral<F: Fn(f64) -> f64>(f: F, t: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    let q = Quadrature::new(0.0, 1e-13);
    match q.integrate(&f, 0.0, t) {
        Ok(r) => r.value,
        // Loose fallback: a slightly less accurate answer beats none for a user schedule.
        Err(Error::Quadrature { value, .. }) => value,
        Err(_) => f64::NAN,
    }
}

impl Shape {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Shape::Constant(c) => *c,
            Shape::Affine { a, b } => a + b * t,
            Shape::Power { a, b, p } => a + b * t.powf(*p),
            Shape::Exponential { a, b } => a * b.powf(t),
            Shape::ScaledSquare {
                base,
                scale,
                offset,
            } => {
                let v = base.value(t);
                scale * v * v + offset
            }
            Shape::ScaledSqrt { base, scale } => (scale * base.value(t)).sqrt(),
            Shape::Custom(f) => f(t),
        }
    }

    /// `∫₀ᵗ f(s) ds`
    pub fn integral(&self, t: f64) -> f64 {
        match self {
            Shape::Constant(c) => c * t,
            Shape::Affine { a, b } => a * t + 0.5 * b * t * t,
            Shape::Power { a, b, p } => a * t + b * t.powf(p + 1.0) / (p + 1.0),
            Shape::Exponential { a, b } => {
                let lb = b.ln();
                if lb.abs() < 1e-12 {
                    a * t
                } else {
                    a * (b.powf(t) - 1.0) / lb
                }
            }
            Shape::ScaledSquare {
                base,
                scale,
                offset,
            } => scale * base.square_integral(t) + offset * t,
            Shape::ScaledSqrt { .. } | Shape::Custom(_) => quad_integral(|s| self.value(s), t),
        }
    }

    /// `∫₀ᵗ f(s)² ds`
    pub fn square_integral(&self, t: f64) -> f64 {
        match self {
            Shape::Constant(c) => c * c * t,
            Shape::Affine { a, b } => {
                // ((a + bt)³ − a³) / 3b, expanded to stay exact at b = 0
                a * a * t + a * b * t * t + b * b * t * t * t / 3.0
            }
            Shape::Power { a, b, p } => {
                a * a * t
                    + 2.0 * a * b * t.powf(p + 1.0) / (p + 1.0)
                    + b * b * t.powf(2.0 * p + 1.0) / (2.0 * p + 1.0)
            }
            Shape::Exponential { a, b } => {
                let lb = b.ln();
                if lb.abs() < 1e-12 {
                    a * a * t
                } else {
                    a * a * (b.powf(2.0 * t) - 1.0) / (2.0 * lb)
                }
            }
            Shape::ScaledSqrt { base, scale } => scale * base.integral(t),
            Shape::ScaledSquare { .. } | Shape::Custom(_) => {
                quad_integral(|s| self.value(s).powi(2), t)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::domain(format!("schedule parameter {what} must be finite, got {v}")))
            }
        };
        match self {
            Shape::Constant(c) => finite(*c, "c"),
            Shape::Affine { a, b } => finite(*a, "a").and(finite(*b, "b")),
            Shape::Power { a, b, p } => {
                finite(*a, "a")?;
                finite(*b, "b")?;
                finite(*p, "p")?;
                if *p <= -0.5 {
                    return Err(Error::domain(format!(
                        "power schedule exponent must exceed -1/2 for a finite squared integral, got {p}"
                    )));
                }
                Ok(())
            }
            Shape::Exponential { a, b } => {
                finite(*a, "a")?;
                finite(*b, "b")?;
                if *b <= 0.0 {
                    return Err(Error::domain(format!("exponential schedule base must be > 0, got {b}")));
                }
                Ok(())
            }
            Shape::ScaledSquare {
                base,
                scale,
                offset,
            } => {
                finite(*scale, "scale")?;
                finite(*offset, "offset")?;
                base.validate()
            }
            Shape::ScaledSqrt { base, scale } => {
                finite(*scale, "scale")?;
                base.validate()
            }
            Shape::Custom(_) => Ok(()),
        }
    }
}

/// A coefficient `t ↦ c(t)` together with its running integral.
#[derive(Debug, Clone)]
pub struct CoefficientSchedule {
    shape: Shape,
    kind: IntegralKind,
}

impl CoefficientSchedule {
    pub fn new(shape: Shape, kind: IntegralKind) -> Result<Self> {
        shape.validate()?;
        Ok(Self { shape, kind })
    }

    /// A drift-type schedule whose `integral` is `∫c`.
    pub fn plain(shape: Shape) -> Result<Self> {
        Self::new(shape, IntegralKind::Plain)
    }

    /// A diffusion-type schedule whose `integral` is `∫c²`.
    pub fn sigma(shape: Shape) -> Result<Self> {
        Self::new(shape, IntegralKind::SigmaSquared)
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::plain(Shape::Constant(c))
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn kind(&self) -> IntegralKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: IntegralKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.shape.value(t)
    }

    /// The running integral selected by [`IntegralKind`].
    pub fn integral(&self, t: f64) -> f64 {
        match self.kind {
            IntegralKind::SigmaSquared => self.shape.square_integral(t),
            IntegralKind::Plain => self.shape.integral(t),
        }
    }

    pub fn plain_integral(&self, t: f64) -> f64 {
        self.shape.integral(t)
    }

    pub fn square_integral(&self, t: f64) -> f64 {
        self.shape.square_integral(t)
    }

    /// True when `c(t)² = k·base(t)` for the given drift schedule `base`,
    /// i.e. this is `√(k·base)`; returns `k`.
    pub(crate) fn sqrt_multiple_of(&self, base: &CoefficientSchedule) -> Option<f64> {
        match &self.shape {
            Shape::ScaledSqrt { base: b, scale } if shapes_equal(b, &base.shape) => Some(*scale),
            _ => None,
        }
    }

    pub(crate) fn constant_value(&self) -> Option<f64> {
        match self.shape {
            Shape::Constant(c) => Some(c),
            Shape::Affine { a, b } if b == 0.0 => Some(a),
            Shape::Power { a, b, .. } if b == 0.0 => Some(a),
            Shape::Exponential { a, b } if b == 1.0 => Some(a),
            _ => None,
        }
    }
}

fn shapes_equal(x: &Shape, y: &Shape) -> bool {
    match (x, y) {
        (Shape::Constant(a), Shape::Constant(b)) => a == b,
        (Shape::Affine { a, b }, Shape::Affine { a: c, b: d }) => a == c && b == d,
        (Shape::Power { a, b, p }, Shape::Power { a: c, b: d, p: q }) => a == c && b == d && p == q,
        (Shape::Exponential { a, b }, Shape::Exponential { a: c, b: d }) => a == c && b == d,
        (
            Shape::ScaledSquare {
                base,
                scale,
                offset,
            },
            Shape::ScaledSquare {
                base: b2,
                scale: s2,
                offset: o2,
            },
        ) => scale == s2 && offset == o2 && shapes_equal(base, b2),
        (Shape::ScaledSqrt { base, scale }, Shape::ScaledSqrt { base: b2, scale: s2 }) => {
            scale == s2 && shapes_equal(base, b2)
        }
        (Shape::Custom(f), Shape::Custom(g)) => Arc::ptr_eq(f, g),
        _ => false,
    }
}
