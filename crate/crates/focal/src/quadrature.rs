//! Deterministic composite quadrature over intervals and boxes.
//!
//! A single fixed grid is shared by every integral in the Lagrangian and it
//! doubles as the collocation grid for the constraint residuals, so the
//! whole pipeline sees one consistent discretization.

use crate::error::{FocalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureRule {
    Trapezoid,
    Simpson,
}

impl QuadratureRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trapezoid" => Ok(QuadratureRule::Trapezoid),
            "simpson" => Ok(QuadratureRule::Simpson),
            other => Err(FocalError::Config(format!(
                "unknown quadrature rule `{other}` (expected `trapezoid` or `simpson`)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            QuadratureRule::Trapezoid => "trapezoid",
            QuadratureRule::Simpson => "simpson",
        }
    }
}

/// Fixed quadrature grid on `[lo, hi]` with precomputed points and weights.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    rule: QuadratureRule,
    lo: f64,
    hi: f64,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    /// Builds a composite rule with `n` nodes. `n` must be odd and at least 3
    /// so that the Simpson panels pair up; the same contract is kept for the
    /// trapezoid rule.
    pub fn new(rule: QuadratureRule, n: usize, lo: f64, hi: f64) -> Result<Self> {
        if n < 3 || n % 2 == 0 {
            return Err(FocalError::Argument(format!(
                "quadrature node count must be odd and >= 3, got {n}"
            )));
        }
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(FocalError::Argument(format!(
                "quadrature interval [{lo}, {hi}] is not a finite nonempty interval"
            )));
        }
        let h = (hi - lo) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
        points[n - 1] = hi;
        let weights = match rule {
            QuadratureRule::Trapezoid => {
                let mut w = vec![h; n];
                w[0] = h / 2.0;
                w[n - 1] = h / 2.0;
                w
            }
            QuadratureRule::Simpson => {
                let mut w = vec![0.0; n];
                for i in 0..n {
                    w[i] = if i == 0 || i == n - 1 {
                        h / 3.0
                    } else if i % 2 == 1 {
                        4.0 * h / 3.0
                    } else {
                        2.0 * h / 3.0
                    };
                }
                w
            }
        };
        Ok(QuadratureGrid {
            rule,
            lo,
            hi,
            points,
            weights,
        })
    }

    pub fn rule(&self) -> QuadratureRule {
        self.rule
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integrates a function sampled at the grid points.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (i, (&t, &w)) in self.points.iter().zip(&self.weights).enumerate() {
            let v = f(t);
            if !v.is_finite() {
                return Err(FocalError::Data(format!(
                    "non-finite sample {v} at quadrature node {i} (t = {t})"
                )));
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// Integrates precomputed samples (one per node, in grid order).
    pub fn integrate_samples(&self, samples: &[f64]) -> Result<f64> {
        if samples.len() != self.points.len() {
            return Err(FocalError::Argument(format!(
                "expected {} samples, got {}",
                self.points.len(),
                samples.len()
            )));
        }
        let mut acc = 0.0;
        for (i, (&v, &w)) in samples.iter().zip(&self.weights).enumerate() {
            if !v.is_finite() {
                return Err(FocalError::Data(format!(
                    "non-finite sample {v} at quadrature node {i} (t = {})",
                    self.points[i]
                )));
            }
            acc += w * v;
        }
        Ok(acc)
    }
}

/// Product-rule integration of `f` over the box spanned by `grids`.
pub fn tensor_integrate<F: FnMut(&[f64]) -> f64>(grids: &[QuadratureGrid], mut f: F) -> Result<f64> {
    if grids.is_empty() {
        return Err(FocalError::Argument(
            "tensor_integrate needs at least one axis".into(),
        ));
    }
    let mut point = vec![0.0; grids.len()];
    recurse(grids, 0, &mut point, &mut f)
}

fn recurse<F: FnMut(&[f64]) -> f64>(
    grids: &[QuadratureGrid],
    axis: usize,
    point: &mut Vec<f64>,
    f: &mut F,
) -> Result<f64> {
    let grid = &grids[axis];
    let mut acc = 0.0;
    for (i, (&x, &w)) in grid.points.iter().zip(&grid.weights).enumerate() {
        point[axis] = x;
        let v = if axis + 1 == grids.len() {
            let v = f(point);
            if !v.is_finite() {
                return Err(FocalError::Data(format!(
                    "non-finite sample {v} at node {i} of axis {axis} (point {point:?})"
                )));
            }
            v
        } else {
            recurse(grids, axis + 1, point, f)?
        };
        acc += w * v;
    }
    Ok(acc)
}
