//! Reverse-mode automatic differentiation over scalar expression tapes.
//!
//! One Lagrangian output against thousands of Fourier-coefficient inputs is
//! the textbook case for reverse mode: a single backward sweep yields the
//! whole gradient at a cost proportional to the tape length. Tapes are
//! rebuilt on every evaluation; no checkpointing.
//!
//! Surfaces are linear in their coefficients, so in addition to the scalar
//! elementary operations the tape records weighted-sum nodes whose constant
//! weights are the (precomputed, shared) basis values. Their local partials
//! are exactly those weights.

use crate::error::{FocalError, Result};
use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    AddConst(u32, f64),
    MulConst(u32, f64),
    Neg(u32),
    Sin(u32),
    Cos(u32),
    Exp(u32),
    Sqrt(u32),
    Square(u32),
    Max0(u32),
    PowInt(u32, i32),
    /// Σ weights[j] · value(parents[j]); the weights are constants.
    WeightedSum {
        parents: Rc<[u32]>,
        weights: Rc<[f64]>,
    },
    /// Weighted sum over the contiguous node range `first .. first + weights.len()`.
    Dot { first: u32, weights: Rc<[f64]> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: f64,
}

/// Append-only record of a scalar computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    input_count: Cell<usize>,
    /// First domain violation (node index, description), if any.
    poison: RefCell<Option<(usize, String)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            input_count: Cell::new(0),
            poison: RefCell::new(None),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(n)),
            input_count: Cell::new(0),
            poison: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn input_count(&self) -> usize {
        self.input_count.get()
    }

    fn push(&self, op: Op, value: f64) -> Ad<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len() as u32;
        nodes.push(Node { op, value });
        Ad {
            tape: self,
            id,
            value,
        }
    }

    fn poison_if(&self, cond: bool, id_hint: usize, msg: impl FnOnce() -> String) {
        if cond {
            let mut p = self.poison.borrow_mut();
            if p.is_none() {
                *p = Some((id_hint, msg()));
            }
        }
    }

    /// Registers one independent variable. Inputs seed the gradient.
    pub fn input(&self, x: f64) -> Result<Ad<'_>> {
        if !x.is_finite() {
            return Err(FocalError::Data(format!("non-finite input value {x}")));
        }
        self.input_count.set(self.input_count.get() + 1);
        Ok(self.push(Op::Input, x))
    }

    /// Registers a contiguous block of inputs (required by `Scalar::dot`).
    pub fn inputs(&self, xs: &[f64]) -> Result<Vec<Ad<'_>>> {
        xs.iter().map(|&x| self.input(x)).collect()
    }

    /// Records a constant; constants carry zero gradient.
    pub fn constant(&self, c: f64) -> Ad<'_> {
        self.push(Op::Const, c)
    }

    /// Weighted sum of arbitrary nodes with constant weights.
    pub fn weighted_sum(&self, terms: &[Ad<'_>], weights: Rc<[f64]>) -> Ad<'_> {
        assert_eq!(terms.len(), weights.len(), "weighted_sum arity mismatch");
        let parents: Rc<[u32]> = terms.iter().map(|v| v.id).collect();
        let mut acc = 0.0;
        for (v, &w) in terms.iter().zip(weights.iter()) {
            acc += w * v.value;
        }
        self.push(Op::WeightedSum { parents, weights }, acc)
    }

    /// Weighted sum over a contiguous block of nodes (typically the inputs of
    /// one surface). Avoids storing a parent list per node.
    pub fn dot(&self, first: Ad<'_>, len: usize, weights: Rc<[f64]>) -> Ad<'_> {
        assert_eq!(len, weights.len(), "dot arity mismatch");
        let nodes = self.nodes.borrow();
        let mut acc = 0.0;
        for (j, &w) in weights.iter().enumerate() {
            acc += w * nodes[first.id as usize + j].value;
        }
        drop(nodes);
        self.push(
            Op::Dot {
                first: first.id,
                weights,
            },
            acc,
        )
    }

    /// First recorded domain violation (division by zero, negative sqrt), if any.
    pub fn domain_violation(&self) -> Option<String> {
        self.poison
            .borrow()
            .as_ref()
            .map(|(id, msg)| format!("node {id}: {msg}"))
    }

    fn check_poison(&self) -> Result<()> {
        match self.domain_violation() {
            Some(msg) => Err(FocalError::Data(msg)),
            None => Ok(()),
        }
    }

    /// Reverse sweep: gradient of `output` with respect to every input, in
    /// the order the inputs were registered.
    pub fn backward(&self, output: Ad<'_>) -> Result<Vec<f64>> {
        if !std::ptr::eq(output.tape, self) {
            return Err(FocalError::Argument(
                "output value does not belong to this tape".into(),
            ));
        }
        self.check_poison()?;
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut adj = vec![0.0f64; n];
        adj[output.id as usize] = 1.0;
        let mut grad = vec![0.0f64; self.input_count.get()];
        let mut next_input = self.input_count.get();
        for i in (0..n).rev() {
            let bar = adj[i];
            let node = &nodes[i];
            if let Op::Input = node.op {
                next_input -= 1;
                grad[next_input] = bar;
                continue;
            }
            if bar == 0.0 {
                continue;
            }
            match &node.op {
                Op::Input | Op::Const => {}
                Op::Add(a, b) => {
                    adj[*a as usize] += bar;
                    adj[*b as usize] += bar;
                }
                Op::Sub(a, b) => {
                    adj[*a as usize] += bar;
                    adj[*b as usize] -= bar;
                }
                Op::Mul(a, b) => {
                    adj[*a as usize] += bar * nodes[*b as usize].value;
                    adj[*b as usize] += bar * nodes[*a as usize].value;
                }
                Op::Div(a, b) => {
                    let bv = nodes[*b as usize].value;
                    adj[*a as usize] += bar / bv;
                    adj[*b as usize] -= bar * node.value / bv;
                }
                Op::AddConst(a, _) => adj[*a as usize] += bar,
                Op::MulConst(a, c) => adj[*a as usize] += bar * c,
                Op::Neg(a) => adj[*a as usize] -= bar,
                Op::Sin(a) => adj[*a as usize] += bar * nodes[*a as usize].value.cos(),
                Op::Cos(a) => adj[*a as usize] -= bar * nodes[*a as usize].value.sin(),
                Op::Exp(a) => adj[*a as usize] += bar * node.value,
                Op::Sqrt(a) => adj[*a as usize] += bar * 0.5 / node.value,
                Op::Square(a) => adj[*a as usize] += bar * 2.0 * nodes[*a as usize].value,
                // Subgradient 0 at the kink: never pushes a feasible boundary point.
                Op::Max0(a) => {
                    if nodes[*a as usize].value > 0.0 {
                        adj[*a as usize] += bar;
                    }
                }
                Op::PowInt(a, k) => {
                    let av = nodes[*a as usize].value;
                    adj[*a as usize] += bar * (*k as f64) * av.powi(*k - 1);
                }
                Op::WeightedSum { parents, weights } => {
                    for (p, &w) in parents.iter().zip(weights.iter()) {
                        adj[*p as usize] += bar * w;
                    }
                }
                Op::Dot { first, weights } => {
                    for (j, &w) in weights.iter().enumerate() {
                        adj[*first as usize + j] += bar * w;
                    }
                }
            }
        }
        Ok(grad)
    }

    /// Recomputes every node value from the recorded operations. Used to
    /// assert that replaying the tape reproduces the stored values.
    pub fn replay(&self) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut vals = vec![0.0f64; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            vals[i] = match &node.op {
                Op::Input | Op::Const => node.value,
                Op::Add(a, b) => vals[*a as usize] + vals[*b as usize],
                Op::Sub(a, b) => vals[*a as usize] - vals[*b as usize],
                Op::Mul(a, b) => vals[*a as usize] * vals[*b as usize],
                Op::Div(a, b) => vals[*a as usize] / vals[*b as usize],
                Op::AddConst(a, c) => vals[*a as usize] + c,
                Op::MulConst(a, c) => vals[*a as usize] * c,
                Op::Neg(a) => -vals[*a as usize],
                Op::Sin(a) => vals[*a as usize].sin(),
                Op::Cos(a) => vals[*a as usize].cos(),
                Op::Exp(a) => vals[*a as usize].exp(),
                Op::Sqrt(a) => vals[*a as usize].sqrt(),
                Op::Square(a) => vals[*a as usize] * vals[*a as usize],
                Op::Max0(a) => vals[*a as usize].max(0.0),
                Op::PowInt(a, k) => vals[*a as usize].powi(*k),
                Op::WeightedSum { parents, weights } => {
                    let mut acc = 0.0;
                    for (p, &w) in parents.iter().zip(weights.iter()) {
                        acc += w * vals[*p as usize];
                    }
                    acc
                }
                Op::Dot { first, weights } => {
                    let mut acc = 0.0;
                    for (j, &w) in weights.iter().enumerate() {
                        acc += w * vals[*first as usize + j];
                    }
                    acc
                }
            };
        }
        vals
    }

    pub fn stored_values(&self) -> Vec<f64> {
        self.nodes.borrow().iter().map(|n| n.value).collect()
    }
}

/// Handle to one tape node. Cheap to copy; carries the primal value.
#[derive(Clone, Copy)]
pub struct Ad<'t> {
    tape: &'t Tape,
    id: u32,
    value: f64,
}

impl<'t> Ad<'t> {
    pub fn id(&self) -> u32 {
        self.id
    }
}

impl<'t> Add for Ad<'t> {
    type Output = Ad<'t>;
    fn add(self, rhs: Ad<'t>) -> Ad<'t> {
        self.tape.push(Op::Add(self.id, rhs.id), self.value + rhs.value)
    }
}

impl<'t> Sub for Ad<'t> {
    type Output = Ad<'t>;
    fn sub(self, rhs: Ad<'t>) -> Ad<'t> {
        self.tape.push(Op::Sub(self.id, rhs.id), self.value - rhs.value)
    }
}

impl<'t> Mul for Ad<'t> {
    type Output = Ad<'t>;
    fn mul(self, rhs: Ad<'t>) -> Ad<'t> {
        self.tape.push(Op::Mul(self.id, rhs.id), self.value * rhs.value)
    }
}

impl<'t> Div for Ad<'t> {
    type Output = Ad<'t>;
    fn div(self, rhs: Ad<'t>) -> Ad<'t> {
        self.tape.poison_if(rhs.value == 0.0, self.tape.len(), || {
            "division by zero".to_string()
        });
        self.tape.push(Op::Div(self.id, rhs.id), self.value / rhs.value)
    }
}

impl<'t> Neg for Ad<'t> {
    type Output = Ad<'t>;
    fn neg(self) -> Ad<'t> {
        self.tape.push(Op::Neg(self.id), -self.value)
    }
}

/// The scalar interface shared by plain `f64` evaluation and tape recording.
/// Residual and cost assembly is written once, generically over `Scalar`.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    fn value(self) -> f64;
    fn add_const(self, c: f64) -> Self;
    fn mul_const(self, c: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn square(self) -> Self;
    fn max0(self) -> Self;
    fn powi(self, k: i32) -> Self;
    /// Dot product of a contiguous block of values (e.g. one surface's
    /// coefficients) with constant weights.
    fn dot(vars: &[Self], weights: &Rc<[f64]>) -> Self;
    /// Weighted sum of arbitrary values with constant weights.
    fn weighted_sum(vars: &[Self], weights: &Rc<[f64]>) -> Self;
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }
    fn add_const(self, c: f64) -> Self {
        self + c
    }
    fn mul_const(self, c: f64) -> Self {
        self * c
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn square(self) -> Self {
        self * self
    }
    fn max0(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn powi(self, k: i32) -> Self {
        f64::powi(self, k)
    }
    fn dot(vars: &[Self], weights: &Rc<[f64]>) -> Self {
        let mut acc = 0.0;
        for (v, w) in vars.iter().zip(weights.iter()) {
            acc += w * v;
        }
        acc
    }
    fn weighted_sum(vars: &[Self], weights: &Rc<[f64]>) -> Self {
        Self::dot(vars, weights)
    }
}

impl<'t> Scalar for Ad<'t> {
    fn value(self) -> f64 {
        self.value
    }
    fn add_const(self, c: f64) -> Self {
        self.tape.push(Op::AddConst(self.id, c), self.value + c)
    }
    fn mul_const(self, c: f64) -> Self {
        self.tape.push(Op::MulConst(self.id, c), self.value * c)
    }
    fn sin(self) -> Self {
        self.tape.push(Op::Sin(self.id), self.value.sin())
    }
    fn cos(self) -> Self {
        self.tape.push(Op::Cos(self.id), self.value.cos())
    }
    fn exp(self) -> Self {
        self.tape.push(Op::Exp(self.id), self.value.exp())
    }
    fn sqrt(self) -> Self {
        self.tape.poison_if(self.value < 0.0, self.tape.len(), || {
            format!("sqrt of negative value {}", self.value)
        });
        self.tape.push(Op::Sqrt(self.id), self.value.sqrt())
    }
    fn square(self) -> Self {
        self.tape.push(Op::Square(self.id), self.value * self.value)
    }
    fn max0(self) -> Self {
        self.tape.push(Op::Max0(self.id), self.value.max(0.0))
    }
    fn powi(self, k: i32) -> Self {
        self.tape.push(Op::PowInt(self.id, k), self.value.powi(k))
    }
    fn dot(vars: &[Self], weights: &Rc<[f64]>) -> Self {
        if vars.is_empty() {
            // Zero-length surfaces do not occur, but keep the identity sane.
            panic!("dot over empty block");
        }
        debug_assert!(
            vars.windows(2).all(|w| w[1].id == w[0].id + 1),
            "Scalar::dot requires a contiguous node block"
        );
        vars[0].tape.dot(vars[0], vars.len(), Rc::clone(weights))
    }
    fn weighted_sum(vars: &[Self], weights: &Rc<[f64]>) -> Self {
        if vars.is_empty() {
            panic!("weighted_sum over empty block");
        }
        vars[0].tape.weighted_sum(vars, Rc::clone(weights))
    }
}

/// Convenience: value and gradient of `f` at `x` through a fresh tape.
/// Takes a plain function pointer; capturing callers build their tape directly.
pub fn value_and_gradient(
    x: &[f64],
    f: for<'t> fn(&[Ad<'t>]) -> Ad<'t>,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let vars = tape.inputs(x)?;
    let out = f(&vars);
    let value = out.value();
    let grad = tape.backward(out)?;
    if !value.is_finite() {
        return Err(FocalError::Data(format!(
            "non-finite objective value {value}"
        )));
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad1(x: f64, f: for<'t> fn(Ad<'t>) -> Ad<'t>) -> f64 {
        let tape = Tape::new();
        let v = tape.input(x).unwrap();
        let out = f(v);
        tape.backward(out).unwrap()[0]
    }

    #[test]
    fn identity_gradient() {
        assert_eq!(grad1(3.0, |x| x), 1.0);
    }

    #[test]
    fn constant_gradient_is_zero() {
        let tape = Tape::new();
        let x = tape.input(3.0).unwrap();
        let c = tape.constant(7.5);
        let y = x.mul_const(0.0) + c;
        let g = tape.backward(y).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn product_rule() {
        assert!((grad1(3.0, |x| x * x) - 6.0).abs() < 1e-15);
    }

    #[test]
    fn sin_at_zero() {
        assert_eq!(grad1(0.0, |x| x.sin()), 1.0);
    }

    #[test]
    fn max0_piecewise() {
        // d/dx max0(-x): 0 where -x < 0, -1 where -x > 0.
        assert_eq!(grad1(0.5, |x| (-x).max0()), 0.0);
        assert_eq!(grad1(-0.5, |x| (-x).max0()), -1.0);
        // Documented subgradient choice at the kink.
        assert_eq!(grad1(0.0, |x| (-x).max0()), 0.0);
    }

    #[test]
    fn sin_cos_product_identity() {
        // d/dx sin(x)cos(x) = cos(2x)
        let g = grad1(0.3, |x| x.sin() * x.cos());
        assert!((g - (0.6f64).cos()).abs() < 1e-12);
    }

    #[test]
    fn linear_two_variable_gradient() {
        let (v, g) = value_and_gradient(&[1.0, 2.0], |x| x[0] + x[1].mul_const(2.0)).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g, vec![1.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let (v, g) = value_and_gradient(&[1.0, 2.0, 3.0], |x| {
            x[1].square() + x[0].square() + x[2].square()
        })
        .unwrap();
        assert_eq!(v, 14.0);
        assert_eq!(g, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn division_and_pow() {
        let (_, g) = value_and_gradient(&[2.0, 4.0], |x| x[0].powi(3) / x[1]).unwrap();
        // d/dx (x^3 / y) = 3x^2/y = 3, d/dy = -x^3/y^2 = -0.5
        assert!((g[0] - 3.0).abs() < 1e-14);
        assert!((g[1] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn division_by_zero_poisons_tape() {
        let tape = Tape::new();
        let x = tape.input(1.0).unwrap();
        let z = tape.constant(0.0);
        let y = x / z;
        let err = tape.backward(y).unwrap_err();
        assert!(err.to_string().contains("division by zero"), "{err}");
    }

    #[test]
    fn sqrt_of_negative_poisons_tape() {
        let tape = Tape::new();
        let x = tape.input(-1.0).unwrap();
        let y = x.sqrt();
        let err = tape.backward(y).unwrap_err();
        assert!(err.to_string().contains("sqrt"), "{err}");
    }

    #[test]
    fn non_finite_input_rejected() {
        let tape = Tape::new();
        assert!(tape.input(f64::NAN).is_err());
        assert!(tape.input(f64::INFINITY).is_err());
    }

    #[test]
    fn foreign_output_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let _ = t1.input(1.0).unwrap();
        let y2 = t2.input(2.0).unwrap();
        assert!(t1.backward(y2).is_err());
    }

    #[test]
    fn dot_matches_manual_sum() {
        let tape = Tape::new();
        let vars = tape.inputs(&[1.0, 2.0, 3.0]).unwrap();
        let w: Rc<[f64]> = Rc::from(vec![0.5, -1.0, 2.0]);
        let y = Scalar::dot(&vars, &w);
        assert!((y.value() - (0.5 - 2.0 + 6.0)).abs() < 1e-15);
        let g = tape.backward(y).unwrap();
        assert_eq!(g, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn weighted_sum_gradient() {
        let tape = Tape::new();
        let vars = tape.inputs(&[1.0, 2.0]).unwrap();
        let a = vars[0] * vars[1]; // id 2
        let b = vars[0] + vars[1]; // id 3
        let w: Rc<[f64]> = Rc::from(vec![2.0, -1.0]);
        let y = tape.weighted_sum(&[a, b], w);
        // y = 2xy - (x+y); dy/dx = 2y - 1 = 3, dy/dy = 2x - 1 = 1
        let g = tape.backward(y).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-15);
        assert!((g[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn replay_reproduces_values_bitwise() {
        let tape = Tape::new();
        let vars = tape.inputs(&[0.3, -1.7, 2.9]).unwrap();
        let w: Rc<[f64]> = Rc::from(vec![1.1, 0.2, -0.4]);
        let s = Scalar::dot(&vars, &w);
        let e = (vars[0].sin() * vars[1].cos() + s.exp().mul_const(0.1)).square();
        let _ = e.max0() - vars[2].powi(4);
        let stored = tape.stored_values();
        let replayed = tape.replay();
        assert_eq!(stored.len(), replayed.len());
        for (a, b) in stored.iter().zip(&replayed) {
            assert!(a.to_bits() == b.to_bits(), "{a} != {b}");
        }
    }

    #[test]
    fn deterministic_rebuild_bitwise() {
        let build = || {
            let tape = Tape::new();
            let vars = tape.inputs(&[0.25, 0.75]).unwrap();
            let y = (vars[0] * vars[1]).sin() + vars[0].exp();
            let g = tape.backward(y).unwrap();
            (tape.stored_values(), g)
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1.len(), v2.len());
        for (a, b) in v1.iter().zip(&v2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Central finite differences, the gradient oracle used throughout.
    pub fn finite_difference<F: FnMut(&[f64]) -> f64>(
        x: &[f64],
        step: f64,
        mut f: F,
    ) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + step;
            let fp = f(&xp);
            xp[i] = x[i] - step;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * step);
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences_on_composite() {
        let f_plain = |x: &[f64]| -> f64 {
            let a = (x[0] * x[1]).sin();
            let b = (x[2].square() + x[0].exp().mul_const(0.3)).sqrt();
            let c = (x[1] - x[2]).max0();
            (a + b) * c.add_const(1.5) + x[0].powi(3)
        };
        let x = [0.7, 1.3, 0.9];
        let (_, g) = value_and_gradient(&x, |v| {
            let a = (v[0] * v[1]).sin();
            let b = (v[2].square() + v[0].exp().mul_const(0.3)).sqrt();
            let c = (v[1] - v[2]).max0();
            (a + b) * c.add_const(1.5) + v[0].powi(3)
        })
        .unwrap();
        let fd = finite_difference(&x, 1e-6, f_plain);
        for (gi, fi) in g.iter().zip(&fd) {
            let denom = fi.abs().max(1e-6);
            assert!(
                (gi - fi).abs() / denom < 1e-6,
                "ad {gi} vs fd {fi}"
            );
        }
    }
}
