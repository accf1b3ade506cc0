//! Random scalar expressions with an independent f64 evaluator, shared by
//! the derivative property tests.

use std::collections::HashMap;

use pfgen::graph::{Graph, NodeId};
use proptest::prelude::*;

pub const NUM_VARS: usize = 3;
pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;
/// Smallest denominator magnitude accepted in random compositions.
pub const MIN_DEN: f64 = 0.2;

#[derive(Clone, Debug)]
pub enum Expr {
    Var(usize),
    Const(f64),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Tanh(Box<Expr>),
    Square(Box<Expr>),
}

impl Expr {
    /// Plain f64 evaluation; `None` when a denominator is too close to zero.
    pub fn eval(&self, x: &[f64]) -> Option<f64> {
        Some(match self {
            Expr::Var(i) => x[*i],
            Expr::Const(c) => *c,
            Expr::Add(a, b) => a.eval(x)? + b.eval(x)?,
            Expr::Sub(a, b) => a.eval(x)? - b.eval(x)?,
            Expr::Mul(a, b) => a.eval(x)? * b.eval(x)?,
            Expr::Div(a, b) => {
                let d = b.eval(x)?;
                if d.abs() < MIN_DEN {
                    return None;
                }
                a.eval(x)? / d
            }
            Expr::Neg(a) => -a.eval(x)?,
            Expr::Tanh(a) => a.eval(x)?.tanh(),
            Expr::Square(a) => a.eval(x)?.powi(2),
        })
    }

    pub fn build(&self, g: &mut Graph, vars: &[NodeId]) -> NodeId {
        match self {
            Expr::Var(i) => vars[*i],
            Expr::Const(c) => g.constant(*c),
            Expr::Add(a, b) => {
                let (a, b) = (a.build(g, vars), b.build(g, vars));
                g.add(a, b)
            }
            Expr::Sub(a, b) => {
                let (a, b) = (a.build(g, vars), b.build(g, vars));
                g.sub(a, b)
            }
            Expr::Mul(a, b) => {
                let (a, b) = (a.build(g, vars), b.build(g, vars));
                g.mul(a, b)
            }
            Expr::Div(a, b) => {
                let (a, b) = (a.build(g, vars), b.build(g, vars));
                g.div(a, b)
            }
            Expr::Neg(a) => {
                let a = a.build(g, vars);
                g.neg(a)
            }
            Expr::Tanh(a) => {
                let a = a.build(g, vars);
                g.tanh(a)
            }
            Expr::Square(a) => {
                let a = a.build(g, vars);
                g.square(a)
            }
        }
    }
}

pub fn expr_strategy() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        3 => (0..NUM_VARS).prop_map(Expr::Var),
        1 => (-2.0..2.0f64).prop_map(Expr::Const),
    ];
    // Depth counts operator levels above the leaves.
    leaf.prop_recursive(4, 32, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(a.into(), b.into())),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(a.into(), b.into())),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(a.into(), b.into())),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Div(a.into(), b.into())),
            inner.clone().prop_map(|a| Expr::Neg(a.into())),
            inner.clone().prop_map(|a| Expr::Tanh(a.into())),
            inner.prop_map(|a| Expr::Square(a.into())),
        ]
    })
}

pub fn depth(e: &Expr) -> usize {
    match e {
        Expr::Var(_) | Expr::Const(_) => 0,
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => 1 + depth(a).max(depth(b)),
        Expr::Neg(a) | Expr::Tanh(a) | Expr::Square(a) => 1 + depth(a),
    }
}

pub fn bind(vars: &[NodeId], x: &[f64]) -> HashMap<NodeId, f64> {
    vars.iter().copied().zip(x.iter().copied()).collect()
}

/// Central difference of `f` in coordinate `i`; `None` if any probe is
/// rejected by `f`.
pub fn central_diff(f: impl Fn(&[f64]) -> Option<f64>, x: &[f64], i: usize) -> Option<f64> {
    let h = FD_STEP * x[i].abs().max(1.0);
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p)?;
    p[i] = x[i] - h;
    let down = f(&p)?;
    Some((up - down) / (2.0 * h))
}

pub fn close(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    let err = (got - want).abs();
    if err <= tol * want.abs().max(1.0) {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, want {want} (err {err:e})"))
    }
}

/// Checks the graph's value and gradient of `e` at `x` against the
/// reference evaluator. `Ok(false)` means the point was rejected.
pub fn check_expr(e: &Expr, x: &[f64]) -> Result<bool, String> {
    let Some(want) = e.eval(x) else { return Ok(false) };
    let fd: Option<Vec<f64>> = (0..x.len()).map(|i| central_diff(|p| e.eval(p), x, i)).collect();
    let Some(fd) = fd else { return Ok(false) };

    let mut g = Graph::new();
    let vars: Vec<NodeId> = (0..x.len()).map(|_| g.var()).collect();
    let out = e.build(&mut g, &vars);
    let grads = g.grad(out, &vars).unwrap();
    let b = bind(&vars, x);
    let value = g.evaluate(out, &b).unwrap();
    close(value, want, 1e-12, "value")?;
    let got = g.evaluate_many(&grads, &b).unwrap();
    for (i, (&gi, &fi)) in got.iter().zip(&fd).enumerate() {
        close(gi, fi, REL_TOL, &format!("d/dx{i} of {e:?} at {x:?}"))?;
    }
    Ok(true)
}

pub fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, NUM_VARS)
}
