//! Derivative checks for the scalar graph engine against central finite
//! differences of an independent reference evaluator.

mod support;

use std::time::Instant;

use pfgen::graph::{Graph, OpKind};
use proptest::prelude::*;
use support::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, max_global_rejects: 10_000, ..ProptestConfig::default() })]

    #[test]
    fn random_compositions_match_finite_differences(e in expr_strategy(), x in point()) {
        prop_assert!(depth(&e) <= 4);
        prop_assume!(check_expr(&e, &x).map_err(TestCaseError::fail)?);
    }

    #[test]
    fn every_op_kind_matches_finite_differences(a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let x = [a, b];
        for kind in OpKind::ALL {
            let e = match kind {
                OpKind::Var => Expr::Var(0),
                OpKind::Const => Expr::Const(a),
                OpKind::Add => Expr::Add(Expr::Var(0).into(), Expr::Var(1).into()),
                OpKind::Sub => Expr::Sub(Expr::Var(0).into(), Expr::Var(1).into()),
                OpKind::Mul => Expr::Mul(Expr::Var(0).into(), Expr::Var(1).into()),
                OpKind::Div => Expr::Div(Expr::Var(0).into(), Expr::Var(1).into()),
                OpKind::Neg => Expr::Neg(Expr::Var(0).into()),
                OpKind::Tanh => Expr::Tanh(Expr::Var(0).into()),
                OpKind::Square => Expr::Square(Expr::Var(0).into()),
                // Checked separately: its derivative is zero by definition.
                OpKind::StopGradient => continue,
            };
            if kind == OpKind::Div && b.abs() < MIN_DEN {
                continue;
            }
            prop_assert!(check_expr(&e, &x).map_err(TestCaseError::fail)?, "{kind:?} rejected at {x:?}");
        }
    }

    #[test]
    fn polynomial_hessians_are_exact(
        coeffs in prop::collection::vec(-3i32..=3, 10),
        x in -2.0..2.0f64,
        y in -2.0..2.0f64,
    ) {
        // p(x, y) = sum c_k x^i y^j over all i + j <= 3.
        let monomials: Vec<(i32, i32)> = (0..=3).flat_map(|i| (0..=3 - i).map(move |j| (i, j))).collect();
        let mut g = Graph::new();
        let (vx, vy) = (g.var(), g.var());
        let mut terms = Vec::new();
        for (&(i, j), &c) in monomials.iter().zip(&coeffs) {
            let mut t = g.constant(c as f64);
            for _ in 0..i {
                t = g.mul(t, vx);
            }
            for _ in 0..j {
                t = g.mul(t, vy);
            }
            terms.push(t);
        }
        let p = g.sum(&terms);
        let first = g.grad(p, &[vx, vy]).unwrap();
        let hx = g.grad(first[0], &[vx, vy]).unwrap();
        let hy = g.grad(first[1], &[vx, vy]).unwrap();
        let b = bind(&[vx, vy], &[x, y]);
        let got = g.evaluate_many(&[hx[0], hx[1], hy[0], hy[1]], &b).unwrap();

        // d^2/dx^a dy^b of x^i y^j in closed form.
        let falling = |n: i32, k: i32| -> f64 { (0..k).map(|m| (n - m) as f64).product() };
        let deriv = |a: i32, bb: i32| -> f64 {
            monomials
                .iter()
                .zip(&coeffs)
                .filter(|(&(i, j), _)| i >= a && j >= bb)
                .map(|(&(i, j), &c)| c as f64 * falling(i, a) * falling(j, bb) * x.powi(i - a) * y.powi(j - bb))
                .sum()
        };
        let want = [deriv(2, 0), deriv(1, 1), deriv(1, 1), deriv(0, 2)];
        for (gv, wv) in got.iter().zip(want) {
            prop_assert!((gv - wv).abs() <= 1e-12 * wv.abs().max(1.0), "{gv} vs {wv}");
        }
    }
}

#[test]
fn stop_gradient_blocks_the_adjoint() {
    // f(x) = x * sg(x): value x^2, derivative sg(x) = x, second derivative 1.
    let mut g = Graph::new();
    let x = g.var();
    let s = g.stop_gradient(x);
    let f = g.mul(x, s);
    let d1 = g.grad(f, &[x]).unwrap()[0];
    let d2 = g.grad(d1, &[x]).unwrap()[0];
    let b = bind(&[x], &[1.7]);
    let v = g.evaluate_many(&[f, d1, d2], &b).unwrap();
    assert!((v[0] - 1.7 * 1.7).abs() < 1e-15);
    assert!((v[1] - 1.7).abs() < 1e-15);
    assert_eq!(v[2], 0.0);
    let only = g.grad(s, &[x]).unwrap()[0];
    assert_eq!(g.evaluate(only, &b).unwrap(), 0.0);
}

#[test]
fn two_hundred_compositions_run_within_ten_seconds() {
    let start = Instant::now();
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases: 200,
        max_global_rejects: 10_000,
        ..ProptestConfig::default()
    });
    runner
        .run(&(expr_strategy(), point()), |(e, x)| {
            prop_assume!(check_expr(&e, &x).map_err(TestCaseError::fail)?);
            Ok(())
        })
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "{secs} s");
}
