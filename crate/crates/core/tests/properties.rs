use std::collections::HashMap;

use odesep::expr::{BinOp, Func};
use odesep::linearity::linearity_in;
use odesep::*;
use proptest::prelude::*;

// ------------------------------------------------------------------ parser

fn arb_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        prop::sample::select(vec![0.0, 0.5, 1.0, 2.0, 3.25, 1e-3, 12.0, 1e6]).prop_map(Expr::Const),
        prop::sample::select(vec!["a", "b", "x", "y", "theta_1"]).prop_map(Expr::sym),
    ];
    leaf.prop_recursive(5, 40, 3, |inner| {
        prop_oneof![
            inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
            (prop::sample::select(vec![BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Pow]), inner.clone(), inner.clone())
                .prop_map(|(op, l, r)| Expr::Binary(op, Box::new(l), Box::new(r))),
            (prop::sample::select(vec![Func::Sin, Func::Cos, Func::Exp, Func::Log, Func::Sqrt, Func::Abs]), inner)
                .prop_map(|(f, e)| Expr::Call(f, Box::new(e))),
        ]
    })
}

proptest! {
    #[test]
    fn printing_then_parsing_gives_the_same_tree(e in arb_expr()) {
        let printed = e.to_string();
        let parsed = parse_expression(&printed).unwrap();
        prop_assert_eq!(&parsed, &e, "printed as {}", printed);
        prop_assert_eq!(parse_expression(&parsed.to_string()).unwrap(), parsed);
    }
}

// --------------------------------------------------------------- linearity

/// Coefficient pieces built from states x, y and nonlinear c.
const PIECES: [&str; 8] = ["x", "y^c", "exp(-c*x)", "sin(x)", "(1+y)", "x*y", "x/(c+y)", "1"];

#[derive(Debug, Clone)]
struct Term {
    linear: Option<usize>,
    piece: usize,
    negative: bool,
}

fn arb_terms() -> impl Strategy<Value = Vec<Term>> {
    prop::collection::vec(
        (prop::option::of(0usize..3), 0..PIECES.len(), any::<bool>()).prop_map(|(linear, piece, negative)| Term { linear, piece, negative }),
        1..6,
    )
}

fn term_src(t: &Term) -> String {
    let lin = t.linear.map(|k| format!("k{k}*")).unwrap_or_default();
    format!("{}{lin}{}", if t.negative { "-" } else { "" }, PIECES[t.piece])
}

fn sum_src(terms: &[Term]) -> String {
    let mut s = String::new();
    for (i, t) in terms.iter().enumerate() {
        let src = term_src(t);
        if i > 0 && !t.negative {
            s.push('+');
        }
        s.push_str(&src);
    }
    s
}

fn semilinear_model(eq_x: &[Term], eq_y: &[Term]) -> OdeModel {
    OdeModel::builder().equation("x", sum_src(eq_x)).equation("y", sum_src(eq_y)).linear(["k0", "k1", "k2"]).nonlinear(["c"]).build().unwrap()
}

fn bindings(x: f64, y: f64, c: f64, k: [f64; 3]) -> HashMap<String, f64> {
    [("x", x), ("y", y), ("c", c), ("k0", k[0]), ("k1", k[1]), ("k2", k[2])].iter().map(|(n, v)| (n.to_string(), *v)).collect()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn right_hand_sides_are_affine_in_linear_parameters(
        eq_x in arb_terms(), eq_y in arb_terms(),
        state in (0.1f64..3.0, 0.1f64..3.0, 0.2f64..2.0),
        u in prop::array::uniform3(-5.0f64..5.0), v in prop::array::uniform3(-5.0f64..5.0),
        s in -3.0f64..3.0, r in -3.0f64..3.0,
    ) {
        let m = semilinear_model(&eq_x, &eq_y);
        prop_assert!(validate_roles(&m).is_empty());
        let (x, y, c) = state;
        let f = |k: [f64; 3]| -> Vec<f64> { m.equations().iter().map(|e| e.eval(&bindings(x, y, c, k)).unwrap()).collect() };
        let off = f([0.0; 3]);
        let (fu, fv) = (f(u), f(v));
        let combo: [f64; 3] = std::array::from_fn(|i| s * u[i] + r * v[i]);
        for (j, got) in f(combo).into_iter().enumerate() {
            let want = off[j] + s * (fu[j] - off[j]) + r * (fv[j] - off[j]);
            prop_assert!(close(got, want, 1e-9), "eq {}: {} vs {}", j, got, want);
        }
    }

    #[test]
    fn decomposition_reconstructs_the_equations(
        eq_x in arb_terms(), eq_y in arb_terms(),
        state in (0.1f64..3.0, 0.1f64..3.0, 0.2f64..2.0),
        k in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let m = semilinear_model(&eq_x, &eq_y);
        let d = decompose_linear(&m).unwrap();
        let b = bindings(state.0, state.1, state.2, k);
        for j in 0..d.n_equations() {
            let want = m.equations()[j].eval(&b).unwrap();
            let got = d.reconstruct(j).eval(&b).unwrap();
            prop_assert!(close(got, want, 1e-10), "eq {}: {} vs {}", j, got, want);
        }
    }

    #[test]
    fn classification_ignores_association(terms in arb_terms(), order in Just(()).prop_perturb(|_, mut rng| rng.random::<u64>())) {
        let flat = sum_src(&terms);
        // same terms, reversed and nested to the right, products regrouped
        let mut nested = String::new();
        let rev: Vec<String> = terms.iter().rev().map(|t| {
            let lin = t.linear.map(|k| format!("k{k}")).unwrap_or_else(|| "1".into());
            let body = format!("({lin}*({}))", PIECES[t.piece]);
            if t.negative { format!("(-{body})") } else { body }
        }).collect();
        let rotate = (order as usize) % rev.len();
        let mut parts = rev.clone();
        parts.rotate_left(rotate);
        for p in &parts {
            if !nested.is_empty() {
                nested.push_str("+(");
            }
            nested.push_str(p);
        }
        nested.push_str(&")".repeat(parts.len() - 1));
        let a = parse_expression(&flat).unwrap();
        let b = parse_expression(&nested).unwrap();
        for p in ["k0", "k1", "k2", "c", "x", "y"] {
            prop_assert_eq!(linearity_in(&a, p), linearity_in(&b, p), "{} in {} vs {}", p, flat, nested);
        }
    }
}

// ---------------------------------------------------------------- optimizer

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iterates_stay_in_the_box_and_repeat_exactly(
        centre in prop::collection::vec(-4.0f64..4.0, 1..5),
        half in 0.2f64..3.0,
        weights in prop::collection::vec(0.1f64..20.0, 4),
        nelder in any::<bool>(),
    ) {
        let n = centre.len();
        let lower: Vec<f64> = vec![-half; n];
        let upper: Vec<f64> = vec![half; n];
        let x0: Vec<f64> = vec![0.0; n];
        let cfg = OptimConfig { method: if nelder { Method::NelderMead } else { Method::Bfgs }, trace: true, ..OptimConfig::default() };
        let run = || {
            let mut seen = Vec::new();
            let mut f = |x: &[f64]| {
                seen.push(x.to_vec());
                x.iter().zip(&centre).zip(&weights).map(|((xi, ci), w)| w * (xi - ci).powi(2)).sum::<f64>() + (x[0] * x[n - 1]).sin()
            };
            let r = minimize(&mut f, &x0, &lower, &upper, &cfg).unwrap();
            (r, seen)
        };
        let (r, seen) = run();
        for x in &seen {
            prop_assert!(x.iter().all(|v| (-half..=half).contains(v)), "{:?} outside ±{}", x, half);
        }
        prop_assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        let (again, seen_again) = run();
        prop_assert_eq!(r.argmin, again.argmin);
        prop_assert_eq!(r.value.to_bits(), again.value.to_bits());
        prop_assert_eq!(seen, seen_again);
    }
}

// ---------------------------------------------------------------- smoothing

fn arb_series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((0.05f64..1.0, -3.0f64..3.0), 8..30).prop_map(|steps| {
        let mut t = 0.0;
        steps
            .into_iter()
            .map(|(dt, y)| {
                t += dt;
                (t, y + t.sin())
            })
            .unzip()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spline_fit_scales_with_the_data((t, y) in arb_series(), c in prop::sample::select(vec![1e-3, 0.25, 3.0, 1e3])) {
        let base = smooth_spline_gcv(&t, &y).unwrap();
        let scaled_y: Vec<f64> = y.iter().map(|v| c * v).collect();
        let scaled = smooth_spline_gcv(&t, &scaled_y).unwrap();
        let size = base.fitted.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in base.fitted.iter().zip(&scaled.fitted) {
            prop_assert!((c * a - b).abs() <= 1e-8 * c * size, "{} vs {}", c * a, b);
        }
        prop_assert!((base.df - scaled.df).abs() < 1e-9);
    }

    #[test]
    fn trapezoid_is_exact_for_lines((t, _) in arb_series(), a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let y: Vec<f64> = t.iter().map(|x| a + b * x).collect();
        let cum = cum_trapz(&t, &y).unwrap();
        for (k, tk) in t.iter().enumerate() {
            let exact = a * (tk - t[0]) + 0.5 * b * (tk * tk - t[0] * t[0]);
            prop_assert!((cum[k] - exact).abs() < 1e-10 * (1.0 + exact.abs()));
        }
    }
}

// ------------------------------------------------------------------- solver

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn extra_output_times_do_not_move_the_solution(extra in prop::collection::vec(0.01f64..9.99, 1..20)) {
        let m = OdeModel::builder().equation("X", "a*X-b*X*Y").equation("Y", "d*X*Y-g*Y").linear(["a", "b", "g", "d"]).build().unwrap();
        let p: Values = [("a", 2.0 / 3.0), ("b", 4.0 / 3.0), ("g", 1.0), ("d", 1.0)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let x0: Values = [("X", 0.9), ("Y", 0.9)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let coarse = linspace(0.0, 10.0, 11);
        let mut fine = coarse.clone();
        fine.extend(extra);
        fine.sort_by(f64::total_cmp);
        fine.dedup();
        let opts = SolverOptions::default();
        let a = solve_ode(&m, &p, &x0, &coarse, &[], &opts).unwrap();
        let b = solve_ode(&m, &p, &x0, &fine, &[], &opts).unwrap();
        for (i, t) in coarse.iter().enumerate() {
            let k = fine.iter().position(|s| s == t).unwrap();
            for j in 0..2 {
                let (u, v) = (a.values[(i, j)], b.values[(k, j)]);
                prop_assert!((u - v).abs() <= 10.0 * opts.rtol * (1.0 + u.abs()), "t {} var {}: {} vs {}", t, j, u, v);
            }
        }
    }
}
