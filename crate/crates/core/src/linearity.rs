//! Structural linearity analysis and the `F(x; θ) = f0(x; θ_NL) + g(x; θ_NL)·θ_L`
//! decomposition of semi-linear systems.
//!
//! A parameter is linear in an expression when, after flattening sums and
//! products, every term holds it at most once as a plain multiplicative
//! factor. Any occurrence under a power, a function call or a denominator, or
//! a product of two factors that both contain it, makes it nonlinear.

use std::collections::BTreeMap;
use std::fmt;

use crate::expr::{BinOp, Expr};
use crate::model::{OdeModel, ParamRole};

/// How one parameter enters one equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Linearity {
    Absent,
    Linear,
    Nonlinear,
}

/// Classify how `param` enters `e`, treating every other symbol as opaque.
pub fn linearity_in(e: &Expr, param: &str) -> Linearity {
    use Linearity::*;
    match e {
        Expr::Const(_) => Absent,
        Expr::Sym(s) => {
            if s == param {
                Linear
            } else {
                Absent
            }
        }
        Expr::Neg(a) => linearity_in(a, param),
        Expr::Call(_, a) => {
            if a.contains_symbol(param) {
                Nonlinear
            } else {
                Absent
            }
        }
        Expr::Binary(op, a, b) => match op {
            BinOp::Add | BinOp::Sub => match (linearity_in(a, param), linearity_in(b, param)) {
                (Nonlinear, _) | (_, Nonlinear) => Nonlinear,
                (Linear, _) | (_, Linear) => Linear,
                _ => Absent,
            },
            BinOp::Mul => match (linearity_in(a, param), linearity_in(b, param)) {
                (Absent, Absent) => Absent,
                (Linear, Absent) | (Absent, Linear) => Linear,
                _ => Nonlinear,
            },
            BinOp::Div => {
                if b.contains_symbol(param) {
                    Nonlinear
                } else {
                    linearity_in(a, param)
                }
            }
            BinOp::Pow => {
                if e.contains_symbol(param) {
                    Nonlinear
                } else {
                    Absent
                }
            }
        },
    }
}

/// Linearity of every declared parameter in every equation, keyed by
/// `(equation index, parameter name)`.
pub fn classify_linearity(model: &OdeModel) -> BTreeMap<(usize, String), Linearity> {
    let mut out = BTreeMap::new();
    for (j, eq) in model.equations().iter().enumerate() {
        for (name, _) in model.parameters() {
            out.insert((j, name.clone()), linearity_in(eq, name));
        }
    }
    out
}

/// A role-declaration problem in one equation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// Zero-based equation index.
    pub equation: usize,
    pub variable: String,
    /// One name for a parameter that is nonlinear on its own, two for a pair
    /// of linear parameters that multiply each other.
    pub parameters: Vec<String>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.parameters.iter().map(|p| format!("[{p}]")).collect();
        write!(
            f,
            "Problem in eq.{} [{}] - parameter {} should be set as non-linear",
            self.equation + 1,
            self.variable,
            names.join(" or ")
        )
    }
}

/// Check that every parameter declared linear really is, jointly.
///
/// Individually nonlinear parameters are reported first; only when there are
/// none are products of two declared-linear parameters reported.
pub fn validate_roles(model: &OdeModel) -> Vec<Diagnostic> {
    let linear = model.parameter_names(ParamRole::Linear);
    let mut out = Vec::new();
    for (j, eq) in model.equations().iter().enumerate() {
        for p in &linear {
            if linearity_in(eq, p) == Linearity::Nonlinear {
                out.push(Diagnostic {
                    equation: j,
                    variable: model.variables()[j].clone(),
                    parameters: vec![p.clone()],
                });
            }
        }
    }
    if !out.is_empty() {
        return out;
    }
    for (j, eq) in model.equations().iter().enumerate() {
        let mut violations = Vec::new();
        affine(eq, &linear, &mut violations);
        let mut seen = Vec::new();
        for v in violations {
            if !seen.contains(&v) {
                seen.push(v);
            }
        }
        for v in seen {
            out.push(Diagnostic {
                equation: j,
                variable: model.variables()[j].clone(),
                parameters: v.into_iter().map(|k| linear[k].clone()).collect(),
            });
        }
    }
    out
}

/// `F_j = offsets[j] + Σ_k coefficients[j][k] · θ_L[k]`.
#[derive(Debug, Clone)]
pub struct LinearDecomposition {
    pub linear_params: Vec<String>,
    pub offsets: Vec<Expr>,
    pub coefficients: Vec<Vec<Expr>>,
}

impl LinearDecomposition {
    pub fn n_equations(&self) -> usize {
        self.offsets.len()
    }

    pub fn n_linear(&self) -> usize {
        self.linear_params.len()
    }

    /// Rebuild equation `j` symbolically from its parts.
    pub fn reconstruct(&self, j: usize) -> Expr {
        let mut e = self.offsets[j].clone();
        for (k, g) in self.coefficients[j].iter().enumerate() {
            e = e.add(g.clone().mul(Expr::sym(self.linear_params[k].clone())));
        }
        e
    }

    /// Linear parameters with a nonzero coefficient in equation `j`.
    pub fn present_in(&self, j: usize) -> Vec<usize> {
        (0..self.n_linear()).filter(|&k| !self.coefficients[j][k].is_zero()).collect()
    }
}

/// Split each equation into offset and linear-parameter coefficients.
pub fn decompose_linear(model: &OdeModel) -> Result<LinearDecomposition, Vec<Diagnostic>> {
    let diags = validate_roles(model);
    if !diags.is_empty() {
        return Err(diags);
    }
    let linear = model.parameter_names(ParamRole::Linear);
    let mut offsets = Vec::new();
    let mut coefficients = Vec::new();
    for eq in model.equations() {
        let mut violations = Vec::new();
        let a = affine(eq, &linear, &mut violations);
        debug_assert!(violations.is_empty());
        offsets.push(a.offset);
        let mut row = vec![Expr::Const(0.0); linear.len()];
        for (k, g) in a.coeffs {
            row[k] = g;
        }
        coefficients.push(row);
    }
    Ok(LinearDecomposition { linear_params: linear, offsets, coefficients })
}

struct Affine {
    offset: Expr,
    coeffs: BTreeMap<usize, Expr>,
}

impl Affine {
    fn opaque(e: &Expr) -> Affine {
        Affine { offset: e.clone(), coeffs: BTreeMap::new() }
    }

    fn map(self, f: impl Fn(Expr) -> Expr) -> Affine {
        Affine { offset: f(self.offset), coeffs: self.coeffs.into_iter().map(|(k, g)| (k, f(g))).collect() }
    }

    fn merge(mut self, other: Affine) -> Affine {
        self.offset = self.offset.add(other.offset);
        for (k, g) in other.coeffs {
            let cur = self.coeffs.remove(&k).unwrap_or(Expr::Const(0.0));
            self.coeffs.insert(k, cur.add(g));
        }
        self
    }
}

fn params_in(e: &Expr, linear: &[String]) -> Vec<usize> {
    (0..linear.len()).filter(|&k| e.contains_symbol(&linear[k])).collect()
}

fn affine(e: &Expr, linear: &[String], violations: &mut Vec<Vec<usize>>) -> Affine {
    if params_in(e, linear).is_empty() {
        return Affine::opaque(e);
    }
    match e {
        Expr::Const(_) => Affine::opaque(e),
        Expr::Sym(s) => match linear.iter().position(|p| p == s) {
            Some(k) => Affine { offset: Expr::Const(0.0), coeffs: BTreeMap::from([(k, Expr::Const(1.0))]) },
            None => Affine::opaque(e),
        },
        Expr::Neg(a) => affine(a, linear, violations).map(Expr::negate),
        Expr::Call(_, _) | Expr::Binary(BinOp::Pow, _, _) => {
            let inside = params_in(e, linear);
            violations.extend(inside.into_iter().map(|k| vec![k]));
            Affine::opaque(e)
        }
        Expr::Binary(BinOp::Add, a, b) => affine(a, linear, violations).merge(affine(b, linear, violations)),
        Expr::Binary(BinOp::Sub, a, b) => {
            let rhs = affine(b, linear, violations).map(Expr::negate);
            affine(a, linear, violations).merge(rhs)
        }
        Expr::Binary(BinOp::Mul, a, b) => {
            let da = affine(a, linear, violations);
            let db = affine(b, linear, violations);
            if da.coeffs.is_empty() {
                let left = da.offset;
                db.map(|g| left.clone().mul(g))
            } else if db.coeffs.is_empty() {
                let right = db.offset;
                da.map(|g| g.mul(right.clone()))
            } else {
                for &p in da.coeffs.keys() {
                    for &q in db.coeffs.keys() {
                        violations.push(if p == q { vec![p] } else { vec![p.min(q), p.max(q)] });
                    }
                }
                Affine::opaque(e)
            }
        }
        Expr::Binary(BinOp::Div, a, b) => {
            let inside = params_in(b, linear);
            if !inside.is_empty() {
                violations.extend(inside.into_iter().map(|k| vec![k]));
                return Affine::opaque(e);
            }
            let den = (**b).clone();
            affine(a, linear, violations).map(|g| g.div(den.clone()))
        }
    }
}
