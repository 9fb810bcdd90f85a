use std::collections::HashMap;

use thiserror::Error;

use super::{BinOp, Expr, Func};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound symbol '{0}'")]
    Unbound(String),
    #[error("domain error in '{node}': {reason}")]
    Domain { node: String, reason: &'static str },
}

/// Applies a binary operator; `Err` carries the reason for a domain fault.
pub(crate) fn apply_binary(op: BinOp, a: f64, b: f64) -> Result<f64, &'static str> {
    let v = match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b == 0.0 && a == 0.0 {
                return Err("0/0");
            }
            a / b
        }
        BinOp::Pow => return power(a, b),
    };
    if v.is_nan() {
        Err("result is not a number")
    } else {
        Ok(v)
    }
}

pub(crate) fn power(base: f64, exponent: f64) -> Result<f64, &'static str> {
    if base.is_nan() || exponent.is_nan() {
        return Err("result is not a number");
    }
    if base == 0.0 && exponent < 0.0 {
        return Err("zero raised to a negative power");
    }
    if exponent.fract() == 0.0 && exponent.abs() <= 64.0 {
        return Ok(base.powi(exponent as i32));
    }
    if base < 0.0 {
        return Err("negative base with non-integer exponent");
    }
    Ok(base.powf(exponent))
}

pub(crate) fn apply_func(f: Func, x: f64) -> Result<f64, &'static str> {
    let v = match f {
        Func::Sin => x.sin(),
        Func::Cos => x.cos(),
        Func::Exp => x.exp(),
        Func::Abs => x.abs(),
        Func::Log => {
            if x <= 0.0 {
                return Err("log of a non-positive value");
            }
            x.ln()
        }
        Func::Sqrt => {
            if x < 0.0 {
                return Err("sqrt of a negative value");
            }
            x.sqrt()
        }
    };
    if v.is_nan() {
        Err("result is not a number")
    } else {
        Ok(v)
    }
}

impl Expr {
    /// Evaluate with every symbol resolved through `bindings`.
    pub fn eval(&self, bindings: &HashMap<String, f64>) -> Result<f64, EvalError> {
        self.eval_with(&|name| bindings.get(name).copied())
    }

    /// Evaluate with an arbitrary symbol resolver.
    pub fn eval_with(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64, EvalError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Sym(s) => lookup(s).ok_or_else(|| EvalError::Unbound(s.clone())),
            Expr::Neg(e) => Ok(-e.eval_with(lookup)?),
            Expr::Binary(op, a, b) => {
                let x = a.eval_with(lookup)?;
                let y = b.eval_with(lookup)?;
                apply_binary(*op, x, y).map_err(|reason| EvalError::Domain { node: self.to_string(), reason })
            }
            Expr::Call(f, a) => {
                let x = a.eval_with(lookup)?;
                apply_func(*f, x).map_err(|reason| EvalError::Domain { node: self.to_string(), reason })
            }
        }
    }
}
