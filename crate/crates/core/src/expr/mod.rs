//! Symbolic right-hand sides: parsing, evaluation and printing of scalar
//! expressions over named symbols.
//!
//! The grammar is ordinary infix arithmetic with `^` binding tighter than a
//! leading minus, which binds tighter than `*` and `/`, which bind tighter
//! than `+` and `-`. Powers associate to the right, so `-x^2` is `-(x^2)` and
//! `a^b^c` is `a^(b^c)`.

mod compile;
mod eval;
mod parse;

use std::collections::BTreeSet;
use std::fmt;

pub use compile::CompiledExpr;
pub use eval::EvalError;
pub use parse::{parse_expression, ParseError};

/// Binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    pub fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

/// Built-in unary functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }
}

/// Expression tree.
///
/// Trees produced by [`parse_expression`] never hold negative constants; a
/// leading minus is always a [`Expr::Neg`] node. The name `pi` is folded into
/// a constant at parse time.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Sym(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn constant(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn sym(name: impl Into<String>) -> Expr {
        Expr::Sym(name.into())
    }

    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 1.0)
    }

    /// `self + rhs`, dropping literal zeros.
    pub fn add(self, rhs: Expr) -> Expr {
        if self.is_zero() {
            rhs
        } else if rhs.is_zero() {
            self
        } else {
            Expr::binary(BinOp::Add, self, rhs)
        }
    }

    /// `self * rhs`, dropping literal ones and collapsing literal zeros.
    pub fn mul(self, rhs: Expr) -> Expr {
        if self.is_zero() || rhs.is_zero() {
            Expr::Const(0.0)
        } else if self.is_one() {
            rhs
        } else if rhs.is_one() {
            self
        } else {
            Expr::binary(BinOp::Mul, self, rhs)
        }
    }

    /// `self / rhs`, dropping a literal unit denominator.
    pub fn div(self, rhs: Expr) -> Expr {
        if self.is_zero() {
            Expr::Const(0.0)
        } else if rhs.is_one() {
            self
        } else {
            Expr::binary(BinOp::Div, self, rhs)
        }
    }

    pub fn negate(self) -> Expr {
        match self {
            Expr::Const(c) if c == 0.0 => Expr::Const(0.0),
            Expr::Neg(inner) => *inner,
            other => Expr::Neg(Box::new(other)),
        }
    }

    /// Every symbol name referenced by the tree.
    pub fn symbols(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_symbols(&mut out);
        out
    }

    fn collect_symbols(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Sym(s) => {
                out.insert(s.clone());
            }
            Expr::Neg(e) | Expr::Call(_, e) => e.collect_symbols(out),
            Expr::Binary(_, a, b) => {
                a.collect_symbols(out);
                b.collect_symbols(out);
            }
        }
    }

    pub fn contains_symbol(&self, name: &str) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Sym(s) => s == name,
            Expr::Neg(e) | Expr::Call(_, e) => e.contains_symbol(name),
            Expr::Binary(_, a, b) => a.contains_symbol(name) || b.contains_symbol(name),
        }
    }

    /// Replace symbols by constants wherever `lookup` yields a value.
    pub fn substitute(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Sym(s) => match lookup(s) {
                Some(v) => Expr::Const(v),
                None => Expr::Sym(s.clone()),
            },
            Expr::Neg(e) => Expr::Neg(Box::new(e.substitute(lookup))),
            Expr::Call(f, e) => Expr::Call(*f, Box::new(e.substitute(lookup))),
            Expr::Binary(op, a, b) => Expr::binary(*op, a.substitute(lookup), b.substitute(lookup)),
        }
    }
}

/// Fully parenthesised rendering; re-parses to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 {
                    write!(f, "(-{})", -c)
                } else {
                    write!(f, "{c:?}")
                }
            }
            Expr::Sym(s) => f.write_str(s),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
        }
    }
}
