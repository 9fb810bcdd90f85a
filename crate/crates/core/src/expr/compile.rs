use super::eval::{apply_binary, apply_func};
use super::{BinOp, EvalError, Expr, Func};

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Load(usize),
    Neg,
    Bin(BinOp),
    Call(Func),
}

const INLINE_STACK: usize = 32;

/// An [`Expr`] lowered to postfix code with symbols resolved to slot
/// indices, for evaluation in tight loops.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    code: Vec<Op>,
    depth: usize,
    source: Expr,
    slot_names: Vec<(usize, String)>,
}

impl CompiledExpr {
    /// Lower `expr`, resolving each symbol through `slot_of`. Returns the
    /// first unresolved name on failure.
    pub fn compile(expr: &Expr, slot_of: &dyn Fn(&str) -> Option<usize>) -> Result<Self, String> {
        let mut code = Vec::new();
        let mut slot_names = Vec::new();
        lower(expr, slot_of, &mut code, &mut slot_names)?;
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &code {
            match op {
                Op::Const(_) | Op::Load(_) => depth += 1,
                Op::Bin(_) => depth -= 1,
                Op::Neg | Op::Call(_) => {}
            }
            max_depth = max_depth.max(depth);
        }
        slot_names.sort();
        slot_names.dedup();
        Ok(CompiledExpr { code, depth: max_depth, source: expr.clone(), slot_names })
    }

    pub fn source(&self) -> &Expr {
        &self.source
    }

    /// Fast evaluation against a slot vector. On a domain fault the source
    /// tree is re-evaluated to name the offending node.
    pub fn eval(&self, slots: &[f64]) -> Result<f64, EvalError> {
        let ok = if self.depth <= INLINE_STACK {
            let mut stack = [0.0f64; INLINE_STACK];
            run(&self.code, slots, &mut stack)
        } else {
            let mut stack = vec![0.0f64; self.depth];
            run(&self.code, slots, &mut stack)
        };
        match ok {
            Some(v) => Ok(v),
            None => Err(self.explain(slots)),
        }
    }

    fn explain(&self, slots: &[f64]) -> EvalError {
        let lookup = |name: &str| {
            self.slot_names.iter().find(|(_, n)| n == name).map(|(i, _)| slots[*i])
        };
        match self.source.eval_with(&lookup) {
            Err(e) => e,
            Ok(_) => EvalError::Domain { node: self.source.to_string(), reason: "evaluation fault" },
        }
    }
}

fn lower(
    e: &Expr,
    slot_of: &dyn Fn(&str) -> Option<usize>,
    code: &mut Vec<Op>,
    names: &mut Vec<(usize, String)>,
) -> Result<(), String> {
    match e {
        Expr::Const(c) => code.push(Op::Const(*c)),
        Expr::Sym(s) => {
            let slot = slot_of(s).ok_or_else(|| s.clone())?;
            names.push((slot, s.clone()));
            code.push(Op::Load(slot));
        }
        Expr::Neg(a) => {
            lower(a, slot_of, code, names)?;
            code.push(Op::Neg);
        }
        Expr::Call(f, a) => {
            lower(a, slot_of, code, names)?;
            code.push(Op::Call(*f));
        }
        Expr::Binary(op, a, b) => {
            lower(a, slot_of, code, names)?;
            lower(b, slot_of, code, names)?;
            code.push(Op::Bin(*op));
        }
    }
    Ok(())
}

#[inline]
fn run(code: &[Op], slots: &[f64], stack: &mut [f64]) -> Option<f64> {
    let mut sp = 0usize;
    for op in code {
        match *op {
            Op::Const(c) => {
                stack[sp] = c;
                sp += 1;
            }
            Op::Load(i) => {
                stack[sp] = slots[i];
                sp += 1;
            }
            Op::Neg => stack[sp - 1] = -stack[sp - 1],
            Op::Bin(b) => {
                let y = stack[sp - 1];
                let x = stack[sp - 2];
                sp -= 1;
                stack[sp - 1] = match b {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    _ => apply_binary(b, x, y).ok()?,
                };
                if stack[sp - 1].is_nan() {
                    return None;
                }
            }
            Op::Call(f) => stack[sp - 1] = apply_func(f, stack[sp - 1]).ok()?,
        }
    }
    Some(stack[0])
}
