use nalgebra::DMatrix;

use super::{cum_trapz, trapz, SmoothError, SmoothedPath};
use crate::expr::CompiledExpr;
use crate::linearity::LinearDecomposition;
use crate::model::{OdeModel, Values};
use crate::ode::{ExternalInput, InputSet};

/// Floor applied to smoothed states when an expression leaves its domain.
pub const CLAMP_FLOOR: f64 = 1e-8;

/// Cumulative integrals along a smoothed path for one decomposition and one
/// binding of the non-linear parameters.
#[derive(Debug, Clone)]
pub struct QuadCache {
    pub grid: Vec<f64>,
    /// Per equation, G × p_L: column k is `∫ g_jk(x̂(s)) ds` from the grid start.
    pub g_cum: Vec<DMatrix<f64>>,
    /// G × d cumulative integrals of the offsets.
    pub f0_cum: DMatrix<f64>,
    /// d × p_L, `∫ Ĝ(t) dt`.
    pub a_hat: DMatrix<f64>,
    /// p_L × p_L, `∫ Ĝᵀ(t) Ĝ(t) dt`.
    pub b_hat: DMatrix<f64>,
    /// Grid points where states had to be clamped.
    pub clamped: usize,
}

/// Evaluates a fixed list of expressions along a smoothed path.
pub(crate) struct GridEval<'m> {
    model: &'m OdeModel,
    exprs: Vec<CompiledExpr>,
}

impl<'m> GridEval<'m> {
    pub(crate) fn new(model: &'m OdeModel, exprs: Vec<CompiledExpr>) -> Self {
        GridEval { model, exprs }
    }

    /// G × k matrix of expression values and the number of clamped points.
    pub(crate) fn run(
        &self,
        path: &SmoothedPath,
        params: &Values,
        inputs: &[ExternalInput],
    ) -> Result<(DMatrix<f64>, usize), SmoothError> {
        let layout = self.model.layout();
        let signals = InputSet::new(self.model, inputs)
            .map_err(|e| SmoothError::Eval { t: path.grid[0], message: e.to_string() })?;
        let mut slots = self.model.slot_template(params);
        let mut out = DMatrix::zeros(path.len(), self.exprs.len());
        let mut clamped = 0;
        for (i, &t) in path.grid.iter().enumerate() {
            slots[0] = t;
            for j in 0..self.model.dim() {
                slots[layout.state(j)] = path.values[(i, j)];
            }
            for s in 0..signals.len() {
                slots[layout.input(s)] =
                    signals.value(s, t).map_err(|e| SmoothError::Eval { t, message: e.to_string() })?;
            }
            let mut retried = false;
            let mut k = 0;
            while k < self.exprs.len() {
                match self.exprs[k].eval(&slots) {
                    Ok(v) => {
                        out[(i, k)] = v;
                        k += 1;
                    }
                    Err(e) => {
                        if retried {
                            return Err(SmoothError::Eval { t, message: e.to_string() });
                        }
                        for j in 0..self.model.dim() {
                            let s = &mut slots[layout.state(j)];
                            *s = s.max(CLAMP_FLOOR);
                        }
                        retried = true;
                        clamped += 1;
                        k = 0;
                    }
                }
            }
        }
        Ok((out, clamped))
    }
}

/// Compiled decomposition, reusable across parameter trials.
pub struct QuadBuilder<'m> {
    eval: GridEval<'m>,
    // (equation, linear index or None for the offset) per compiled column
    columns: Vec<(usize, Option<usize>)>,
    d: usize,
    p: usize,
}

impl<'m> QuadBuilder<'m> {
    pub fn new(model: &'m OdeModel, decomp: &LinearDecomposition) -> Self {
        let mut exprs = Vec::new();
        let mut columns = Vec::new();
        for j in 0..decomp.n_equations() {
            if !decomp.offsets[j].is_zero() {
                exprs.push(model.compile(&decomp.offsets[j]));
                columns.push((j, None));
            }
            for k in decomp.present_in(j) {
                exprs.push(model.compile(&decomp.coefficients[j][k]));
                columns.push((j, Some(k)));
            }
        }
        QuadBuilder { eval: GridEval::new(model, exprs), columns, d: decomp.n_equations(), p: decomp.n_linear() }
    }

    pub fn build(&self, path: &SmoothedPath, params: &Values, inputs: &[ExternalInput]) -> Result<QuadCache, SmoothError> {
        let g = path.len();
        let (vals, clamped) = self.eval.run(path, params, inputs)?;
        let mut g_cum = vec![DMatrix::zeros(g, self.p); self.d];
        let mut f0_cum = DMatrix::zeros(g, self.d);
        for (c, &(j, k)) in self.columns.iter().enumerate() {
            let col: Vec<f64> = vals.column(c).iter().copied().collect();
            let cum = cum_trapz(&path.grid, &col)?;
            match k {
                Some(k) => g_cum[j].column_mut(k).copy_from_slice(&cum),
                None => f0_cum.column_mut(j).copy_from_slice(&cum),
            }
        }
        let mut a_hat = DMatrix::zeros(self.d, self.p);
        let mut b_hat = DMatrix::zeros(self.p, self.p);
        let mut prod = vec![0.0; g];
        for (j, gj) in g_cum.iter().enumerate() {
            for k in 0..self.p {
                let ck = gj.column(k);
                if ck.iter().all(|v| *v == 0.0) {
                    continue;
                }
                a_hat[(j, k)] = trapz(&path.grid, ck.as_slice());
                for l in k..self.p {
                    let cl = gj.column(l);
                    for i in 0..g {
                        prod[i] = ck[i] * cl[i];
                    }
                    b_hat[(k, l)] += trapz(&path.grid, &prod);
                }
            }
        }
        for k in 0..self.p {
            for l in 0..k {
                b_hat[(k, l)] = b_hat[(l, k)];
            }
        }
        Ok(QuadCache { grid: path.grid.clone(), g_cum, f0_cum, a_hat, b_hat, clamped })
    }
}

/// One-shot [`QuadBuilder`] construction and evaluation.
pub fn build_quad(
    model: &OdeModel,
    path: &SmoothedPath,
    decomp: &LinearDecomposition,
    params: &Values,
    inputs: &[ExternalInput],
) -> Result<QuadCache, SmoothError> {
    QuadBuilder::new(model, decomp).build(path, params, inputs)
}
