//! Stage one: integral matching.
//!
//! The criterion `Σ_j ∫ (x̂_j(t) − ξ_j − ∫₀ᵗ F_j(x̂(s); θ) ds)² dt` is
//! discretised on the smoothing grid. Linear parameters (and initial values
//! declared linear) are profiled out by least squares; the remaining
//! non-linear parameters are searched with [`crate::optim::minimize`].

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::boxls::{check_conditioning, solve_box_qp, LinearSolveError};
use crate::linearity::{decompose_linear, Diagnostic, LinearDecomposition};
use crate::model::{OdeModel, ParamRole, Values};
use crate::obs::ObservationSet;
use crate::ode::ExternalInput;
use crate::optim::{minimize, OptimConfig, OptimError};
use crate::smoothing::quad::GridEval;
use crate::smoothing::{cum_trapz, resmooth, smooth_all, trapz_weights, QuadBuilder, QuadCache, SmoothError, SmoothMethod, SmoothedPath};

/// Box bounds keyed by parameter (or variable, for initial values) name.
pub type Bounds = BTreeMap<String, (f64, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImMethod {
    #[default]
    Separable,
    NonSeparable,
}

/// Treatment of one variable's initial value `x_j(t_1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum X0Role {
    Known(f64),
    /// Estimated in closed form alongside the linear parameters.
    Linear,
    /// Searched with the non-linear parameters.
    Nonlinear,
}

/// Arguments passed to a [`ReconstructionHook`].
pub struct HookInput<'a> {
    pub model: &'a OdeModel,
    /// Fixed values and the current non-linear parameter trial.
    pub params: &'a Values,
    /// Known initial values and the current trial of non-linear ones.
    pub x0: &'a Values,
    pub obs: &'a ObservationSet,
}

/// Completes a partially observed set from the current parameter trial.
/// The returned set must cover every state variable.
pub type ReconstructionHook = Arc<dyn Fn(&HookInput<'_>) -> Result<ObservationSet, String> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImError {
    #[error("parameter roles are inconsistent with the equations")]
    Roles(Vec<Diagnostic>),
    #[error(transparent)]
    Smooth(#[from] SmoothError),
    #[error(transparent)]
    Linear(#[from] LinearSolveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("reconstruction hook failed: {0}")]
    Hook(String),
    #[error("missing start value for '{0}'")]
    MissingStart(String),
    #[error("{0}")]
    Unsupported(String),
}

/// Problem-wide settings for stage one.
#[derive(Clone, Default)]
pub struct ImSpec {
    /// One entry per model variable.
    pub x0: Vec<X0Role>,
    pub bounds: Bounds,
    pub smoothing: SmoothMethod,
    pub hook: Option<ReconstructionHook>,
    /// Inputs shared by every set; set-specific tables live on the set.
    pub inputs: Vec<ExternalInput>,
}

struct SetData {
    obs: ObservationSet,
    path: SmoothedPath,
    inputs: Vec<ExternalInput>,
    weights: Vec<f64>,
}

/// Linear unknowns profiled out for one non-linear trial.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub theta: Values,
    /// Per set, the initial values estimated as linear unknowns.
    pub xi: Vec<Values>,
    /// Criterion value at the profiled solution.
    pub loss: f64,
    pub clamped: usize,
}

/// Result of stage one.
#[derive(Debug, Clone, PartialEq)]
pub struct ImEstimate {
    pub linear: Values,
    pub nonlinear: Values,
    /// Per set, every variable's initial value (known or estimated).
    pub x0: Vec<Values>,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best criterion value per optimizer iteration.
    pub trace: Vec<f64>,
    /// Per-equation estimates when decoupled.
    pub decoupled: Option<DecoupledMatrix>,
}

impl ImEstimate {
    /// Every estimated quantity by name (initial values from the first set).
    pub fn all(&self) -> Values {
        let mut v = self.linear.clone();
        v.extend(self.nonlinear.clone());
        v
    }
}

/// Estimates per equation; `None` where a parameter is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledMatrix {
    pub equations: Vec<String>,
    pub parameters: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl DecoupledMatrix {
    /// Mean over equations of each parameter's entries.
    pub fn means(&self) -> Values {
        let mut out = Values::new();
        for (k, p) in self.parameters.iter().enumerate() {
            let vals: Vec<f64> = self.values.iter().filter_map(|r| r[k]).collect();
            if !vals.is_empty() {
                out.insert(p.clone(), vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        out
    }
}

/// A stage-one problem over one or more observation sets sharing all
/// parameters; each set has its own initial values.
pub struct ImProblem<'m> {
    model: &'m OdeModel,
    decomp: LinearDecomposition,
    quad: QuadBuilder<'m>,
    full: GridEval<'m>,
    sets: Vec<SetData>,
    spec: ImSpec,
    rows: Vec<usize>,
    linear: Vec<usize>,
    nonlinear: Vec<String>,
}

impl<'m> ImProblem<'m> {
    /// Smooth every set and compile the decomposition. `starts` supplies the
    /// non-linear values used for the first reconstruction.
    pub fn new(model: &'m OdeModel, sets: &[ObservationSet], spec: ImSpec, starts: &Values) -> Result<Self, ImError> {
        let decomp = decompose_linear(model).map_err(ImError::Roles)?;
        if spec.x0.len() != model.dim() {
            return Err(ImError::Unsupported("initial-value roles must cover every variable".into()));
        }
        if sets.is_empty() {
            return Err(ImError::Unsupported("no observation sets".into()));
        }
        let has_nl_x0 = spec.x0.iter().any(|r| matches!(r, X0Role::Nonlinear));
        if sets.len() > 1 && has_nl_x0 {
            return Err(ImError::Unsupported("non-linear initial values require a single observation set".into()));
        }
        let rows: Vec<usize> = (0..model.dim()).collect();
        let mut p = ImProblem {
            model,
            quad: QuadBuilder::new(model, &decomp),
            full: GridEval::new(model, model.compiled_equations().to_vec()),
            decomp,
            sets: Vec::new(),
            spec,
            rows: Vec::new(),
            linear: Vec::new(),
            nonlinear: Vec::new(),
        };
        p.set_rows(rows);
        for (k, name) in p.nonlinear.iter().enumerate() {
            if !starts.contains_key(name) {
                let _ = k;
                return Err(ImError::MissingStart(name.clone()));
            }
        }
        for obs in sets {
            let mut inputs = p.spec.inputs.clone();
            inputs.extend(obs.inputs.iter().cloned());
            let full_obs = p.reconstruct(obs, starts)?;
            let path = smooth_all(model, &full_obs, p.spec.smoothing)?;
            let weights = trapz_weights(&path.grid);
            p.sets.push(SetData { obs: obs.clone(), path, inputs, weights });
        }
        Ok(p)
    }

    fn set_rows(&mut self, rows: Vec<usize>) {
        let all_rows = rows.len() == self.model.dim();
        let hook = self.spec.hook.is_some();
        self.linear = (0..self.decomp.n_linear())
            .filter(|&k| rows.iter().any(|&j| !self.decomp.coefficients[j][k].is_zero()))
            .collect();
        let mut nonlinear: Vec<String> = self
            .model
            .parameter_names(ParamRole::Nonlinear)
            .into_iter()
            .filter(|n| all_rows || hook || rows.iter().any(|&j| self.model.equations()[j].contains_symbol(n)))
            .collect();
        for (j, v) in self.model.variables().iter().enumerate() {
            if matches!(self.spec.x0[j], X0Role::Nonlinear) && (all_rows || hook || rows.contains(&j)) {
                nonlinear.push(v.clone());
            }
        }
        self.nonlinear = nonlinear;
        self.rows = rows;
    }

    /// Copy restricted to the given equations, sharing smoothed data.
    pub fn restricted(&self, rows: Vec<usize>) -> ImProblem<'m> {
        let mut p = ImProblem {
            model: self.model,
            decomp: self.decomp.clone(),
            quad: QuadBuilder::new(self.model, &self.decomp),
            full: GridEval::new(self.model, rows.iter().map(|&j| self.model.compiled_equations()[j].clone()).collect()),
            sets: self
                .sets
                .iter()
                .map(|s| SetData { obs: s.obs.clone(), path: s.path.clone(), inputs: s.inputs.clone(), weights: s.weights.clone() })
                .collect(),
            spec: self.spec.clone(),
            rows: Vec::new(),
            linear: Vec::new(),
            nonlinear: Vec::new(),
        };
        p.set_rows(rows);
        p
    }

    pub fn model(&self) -> &OdeModel {
        self.model
    }

    pub fn decomposition(&self) -> &LinearDecomposition {
        &self.decomp
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Linear parameters identifiable from the included equations.
    pub fn linear_names(&self) -> Vec<String> {
        self.linear.iter().map(|&k| self.decomp.linear_params[k].clone()).collect()
    }

    /// Non-linear search variables, including non-linear initial values.
    pub fn nonlinear_names(&self) -> &[String] {
        &self.nonlinear
    }

    pub fn n_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn path(&self, set: usize) -> &SmoothedPath {
        &self.sets[set].path
    }

    fn linear_x0(&self) -> Vec<usize> {
        self.rows.iter().copied().filter(|&j| matches!(self.spec.x0[j], X0Role::Linear)).collect()
    }

    fn bound(&self, name: &str) -> (f64, f64) {
        self.spec.bounds.get(name).copied().unwrap_or((f64::NEG_INFINITY, f64::INFINITY))
    }

    fn hook_params(&self, nl: &Values) -> (Values, Values) {
        let mut params: Values = self.model.fixed().iter().cloned().collect();
        let mut x0 = Values::new();
        for (j, v) in self.model.variables().iter().enumerate() {
            match self.spec.x0[j] {
                X0Role::Known(val) => {
                    x0.insert(v.clone(), val);
                }
                X0Role::Nonlinear => {
                    if let Some(val) = nl.get(v) {
                        x0.insert(v.clone(), *val);
                    }
                }
                X0Role::Linear => {}
            }
        }
        for (k, val) in nl {
            if self.model.variable_index(k).is_none() {
                params.insert(k.clone(), *val);
            }
        }
        (params, x0)
    }

    fn reconstruct(&self, obs: &ObservationSet, nl: &Values) -> Result<ObservationSet, ImError> {
        match &self.spec.hook {
            None => Ok(obs.clone()),
            Some(hook) => {
                let (params, x0) = self.hook_params(nl);
                let out = hook(&HookInput { model: self.model, params: &params, x0: &x0, obs }).map_err(ImError::Hook)?;
                let mut merged = out;
                merged.index = obs.index;
                Ok(merged)
            }
        }
    }

    fn path_for(&self, s: usize, nl: &Values) -> Result<Cow<'_, SmoothedPath>, ImError> {
        let set = &self.sets[s];
        if self.spec.hook.is_none() {
            return Ok(Cow::Borrowed(&set.path));
        }
        let obs = self.reconstruct(&set.obs, nl)?;
        Ok(Cow::Owned(resmooth(self.model, &obs, self.spec.smoothing, &set.path)?))
    }

    /// Known or trial initial value of variable `j`; `None` when linear.
    fn fixed_x0(&self, j: usize, nl: &Values) -> Option<f64> {
        match self.spec.x0[j] {
            X0Role::Known(v) => Some(v),
            X0Role::Nonlinear => nl.get(&self.model.variables()[j]).copied(),
            X0Role::Linear => None,
        }
    }

    fn bindings(&self, nl: &Values) -> Values {
        nl.iter().filter(|(k, _)| self.model.variable_index(k).is_none()).map(|(k, v)| (k.clone(), *v)).collect()
    }

    fn unknown_names(&self) -> Vec<String> {
        let mut names = self.linear_names();
        let lx = self.linear_x0();
        for s in 0..self.sets.len() {
            for &j in &lx {
                let v = &self.model.variables()[j];
                names.push(if self.sets.len() == 1 { v.clone() } else { format!("{v}[set {}]", s + 1) });
            }
        }
        names
    }

    /// Paths and quadrature caches for a non-linear trial.
    fn prepare(&self, nl: &Values) -> Result<Vec<(Cow<'_, SmoothedPath>, QuadCache)>, ImError> {
        let params = self.bindings(nl);
        (0..self.sets.len())
            .map(|s| {
                let path = self.path_for(s, nl)?;
                let quad = self.quad.build(&path, &params, &self.sets[s].inputs)?;
                Ok((path, quad))
            })
            .collect()
    }

    // y_j(t) = x̂_j(t) − f̂0_j(t) − (known ξ_j)
    fn targets(&self, path: &SmoothedPath, quad: &QuadCache, nl: &Values) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|&j| {
                let xi = self.fixed_x0(j, nl).unwrap_or(0.0);
                (0..path.len()).map(|i| path.values[(i, j)] - quad.f0_cum[(i, j)] - xi).collect()
            })
            .collect()
    }

    /// Normal equations `N z = b` for `z = (θ_L, ξ per set)`, with unknown
    /// names.
    pub fn normal_equations(&self, nl: &Values) -> Result<(DMatrix<f64>, DVector<f64>, Vec<String>), ImError> {
        let prepared = self.prepare(nl)?;
        Ok(self.assemble(&prepared, nl))
    }

    fn assemble(&self, prepared: &[(Cow<'_, SmoothedPath>, QuadCache)], nl: &Values) -> (DMatrix<f64>, DVector<f64>, Vec<String>) {
        let pl = self.linear.len();
        let lx = self.linear_x0();
        let q = pl + lx.len() * self.sets.len();
        let mut n = DMatrix::zeros(q, q);
        let mut b = DVector::zeros(q);
        for (s, (path, quad)) in prepared.iter().enumerate() {
            let w = &self.sets[s].weights;
            let ys = self.targets(path, quad, nl);
            for (r, &j) in self.rows.iter().enumerate() {
                let g = &quad.g_cum[j];
                let y = &ys[r];
                let xi_col = lx.iter().position(|&v| v == j).map(|p| pl + s * lx.len() + p);
                for (a, &k) in self.linear.iter().enumerate() {
                    let gk = g.column(k);
                    if gk.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let mut bk = 0.0;
                    let mut ak = 0.0;
                    for i in 0..w.len() {
                        bk += w[i] * gk[i] * y[i];
                        ak += w[i] * gk[i];
                    }
                    b[a] += bk;
                    for (c, &l) in self.linear.iter().enumerate().skip(a) {
                        let gl = g.column(l);
                        let mut acc = 0.0;
                        for i in 0..w.len() {
                            acc += w[i] * gk[i] * gl[i];
                        }
                        n[(a, c)] += acc;
                    }
                    if let Some(xc) = xi_col {
                        n[(a, xc)] += ak;
                    }
                }
                if let Some(xc) = xi_col {
                    let span: f64 = w.iter().sum();
                    n[(xc, xc)] += span;
                    b[xc] += w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        for r in 0..q {
            for c in 0..r {
                n[(r, c)] = n[(c, r)];
            }
        }
        (n, b, self.unknown_names())
    }

    fn unpack(&self, z: &DVector<f64>) -> (Values, Vec<Values>) {
        let pl = self.linear.len();
        let lx = self.linear_x0();
        let theta = self.linear.iter().enumerate().map(|(a, &k)| (self.decomp.linear_params[k].clone(), z[a])).collect();
        let xi = (0..self.sets.len())
            .map(|s| lx.iter().enumerate().map(|(p, &j)| (self.model.variables()[j].clone(), z[pl + s * lx.len() + p])).collect())
            .collect();
        (theta, xi)
    }

    fn residual_loss(&self, prepared: &[(Cow<'_, SmoothedPath>, QuadCache)], nl: &Values, theta: &Values, xi: &[Values]) -> f64 {
        let mut loss = 0.0;
        for (s, (path, quad)) in prepared.iter().enumerate() {
            let w = &self.sets[s].weights;
            let ys = self.targets(path, quad, nl);
            for (r, &j) in self.rows.iter().enumerate() {
                let x0 = xi[s].get(&self.model.variables()[j]).copied().unwrap_or(0.0);
                for i in 0..w.len() {
                    let mut e = ys[r][i] - x0;
                    for &k in &self.linear {
                        e -= quad.g_cum[j][(i, k)] * theta[&self.decomp.linear_params[k]];
                    }
                    loss += w[i] * e * e;
                }
            }
        }
        loss
    }

    fn has_finite_bounds(&self, names: &[String]) -> bool {
        names.iter().any(|n| {
            let base = n.split('[').next().unwrap_or(n);
            let (lo, hi) = self.bound(base);
            lo.is_finite() || hi.is_finite()
        })
    }

    /// Profile out the linear unknowns at a non-linear trial. Uses the
    /// closed-form estimators when they apply and no bound is finite, the
    /// active-set solver when a bound is finite.
    pub fn linear_fit(&self, nl: &Values) -> Result<LinearFit, ImError> {
        let prepared = self.prepare(nl)?;
        let (n, b, names) = self.assemble(&prepared, nl);
        let clamped = prepared.iter().map(|(_, q)| q.clamped).sum();
        if names.is_empty() {
            let (theta, xi) = self.unpack(&DVector::zeros(0));
            let loss = self.residual_loss(&prepared, nl, &theta, &xi);
            return Ok(LinearFit { theta, xi, loss, clamped });
        }
        check_conditioning(&n, &names)?;
        let z = if self.has_finite_bounds(&names) {
            let (lower, upper): (Vec<f64>, Vec<f64>) = names
                .iter()
                .map(|nm| self.bound(nm.split('[').next().unwrap_or(nm)))
                .unzip();
            solve_box_qp(&n, &b, &lower, &upper)?
        } else if let Some(z) = self.closed_form(&prepared, nl) {
            z
        } else {
            n.clone().cholesky().ok_or(LinearSolveError::IllConditioned { condition: f64::INFINITY, parameters: names.clone() })?.solve(&b)
        };
        let (theta, xi) = self.unpack(&z);
        let loss = self.residual_loss(&prepared, nl, &theta, &xi);
        Ok(LinearFit { theta, xi, loss, clamped })
    }

    fn closed_form(&self, prepared: &[(Cow<'_, SmoothedPath>, QuadCache)], nl: &Values) -> Option<DVector<f64>> {
        if self.sets.len() != 1 || self.rows.len() != self.model.dim() || self.linear.len() != self.decomp.n_linear() {
            return None;
        }
        let lx = self.linear_x0();
        if !(lx.is_empty() || lx.len() == self.model.dim()) || self.linear.is_empty() {
            return None;
        }
        let (path, quad) = &prepared[0];
        let (xi, theta) = direct_estimate(path, quad, &self.targets(path, quad, nl), !lx.is_empty())?;
        let mut z = DVector::zeros(self.linear.len() + lx.len());
        z.rows_mut(0, self.linear.len()).copy_from(&theta);
        if let Some(xi) = xi {
            z.rows_mut(self.linear.len(), lx.len()).copy_from(&xi);
        }
        Some(z)
    }

    /// Closed-form estimators at a non-linear trial: `(ξ̂, θ̂_L)`. Only for a
    /// single set over all equations, with every or no initial value linear.
    pub fn direct_linear_estimate(&self, nl: &Values) -> Result<(Option<DVector<f64>>, DVector<f64>), ImError> {
        let prepared = self.prepare(nl)?;
        let (n, _, names) = self.assemble(&prepared, nl);
        check_conditioning(&n, &names)?;
        let lx = self.linear_x0();
        if self.sets.len() != 1 || !(lx.is_empty() || lx.len() == self.model.dim()) || self.linear.is_empty() {
            return Err(ImError::Unsupported("closed form needs one set and all-or-no linear initial values".into()));
        }
        let (path, quad) = &prepared[0];
        direct_estimate(path, quad, &self.targets(path, quad, nl), !lx.is_empty())
            .ok_or_else(|| ImError::Linear(LinearSolveError::IllConditioned { condition: f64::INFINITY, parameters: names }))
    }

    /// `M(θ_NL)`, the criterion with linear unknowns profiled out.
    pub fn reduced_criterion(&self, nl: &Values) -> Result<LinearFit, ImError> {
        self.linear_fit(nl)
    }

    /// The criterion evaluated from the full equations at explicit values.
    /// Domain failures give `+∞`.
    pub fn im_loss(&self, params: &Values, x0: &[Values]) -> f64 {
        self.try_im_loss(params, x0).unwrap_or(f64::INFINITY)
    }

    fn try_im_loss(&self, params: &Values, x0: &[Values]) -> Result<f64, ImError> {
        let mut loss = 0.0;
        for s in 0..self.sets.len() {
            let mut nl = params.clone();
            for (j, v) in self.model.variables().iter().enumerate() {
                if matches!(self.spec.x0[j], X0Role::Nonlinear) {
                    if let Some(val) = x0[s].get(v) {
                        nl.insert(v.clone(), *val);
                    }
                }
            }
            let path = self.path_for(s, &nl)?;
            let (f, _) = self.full.run(&path, &self.bindings(params), &self.sets[s].inputs)?;
            let w = &self.sets[s].weights;
            for (r, &j) in self.rows.iter().enumerate() {
                let col: Vec<f64> = f.column(r).iter().copied().collect();
                let cum = cum_trapz(&path.grid, &col)?;
                let xi = match self.spec.x0[j] {
                    X0Role::Known(v) => v,
                    _ => *x0[s].get(&self.model.variables()[j]).ok_or_else(|| ImError::MissingStart(self.model.variables()[j].clone()))?,
                };
                for i in 0..w.len() {
                    let e = path.values[(i, j)] - xi - cum[i];
                    loss += w[i] * e * e;
                }
            }
        }
        Ok(if loss.is_finite() { loss } else { f64::INFINITY })
    }

    fn nl_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.nonlinear.iter().map(|n| self.bound(n)).unzip()
    }

    /// Minimise the criterion. `starts` must hold every non-linear search
    /// variable; in non-separable mode it may also hold linear starts.
    pub fn fit(&self, method: ImMethod, starts: &Values, cfg: &OptimConfig) -> Result<ImEstimate, ImError> {
        for n in &self.nonlinear {
            if !starts.contains_key(n) {
                return Err(ImError::MissingStart(n.clone()));
            }
        }
        let nl_start: Values = self.nonlinear.iter().map(|n| (n.clone(), starts[n])).collect();
        let method = if self.linear.is_empty() && self.linear_x0().is_empty() { ImMethod::NonSeparable } else { method };
        match method {
            ImMethod::Separable => self.fit_separable(&nl_start, cfg),
            ImMethod::NonSeparable => self.fit_joint(&nl_start, starts, cfg),
        }
    }

    fn nl_values(&self, x: &[f64]) -> Values {
        self.nonlinear.iter().cloned().zip(x.iter().copied()).collect()
    }

    fn fit_separable(&self, nl_start: &Values, cfg: &OptimConfig) -> Result<ImEstimate, ImError> {
        let x0: Vec<f64> = self.nonlinear.iter().map(|n| nl_start[n]).collect();
        let (lower, upper) = self.nl_bounds();
        let mut f = |x: &[f64]| self.linear_fit(&self.nl_values(x)).map(|r| r.loss).unwrap_or(f64::INFINITY);
        let (best, iterations, converged, trace) = if x0.is_empty() {
            (Vec::new(), 0, true, Vec::new())
        } else {
            let r = minimize(&mut f, &x0, &lower, &upper, &OptimConfig { trace: true, ..*cfg })?;
            (r.argmin, r.iterations, r.converged, r.trace)
        };
        let nl = self.nl_values(&best);
        let lin = self.linear_fit(&nl)?;
        Ok(self.estimate(lin.theta, nl, lin.xi, lin.loss, iterations, converged, trace))
    }

    fn fit_joint(&self, nl_start: &Values, starts: &Values, cfg: &OptimConfig) -> Result<ImEstimate, ImError> {
        let lin_names = self.linear_names();
        let lx = self.linear_x0();
        let needs_direct = lin_names.iter().any(|n| !starts.contains_key(n)) || !lx.is_empty();
        let direct = if needs_direct && !(lin_names.is_empty() && lx.is_empty()) { Some(self.linear_fit(nl_start)?) } else { None };
        // search vector: non-linear, linear, then linear initial values per set
        let mut names: Vec<String> = self.nonlinear.clone();
        let mut x0: Vec<f64> = self.nonlinear.iter().map(|n| nl_start[n]).collect();
        let (mut lower, mut upper) = self.nl_bounds();
        for n in &lin_names {
            let v = starts.get(n).copied().or_else(|| direct.as_ref().map(|d| d.theta[n])).unwrap_or(0.0);
            let (lo, hi) = self.bound(n);
            names.push(n.clone());
            x0.push(v);
            lower.push(lo);
            upper.push(hi);
        }
        for s in 0..self.sets.len() {
            for &j in &lx {
                let v = &self.model.variables()[j];
                let start = direct.as_ref().map(|d| d.xi[s][v]).unwrap_or(0.0);
                let (lo, hi) = self.bound(v);
                names.push(v.clone());
                x0.push(start);
                lower.push(lo);
                upper.push(hi);
            }
        }
        let p_nl = self.nonlinear.len();
        let p_l = lin_names.len();
        let split = |x: &[f64]| -> (Values, Vec<Values>) {
            let mut params: Values = Values::new();
            let mut xs = vec![Values::new(); self.sets.len()];
            for (i, n) in self.nonlinear.iter().enumerate() {
                if self.model.variable_index(n).is_some() {
                    xs[0].insert(n.clone(), x[i]);
                } else {
                    params.insert(n.clone(), x[i]);
                }
            }
            for (i, n) in lin_names.iter().enumerate() {
                params.insert(n.clone(), x[p_nl + i]);
            }
            for s in 0..self.sets.len() {
                for (p, &j) in lx.iter().enumerate() {
                    xs[s].insert(self.model.variables()[j].clone(), x[p_nl + p_l + s * lx.len() + p]);
                }
            }
            (params, xs)
        };
        let mut f = |x: &[f64]| {
            let (params, xs) = split(x);
            self.im_loss(&params, &xs)
        };
        let r = minimize(&mut f, &x0, &lower, &upper, &OptimConfig { trace: true, ..*cfg })?;
        let (params, xs) = split(&r.argmin);
        let nl = self.nl_values(&r.argmin[..p_nl]);
        let theta: Values = lin_names.iter().map(|n| (n.clone(), params[n])).collect();
        let xi: Vec<Values> = xs
            .iter()
            .map(|m| m.iter().filter(|(k, _)| lx.iter().any(|&j| &self.model.variables()[j] == *k)).map(|(k, v)| (k.clone(), *v)).collect())
            .collect();
        Ok(self.estimate(theta, nl, xi, r.value, r.iterations, r.converged, r.trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn estimate(
        &self,
        linear: Values,
        nonlinear: Values,
        xi: Vec<Values>,
        loss: f64,
        iterations: usize,
        converged: bool,
        trace: Vec<f64>,
    ) -> ImEstimate {
        let x0 = (0..self.sets.len())
            .map(|s| {
                let mut m = Values::new();
                for (j, v) in self.model.variables().iter().enumerate() {
                    let val = match self.spec.x0[j] {
                        X0Role::Known(val) => Some(val),
                        X0Role::Nonlinear => nonlinear.get(v).copied(),
                        X0Role::Linear => xi[s].get(v).copied(),
                    };
                    if let Some(val) = val {
                        m.insert(v.clone(), val);
                    }
                }
                m
            })
            .collect();
        ImEstimate { linear, nonlinear, x0, loss, iterations, converged, trace, decoupled: None }
    }

    /// Fit each equation on its own, substituting `x̂` for every state. A
    /// parameter shared between equations is reported as the mean of its
    /// per-equation estimates; each equation estimates only its own
    /// initial value.
    pub fn fit_decoupled(&self, method: ImMethod, starts: &Values, cfg: &OptimConfig) -> Result<ImEstimate, ImError> {
        let mut columns: Vec<String> = Vec::new();
        let mut per_eq = Vec::new();
        for j in 0..self.model.dim() {
            let sub = self.restricted(vec![j]);
            let est = sub.fit(method, starts, cfg)?;
            let mut entries = est.linear.clone();
            for (k, v) in &est.nonlinear {
                if self.model.variable_index(k).is_none_or(|i| i == j) {
                    entries.insert(k.clone(), *v);
                }
            }
            if self.sets.len() == 1 && matches!(self.spec.x0[j], X0Role::Linear) {
                let v = &self.model.variables()[j];
                entries.insert(v.clone(), est.x0[0][v]);
            }
            for k in entries.keys() {
                if !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
            per_eq.push((est, entries));
        }
        let order: Vec<String> = self
            .model
            .parameters()
            .iter()
            .map(|(n, _)| n.clone())
            .chain(self.model.variables().iter().cloned())
            .filter(|n| columns.contains(n))
            .collect();
        let matrix = DecoupledMatrix {
            equations: self.model.variables().to_vec(),
            values: per_eq.iter().map(|(_, e)| order.iter().map(|c| e.get(c).copied()).collect()).collect(),
            parameters: order,
        };
        let means = matrix.means();
        let linear: Values = self.linear_names().into_iter().filter_map(|n| means.get(&n).map(|v| (n, *v))).collect();
        let nonlinear: Values = self.nonlinear.iter().filter_map(|n| means.get(n).map(|v| (n.clone(), *v))).collect();
        let xi: Vec<Values> = (0..self.sets.len())
            .map(|s| {
                per_eq
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| matches!(self.spec.x0[*j], X0Role::Linear))
                    .map(|(j, (est, _))| {
                        let v = &self.model.variables()[j];
                        (v.clone(), est.x0[s][v])
                    })
                    .collect()
            })
            .collect();
        let iterations = per_eq.iter().map(|(e, _)| e.iterations).sum();
        let converged = per_eq.iter().all(|(e, _)| e.converged);
        let mut est = self.estimate(linear, nonlinear, xi, 0.0, iterations, converged, Vec::new());
        let mut params = est.linear.clone();
        params.extend(self.bindings(&est.nonlinear));
        est.loss = self.im_loss(&params, &est.x0);
        est.decoupled = Some(matrix);
        Ok(est)
    }
}

// ξ̂ = (T·I − Â B̂⁻¹ Âᵀ)⁻¹ ∫(I − Â B̂⁻¹ Ĝᵀ) y,   θ̂ = B̂⁻¹ ∫ Ĝᵀ (y − ξ̂)
fn direct_estimate(
    path: &SmoothedPath,
    quad: &QuadCache,
    y: &[Vec<f64>],
    estimate_xi: bool,
) -> Option<(Option<DVector<f64>>, DVector<f64>)> {
    let d = y.len();
    let p = quad.b_hat.nrows();
    let w = trapz_weights(&path.grid);
    let t_span: f64 = w.iter().sum();
    let b_chol = quad.b_hat.clone().cholesky()?;
    let mut gy = DVector::zeros(p);
    let mut sy = DVector::zeros(d);
    for j in 0..d {
        for i in 0..w.len() {
            sy[j] += w[i] * y[j][i];
            for k in 0..p {
                gy[k] += w[i] * quad.g_cum[j][(i, k)] * y[j][i];
            }
        }
    }
    if !estimate_xi {
        return Some((None, b_chol.solve(&gy)));
    }
    let binv_at = b_chol.solve(&quad.a_hat.transpose());
    let m = DMatrix::identity(d, d) * t_span - &quad.a_hat * &binv_at;
    let rhs = &sy - &quad.a_hat * b_chol.solve(&gy);
    let xi = m.lu().solve(&rhs)?;
    let theta = b_chol.solve(&(gy - quad.a_hat.transpose() * &xi));
    Some((Some(xi), theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{solve_ode, SolverOptions};

    fn lv() -> OdeModel {
        OdeModel::builder()
            .equation("X", "a*X - b*X*Y")
            .equation("Y", "c*X*Y - d*Y")
            .linear(["a", "b", "c", "d"])
            .build()
            .unwrap()
    }

    fn vals(pairs: &[(&str, f64)]) -> Values {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn simulate(model: &OdeModel, params: &Values, x0: &Values, times: &[f64]) -> ObservationSet {
        let tr = solve_ode(model, params, x0, times, &[], &SolverOptions::default()).unwrap();
        let cols: Vec<(&str, Vec<f64>)> = model.variables().iter().enumerate().map(|(j, v)| (v.as_str(), tr.column(j))).collect();
        ObservationSet::shared(1, times, &cols)
    }

    fn lv_obs(model: &OdeModel) -> ObservationSet {
        let times: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let truth = vals(&[("a", 2.0 / 3.0), ("b", 4.0 / 3.0), ("c", 1.0), ("d", 1.0)]);
        simulate(model, &truth, &vals(&[("X", 0.9), ("Y", 0.9)]), &times)
    }

    fn linear_spec(d: usize) -> ImSpec {
        ImSpec { x0: vec![X0Role::Linear; d], ..Default::default() }
    }

    #[test]
    fn linear_model_recovers_truth() {
        let m = lv();
        let p = ImProblem::new(&m, &[lv_obs(&m)], linear_spec(2), &Values::new()).unwrap();
        let est = p.fit(ImMethod::Separable, &Values::new(), &OptimConfig::default()).unwrap();
        for (k, t) in [("a", 2.0 / 3.0), ("b", 4.0 / 3.0), ("c", 1.0), ("d", 1.0)] {
            assert!((est.linear[k] - t).abs() < 0.02, "{k} = {}", est.linear[k]);
        }
        assert!((est.x0[0]["X"] - 0.9).abs() < 0.02);
    }

    #[test]
    fn separable_and_joint_agree_for_linear_model() {
        let m = lv();
        let p = ImProblem::new(&m, &[lv_obs(&m)], linear_spec(2), &Values::new()).unwrap();
        let a = p.fit(ImMethod::Separable, &Values::new(), &OptimConfig::default()).unwrap();
        let b = p.fit(ImMethod::NonSeparable, &Values::new(), &OptimConfig::default()).unwrap();
        for (k, v) in &a.linear {
            assert!((v - b.linear[k]).abs() < 1e-6, "{k}");
        }
        assert!((a.loss - b.loss).abs() <= 1e-6 * a.loss.max(1e-12) + 1e-12);
    }

    #[test]
    fn closed_form_matches_normal_equations() {
        let m = lv();
        let p = ImProblem::new(&m, &[lv_obs(&m)], linear_spec(2), &Values::new()).unwrap();
        let (xi, theta) = p.direct_linear_estimate(&Values::new()).unwrap();
        let (n, b, names) = p.normal_equations(&Values::new()).unwrap();
        assert_eq!(names, ["a", "b", "c", "d", "X", "Y"]);
        let inf = vec![f64::INFINITY; 6];
        let ninf = vec![f64::NEG_INFINITY; 6];
        let z = solve_box_qp(&n, &b, &ninf, &inf).unwrap();
        let xi = xi.unwrap();
        for k in 0..4 {
            assert!((z[k] - theta[k]).abs() < 1e-9 * theta[k].abs().max(1.0));
        }
        for j in 0..2 {
            assert!((z[4 + j] - xi[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn reduced_criterion_equals_full_loss() {
        let m = OdeModel::builder()
            .equation("V", "c*(V - V^3/3 + R)")
            .equation("R", "-(V - a + b*R)/c")
            .linear(["a", "b"])
            .nonlinear(["c"])
            .build()
            .unwrap();
        let times: Vec<f64> = (0..60).map(|i| i as f64 / 3.0).collect();
        let obs = simulate(&m, &vals(&[("a", 0.2), ("b", 0.2), ("c", 3.0)]), &vals(&[("V", -1.0), ("R", 1.0)]), &times);
        let spec = ImSpec { x0: vec![X0Role::Known(-1.0), X0Role::Known(1.0)], ..Default::default() };
        let start = vals(&[("c", 2.5)]);
        let p = ImProblem::new(&m, &[obs], spec, &start).unwrap();
        let lf = p.reduced_criterion(&start).unwrap();
        let mut all = lf.theta.clone();
        all.extend(start.clone());
        let full = p.im_loss(&all, &[Values::new()]);
        assert!((lf.loss - full).abs() < 1e-8 * full, "{} vs {}", lf.loss, full);

        let est = p.fit(ImMethod::Separable, &start, &OptimConfig::default()).unwrap();
        assert!((est.nonlinear["c"] - 3.0).abs() < 0.1, "c = {}", est.nonlinear["c"]);
        let dec = p.fit_decoupled(ImMethod::Separable, &start, &OptimConfig::default()).unwrap();
        let mat = dec.decoupled.as_ref().unwrap();
        assert_eq!(mat.parameters, ["a", "b", "c"]);
        assert_eq!(mat.values[0][0], None);
        assert_eq!(mat.values[0][1], None);
        assert!(mat.values[1].iter().all(|v| v.is_some()));
        let c_mean = (mat.values[0][2].unwrap() + mat.values[1][2].unwrap()) / 2.0;
        assert!((dec.nonlinear["c"] - c_mean).abs() < 1e-12);
    }

    #[test]
    fn finite_bound_is_respected() {
        let m = lv();
        let mut spec = linear_spec(2);
        spec.bounds.insert("a".into(), (0.0, 0.5));
        let p = ImProblem::new(&m, &[lv_obs(&m)], spec, &Values::new()).unwrap();
        let est = p.fit(ImMethod::Separable, &Values::new(), &OptimConfig::default()).unwrap();
        assert!((est.linear["a"] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unidentifiable_parameters_are_named() {
        let m = OdeModel::builder()
            .equation("X", "a*X - b*X*Y + e*X")
            .equation("Y", "c*X*Y - d*Y")
            .linear(["a", "b", "c", "d", "e"])
            .build()
            .unwrap();
        let obs = lv_obs(&lv());
        let p = ImProblem::new(&m, &[obs], linear_spec(2), &Values::new()).unwrap();
        match p.linear_fit(&Values::new()) {
            Err(ImError::Linear(LinearSolveError::IllConditioned { parameters, .. })) => {
                assert!(parameters.contains(&"a".to_string()) && parameters.contains(&"e".to_string()), "{parameters:?}");
            }
            other => panic!("expected ill-conditioning, got {other:?}"),
        }
    }

    #[test]
    fn multiple_sets_share_parameters() {
        let m = lv();
        let times: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let truth = vals(&[("a", 2.0 / 3.0), ("b", 4.0 / 3.0), ("c", 1.0), ("d", 1.0)]);
        let sets: Vec<ObservationSet> = [(0.9, 0.7), (1.2, 0.8)]
            .iter()
            .enumerate()
            .map(|(i, (x, y))| {
                let mut s = simulate(&m, &truth, &vals(&[("X", *x), ("Y", *y)]), &times);
                s.index = i + 1;
                s
            })
            .collect();
        let p = ImProblem::new(&m, &sets, linear_spec(2), &Values::new()).unwrap();
        let est = p.fit(ImMethod::Separable, &Values::new(), &OptimConfig::default()).unwrap();
        assert!((est.x0[1]["X"] - 1.2).abs() < 0.02);
        assert!((est.linear["a"] - 2.0 / 3.0).abs() < 0.02);
    }

    #[test]
    fn diagonal_system_decoupled_matches_coupled() {
        let m = OdeModel::builder().equation("x1", "a1*x1").equation("x2", "a2*x2").linear(["a1", "a2"]).build().unwrap();
        let times: Vec<f64> = (0..40).map(|i| i as f64 * 0.05).collect();
        let obs = simulate(&m, &vals(&[("a1", -0.7), ("a2", 0.3)]), &vals(&[("x1", 2.0), ("x2", 0.5)]), &times);
        let p = ImProblem::new(&m, &[obs], linear_spec(2), &Values::new()).unwrap();
        let cfg = OptimConfig::default();
        let coupled = p.fit(ImMethod::Separable, &Values::new(), &cfg).unwrap();
        let dec = p.fit_decoupled(ImMethod::Separable, &Values::new(), &cfg).unwrap();
        for k in ["a1", "a2"] {
            assert!((coupled.linear[k] - dec.linear[k]).abs() < 1e-8, "{k}");
        }
        for v in ["x1", "x2"] {
            assert!((coupled.x0[0][v] - dec.x0[0][v]).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn scan_oracle_locates_same_minimiser() {
        let m = OdeModel::builder().equation("x", "-x^c*k").linear(["k"]).nonlinear(["c"]).build().unwrap();
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let obs = simulate(&m, &vals(&[("k", 0.5), ("c", 1.5)]), &vals(&[("x", 1.0)]), &times);
        let spec = ImSpec { x0: vec![X0Role::Known(1.0)], ..Default::default() };
        let p = ImProblem::new(&m, &[obs], spec, &vals(&[("c", 1.0)])).unwrap();
        let cell = 2.0 / 999.0;
        let (mut best_c, mut best) = (f64::NAN, f64::INFINITY);
        for i in 0..1000 {
            let c = 0.5 + i as f64 * cell;
            let loss = p.reduced_criterion(&vals(&[("c", c)])).unwrap().loss;
            if loss < best {
                best = loss;
                best_c = c;
            }
        }
        let est = p.fit(ImMethod::Separable, &vals(&[("c", 1.0)]), &OptimConfig::default()).unwrap();
        assert!((est.nonlinear["c"] - best_c).abs() <= cell, "{} vs {}", est.nonlinear["c"], best_c);
        assert!(est.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn constant_rate_is_exact() {
        let m = OdeModel::builder().equation("x", "a").linear(["a"]).build().unwrap();
        let times: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let obs = ObservationSet::shared(1, &times, &[("x", times.iter().map(|t| 3.0 * t).collect())]);
        let spec = ImSpec { x0: vec![X0Role::Known(0.0)], smoothing: SmoothMethod::None, ..Default::default() };
        let p = ImProblem::new(&m, &[obs], spec, &Values::new()).unwrap();
        let (xi, theta) = p.direct_linear_estimate(&Values::new()).unwrap();
        assert!(xi.is_none());
        assert!((theta[0] - 3.0).abs() < 1e-12);
        let lf = p.linear_fit(&Values::new()).unwrap();
        assert!(lf.loss < 1e-20);
    }
}
