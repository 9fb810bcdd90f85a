//! The two-stage pipeline: integral matching, then trajectory matching
//! started from the integral-matching estimates.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::im::{Bounds, DecoupledMatrix, ImError, ImEstimate, ImMethod, ImProblem, ImSpec, ReconstructionHook, X0Role};
use crate::linearity::{validate_roles, Diagnostic};
use crate::model::{OdeModel, ParamRole, Values};
use crate::obs::ObservationSet;
use crate::ode::{solve_ode, ExternalInput, SolverOptions, Trajectory};
use crate::optim::{minimize, OptimConfig, OptimError};
use crate::smoothing::SmoothMethod;

/// Arguments passed to a [`LikelihoodHook`].
pub struct LikelihoodInput<'a> {
    pub model: &'a OdeModel,
    /// Every parameter, likelihood-only ones included.
    pub params: &'a Values,
    pub x0: &'a Values,
    pub obs: &'a ObservationSet,
    /// Model solution at the union of observation times.
    pub trajectory: &'a Trajectory,
}

/// Negative log-likelihood replacing the least-squares criterion in stage
/// two and in profiling. Return `+∞` for impossible values.
pub type LikelihoodHook = Arc<dyn Fn(&LikelihoodInput<'_>) -> f64 + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("{}", format_diagnostics(.0))]
    Roles(Vec<Diagnostic>),
    #[error("initial guess required for '{0}'")]
    MissingStart(String),
    #[error("invalid observations: {0}")]
    Observations(String),
    #[error(transparent)]
    Im(#[from] ImError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{0}")]
    NonFinite(String),
    #[error("{0}")]
    Config(String),
}

fn format_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n")
}

/// How several observation sets are fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SetsMode {
    /// Every set on its own.
    #[default]
    Separate,
    /// Shared parameters, one initial-value block per set.
    SeparateX0,
}

#[derive(Clone)]
pub struct FitConfig {
    /// One entry per model variable.
    pub x0: Vec<X0Role>,
    /// Required for non-linear and likelihood parameters and non-linear
    /// initial values; optional for linear ones.
    pub starts: Values,
    pub bounds: Bounds,
    pub im_method: ImMethod,
    pub decouple: bool,
    pub smoothing: SmoothMethod,
    pub optim: OptimConfig,
    pub solver: SolverOptions,
    pub hook: Option<ReconstructionHook>,
    pub likelihood: Option<LikelihoodHook>,
    /// Inputs shared by every set.
    pub inputs: Vec<ExternalInput>,
    /// Run stage two; otherwise the integral-matching estimates are final.
    pub run_nls: bool,
}

impl FitConfig {
    pub fn new(x0: Vec<X0Role>) -> Self {
        FitConfig {
            x0,
            starts: Values::new(),
            bounds: Bounds::new(),
            im_method: ImMethod::default(),
            decouple: false,
            smoothing: SmoothMethod::default(),
            optim: OptimConfig::default(),
            solver: SolverOptions::default(),
            hook: None,
            likelihood: None,
            inputs: Vec::new(),
            run_nls: true,
        }
    }

    fn bound(&self, name: &str) -> (f64, f64) {
        self.bounds.get(name).copied().unwrap_or((f64::NEG_INFINITY, f64::INFINITY))
    }

    fn im_spec(&self) -> ImSpec {
        ImSpec {
            x0: self.x0.clone(),
            bounds: self.bounds.clone(),
            smoothing: self.smoothing,
            hook: self.hook.clone(),
            inputs: self.inputs.clone(),
        }
    }
}

/// One row of the estimate table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    /// `linear`, `non-linear` or `likelihood`.
    pub kind: &'static str,
    pub start: Option<f64>,
    pub lower: f64,
    pub upper: f64,
    pub im_est: Option<f64>,
    pub nls_est: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Shared parameters, then (for a single set) estimated initial values.
    pub parameters: Vec<ParamReport>,
    pub im: ImEstimate,
    pub im_loss: f64,
    pub nls_loss: Option<f64>,
    /// Stage-two criterion at the point stage two started from.
    pub nls_loss_at_im: Option<f64>,
    pub nls_converged: Option<bool>,
    /// Final initial values of every variable, per set.
    pub x0: Vec<Values>,
    /// Observations of model variables entering the criterion.
    pub n_obs: usize,
}

impl FitResult {
    pub fn decoupled(&self) -> Option<&DecoupledMatrix> {
        self.im.decoupled.as_ref()
    }

    pub fn im_estimates(&self) -> Values {
        self.parameters.iter().filter_map(|p| p.im_est.map(|v| (p.name.clone(), v))).collect()
    }

    pub fn nls_estimates(&self) -> Option<Values> {
        self.nls_loss?;
        Some(self.parameters.iter().filter_map(|p| p.nls_est.map(|v| (p.name.clone(), v))).collect())
    }

    /// Stage-two estimates when stage two ran, otherwise stage one.
    pub fn estimates(&self) -> Values {
        self.nls_estimates().unwrap_or_else(|| self.im_estimates())
    }

    /// Value of the criterion that produced the final estimates.
    pub fn final_loss(&self) -> f64 {
        self.nls_loss.unwrap_or(self.im_loss)
    }
}

fn observed_count(model: &OdeModel, obs: &ObservationSet) -> usize {
    model.variables().iter().filter_map(|v| obs.get(v)).map(|s| s.len()).sum()
}

fn rss(model: &OdeModel, obs: &ObservationSet, tr: &Trajectory) -> f64 {
    let mut total = 0.0;
    for (j, v) in model.variables().iter().enumerate() {
        let Some(series) = obs.get(v) else { continue };
        let mut row = 0;
        for (t, y) in series.times.iter().zip(&series.values) {
            while tr.times[row] < *t {
                row += 1;
            }
            let e = y - tr.values[(row, j)];
            total += e * e;
        }
    }
    total
}

/// Sum of squared residuals over observed variables, solving from `x0` at
/// the first observation time. `+∞` when the solve fails.
pub fn nls_loss(
    model: &OdeModel,
    params: &Values,
    x0: &Values,
    obs: &ObservationSet,
    inputs: &[ExternalInput],
    opts: &SolverOptions,
) -> f64 {
    let times = obs.union_times();
    match solve_ode(model, params, x0, &times, inputs, opts) {
        Ok(tr) => {
            let v = rss(model, obs, &tr);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        }
        Err(_) => f64::INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Coord {
    Param(String),
    X0 { set: usize, var: String },
}

/// Stage-two criterion over a flat vector of free quantities: every
/// parameter, then each set's estimated initial values.
pub struct NlsProblem<'a> {
    model: &'a OdeModel,
    sets: &'a [ObservationSet],
    inputs: Vec<Vec<ExternalInput>>,
    likelihood: Option<LikelihoodHook>,
    solver: SolverOptions,
    coords: Vec<Coord>,
    names: Vec<String>,
    known_x0: Vec<Values>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> NlsProblem<'a> {
    pub fn new(model: &'a OdeModel, sets: &'a [ObservationSet], cfg: &FitConfig) -> Self {
        let mut coords = Vec::new();
        let mut names = Vec::new();
        for (name, _) in model.parameters() {
            coords.push(Coord::Param(name.clone()));
            names.push(name.clone());
        }
        let mut known = Values::new();
        for (s, _) in sets.iter().enumerate() {
            for (j, v) in model.variables().iter().enumerate() {
                match cfg.x0[j] {
                    X0Role::Known(val) => {
                        known.insert(v.clone(), val);
                    }
                    _ => {
                        coords.push(Coord::X0 { set: s, var: v.clone() });
                        names.push(if sets.len() == 1 { v.clone() } else { format!("{v}[{}]", s + 1) });
                    }
                }
            }
        }
        let (lower, upper) = coords
            .iter()
            .map(|c| match c {
                Coord::Param(n) => cfg.bound(n),
                Coord::X0 { var, .. } => cfg.bound(var),
            })
            .unzip();
        let inputs = sets
            .iter()
            .map(|s| {
                let mut v = cfg.inputs.clone();
                v.extend(s.inputs.iter().cloned());
                v
            })
            .collect();
        NlsProblem {
            model,
            sets,
            inputs,
            likelihood: cfg.likelihood.clone(),
            solver: cfg.solver,
            coords,
            names,
            known_x0: vec![known; sets.len()],
            lower,
            upper,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Flatten parameter and initial-value maps; `None` names a missing entry.
    pub fn pack(&self, params: &Values, x0: &[Values]) -> Result<Vec<f64>, String> {
        self.coords
            .iter()
            .zip(&self.names)
            .map(|(c, name)| {
                match c {
                    Coord::Param(n) => params.get(n),
                    Coord::X0 { set, var } => x0[*set].get(var),
                }
                .copied()
                .ok_or_else(|| name.clone())
            })
            .collect()
    }

    pub fn unpack(&self, z: &[f64]) -> (Values, Vec<Values>) {
        let mut params = Values::new();
        let mut x0 = self.known_x0.clone();
        for (c, v) in self.coords.iter().zip(z) {
            match c {
                Coord::Param(n) => {
                    params.insert(n.clone(), *v);
                }
                Coord::X0 { set, var } => {
                    x0[*set].insert(var.clone(), *v);
                }
            }
        }
        (params, x0)
    }

    fn set_loss(&self, s: usize, params: &Values, x0: &Values) -> f64 {
        let obs = &self.sets[s];
        match &self.likelihood {
            None => nls_loss(self.model, params, x0, obs, &self.inputs[s], &self.solver),
            Some(hook) => {
                let times = obs.union_times();
                match solve_ode(self.model, params, x0, &times, &self.inputs[s], &self.solver) {
                    Ok(tr) => {
                        let v = hook(&LikelihoodInput { model: self.model, params, x0, obs, trajectory: &tr });
                        if v.is_nan() {
                            f64::INFINITY
                        } else {
                            v
                        }
                    }
                    Err(_) => f64::INFINITY,
                }
            }
        }
    }

    /// Criterion summed over sets.
    pub fn objective(&self, z: &[f64]) -> f64 {
        let (params, x0) = self.unpack(z);
        let mut total = 0.0;
        for s in 0..self.sets.len() {
            total += self.set_loss(s, &params, &x0[s]);
            if total == f64::INFINITY {
                break;
            }
        }
        total
    }

    /// Observations entering the criterion across sets.
    pub fn n_obs(&self) -> usize {
        self.sets.iter().map(|o| observed_count(self.model, o)).sum()
    }

    pub fn has_likelihood(&self) -> bool {
        self.likelihood.is_some()
    }
}

fn check_inputs(model: &OdeModel, sets: &[ObservationSet], cfg: &FitConfig) -> Result<(), FitError> {
    let diags = validate_roles(model);
    if !diags.is_empty() {
        return Err(FitError::Roles(diags));
    }
    if cfg.x0.len() != model.dim() {
        return Err(FitError::Config(format!("expected {} initial-value entries, got {}", model.dim(), cfg.x0.len())));
    }
    if sets.is_empty() {
        return Err(FitError::Observations("no observation sets".into()));
    }
    for s in sets {
        s.validate().map_err(|e| FitError::Observations(e.to_string()))?;
        if observed_count(model, s) == 0 {
            return Err(FitError::Observations("no observed model variable".into()));
        }
    }
    let mut required: Vec<String> = model
        .parameters()
        .iter()
        .filter(|(_, r)| *r != ParamRole::Linear)
        .map(|(n, _)| n.clone())
        .collect();
    required.extend(model.variables().iter().enumerate().filter(|(j, _)| cfg.x0[*j] == X0Role::Nonlinear).map(|(_, v)| v.clone()));
    for name in required {
        match cfg.starts.get(&name) {
            None => return Err(FitError::MissingStart(name)),
            Some(v) => {
                let (lo, hi) = cfg.bound(&name);
                if !(lo..=hi).contains(v) {
                    return Err(FitError::Config(format!("start for '{name}' lies outside its bounds")));
                }
            }
        }
    }
    Ok(())
}

fn project(z: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in z.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Stage two over all sets, starting from the stage-one estimates.
fn stage_two(model: &OdeModel, sets: &[ObservationSet], cfg: &FitConfig, im: &ImEstimate) -> Result<(Values, Vec<Values>, f64, f64, bool), FitError> {
    let nls = NlsProblem::new(model, sets, cfg);
    let mut params = im.linear.clone();
    for (k, v) in &im.nonlinear {
        if model.variable_index(k).is_none() {
            params.insert(k.clone(), *v);
        }
    }
    for (n, r) in model.parameters() {
        if *r == ParamRole::Likelihood {
            params.insert(n.clone(), cfg.starts[n]);
        }
    }
    let (lower, upper) = nls.bounds();
    let mut z = nls.pack(&params, &im.x0).map_err(FitError::MissingStart)?;
    project(&mut z, lower, upper);
    let mut at_start = nls.objective(&z);
    if !at_start.is_finite() {
        // fall back to user guesses where given
        for (i, name) in nls.names().iter().enumerate() {
            if let Some(v) = cfg.starts.get(name) {
                z[i] = *v;
            }
        }
        project(&mut z, lower, upper);
        at_start = nls.objective(&z);
        if !at_start.is_finite() {
            return Err(FitError::NonFinite("trajectory criterion is not finite at the stage-one estimates".into()));
        }
    }
    let mut f = |x: &[f64]| nls.objective(x);
    let r = minimize(&mut f, &z, lower, upper, &cfg.optim)?;
    let (p, x0) = nls.unpack(&r.argmin);
    Ok((p, x0, r.value, at_start, r.converged))
}

fn report(model: &OdeModel, cfg: &FitConfig, im: &ImEstimate, nls: Option<(&Values, &Values)>, single: bool) -> Vec<ParamReport> {
    let mut out = Vec::new();
    for (name, role) in model.parameters() {
        let (lower, upper) = cfg.bound(name);
        let im_est = match role {
            ParamRole::Linear => im.linear.get(name).copied(),
            ParamRole::Nonlinear => im.nonlinear.get(name).copied(),
            ParamRole::Likelihood => None,
        };
        out.push(ParamReport {
            name: name.clone(),
            kind: role.label(),
            start: cfg.starts.get(name).copied(),
            lower,
            upper,
            im_est,
            nls_est: nls.and_then(|(p, _)| p.get(name).copied()),
        });
    }
    if single {
        for (j, v) in model.variables().iter().enumerate() {
            let kind = match cfg.x0[j] {
                X0Role::Known(_) => continue,
                X0Role::Linear => ParamRole::Linear.label(),
                X0Role::Nonlinear => ParamRole::Nonlinear.label(),
            };
            let (lower, upper) = cfg.bound(v);
            out.push(ParamReport {
                name: v.clone(),
                kind,
                start: cfg.starts.get(v).copied(),
                lower,
                upper,
                im_est: im.x0[0].get(v).copied(),
                nls_est: nls.and_then(|(_, x)| x.get(v).copied()),
            });
        }
    }
    out
}

fn finish(model: &OdeModel, sets: &[ObservationSet], cfg: &FitConfig, im: ImEstimate) -> Result<FitResult, FitError> {
    let n_obs = sets.iter().map(|s| observed_count(model, s)).sum();
    let im_loss = im.loss;
    if !cfg.run_nls {
        return Ok(FitResult {
            parameters: report(model, cfg, &im, None, sets.len() == 1),
            x0: im.x0.clone(),
            im,
            im_loss,
            nls_loss: None,
            nls_loss_at_im: None,
            nls_converged: None,
            n_obs,
        });
    }
    let (params, x0, loss, at_start, converged) = stage_two(model, sets, cfg, &im)?;
    Ok(FitResult {
        parameters: report(model, cfg, &im, Some((&params, &x0[0])), sets.len() == 1),
        x0,
        im,
        im_loss,
        nls_loss: Some(loss),
        nls_loss_at_im: Some(at_start),
        nls_converged: Some(converged),
        n_obs,
    })
}

fn stage_one(model: &OdeModel, sets: &[ObservationSet], cfg: &FitConfig) -> Result<ImEstimate, FitError> {
    let problem = ImProblem::new(model, sets, cfg.im_spec(), &cfg.starts)?;
    let est = if cfg.decouple {
        problem.fit_decoupled(cfg.im_method, &cfg.starts, &cfg.optim)?
    } else {
        problem.fit(cfg.im_method, &cfg.starts, &cfg.optim)?
    };
    Ok(est)
}

/// Fit one observation set.
pub fn fit(model: &OdeModel, obs: &ObservationSet, cfg: &FitConfig) -> Result<FitResult, FitError> {
    let sets = std::slice::from_ref(obs);
    check_inputs(model, sets, cfg)?;
    let im = stage_one(model, sets, cfg)?;
    finish(model, sets, cfg, im)
}

// Shared parameters from the mean of per-set estimates; each set keeps its
// own initial values.
fn pooled_stage_one(model: &OdeModel, sets: &[ObservationSet], cfg: &FitConfig) -> Result<ImEstimate, FitError> {
    if cfg.decouple {
        return stage_one(model, sets, cfg);
    }
    let per_set: Vec<ImEstimate> = sets.iter().map(|s| stage_one(model, std::slice::from_ref(s), cfg)).collect::<Result<_, _>>()?;
    let mean = |pick: &dyn Fn(&ImEstimate) -> &Values| -> Values {
        let mut acc: BTreeMap<String, f64> = BTreeMap::new();
        for e in &per_set {
            for (k, v) in pick(e) {
                if model.variable_index(k).is_none() {
                    *acc.entry(k.clone()).or_default() += v;
                }
            }
        }
        acc.into_iter().map(|(k, v)| (k, v / per_set.len() as f64)).collect()
    };
    let linear = mean(&|e| &e.linear);
    let nonlinear = mean(&|e| &e.nonlinear);
    let x0: Vec<Values> = per_set.iter().map(|e| e.x0[0].clone()).collect();
    let mut loss = 0.0;
    for (s, set) in sets.iter().enumerate() {
        let problem = ImProblem::new(model, std::slice::from_ref(set), cfg.im_spec(), &per_set[s].nonlinear)?;
        let mut params = linear.clone();
        params.extend(nonlinear.clone());
        loss += problem.im_loss(&params, std::slice::from_ref(&x0[s]));
    }
    Ok(ImEstimate {
        linear,
        nonlinear,
        x0,
        loss,
        iterations: per_set.iter().map(|e| e.iterations).sum(),
        converged: per_set.iter().all(|e| e.converged),
        trace: Vec::new(),
        decoupled: None,
    })
}

#[cfg(feature = "parallel")]
fn map_sets<T: Send>(n: usize, parallel: bool, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
fn map_sets<T: Send>(n: usize, _parallel: bool, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Run `f` with parallel set fitting limited to `workers` threads.
#[cfg(feature = "parallel")]
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R: Send>(_workers: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Fit several sets. `Separate` returns one entry per set, in input order
/// whether or not `parallel` is set; `SeparateX0` returns a single joint
/// result whose `x0` holds one block per set.
pub fn fit_sets(model: &OdeModel, sets: &[ObservationSet], mode: SetsMode, parallel: bool, cfg: &FitConfig) -> Vec<Result<FitResult, FitError>> {
    match mode {
        SetsMode::Separate => map_sets(sets.len(), parallel, |i| fit(model, &sets[i], cfg)),
        SetsMode::SeparateX0 => {
            let joint = || -> Result<FitResult, FitError> {
                check_inputs(model, sets, cfg)?;
                if sets.len() > 1 && cfg.x0.contains(&X0Role::Nonlinear) && cfg.decouple {
                    return Err(FitError::Config("pooled decoupling needs linear or known initial values".into()));
                }
                let im = pooled_stage_one(model, sets, cfg)?;
                finish(model, sets, cfg, im)
            };
            vec![joint()]
        }
    }
}

/// Monte Carlo summary row. Bias and RMSE are present only with a truth.
#[derive(Debug, Clone, PartialEq)]
pub struct McRow {
    pub parameter: String,
    pub truth: Option<f64>,
    pub im: Option<McStats>,
    pub nls: Option<McStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McStats {
    pub mean: f64,
    pub sd: f64,
    pub bias: Option<f64>,
    pub rmse: Option<f64>,
}

fn stats(values: &[f64], truth: Option<f64>) -> McStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    McStats {
        mean,
        sd,
        bias: truth.map(|t| mean - t),
        rmse: truth.map(|t| (values.iter().map(|v| (v - t).powi(2)).sum::<f64>() / n).sqrt()),
    }
}

/// Column-wise mean, sample sd, bias and RMSE over replicate fits.
pub fn mc_summary(results: &[FitResult], truth: Option<&Values>) -> Result<Vec<McRow>, FitError> {
    if results.len() < 2 {
        return Err(FitError::Config("a Monte Carlo summary needs at least two results".into()));
    }
    let mut rows = Vec::new();
    for (k, p) in results[0].parameters.iter().enumerate() {
        let t = truth.and_then(|m| m.get(&p.name).copied());
        let column = |pick: fn(&ParamReport) -> Option<f64>| -> Option<Vec<f64>> {
            results.iter().map(|r| r.parameters.get(k).filter(|q| q.name == p.name).and_then(pick)).collect()
        };
        rows.push(McRow {
            parameter: p.name.clone(),
            truth: t,
            im: column(|q| q.im_est).map(|v| stats(&v, t)),
            nls: column(|q| q.nls_est).map(|v| stats(&v, t)),
        });
    }
    Ok(rows)
}
