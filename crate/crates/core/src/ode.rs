//! Forward integration of an [`OdeModel`] with an adaptive Dormand–Prince
//! 5(4) scheme, PI step-size control and cubic Hermite dense output.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::expr::{CompiledExpr, EvalError, Expr};
use crate::model::{OdeModel, Values, TIME};

/// Solution sampled at requested times; row `i` holds the state at `times[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub values: DMatrix<f64>,
}

impl Trajectory {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }
}

/// Interpolation used between tabulated input samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Linear,
    /// Piecewise constant: the most recent sample at or before `t`.
    Previous,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    /// Closed form in the time symbol `t`.
    Formula(Expr),
    Table { times: Vec<f64>, values: Vec<f64>, mode: Interpolation },
}

/// A named time-dependent signal referenced by the equations.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalInput {
    pub name: String,
    pub source: InputSource,
}

impl ExternalInput {
    pub fn formula(name: impl Into<String>, e: Expr) -> Self {
        ExternalInput { name: name.into(), source: InputSource::Formula(e) }
    }

    pub fn table(name: impl Into<String>, times: Vec<f64>, values: Vec<f64>, mode: Interpolation) -> Self {
        ExternalInput { name: name.into(), source: InputSource::Table { times, values, mode } }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("evaluation failed at t = {t}: {source}")]
    Eval { t: f64, source: EvalError },
    #[error("step limit reached at t = {t}")]
    TooManySteps { t: f64 },
    #[error("output times must be strictly increasing")]
    BadTimes,
    #[error("missing binding for '{0}'")]
    Unbound(String),
    #[error("external input '{0}': {1}")]
    Input(String, &'static str),
    #[error("initial state has {got} entries, model has {want}")]
    Dimension { got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { rtol: 1e-8, atol: 1e-10, max_steps: 200_000 }
    }
}

enum Signal<'a> {
    Formula(CompiledExpr),
    Table { times: &'a [f64], values: &'a [f64], mode: Interpolation },
}

impl Signal<'_> {
    fn at(&self, t: f64) -> Result<f64, EvalError> {
        match self {
            Signal::Formula(c) => c.eval(&[t]),
            Signal::Table { times, values, mode } => Ok(interpolate(times, values, *mode, t)),
        }
    }
}

/// Interpolate a table at `t`, holding the end values outside its span.
pub fn interpolate(times: &[f64], values: &[f64], mode: Interpolation, t: f64) -> f64 {
    let n = times.len();
    if t <= times[0] {
        return values[0];
    }
    if t >= times[n - 1] {
        return values[n - 1];
    }
    // first index with times[i] > t
    let i = times.partition_point(|&s| s <= t);
    match mode {
        Interpolation::Previous => values[i - 1],
        Interpolation::Linear => {
            let (t0, t1) = (times[i - 1], times[i]);
            let w = (t - t0) / (t1 - t0);
            values[i - 1] + w * (values[i] - values[i - 1])
        }
    }
}

/// Resolved external signals in model order.
pub struct InputSet<'a> {
    signals: Vec<Signal<'a>>,
}

impl<'a> InputSet<'a> {
    pub fn new(model: &OdeModel, inputs: &'a [ExternalInput]) -> Result<Self, SolveError> {
        let mut signals = Vec::new();
        for name in model.inputs() {
            let Some(inp) = inputs.iter().find(|i| &i.name == name) else {
                return Err(SolveError::Unbound(name.clone()));
            };
            signals.push(match &inp.source {
                InputSource::Formula(e) => {
                    let c = CompiledExpr::compile(e, &|s| (s == TIME).then_some(0))
                        .map_err(|_| SolveError::Input(name.clone(), "formula may only reference t"))?;
                    Signal::Formula(c)
                }
                InputSource::Table { times, values, mode } => {
                    if times.is_empty() || times.len() != values.len() {
                        return Err(SolveError::Input(name.clone(), "times and values differ in length"));
                    }
                    if times.windows(2).any(|w| w[1] <= w[0]) {
                        return Err(SolveError::Input(name.clone(), "times must be strictly increasing"));
                    }
                    Signal::Table { times, values, mode: *mode }
                }
            });
        }
        Ok(InputSet { signals })
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn value(&self, i: usize, t: f64) -> Result<f64, EvalError> {
        self.signals[i].at(t)
    }

    fn check_span(&self, model: &OdeModel, t0: f64, t1: f64) -> Result<(), SolveError> {
        for (sig, name) in self.signals.iter().zip(model.inputs()) {
            if let Signal::Table { times, .. } = sig {
                let tol = 1e-9 * (1.0 + t1.abs());
                if times[0] > t0 + tol || times[times.len() - 1] < t1 - tol {
                    return Err(SolveError::Input(name.clone(), "table does not cover the solve span"));
                }
            }
        }
        Ok(())
    }
}

/// Bound right-hand side `F(x; θ)` with time and inputs.
pub struct Rhs<'a> {
    model: &'a OdeModel,
    inputs: InputSet<'a>,
    slots: Vec<f64>,
}

impl<'a> Rhs<'a> {
    pub fn new(model: &'a OdeModel, params: &Values, inputs: &'a [ExternalInput]) -> Result<Self, SolveError> {
        if let Some(name) = model.unbound_parameters(params).into_iter().next() {
            return Err(SolveError::Unbound(name));
        }
        Ok(Rhs { model, inputs: InputSet::new(model, inputs)?, slots: model.slot_template(params) })
    }

    /// Evaluate `F` at `(t, state)` into `out`.
    pub fn eval(&mut self, t: f64, state: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        let layout = self.model.layout();
        self.slots[0] = t;
        for (j, x) in state.iter().enumerate() {
            self.slots[layout.state(j)] = *x;
        }
        for i in 0..self.inputs.len() {
            self.slots[layout.input(i)] = self.inputs.value(i, t)?;
        }
        for (o, eq) in out.iter_mut().zip(self.model.compiled_equations()) {
            *o = eq.eval(&self.slots)?;
        }
        Ok(())
    }
}

/// `F(x(t); θ)` at a single point.
pub fn rhs_eval(
    model: &OdeModel,
    params: &Values,
    state: &[f64],
    t: f64,
    inputs: &[ExternalInput],
) -> Result<Vec<f64>, SolveError> {
    let mut rhs = Rhs::new(model, params, inputs)?;
    let mut out = vec![0.0; model.dim()];
    rhs.eval(t, state, &mut out).map_err(|source| SolveError::Eval { t, source })?;
    Ok(out)
}

/// Integrate from `times[0]` (where the state equals `x0`) and sample at
/// every entry of `times`.
pub fn solve_ode(
    model: &OdeModel,
    params: &Values,
    x0: &Values,
    times: &[f64],
    inputs: &[ExternalInput],
    opts: &SolverOptions,
) -> Result<Trajectory, SolveError> {
    let start: Vec<f64> = model
        .variables()
        .iter()
        .map(|v| x0.get(v).copied().ok_or_else(|| SolveError::Unbound(v.clone())))
        .collect::<Result<_, _>>()?;
    let mut rhs = Rhs::new(model, params, inputs)?;
    integrate(&mut rhs, &start, times, opts)
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Difference between the 5th and embedded 4th order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

/// Integrate a bound right-hand side.
pub fn integrate(rhs: &mut Rhs<'_>, x0: &[f64], times: &[f64], opts: &SolverOptions) -> Result<Trajectory, SolveError> {
    let d = rhs.model.dim();
    if x0.len() != d {
        return Err(SolveError::Dimension { got: x0.len(), want: d });
    }
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SolveError::BadTimes);
    }
    let t_end = times[times.len() - 1];
    rhs.inputs.check_span(rhs.model, times[0], t_end)?;

    let mut out = DMatrix::<f64>::zeros(times.len(), d);
    let mut t = times[0];
    let mut y = x0.to_vec();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(SolveError::NonFinite { t });
    }
    out.row_mut(0).copy_from_slice(&y);
    if times.len() == 1 {
        return Ok(Trajectory { times: times.to_vec(), values: out });
    }

    let eval_at = |rhs: &mut Rhs<'_>, t: f64, y: &[f64], k: &mut [f64]| -> Result<(), SolveError> {
        rhs.eval(t, y, k).map_err(|source| SolveError::Eval { t, source })?;
        if k.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite { t });
        }
        Ok(())
    };

    let mut k = vec![vec![0.0; d]; 7];
    eval_at(rhs, t, &y, &mut k[0])?;
    let mut h = initial_step(rhs, t, &y, &k[0], t_end - t, opts)?;
    let mut next_out = 1usize;
    let mut err_prev = 1e-4f64;
    let mut stage = vec![0.0; d];
    let mut y_new = vec![0.0; d];
    let mut last_failure: Option<SolveError> = None;

    for _ in 0..opts.max_steps {
        let span = t_end - t;
        if h >= span {
            h = span;
        }
        if h <= 1e-13 * t.abs().max(1.0) {
            return Err(last_failure.unwrap_or(SolveError::StepUnderflow { t }));
        }

        let mut failed = None;
        for s in 1..7 {
            for i in 0..d {
                let mut acc = 0.0;
                for (r, a) in A[s][..s].iter().enumerate() {
                    acc += a * k[r][i];
                }
                stage[i] = y[i] + h * acc;
            }
            if let Err(e) = eval_at(rhs, t + C[s] * h, &stage, &mut k[s]) {
                failed = Some(e);
                break;
            }
            if s == 6 {
                y_new.copy_from_slice(&stage);
            }
        }
        if let Some(e) = failed {
            // treat as a rejected step; the trial state left the domain
            last_failure = Some(e);
            h *= 0.25;
            continue;
        }

        let mut err = 0.0;
        for i in 0..d {
            let mut e = 0.0;
            for (s, w) in E.iter().enumerate() {
                e += w * k[s][i];
            }
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err += (h * e / sc).powi(2);
        }
        let err = (err / d as f64).sqrt();

        if err <= 1.0 {
            let t_new = if t + h >= t_end - 1e-14 * t_end.abs().max(1.0) { t_end } else { t + h };
            // emit all requested outputs inside (t, t_new]
            while next_out < times.len() && times[next_out] <= t_new {
                let s = times[next_out];
                let row = if s == t_new {
                    y_new.clone()
                } else {
                    hermite(t, t_new, &y, &k[0], &y_new, &k[6], s)
                };
                out.row_mut(next_out).copy_from_slice(&row);
                next_out += 1;
            }
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            let k6 = k[6].clone();
            k[0].copy_from_slice(&k6);
            last_failure = None;
            if next_out >= times.len() {
                return Ok(Trajectory { times: times.to_vec(), values: out });
            }
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-ALPHA) * err_prev.powf(BETA)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            err_prev = err.max(1e-4);
            h *= factor;
        } else {
            let factor = (SAFETY * err.powf(-ALPHA)).clamp(MIN_FACTOR, 1.0);
            h *= factor;
        }
    }
    Err(SolveError::TooManySteps { t })
}

/// Advance `x0` from `t0` to `t1` with `n` equal Dormand-Prince steps and no
/// error control. Used to verify the order of the tableau.
pub fn integrate_fixed(rhs: &mut Rhs<'_>, x0: &[f64], t0: f64, t1: f64, n: usize) -> Result<Vec<f64>, SolveError> {
    let d = rhs.model.dim();
    if x0.len() != d {
        return Err(SolveError::Dimension { got: x0.len(), want: d });
    }
    if n == 0 || t1 <= t0 {
        return Err(SolveError::BadTimes);
    }
    let h = (t1 - t0) / n as f64;
    let mut y = x0.to_vec();
    let mut k = vec![vec![0.0; d]; 7];
    let mut stage = vec![0.0; d];
    for step in 0..n {
        let t = t0 + step as f64 * h;
        rhs.eval(t, &y, &mut k[0]).map_err(|source| SolveError::Eval { t, source })?;
        for s in 1..7 {
            for i in 0..d {
                let mut acc = 0.0;
                for (r, a) in A[s][..s].iter().enumerate() {
                    acc += a * k[r][i];
                }
                stage[i] = y[i] + h * acc;
            }
            rhs.eval(t + C[s] * h, &stage, &mut k[s]).map_err(|source| SolveError::Eval { t, source })?;
        }
        y.copy_from_slice(&stage);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite { t: t + h });
        }
    }
    Ok(y)
}

fn initial_step(
    rhs: &mut Rhs<'_>,
    t: f64,
    y: &[f64],
    f0: &[f64],
    span: f64,
    opts: &SolverOptions,
) -> Result<f64, SolveError> {
    let d = y.len();
    let scale: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let norm = |v: &[f64]| (v.iter().zip(&scale).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / d as f64).sqrt();
    let d0 = norm(y);
    let d1 = norm(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; d];
    if rhs.eval(t + h0, &y1, &mut f1).is_err() || f1.iter().any(|v| !v.is_finite()) {
        return Ok(h0 * 1e-3);
    }
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    Ok((100.0 * h0).min(h1).min(span))
}

fn hermite(t0: f64, t1: f64, y0: &[f64], f0: &[f64], y1: &[f64], f1: &[f64], s: f64) -> Vec<f64> {
    let h = t1 - t0;
    let u = (s - t0) / h;
    let u2 = u * u;
    let u3 = u2 * u;
    let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
    let h10 = u3 - 2.0 * u2 + u;
    let h01 = -2.0 * u3 + 3.0 * u2;
    let h11 = u3 - u2;
    (0..y0.len()).map(|i| h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i]).collect()
}
