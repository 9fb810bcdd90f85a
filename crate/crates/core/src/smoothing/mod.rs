//! Nonparametric trajectory estimates `x̂(t)` and trapezoidal quadrature.

pub(crate) mod quad;
mod spline;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::model::OdeModel;
use crate::obs::ObservationSet;
use crate::ode::{interpolate, Interpolation};

pub use quad::{build_quad, QuadBuilder, QuadCache};
pub use spline::{smooth_spline_gcv, Reinsch, SplineFit};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SmoothError {
    #[error("need at least 8 samples for spline smoothing, got {0}")]
    TooFewPoints(usize),
    #[error("duplicate sample times")]
    DuplicateTimes,
    #[error("sample times must be increasing")]
    Unsorted,
    #[error("non-finite sample")]
    NonFinite,
    #[error("{times} times but {values} values")]
    LengthMismatch { times: usize, values: usize },
    #[error("no observations for variable '{0}'")]
    MissingVariable(String),
    #[error("variable '{variable}': {source}")]
    Variable { variable: String, source: Box<SmoothError> },
    #[error("evaluation failed at t = {t}: {message}")]
    Eval { t: f64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmoothMethod {
    #[default]
    GcvSpline,
    /// Use the observations as they are.
    None,
}

/// How one variable's path was produced.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SmoothInfo {
    pub lambda: Option<f64>,
    pub gcv: Option<f64>,
    pub df: Option<f64>,
}

/// `x̂` on a common time grid, one column per model variable.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedPath {
    pub grid: Vec<f64>,
    pub values: DMatrix<f64>,
    pub info: Vec<SmoothInfo>,
}

impl SmoothedPath {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn span(&self) -> f64 {
        self.grid[self.grid.len() - 1] - self.grid[0]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }
}

/// Number of grid points used for `n` samples per variable.
pub fn grid_size(n: usize) -> usize {
    (4 * n).max(200)
}

fn uniform_grid(a: f64, b: f64, g: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..g).map(|i| a + (b - a) * i as f64 / (g - 1) as f64).collect();
    grid[g - 1] = b;
    grid
}

/// Smooth every model variable of `obs`.
pub fn smooth_all(model: &OdeModel, obs: &ObservationSet, method: SmoothMethod) -> Result<SmoothedPath, SmoothError> {
    smooth_with(model, obs, method, None)
}

/// Re-smooth `obs` keeping each variable's smoothing parameter from
/// `previous`. Used when reconstructed series change during optimization.
pub fn resmooth(
    model: &OdeModel,
    obs: &ObservationSet,
    method: SmoothMethod,
    previous: &SmoothedPath,
) -> Result<SmoothedPath, SmoothError> {
    smooth_with(model, obs, method, Some(previous))
}

fn smooth_with(
    model: &OdeModel,
    obs: &ObservationSet,
    method: SmoothMethod,
    previous: Option<&SmoothedPath>,
) -> Result<SmoothedPath, SmoothError> {
    let mut series = Vec::with_capacity(model.dim());
    for v in model.variables() {
        let s = obs.get(v).filter(|s| !s.is_empty()).ok_or_else(|| SmoothError::MissingVariable(v.clone()))?;
        if s.times.len() != s.values.len() {
            return Err(SmoothError::Variable {
                variable: v.clone(),
                source: Box::new(SmoothError::LengthMismatch { times: s.times.len(), values: s.values.len() }),
            });
        }
        series.push(s);
    }
    let d = series.len();
    let t0 = series.iter().map(|s| s.times[0]).fold(f64::INFINITY, f64::min);
    let t1 = series.iter().map(|s| s.times[s.times.len() - 1]).fold(f64::NEG_INFINITY, f64::max);

    match method {
        SmoothMethod::None => {
            let grid = obs_union(&series);
            let mut values = DMatrix::zeros(grid.len(), d);
            for (j, s) in series.iter().enumerate() {
                for (i, &t) in grid.iter().enumerate() {
                    values[(i, j)] = interpolate(&s.times, &s.values, Interpolation::Linear, t);
                }
            }
            Ok(SmoothedPath { grid, values, info: vec![SmoothInfo::default(); d] })
        }
        SmoothMethod::GcvSpline => {
            let n = series.iter().map(|s| s.len()).max().unwrap_or(0);
            let grid = uniform_grid(t0, t1, grid_size(n));
            let mut values = DMatrix::zeros(grid.len(), d);
            let mut info = Vec::with_capacity(d);
            for (j, s) in series.iter().enumerate() {
                let wrap = |e| SmoothError::Variable { variable: model.variables()[j].clone(), source: Box::new(e) };
                let r = Reinsch::new(&s.times).map_err(wrap)?;
                let fit = match previous.and_then(|p| p.info.get(j)).and_then(|i| i.lambda) {
                    Some(lambda) => r.fit(&s.values, lambda),
                    None => r.fit_gcv(&s.values),
                }
                .map_err(wrap)?;
                for (i, &t) in grid.iter().enumerate() {
                    values[(i, j)] = fit.eval(t);
                }
                info.push(SmoothInfo { lambda: Some(fit.lambda), gcv: Some(fit.gcv), df: Some(fit.df) });
            }
            Ok(SmoothedPath { grid, values, info })
        }
    }
}

fn obs_union(series: &[&crate::obs::Series]) -> Vec<f64> {
    let mut t: Vec<f64> = series.iter().flat_map(|s| s.times.iter().copied()).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Cumulative trapezoidal integral with `c[0] = 0`.
pub fn cum_trapz(t: &[f64], y: &[f64]) -> Result<Vec<f64>, SmoothError> {
    if t.len() != y.len() {
        return Err(SmoothError::LengthMismatch { times: t.len(), values: y.len() });
    }
    let mut c = Vec::with_capacity(t.len());
    let mut acc = 0.0;
    for i in 0..t.len() {
        if i > 0 {
            acc += (t[i] - t[i - 1]) * (y[i] + y[i - 1]) / 2.0;
        }
        c.push(acc);
    }
    Ok(c)
}

/// Trapezoidal integral over the whole of `t`.
pub fn trapz(t: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(t.len(), y.len());
    let mut acc = 0.0;
    for i in 1..t.len() {
        acc += (t[i] - t[i - 1]) * (y[i] + y[i - 1]) / 2.0;
    }
    acc
}

/// Trapezoid weights: `Σ w_i y_i = trapz(t, y)`.
pub fn trapz_weights(t: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut w = vec![0.0; n];
    for i in 1..n {
        let h = (t[i] - t[i - 1]) / 2.0;
        w[i - 1] += h;
        w[i] += h;
    }
    w
}
