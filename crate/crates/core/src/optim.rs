//! Bound-constrained minimisation: BFGS with gradient projection and a
//! clamped Nelder–Mead simplex.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Bfgs,
    NelderMead,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub method: Method,
    pub max_iter: usize,
    /// Relative decrease of the objective below which iteration stops.
    pub reltol: f64,
    /// Forward-difference step is `fd_step * (1 + |x|)`.
    pub fd_step: f64,
    pub trace: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { method: Method::Bfgs, max_iter: 500, reltol: 1e-8, fd_step: 1e-6, trace: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub argmin: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective after each iteration, when tracing.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("objective is not finite at the start point")]
    NonFiniteStart,
    #[error("dimension mismatch: start {start}, lower {lower}, upper {upper}")]
    Dimension { start: usize, lower: usize, upper: usize },
    #[error("lower bound exceeds upper bound for coordinate {0}")]
    BadBounds(usize),
}

struct Objective<'f> {
    f: &'f mut dyn FnMut(&[f64]) -> f64,
    evals: usize,
    best: f64,
    best_x: Vec<f64>,
}

impl Objective<'_> {
    fn call(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v < self.best {
            self.best = v;
            self.best_x.copy_from_slice(x);
        }
        v
    }
}

/// Minimise `f` over the box `[lower, upper]` starting from `x0` (projected
/// onto the box). Returns the best point seen.
pub fn minimize(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    config: &OptimConfig,
) -> Result<OptimResult, OptimError> {
    let n = x0.len();
    if lower.len() != n || upper.len() != n {
        return Err(OptimError::Dimension { start: n, lower: lower.len(), upper: upper.len() });
    }
    if let Some(i) = (0..n).find(|&i| lower[i] > upper[i] || lower[i].is_nan() || upper[i].is_nan()) {
        return Err(OptimError::BadBounds(i));
    }
    let x: Vec<f64> = (0..n).map(|i| x0[i].clamp(lower[i], upper[i])).collect();
    let mut obj = Objective { f, evals: 0, best: f64::INFINITY, best_x: x.clone() };
    let f0 = obj.call(&x);
    if !f0.is_finite() {
        return Err(OptimError::NonFiniteStart);
    }
    if n == 0 {
        return Ok(OptimResult { argmin: x, value: f0, iterations: 0, evaluations: 1, converged: true, trace: Vec::new() });
    }
    let (iterations, converged, trace) = match config.method {
        Method::Bfgs => bfgs(&mut obj, x, f0, lower, upper, config),
        Method::NelderMead => nelder_mead(&mut obj, x, f0, lower, upper, config),
    };
    Ok(OptimResult { argmin: obj.best_x, value: obj.best, iterations, evaluations: obj.evals, converged, trace })
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

fn gradient(obj: &mut Objective<'_>, x: &[f64], fx: f64, lower: &[f64], upper: &[f64], rel: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xt = x.to_vec();
    for i in 0..x.len() {
        let h = rel * (1.0 + x[i].abs());
        let forward = x[i] + h <= upper[i];
        let step = if forward { h } else { -h.min(x[i] - lower[i]) };
        if step == 0.0 {
            continue;
        }
        xt[i] = x[i] + step;
        let mut v = obj.call(&xt);
        let mut s = step;
        if !v.is_finite() && forward && x[i] - h >= lower[i] {
            xt[i] = x[i] - h;
            v = obj.call(&xt);
            s = -h;
        }
        g[i] = if v.is_finite() { (v - fx) / s } else { 0.0 };
        xt[i] = x[i];
    }
    g
}

fn converged(old: f64, new: f64, reltol: f64) -> bool {
    (old - new).abs() <= reltol * (old.abs() + reltol)
}

fn bfgs(
    obj: &mut Objective<'_>,
    mut x: Vec<f64>,
    mut fx: f64,
    lower: &[f64],
    upper: &[f64],
    cfg: &OptimConfig,
) -> (usize, bool, Vec<f64>) {
    let n = x.len();
    let identity = |h: &mut Vec<f64>| {
        h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
    };
    let mut hinv = vec![0.0; n * n];
    identity(&mut hinv);
    let mut fresh = true;
    let mut g = gradient(obj, &x, fx, lower, upper, cfg.fd_step);
    let mut trace = Vec::new();
    let mut xt = vec![0.0; n];
    for iter in 1..=cfg.max_iter {
        // search direction with coordinates pinned at a bound removed
        let mut d = vec![0.0; n];
        for i in 0..n {
            let pinned = (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0);
            if pinned {
                continue;
            }
            for j in 0..n {
                let pj = (x[j] <= lower[j] && g[j] > 0.0) || (x[j] >= upper[j] && g[j] < 0.0);
                if !pj {
                    d[i] -= hinv[i * n + j] * g[j];
                }
            }
        }
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 || d.iter().all(|v| *v == 0.0) {
            if fresh {
                if cfg.trace {
                    trace.push(obj.best);
                }
                return (iter, true, trace);
            }
            identity(&mut hinv);
            fresh = true;
            continue;
        }
        // an unscaled first step can be enormous; cap it at the scale of x
        let mut alpha: f64 = 1.0;
        if fresh {
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let xmax = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            alpha = alpha.min(xmax / dmax);
        }
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                xt[i] = x[i] + alpha * d[i];
            }
            project(&mut xt, lower, upper);
            if xt == x {
                break;
            }
            let ft = obj.call(&xt);
            let decrease: f64 = g.iter().zip(xt.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if ft.is_finite() && ft <= fx + 1e-4 * decrease {
                accepted = Some(ft);
                break;
            }
            alpha *= 0.5;
        }
        let Some(fnew) = accepted else {
            if fresh {
                if cfg.trace {
                    trace.push(obj.best);
                }
                return (iter, true, trace);
            }
            identity(&mut hinv);
            fresh = true;
            continue;
        };
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let gnew = gradient(obj, &xt, fnew, lower, upper, cfg.fd_step);
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let done = converged(fx, fnew, cfg.reltol);
        let was_fresh = fresh;
        x.copy_from_slice(&xt);
        fx = fnew;
        g = gnew;
        if cfg.trace {
            trace.push(obj.best);
        }
        if done {
            if was_fresh {
                return (iter, true, trace);
            }
            // a stale inverse Hessian can stall on a ridge; confirm with a restart
            identity(&mut hinv);
            fresh = true;
            continue;
        }
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if fresh {
                let scale = sy / y.iter().map(|v| v * v).sum::<f64>();
                hinv.iter_mut().for_each(|v| *v *= scale);
            }
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| hinv[i * n + j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let c = (1.0 + yhy / sy) / sy;
            for i in 0..n {
                for j in 0..n {
                    hinv[i * n + j] += c * s[i] * s[j] - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
            fresh = false;
        }
    }
    (cfg.max_iter, false, trace)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn nelder_mead(
    obj: &mut Objective<'_>,
    x0: Vec<f64>,
    f0: f64,
    lower: &[f64],
    upper: &[f64],
    cfg: &OptimConfig,
) -> (usize, bool, Vec<f64>) {
    let n = x0.len();
    let mut simplex = vec![x0.clone()];
    let mut values = vec![f0];
    for i in 0..n {
        let mut v = x0.clone();
        let step = 0.1 * x0[i].abs().max(1.0);
        v[i] = if v[i] + step <= upper[i] { v[i] + step } else { v[i] - step };
        project(&mut v, lower, upper);
        values.push(obj.call(&v));
        simplex.push(v);
    }
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..=n).collect();
    let point = |c: &[f64], w: &[f64], coef: f64| -> Vec<f64> {
        let mut p: Vec<f64> = (0..n).map(|i| c[i] + coef * (c[i] - w[i])).collect();
        project(&mut p, lower, upper);
        p
    };
    for iter in 1..=cfg.max_iter {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        let (best, worst, second) = (order[0], order[n], order[n - 1]);
        if values[worst].is_finite() && converged(values[best], values[worst], cfg.reltol) {
            if cfg.trace {
                trace.push(values[best]);
            }
            return (iter, true, trace);
        }
        let mut c = vec![0.0; n];
        for &k in &order[..n] {
            for i in 0..n {
                c[i] += simplex[k][i] / n as f64;
            }
        }
        let xr = point(&c, &simplex[worst], 1.0);
        let fr = obj.call(&xr);
        if fr < values[best] {
            let xe = point(&c, &simplex[worst], 2.0);
            let fe = obj.call(&xe);
            if fe < fr {
                simplex[worst] = xe;
                values[worst] = fe;
            } else {
                simplex[worst] = xr;
                values[worst] = fr;
            }
        } else if fr < values[second] {
            simplex[worst] = xr;
            values[worst] = fr;
        } else {
            let (xc, fc) = if fr < values[worst] {
                // outside contraction: halfway between centroid and reflection
                let mut xc: Vec<f64> = c.iter().zip(&xr).map(|(ci, ri)| ci + 0.5 * (ri - ci)).collect();
                project(&mut xc, lower, upper);
                let fc = obj.call(&xc);
                (xc, fc)
            } else {
                let mut xc: Vec<f64> = c.iter().zip(&simplex[worst]).map(|(ci, wi)| ci + 0.5 * (wi - ci)).collect();
                project(&mut xc, lower, upper);
                let fc = obj.call(&xc);
                (xc, fc)
            };
            if fc < fr.min(values[worst]) {
                simplex[worst] = xc;
                values[worst] = fc;
            } else {
                let b = simplex[best].clone();
                for &k in &order[1..] {
                    let mut v: Vec<f64> = simplex[k].iter().zip(&b).map(|(xi, bi)| bi + 0.5 * (xi - bi)).collect();
                    project(&mut v, lower, upper);
                    values[k] = obj.call(&v);
                    simplex[k] = v;
                }
            }
        }
        if cfg.trace {
            trace.push(values.iter().copied().fold(f64::INFINITY, f64::min));
        }
    }
    (cfg.max_iter, false, trace)
}
