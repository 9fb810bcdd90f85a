//! Profile likelihood curves and the confidence intervals read off them.

use statrs::function::erf::erf_inv;

use crate::fit::{FitConfig, FitError, FitResult, NlsProblem};
use crate::model::{OdeModel, Values};
use crate::obs::ObservationSet;
use crate::optim::{minimize, OptimConfig};

/// Quantile of the χ² distribution with one degree of freedom.
pub fn chi2_1_quantile(p: f64) -> f64 {
    let z = erf_inv(p);
    2.0 * z * z
}

#[derive(Debug, Clone)]
pub struct ProfileOptions {
    /// Step as a fraction of |estimate| (a zero estimate uses this fraction
    /// of 1).
    pub step_fraction: f64,
    /// Absolute steps overriding `step_fraction` by name.
    pub steps: Values,
    pub max_steps: usize,
    /// Quantities to profile; all free ones when `None`.
    pub parameters: Option<Vec<String>>,
    /// Start each inner fit from the previous grid point rather than the
    /// overall optimum.
    pub warm_start: bool,
    pub optim: OptimConfig,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            step_fraction: 0.01,
            steps: Values::new(),
            max_steps: 100,
            parameters: None,
            warm_start: true,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileCurve {
    pub parameter: String,
    pub estimate: f64,
    pub nll_min: f64,
    pub step: f64,
    /// `(value, profiled nll)` sorted by value, the optimum included.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileResult {
    pub curves: Vec<ProfileCurve>,
    /// Noise variance behind the Gaussian likelihood; `None` when a user
    /// likelihood was profiled.
    pub sigma2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfInt {
    pub parameter: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    /// The curve never crossed the threshold on that side; the endpoint is
    /// the last grid value.
    pub lower_open: bool,
    pub upper_open: bool,
}

/// Walk each quantity outward from the fitted optimum, re-optimizing all
/// others, until the nll rises χ²₁(0.999)/2 above its minimum or
/// `max_steps` is reached. Without a likelihood hook the nll is
/// `RSS/(2σ̂²)` with `σ̂² = RSS_min / n_obs`.
pub fn profile(model: &OdeModel, sets: &[ObservationSet], fit: &FitResult, cfg: &FitConfig, opts: &ProfileOptions) -> Result<ProfileResult, FitError> {
    if !(opts.step_fraction > 0.0) || opts.steps.values().any(|s| !(*s > 0.0)) {
        return Err(FitError::Config("profile step must be positive".into()));
    }
    let nls = NlsProblem::new(model, sets, cfg);
    let mut z = nls.pack(&fit.estimates(), &fit.x0).map_err(FitError::MissingStart)?;
    let (lower, upper) = nls.bounds();
    let mut f_min = nls.objective(&z);
    if !f_min.is_finite() {
        return Err(FitError::NonFinite("criterion is not finite at the fitted estimates".into()));
    }
    // polish so that the reference minimum is as low as the inner fits can reach
    let polished = minimize(&mut |x: &[f64]| nls.objective(x), &z, lower, upper, &opts.optim)?;
    if polished.value < f_min {
        z = polished.argmin;
        f_min = polished.value;
    }
    let sigma2 = (!nls.has_likelihood()).then(|| f_min / nls.n_obs() as f64);
    let scale = |f: f64| match sigma2 {
        Some(s2) => f / (2.0 * s2),
        None => f,
    };
    let nll_min = scale(f_min);
    let cap = chi2_1_quantile(0.999) / 2.0;
    let targets: Vec<String> = match &opts.parameters {
        Some(p) => p.clone(),
        None => nls.names().to_vec(),
    };
    let mut curves = Vec::new();
    for name in targets {
        let i = nls.index_of(&name).ok_or_else(|| FitError::Config(format!("'{name}' is not a free quantity")))?;
        let est = z[i];
        let step = opts.steps.get(&name).copied().unwrap_or(opts.step_fraction * if est == 0.0 { 1.0 } else { est.abs() });
        let mut points = vec![(est, nll_min)];
        let others: Vec<usize> = (0..z.len()).filter(|&k| k != i).collect();
        let lo: Vec<f64> = others.iter().map(|&k| lower[k]).collect();
        let hi: Vec<f64> = others.iter().map(|&k| upper[k]).collect();
        for dir in [-1.0, 1.0] {
            let mut warm: Vec<f64> = others.iter().map(|&k| z[k]).collect();
            for k in 1..=opts.max_steps {
                let v = est + dir * k as f64 * step;
                if v < lower[i] || v > upper[i] {
                    break;
                }
                let full = |rest: &[f64]| {
                    let mut x = z.clone();
                    x[i] = v;
                    for (o, r) in others.iter().zip(rest) {
                        x[*o] = *r;
                    }
                    x
                };
                let start = if opts.warm_start { warm.clone() } else { others.iter().map(|&k| z[k]).collect() };
                let nll = if others.is_empty() {
                    scale(nls.objective(&full(&[])))
                } else {
                    match minimize(&mut |rest: &[f64]| nls.objective(&full(rest)), &start, &lo, &hi, &opts.optim) {
                        Ok(r) if r.value.is_finite() => {
                            warm = r.argmin;
                            scale(r.value)
                        }
                        _ => f64::INFINITY,
                    }
                };
                points.push((v, nll));
                if nll - nll_min > cap {
                    break;
                }
            }
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        curves.push(ProfileCurve { parameter: name, estimate: est, nll_min, step, points });
    }
    Ok(ProfileResult { curves, sigma2 })
}

fn crossing(from: (f64, f64), to: (f64, f64), threshold: f64) -> f64 {
    if !to.1.is_finite() {
        return from.0;
    }
    let frac = ((threshold - from.1) / (to.1 - from.1)).clamp(0.0, 1.0);
    from.0 + frac * (to.0 - from.0)
}

/// Intervals where the profiled nll stays below `nll_min + χ²₁(level)/2`.
pub fn confint(profile: &ProfileResult, level: f64) -> Result<Vec<ConfInt>, FitError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(FitError::Config("confidence level must lie in (0, 1)".into()));
    }
    let half = chi2_1_quantile(level) / 2.0;
    Ok(profile
        .curves
        .iter()
        .map(|c| {
            let threshold = c.nll_min + half;
            let centre = c.points.iter().position(|p| p.0 == c.estimate).unwrap_or(0);
            let side = |range: &mut dyn Iterator<Item = usize>| -> (f64, bool) {
                let mut prev = (c.estimate, c.nll_min);
                for k in range {
                    let p = c.points[k];
                    if p.1 >= threshold {
                        return (crossing(prev, p, threshold), false);
                    }
                    prev = p;
                }
                (prev.0, true)
            };
            let (lower, lower_open) = side(&mut (0..centre).rev());
            let (upper, upper_open) = side(&mut (centre + 1..c.points.len()));
            ConfInt { parameter: c.parameter.clone(), estimate: c.estimate, lower, upper, level, lower_open, upper_open }
        })
        .collect())
}
