//! Age-structured multi-season SIR model and the susceptible reconstruction
//! used when only infecteds are observed.

use std::sync::Arc;

use crate::im::{HookInput, ReconstructionHook};
use crate::model::{ModelError, OdeModel, ParamRole, Values};
use crate::obs::Series;
use crate::smoothing::{cum_trapz, SmoothError};

pub fn s_name(group: usize, season: usize) -> String {
    format!("S{group}_{season}")
}

pub fn i_name(group: usize, season: usize) -> String {
    format!("I{group}_{season}")
}

pub fn beta_name(group: usize, from: usize) -> String {
    format!("beta{group}_{from}")
}

pub fn kappa_name(season: usize) -> String {
    format!("kappa{season}")
}

/// Variables ordered group-fastest: S1_1, S2_1, S1_2, ..., then I in the
/// same order. `kappa1` is fixed at 1. `gamma` and `kappa2..` are fixed at
/// the given values, or non-linear parameters when `None`.
pub fn sir_model(groups: usize, seasons: usize, gamma: Option<f64>, kappa: Option<&[f64]>) -> Result<OdeModel, ModelError> {
    let mut b = OdeModel::builder();
    let mut infection = Vec::new();
    for y in 1..=seasons {
        for a in 1..=groups {
            let sum: Vec<String> = (1..=groups).map(|j| format!("{}*{}", beta_name(a, j), i_name(j, y))).collect();
            let k = if y == 1 { "1".to_string() } else { kappa_name(y) };
            infection.push((a, y, format!("{}*{k}*({})", s_name(a, y), sum.join(" + "))));
        }
    }
    for (a, y, f) in &infection {
        b = b.equation(s_name(*a, *y), format!("-{f}"));
    }
    for (a, y, f) in &infection {
        b = b.equation(i_name(*a, *y), format!("{f} - gamma*{}", i_name(*a, *y)));
    }
    for a in 1..=groups {
        for j in 1..=groups {
            b = b.param(beta_name(a, j), ParamRole::Linear);
        }
    }
    b = match gamma {
        None => b.param("gamma", ParamRole::Nonlinear),
        Some(v) => b.fixed("gamma", v),
    };
    for y in 2..=seasons {
        b = match kappa {
            None => b.param(kappa_name(y), ParamRole::Nonlinear),
            Some(vals) => b.fixed(kappa_name(y), vals[y - 2]),
        };
    }
    b.build()
}

/// `S(t) = S0 + I0 − I(t) − γ ∫_{t_1}^{t} I(u) du` on the sample times of `I`.
pub fn reconstruct_susceptibles(s0: f64, i0: f64, gamma: f64, times: &[f64], infected: &[f64]) -> Result<Vec<f64>, SmoothError> {
    let cum = cum_trapz(times, infected)?;
    Ok(infected.iter().zip(&cum).map(|(i, c)| s0 + i0 - i - gamma * c).collect())
}

/// Hook filling every `S{a}_{y}` series from the observed `I{a}_{y}`, taking
/// `S0` and `I0` from the initial-value bindings and `gamma` from the
/// parameter bindings.
pub fn susceptible_hook(groups: usize, seasons: usize) -> ReconstructionHook {
    Arc::new(move |h: &HookInput<'_>| {
        let mut out = h.obs.clone();
        let gamma = *h.params.get("gamma").ok_or("gamma is not bound")?;
        for y in 1..=seasons {
            for a in 1..=groups {
                let (s, i) = (s_name(a, y), i_name(a, y));
                let series = h.obs.get(&i).ok_or_else(|| format!("no observations of {i}"))?;
                let s0 = *h.x0.get(&s).ok_or_else(|| format!("no initial value for {s}"))?;
                let i0 = *h.x0.get(&i).ok_or_else(|| format!("no initial value for {i}"))?;
                let values = reconstruct_susceptibles(s0, i0, gamma, &series.times, &series.values).map_err(|e| e.to_string())?;
                out.series.insert(s, Series::new(series.times.clone(), values));
            }
        }
        Ok(out)
    })
}

/// Parameter values of the bundled two-group, five-season example.
pub fn example_truth() -> (Values, Values) {
    let mut p = Values::new();
    for (a, j, v) in [(1, 1, 6.0), (2, 1, 2.0), (1, 2, 1.0), (2, 2, 3.0)] {
        p.insert(beta_name(a, j), v);
    }
    p.insert("gamma".into(), 7.0 / 3.0);
    for (y, v) in [(2, 0.988), (3, 1.182), (4, 1.037), (5, 1.052)] {
        p.insert(kappa_name(y), v);
    }
    let s0 = [0.56, 0.57, 0.49, 0.45, 0.56, 0.32, 0.56, 0.47, 0.47, 0.41];
    let mut x0 = Values::new();
    for y in 1..=5 {
        for a in 1..=2 {
            x0.insert(s_name(a, y), s0[(y - 1) * 2 + a - 1]);
            x0.insert(i_name(a, y), EXAMPLE_I0);
        }
    }
    (p, x0)
}

/// Initial infected fraction used for every group and season.
pub const EXAMPLE_I0: f64 = 1e-3;
