//! Noisy observations from a solved model.

use crate::model::{OdeModel, Values};
use crate::obs::ObservationSet;
use crate::ode::{solve_ode, ExternalInput, SolveError, SolverOptions, Trajectory};
use crate::rng::NoiseRng;

/// Add `N(0, σ²)` noise to every column of `truth`, drawing variable by
/// variable. With `sigma == 0` the values are copied unchanged.
pub fn add_noise(model: &OdeModel, truth: &Trajectory, sigma: f64, rng: &mut NoiseRng, index: usize) -> ObservationSet {
    let mut set = ObservationSet::new(index);
    for (j, v) in model.variables().iter().enumerate() {
        let values = truth.column(j).into_iter().map(|x| if sigma == 0.0 { x } else { x + sigma * rng.standard_normal() }).collect();
        set = set.with_series(v.clone(), truth.times.clone(), values);
    }
    set
}

/// Solve once and draw `n_sets` independent noisy copies (indices `1..`).
#[allow(clippy::too_many_arguments)]
pub fn simulate_sets(
    model: &OdeModel,
    params: &Values,
    x0: &Values,
    times: &[f64],
    inputs: &[ExternalInput],
    opts: &SolverOptions,
    sigma: f64,
    seed: u64,
    n_sets: usize,
) -> Result<(Trajectory, Vec<ObservationSet>), SolveError> {
    let truth = solve_ode(model, params, x0, times, inputs, opts)?;
    let mut rng = NoiseRng::new(seed);
    let sets = (1..=n_sets).map(|i| add_noise(model, &truth, sigma, &mut rng, i)).collect();
    Ok((truth, sets))
}

/// Evenly spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_copies_truth() {
        let m = OdeModel::builder().equation("x", "-k*x").linear(["k"]).build().unwrap();
        let p: Values = [("k".to_string(), 0.5)].into();
        let x0: Values = [("x".to_string(), 1.0)].into();
        let t = linspace(0.0, 2.0, 11);
        let (truth, sets) = simulate_sets(&m, &p, &x0, &t, &[], &SolverOptions::default(), 0.0, 1, 2).unwrap();
        assert_eq!(sets[0].get("x").unwrap().values, truth.column(0));
        assert_eq!(sets[1].index, 2);
        assert_eq!(t[10], 2.0);
    }
}
