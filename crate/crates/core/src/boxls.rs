//! Bound-constrained linear least squares in normal-equation form:
//! minimise `½ zᵀ N z − bᵀ z` subject to `lower ≤ z ≤ upper`, by a primal
//! active-set method.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Largest accepted condition number of the Jacobi-scaled normal matrix.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinearSolveError {
    #[error("normal matrix is ill-conditioned (condition number {condition:.3e}); not identifiable: {}", parameters.join(", "))]
    IllConditioned { condition: f64, parameters: Vec<String> },
    #[error("infeasible bounds for '{0}'")]
    BadBounds(String),
    #[error("active-set iteration limit reached")]
    NoConvergence,
}

/// Condition number of `D N D` with `D = diag(N)^{-1/2}`; on failure, names
/// the parameters loading on the weakest eigen-direction.
pub fn check_conditioning(n: &DMatrix<f64>, names: &[String]) -> Result<f64, LinearSolveError> {
    let p = n.nrows();
    if p == 0 {
        return Ok(1.0);
    }
    let scale: Vec<f64> = (0..p).map(|i| if n[(i, i)] > 0.0 { 1.0 / n[(i, i)].sqrt() } else { 0.0 }).collect();
    let scaled = DMatrix::from_fn(p, p, |i, j| n[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(scaled);
    let (mut lo, mut hi, mut arg) = (f64::INFINITY, 0.0f64, 0);
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v < lo {
            lo = v;
            arg = i;
        }
        hi = hi.max(v.abs());
    }
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if condition.is_finite() && condition < MAX_CONDITION {
        return Ok(condition);
    }
    let v = eig.eigenvectors.column(arg);
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut parameters: Vec<String> = (0..p).filter(|&i| v[i].abs() >= 0.1 * vmax || scale[i] == 0.0).map(|i| names[i].clone()).collect();
    parameters.dedup();
    Err(LinearSolveError::IllConditioned { condition, parameters })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Free,
    AtLower,
    AtUpper,
}

/// Minimiser of the bounded quadratic. `N` must be symmetric positive
/// definite; ties are broken by the smallest index.
pub fn solve_box_qp(
    n: &DMatrix<f64>,
    b: &DVector<f64>,
    lower: &[f64],
    upper: &[f64],
) -> Result<DVector<f64>, LinearSolveError> {
    let p = b.len();
    for i in 0..p {
        if lower[i] > upper[i] {
            return Err(LinearSolveError::BadBounds(format!("#{i}")));
        }
    }
    let mut state = vec![State::Free; p];
    let mut x = DVector::from_fn(p, |i, _| 0.0f64.clamp(lower[i], upper[i]));
    for i in 0..p {
        if lower[i] == upper[i] || lower[i] > 0.0 {
            state[i] = State::AtLower;
        } else if upper[i] < 0.0 {
            state[i] = State::AtUpper;
        }
    }
    for _ in 0..(20 * p + 100) {
        let free: Vec<usize> = (0..p).filter(|&i| state[i] == State::Free).collect();
        let target = free_solution(n, b, &x, &free)?;
        // step toward the subproblem optimum until a bound blocks
        let mut alpha = 1.0;
        let mut block: Option<(usize, State)> = None;
        for (f, &i) in free.iter().enumerate() {
            let dir = target[f] - x[i];
            if dir < 0.0 && target[f] < lower[i] {
                let a = (lower[i] - x[i]) / dir;
                if a < alpha {
                    alpha = a;
                    block = Some((i, State::AtLower));
                }
            } else if dir > 0.0 && target[f] > upper[i] {
                let a = (upper[i] - x[i]) / dir;
                if a < alpha {
                    alpha = a;
                    block = Some((i, State::AtUpper));
                }
            }
        }
        for (f, &i) in free.iter().enumerate() {
            x[i] += alpha * (target[f] - x[i]);
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
        if let Some((i, s)) = block {
            state[i] = s;
            x[i] = if s == State::AtLower { lower[i] } else { upper[i] };
            continue;
        }
        // subproblem optimum is feasible; check multipliers of bound variables
        let grad = n * &x - b;
        let mut release: Option<(usize, f64)> = None;
        for i in 0..p {
            if lower[i] == upper[i] {
                continue;
            }
            let viol = match state[i] {
                State::AtLower => -grad[i],
                State::AtUpper => grad[i],
                State::Free => continue,
            };
            let tol = 1e-12 * (1.0 + b[i].abs() + (n.row(i) * &x)[0].abs());
            if viol > tol && release.is_none_or(|(_, v)| viol > v) {
                release = Some((i, viol));
            }
        }
        match release {
            Some((i, _)) => state[i] = State::Free,
            None => return Ok(x),
        }
    }
    Err(LinearSolveError::NoConvergence)
}

fn free_solution(
    n: &DMatrix<f64>,
    b: &DVector<f64>,
    x: &DVector<f64>,
    free: &[usize],
) -> Result<DVector<f64>, LinearSolveError> {
    let k = free.len();
    if k == 0 {
        return Ok(DVector::zeros(0));
    }
    let sub = DMatrix::from_fn(k, k, |r, c| n[(free[r], free[c])]);
    let rhs = DVector::from_fn(k, |r, _| {
        let i = free[r];
        let mut v = b[i];
        for j in 0..x.len() {
            if !free.contains(&j) {
                v -= n[(i, j)] * x[j];
            }
        }
        v
    });
    match sub.cholesky() {
        Some(c) => Ok(c.solve(&rhs)),
        None => Err(LinearSolveError::IllConditioned { condition: f64::INFINITY, parameters: Vec::new() }),
    }
}
