//! Cubic smoothing splines in the banded Reinsch form.
//!
//! With knots at the data points, `Q` (n × n−2) and the tridiagonal `R`
//! (n−2 × n−2) give the natural spline minimising
//! `Σ (y_i − f(t_i))² + λ ∫ f''²` through `(R + λ QᵀQ) γ = Qᵀ y`,
//! `f = y − λ Q γ`, where `γ` holds the second derivatives at interior knots.

use super::SmoothError;

const GCV_GRID: usize = 60;
const DF_LOW: f64 = 2.05;

/// Fitted natural cubic spline.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineFit {
    pub knots: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Second derivative at every knot; zero at both ends.
    pub second: Vec<f64>,
    pub lambda: f64,
    pub gcv: f64,
    /// Effective degrees of freedom, `tr A(λ)`.
    pub df: f64,
}

impl SplineFit {
    pub fn eval(&self, x: f64) -> f64 {
        let t = &self.knots;
        let g = &self.fitted;
        let c = &self.second;
        let n = t.len();
        if x <= t[0] {
            let h = t[1] - t[0];
            let slope = (g[1] - g[0]) / h - h * c[1] / 6.0;
            return g[0] + slope * (x - t[0]);
        }
        if x >= t[n - 1] {
            let h = t[n - 1] - t[n - 2];
            let slope = (g[n - 1] - g[n - 2]) / h + h * c[n - 2] / 6.0;
            return g[n - 1] + slope * (x - t[n - 1]);
        }
        let i = t.partition_point(|&k| k <= x).saturating_sub(1).min(n - 2);
        let h = t[i + 1] - t[i];
        let a = x - t[i];
        let b = t[i + 1] - x;
        (a * g[i + 1] + b * g[i]) / h - a * b / 6.0 * ((1.0 + a / h) * c[i + 1] + (1.0 + b / h) * c[i])
    }
}

/// Precomputed band structure for one knot sequence.
#[derive(Debug, Clone)]
pub struct Reinsch {
    knots: Vec<f64>,
    // column j of Q has entries at rows j, j+1, j+2
    q: Vec<[f64; 3]>,
    r_diag: Vec<f64>,
    r_off: Vec<f64>,
    // bands of QᵀQ
    p0: Vec<f64>,
    p1: Vec<f64>,
    p2: Vec<f64>,
}

struct Factor {
    d: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
}

impl Reinsch {
    pub fn new(t: &[f64]) -> Result<Self, SmoothError> {
        let n = t.len();
        if n < 8 {
            return Err(SmoothError::TooFewPoints(n));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(SmoothError::NonFinite);
        }
        if t.windows(2).any(|w| w[1] == w[0]) {
            return Err(SmoothError::DuplicateTimes);
        }
        if t.windows(2).any(|w| w[1] < w[0]) {
            return Err(SmoothError::Unsorted);
        }
        let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        let m = n - 2;
        let q: Vec<[f64; 3]> = (0..m).map(|j| [1.0 / h[j], -1.0 / h[j] - 1.0 / h[j + 1], 1.0 / h[j + 1]]).collect();
        let r_diag = (0..m).map(|j| (h[j] + h[j + 1]) / 3.0).collect();
        let r_off = (0..m.saturating_sub(1)).map(|j| h[j + 1] / 6.0).collect();
        let p0 = q.iter().map(|c| c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).collect();
        let p1 = (0..m.saturating_sub(1)).map(|j| q[j][1] * q[j + 1][0] + q[j][2] * q[j + 1][1]).collect();
        let p2 = (0..m.saturating_sub(2)).map(|j| q[j][2] * q[j + 2][0]).collect();
        Ok(Reinsch { knots: t.to_vec(), q, r_diag, r_off, p0, p1, p2 })
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    fn factor(&self, lambda: f64) -> Factor {
        let m = self.q.len();
        let mut d = vec![0.0; m];
        let mut l1 = vec![0.0; m];
        let mut l2 = vec![0.0; m];
        for i in 0..m {
            let mut di = self.r_diag[i] + lambda * self.p0[i];
            if i >= 1 {
                di -= l1[i - 1] * l1[i - 1] * d[i - 1];
            }
            if i >= 2 {
                di -= l2[i - 2] * l2[i - 2] * d[i - 2];
            }
            d[i] = di;
            if i + 1 < m {
                let mut off = self.r_off[i] + lambda * self.p1[i];
                if i >= 1 {
                    off -= l2[i - 1] * l1[i - 1] * d[i - 1];
                }
                l1[i] = off / di;
            }
            if i + 2 < m {
                l2[i] = lambda * self.p2[i] / di;
            }
        }
        Factor { d, l1, l2 }
    }

    fn solve(f: &Factor, b: &mut [f64]) {
        let m = b.len();
        for i in 0..m {
            if i >= 1 {
                b[i] -= f.l1[i - 1] * b[i - 1];
            }
            if i >= 2 {
                b[i] -= f.l2[i - 2] * b[i - 2];
            }
        }
        for i in 0..m {
            b[i] /= f.d[i];
        }
        for i in (0..m).rev() {
            if i + 1 < m {
                b[i] -= f.l1[i] * b[i + 1];
            }
            if i + 2 < m {
                b[i] -= f.l2[i] * b[i + 2];
            }
        }
    }

    /// `tr A(λ)` from the central band of `(R + λQᵀQ)⁻¹`.
    fn trace(&self, f: &Factor, lambda: f64) -> f64 {
        let m = self.q.len();
        let mut s0 = vec![0.0; m + 2];
        let mut s1 = vec![0.0; m + 2];
        let mut s2 = vec![0.0; m + 2];
        for i in (0..m).rev() {
            let (a, b) = (f.l1[i], f.l2[i]);
            s2[i] = -a * s1[i + 1] - b * s0[i + 2];
            s1[i] = -a * s0[i + 1] - b * s1[i + 1];
            s0[i] = 1.0 / f.d[i] - a * s1[i] - b * s2[i];
        }
        let mut acc = 0.0;
        for i in 0..m {
            acc += self.p0[i] * s0[i];
            if i + 1 < m {
                acc += 2.0 * self.p1[i] * s1[i];
            }
            if i + 2 < m {
                acc += 2.0 * self.p2[i] * s2[i];
            }
        }
        self.len() as f64 - lambda * acc
    }

    fn df(&self, lambda: f64) -> f64 {
        self.trace(&self.factor(lambda), lambda)
    }

    /// Fit with a fixed smoothing parameter.
    pub fn fit(&self, y: &[f64], lambda: f64) -> Result<SplineFit, SmoothError> {
        let n = self.len();
        if y.len() != n {
            return Err(SmoothError::LengthMismatch { times: n, values: y.len() });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SmoothError::NonFinite);
        }
        let f = self.factor(lambda);
        let mut gamma: Vec<f64> = self.q.iter().enumerate().map(|(j, c)| c[0] * y[j] + c[1] * y[j + 1] + c[2] * y[j + 2]).collect();
        Self::solve(&f, &mut gamma);
        let mut fitted = y.to_vec();
        for (j, c) in self.q.iter().enumerate() {
            for r in 0..3 {
                fitted[j + r] -= lambda * c[r] * gamma[j];
            }
        }
        let df = self.trace(&f, lambda);
        let rss: f64 = y.iter().zip(&fitted).map(|(a, b)| (a - b) * (a - b)).sum();
        let denom = n as f64 - df;
        let gcv = n as f64 * rss / (denom * denom);
        let mut second = vec![0.0; n];
        second[1..n - 1].copy_from_slice(&gamma);
        Ok(SplineFit { knots: self.knots.clone(), fitted, second, lambda, gcv, df })
    }

    /// Smoothing parameter with `df(λ) = target`, by bisection on `log λ`.
    fn lambda_for_df(&self, target: f64) -> f64 {
        let tr_r: f64 = self.r_diag.iter().sum();
        let tr_p: f64 = self.p0.iter().sum();
        let centre = (tr_r / tr_p).ln();
        let (mut lo, mut hi) = (centre - 50.0, centre + 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.df(mid.exp()) > target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-10 {
                break;
            }
        }
        (0.5 * (lo + hi)).exp()
    }

    /// Log-spaced grid of 60 smoothing parameters covering
    /// `df ≈ [2, n − 1]`, smallest first.
    pub fn lambda_grid(&self) -> Vec<f64> {
        let lo = self.lambda_for_df(self.len() as f64 - 1.0).ln();
        let hi = self.lambda_for_df(DF_LOW).ln();
        (0..GCV_GRID).map(|i| (lo + (hi - lo) * i as f64 / (GCV_GRID - 1) as f64).exp()).collect()
    }

    /// Fit choosing λ by GCV over [`Reinsch::lambda_grid`]. Near-ties go to
    /// the larger λ.
    pub fn fit_gcv(&self, y: &[f64]) -> Result<SplineFit, SmoothError> {
        let fits = self.lambda_grid().into_iter().map(|l| self.fit(y, l)).collect::<Result<Vec<_>, _>>()?;
        let scale = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        let best = fits.iter().map(|f| f.gcv).fold(f64::INFINITY, f64::min);
        let tol = best * 1e-10 + 1e-24 * scale;
        let pick = fits.iter().rposition(|f| f.gcv <= best + tol).expect("non-empty grid");
        Ok(fits[pick].clone())
    }
}

/// Cubic smoothing spline with λ chosen by generalized cross-validation.
pub fn smooth_spline_gcv(t: &[f64], y: &[f64]) -> Result<SplineFit, SmoothError> {
    if t.len() != y.len() {
        return Err(SmoothError::LengthMismatch { times: t.len(), values: y.len() });
    }
    Reinsch::new(t)?.fit_gcv(y)
}
