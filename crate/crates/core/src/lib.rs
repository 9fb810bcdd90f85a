//! Parameter and initial-condition estimation for ODE systems from noisy
//! time series.
//!
//! Estimation runs in two stages. Integral matching fits the model to a
//! smoothed version of the data without solving the ODE, profiling out
//! parameters that enter the right-hand side linearly. Its estimates then seed
//! a trajectory-matching least-squares (or user likelihood) fit.

pub mod boxls;
pub mod expr;
pub mod fit;
pub mod im;
pub mod ode;
pub mod linearity;
pub mod model;
pub mod obs;
pub mod optim;
pub mod profile;
pub mod rng;
pub mod sim;
pub mod sir;
pub mod smoothing;

pub use expr::{parse_expression, Expr};
pub use fit::{fit, fit_sets, mc_summary, nls_loss, with_workers, FitConfig, FitError, FitResult, LikelihoodHook, LikelihoodInput, McRow, McStats, ParamReport, SetsMode};
pub use im::{Bounds, DecoupledMatrix, HookInput, ImError, ImEstimate, ImMethod, ImProblem, ImSpec, ReconstructionHook, X0Role};
pub use linearity::{classify_linearity, decompose_linear, validate_roles, Diagnostic, LinearDecomposition, Linearity};
pub use model::{OdeModel, ParamRole, SymbolRole, Values};
pub use obs::{ObservationSet, Series};
pub use ode::{solve_ode, ExternalInput, Interpolation, SolveError, SolverOptions, Trajectory};
pub use optim::{minimize, Method, OptimConfig, OptimError, OptimResult};
pub use profile::{confint, profile, ConfInt, ProfileCurve, ProfileOptions, ProfileResult};
pub use rng::NoiseRng;
pub use sim::{linspace, simulate_sets};
pub use smoothing::{cum_trapz, smooth_all, smooth_spline_gcv, SmoothMethod, SmoothedPath};
