//! Command implementations behind the `odesep` binary.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use odesep::{
    confint, fit_sets, mc_summary, profile, simulate_sets, with_workers, FitConfig, FitError, FitResult, ImError, ImMethod, McStats,
    ObservationSet, OptimError, ProfileOptions, SetsMode, SolverOptions, Values,
};
use serde::Serialize;
use thiserror::Error;

pub mod model_file;
pub mod obs_file;

use model_file::{Loaded, ModelFile};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input or usage; exit code 2.
    #[error("{0}")]
    Validation(String),
    /// Numeric failure during estimation; exit code 3.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Roles(_) | FitError::MissingStart(_) | FitError::Observations(_) | FitError::Config(_) => CliError::Validation(e.to_string()),
            FitError::Im(ImError::MissingStart(_)) | FitError::Im(ImError::Roles(_)) => CliError::Validation(e.to_string()),
            FitError::Im(inner) => CliError::Numeric(format!("integral matching: {inner}")),
            FitError::Optim(OptimError::NonFiniteStart) => CliError::Numeric("least squares: objective is not finite at the start point".into()),
            FitError::Optim(inner) => CliError::Numeric(format!("optimizer: {inner}")),
            FitError::NonFinite(m) => CliError::Numeric(format!("least squares: {m}")),
        }
    }
}

pub fn load_model(path: &Path) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let loaded = ModelFile::parse(&text)?.load()?;
    let diags = odesep::validate_roles(&loaded.model);
    if !diags.is_empty() {
        return Err(FitError::Roles(diags).into());
    }
    Ok(loaded)
}

pub fn load_obs(path: &Path, loaded: &Loaded) -> Result<Vec<ObservationSet>, CliError> {
    let f = File::open(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    obs_file::read_obs(f, &loaded.model, &loaded.tabulated_from_obs())
}

/// `name=value` pairs separated by commas.
pub fn parse_assignments(text: &str) -> Result<Values, CliError> {
    let mut out = Values::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| CliError::Validation(format!("expected name=value, got \"{part}\"")))?;
        let v: f64 = v.trim().parse().map_err(|_| CliError::Validation(format!("\"{v}\" is not a number")))?;
        out.insert(k.trim().to_string(), v);
    }
    Ok(out)
}

/// `start:end:n` (inclusive, evenly spaced) or a comma-separated list.
pub fn parse_times(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Validation(format!("cannot read times \"{text}\""));
    let parts: Vec<&str> = text.split(':').collect();
    let times = if parts.len() == 3 {
        let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if n < 2 {
            return Err(bad());
        }
        odesep::linspace(a, b, n)
    } else {
        text.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>, _>>()?
    };
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|t| !t.is_finite()) {
        return Err(CliError::Validation(format!("times must be finite and strictly increasing: \"{text}\"")));
    }
    Ok(times)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn threads() -> Option<usize> {
    std::env::var("ODESEP_THREADS").ok().and_then(|v| v.trim().parse().ok()).filter(|n| *n > 0)
}

fn run_sets(loaded: &Loaded, sets: &[ObservationSet], parallel: bool, cfg: &FitConfig) -> Vec<Result<FitResult, FitError>> {
    let go = || fit_sets(&loaded.model, sets, loaded.sets_mode, parallel, cfg);
    match (parallel, threads()) {
        (true, Some(n)) => with_workers(n, go),
        _ => go(),
    }
}

fn fit_config(loaded: &Loaded) -> FitConfig {
    let mut cfg = FitConfig::new(loaded.x0.clone());
    cfg.starts = loaded.starts.clone();
    cfg.bounds = loaded.bounds.clone();
    cfg.im_method = loaded.im_method;
    cfg.decouple = loaded.file.options.decouple;
    cfg.smoothing = loaded.smoothing;
    cfg.optim = loaded.optim;
    cfg.inputs = loaded.static_inputs();
    cfg
}

// ------------------------------------------------------------------ simulate

pub struct SimulateArgs {
    pub model: PathBuf,
    pub theta: Option<String>,
    pub x0: Option<String>,
    pub times: String,
    pub sigma: f64,
    pub seed: Option<u64>,
    pub sets: usize,
    pub out: Option<PathBuf>,
    pub truth_out: Option<PathBuf>,
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let loaded = load_model(&a.model)?;
    let params = loaded.bound_parameters(&a.theta.as_deref().map(parse_assignments).transpose()?.unwrap_or_default())?;
    let x0 = loaded.bound_x0(&a.x0.as_deref().map(parse_assignments).transpose()?.unwrap_or_default())?;
    let times = parse_times(&a.times)?;
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return Err(CliError::Validation("--sigma must be a non-negative number".into()));
    }
    if a.sets == 0 {
        return Err(CliError::Validation("--sets must be at least 1".into()));
    }
    if !loaded.tabulated_from_obs().is_empty() {
        return Err(CliError::Validation("simulation needs every external input defined in the model file".into()));
    }
    let inputs = loaded.static_inputs();
    let seed = a.seed.unwrap_or(loaded.file.options.seed);
    let (truth, sets) = simulate_sets(&loaded.model, &params, &x0, &times, &inputs, &SolverOptions::default(), a.sigma, seed, a.sets)
        .map_err(|e| CliError::Numeric(format!("ode solver: {e}")))?;
    obs_file::write_sets(output(a.out.as_deref())?, &loaded.model, &sets)?;
    if let Some(p) = &a.truth_out {
        obs_file::write_trajectory(output(Some(p))?, &loaded.model, &truth)?;
    }
    Ok(())
}

// ----------------------------------------------------------------------- fit

#[derive(Debug, Serialize)]
pub struct ParamRow {
    pub par: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub start: Option<f64>,
    /// `null` when unbounded.
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub im_est: Option<f64>,
    pub nls_est: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EstMatrix {
    pub equations: Vec<String>,
    pub parameters: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Serialize)]
pub struct SetFit {
    /// One-based set numbers covered by this fit.
    pub sets: Vec<usize>,
    pub parameters: Vec<ParamRow>,
    pub x0: Vec<Values>,
    pub im_loss: f64,
    pub nls_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub im_pars_est_mat: Option<EstMatrix>,
}

#[derive(Debug, Serialize)]
pub struct Equation {
    pub variable: String,
    pub rhs: String,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub equations: Vec<Equation>,
    pub im_method: String,
    pub obs_sets_fit: String,
    pub fits: Vec<SetFit>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn set_fit(r: &FitResult, sets: Vec<usize>) -> SetFit {
    SetFit {
        sets,
        parameters: r
            .parameters
            .iter()
            .map(|p| ParamRow { par: p.name.clone(), kind: p.kind.to_string(), start: p.start, lower: finite(p.lower), upper: finite(p.upper), im_est: p.im_est, nls_est: p.nls_est })
            .collect(),
        x0: r.x0.clone(),
        im_loss: r.im_loss,
        nls_loss: r.nls_loss,
        im_pars_est_mat: r.decoupled().map(|m| EstMatrix { equations: m.equations.clone(), parameters: m.parameters.clone(), values: m.values.clone() }),
    }
}

pub struct FitArgs {
    pub model: PathBuf,
    pub obs: PathBuf,
    pub parallel: bool,
    pub out: Option<PathBuf>,
}

pub fn fit_report(model: &Path, obs: &Path, parallel: bool) -> Result<FitReport, CliError> {
    let loaded = load_model(model)?;
    let sets = load_obs(obs, &loaded)?;
    let cfg = fit_config(&loaded);
    let results = run_sets(&loaded, &sets, parallel, &cfg);
    let mut fits = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        let r = r.map_err(|e| annotate(e.into(), k, sets.len(), loaded.sets_mode))?;
        let covered = match loaded.sets_mode {
            SetsMode::Separate => vec![k + 1],
            SetsMode::SeparateX0 => (1..=sets.len()).collect(),
        };
        fits.push(set_fit(&r, covered));
    }
    let o = &loaded.file.options;
    Ok(FitReport {
        equations: loaded
            .model
            .variables()
            .iter()
            .zip(loaded.model.equation_sources())
            .map(|(v, src)| Equation { variable: v.clone(), rhs: src.clone() })
            .collect(),
        im_method: match loaded.im_method {
            ImMethod::Separable => "separable",
            ImMethod::NonSeparable => "non-separable",
        }
        .into(),
        obs_sets_fit: o.obs_sets_fit.clone(),
        fits,
    })
}

fn annotate(e: CliError, k: usize, n: usize, mode: SetsMode) -> CliError {
    if n == 1 || mode == SetsMode::SeparateX0 {
        return e;
    }
    match e {
        CliError::Validation(m) => CliError::Validation(format!("set {}: {m}", k + 1)),
        CliError::Numeric(m) => CliError::Numeric(format!("set {}: {m}", k + 1)),
    }
}

pub fn cmd_fit(a: &FitArgs) -> Result<(), CliError> {
    let report = fit_report(&a.model, &a.obs, a.parallel)?;
    let mut w = output(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| CliError::Numeric(format!("writing result: {e}")))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::Numeric(format!("writing result: {e}")))
}

// ------------------------------------------------------------------- profile

pub struct ProfileArgs {
    pub model: PathBuf,
    pub obs: PathBuf,
    pub level: f64,
    pub step_pct: f64,
    pub out: Option<PathBuf>,
    pub ci_out: Option<PathBuf>,
}

pub fn cmd_profile(a: &ProfileArgs) -> Result<(), CliError> {
    if !(a.step_pct > 0.0 && a.step_pct.is_finite()) {
        return Err(CliError::Validation("--step-pct must be positive".into()));
    }
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(CliError::Validation("--level must lie strictly between 0 and 1".into()));
    }
    let loaded = load_model(&a.model)?;
    let sets = load_obs(&a.obs, &loaded)?;
    if sets.len() > 1 && loaded.sets_mode == SetsMode::Separate {
        return Err(CliError::Validation("profiling several sets needs obs_sets_fit \"separate_x0\"".into()));
    }
    let cfg = fit_config(&loaded);
    let r = fit_sets(&loaded.model, &sets, loaded.sets_mode, false, &cfg).remove(0)?;
    let opts = ProfileOptions { step_fraction: a.step_pct / 100.0, ..ProfileOptions::default() };
    let prof = profile(&loaded.model, &sets, &r, &cfg, &opts)?;
    let cis = confint(&prof, a.level)?;
    let io = |e: csv::Error| CliError::Numeric(format!("writing profile: {e}"));
    if let Some(p) = &a.out {
        let mut w = csv::Writer::from_writer(output(Some(p))?);
        w.write_record(["parameter", "value", "nll"]).map_err(io)?;
        for c in &prof.curves {
            for (v, nll) in &c.points {
                w.write_record([c.parameter.clone(), v.to_string(), nll.to_string()]).map_err(io)?;
            }
        }
        w.flush().map_err(|e| CliError::Numeric(format!("writing profile: {e}")))?;
    }
    let mut w = csv::Writer::from_writer(output(a.ci_out.as_deref())?);
    w.write_record(["parameter", "estimate", "level", "lower", "upper", "lower_open", "upper_open"]).map_err(io)?;
    for c in &cis {
        w.write_record([
            c.parameter.clone(),
            c.estimate.to_string(),
            c.level.to_string(),
            c.lower.to_string(),
            c.upper.to_string(),
            c.lower_open.to_string(),
            c.upper_open.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Numeric(format!("writing intervals: {e}")))
}

// ------------------------------------------------------------------------ mc

pub struct McArgs {
    pub model: PathBuf,
    pub obs: PathBuf,
    pub parallel: bool,
    pub truth: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn cmd_mc(a: &McArgs) -> Result<(), CliError> {
    let loaded = load_model(&a.model)?;
    let sets = load_obs(&a.obs, &loaded)?;
    if sets.len() < 2 {
        return Err(CliError::Validation("a Monte Carlo summary needs at least two observation sets".into()));
    }
    if loaded.sets_mode != SetsMode::Separate {
        return Err(CliError::Validation("a Monte Carlo summary fits sets separately; set obs_sets_fit to \"separate\"".into()));
    }
    let truth = a.truth.as_deref().map(parse_assignments).transpose()?;
    let cfg = fit_config(&loaded);
    let mut results = Vec::new();
    for (k, r) in run_sets(&loaded, &sets, a.parallel, &cfg).into_iter().enumerate() {
        results.push(r.map_err(|e| annotate(e.into(), k, sets.len(), SetsMode::Separate))?);
    }
    let rows = mc_summary(&results, truth.as_ref())?;
    let io = |e: csv::Error| CliError::Numeric(format!("writing summary: {e}"));
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    let with_truth = truth.is_some();
    let mut header = vec!["par".to_string()];
    if with_truth {
        header.push("true".into());
    }
    for stage in ["im", "nls"] {
        header.push(format!("{stage}_mean"));
        header.push(format!("{stage}_sd"));
        if with_truth {
            header.push(format!("{stage}_bias"));
            header.push(format!("{stage}_rmse"));
        }
    }
    w.write_record(&header).map_err(io)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &rows {
        let mut rec = vec![row.parameter.clone()];
        if with_truth {
            rec.push(cell(row.truth));
        }
        for s in [&row.im, &row.nls] {
            let s: Option<&McStats> = s.as_ref();
            rec.push(cell(s.map(|s| s.mean)));
            rec.push(cell(s.map(|s| s.sd)));
            if with_truth {
                rec.push(cell(s.and_then(|s| s.bias)));
                rec.push(cell(s.and_then(|s| s.rmse)));
            }
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Numeric(format!("writing summary: {e}")))
}
