//! JSON model files.

use std::collections::BTreeMap;

use odesep::{
    parse_expression, Bounds, ExternalInput, ImMethod, Interpolation, Method, OdeModel, OptimConfig, ParamRole, SetsMode, SmoothMethod, Values,
    X0Role,
};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub variables: Vec<String>,
    pub equations: BTreeMap<String, String>,
    #[serde(default)]
    pub parameters: BTreeMap<String, ParamSpec>,
    #[serde(default)]
    pub x0: BTreeMap<String, X0Spec>,
    #[serde(default)]
    pub external_inputs: BTreeMap<String, InputSpec>,
    #[serde(default)]
    pub options: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Linear,
    Nonlinear,
    Fixed,
    Likelihood,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub role: Role,
    pub start: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub fixed_value: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum X0Spec {
    Value(f64),
    Word(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Linear,
    Previous,
    Formula,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub mode: InputMode,
    pub times: Option<Vec<f64>>,
    pub values: Option<Vec<f64>>,
    pub expr: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Options {
    pub im_method: String,
    pub decouple: bool,
    pub smoothing: String,
    pub optimizer: String,
    pub obs_sets_fit: String,
    pub seed: u64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            im_method: "separable".into(),
            decouple: false,
            smoothing: "spline".into(),
            optimizer: "bfgs".into(),
            obs_sets_fit: "separate".into(),
            seed: 1,
        }
    }
}

/// A model file turned into library values.
pub struct Loaded {
    pub model: OdeModel,
    pub file: ModelFile,
    pub x0: Vec<X0Role>,
    pub starts: Values,
    pub bounds: Bounds,
    pub im_method: ImMethod,
    pub smoothing: SmoothMethod,
    pub optim: OptimConfig,
    pub sets_mode: SetsMode,
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<ModelFile, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("model file: {e}")))
    }

    pub fn load(self) -> Result<Loaded, CliError> {
        let bad = |m: String| Err(CliError::Validation(format!("model file: {m}")));
        if self.variables.is_empty() {
            return bad("no variables".into());
        }
        for v in &self.variables {
            if !self.equations.contains_key(v) {
                return bad(format!("no equation for variable '{v}'"));
            }
        }
        if let Some(extra) = self.equations.keys().find(|k| !self.variables.contains(k)) {
            return bad(format!("equation for unknown variable '{extra}'"));
        }
        let mut b = OdeModel::builder();
        for v in &self.variables {
            b = b.equation(v.clone(), self.equations[v].clone());
        }
        for (name, p) in &self.parameters {
            if self.variables.contains(name) {
                // start and bounds of an estimated initial value
                if p.role != Role::Nonlinear && p.role != Role::Linear {
                    return bad(format!("initial value '{name}' may only be linear or nonlinear"));
                }
                continue;
            }
            b = match p.role {
                Role::Linear => b.param(name.clone(), ParamRole::Linear),
                Role::Nonlinear => b.param(name.clone(), ParamRole::Nonlinear),
                Role::Likelihood => b.param(name.clone(), ParamRole::Likelihood),
                Role::Fixed => match p.fixed_value {
                    Some(v) => b.fixed(name.clone(), v),
                    None => return bad(format!("fixed parameter '{name}' has no fixed_value")),
                },
            };
        }
        for name in self.external_inputs.keys() {
            b = b.input(name.clone());
        }
        let model = b.build().map_err(|e| CliError::Validation(e.to_string()))?;

        let mut x0 = Vec::new();
        for v in &self.variables {
            let role = match self.x0.get(v) {
                Some(X0Spec::Value(val)) => X0Role::Known(*val),
                Some(X0Spec::Word(w)) if w == "estimate" => match self.parameters.get(v).map(|p| p.role) {
                    Some(Role::Nonlinear) => X0Role::Nonlinear,
                    _ => X0Role::Linear,
                },
                Some(X0Spec::Word(w)) => return bad(format!("x0 for '{v}' must be a number or \"estimate\", got \"{w}\"")),
                None => X0Role::Linear,
            };
            x0.push(role);
        }
        if let Some(extra) = self.x0.keys().find(|k| !self.variables.contains(k)) {
            return bad(format!("x0 for unknown variable '{extra}'"));
        }

        let mut starts = Values::new();
        let mut bounds = Bounds::new();
        for (name, p) in &self.parameters {
            if let Some(s) = p.start {
                starts.insert(name.clone(), s);
            }
            if p.lower.is_some() || p.upper.is_some() {
                let lo = p.lower.unwrap_or(f64::NEG_INFINITY);
                let hi = p.upper.unwrap_or(f64::INFINITY);
                if lo > hi {
                    return bad(format!("'{name}': lower bound exceeds upper bound"));
                }
                bounds.insert(name.clone(), (lo, hi));
            }
        }

        let o = &self.options;
        let im_method = match o.im_method.as_str() {
            "separable" => ImMethod::Separable,
            "non-separable" => ImMethod::NonSeparable,
            other => return bad(format!("unknown im_method '{other}'")),
        };
        let smoothing = match o.smoothing.as_str() {
            "spline" => SmoothMethod::GcvSpline,
            "none" => SmoothMethod::None,
            other => return bad(format!("unknown smoothing '{other}'")),
        };
        let method = match o.optimizer.as_str() {
            "bfgs" => Method::Bfgs,
            "nelder-mead" => Method::NelderMead,
            other => return bad(format!("unknown optimizer '{other}'")),
        };
        let sets_mode = match o.obs_sets_fit.as_str() {
            "separate" => SetsMode::Separate,
            "separate_x0" => SetsMode::SeparateX0,
            other => return bad(format!("unknown obs_sets_fit '{other}'")),
        };
        for (name, spec) in &self.external_inputs {
            match spec.mode {
                InputMode::Formula => {
                    let Some(e) = &spec.expr else { return bad(format!("input '{name}': formula mode needs expr")) };
                    parse_expression(e).map_err(|err| CliError::Validation(format!("input '{name}': {err}")))?;
                }
                _ => {
                    if spec.times.as_ref().map(Vec::len) != spec.values.as_ref().map(Vec::len) {
                        return bad(format!("input '{name}': times and values must both be given with equal length"));
                    }
                }
            }
        }
        Ok(Loaded {
            model,
            x0,
            starts,
            bounds,
            im_method,
            smoothing,
            optim: OptimConfig { method, ..OptimConfig::default() },
            sets_mode,
            file: self,
        })
    }
}

impl Loaded {
    /// Inputs fully described in the model file.
    pub fn static_inputs(&self) -> Vec<ExternalInput> {
        let mut out = Vec::new();
        for (name, spec) in &self.file.external_inputs {
            match (spec.mode, &spec.expr, &spec.times, &spec.values) {
                (InputMode::Formula, Some(e), _, _) => {
                    // validated at load time
                    out.push(ExternalInput::formula(name.clone(), parse_expression(e).expect("validated expression")));
                }
                (mode, _, Some(t), Some(v)) => out.push(ExternalInput::table(name.clone(), t.clone(), v.clone(), interpolation(mode))),
                _ => {}
            }
        }
        out
    }

    /// Inputs whose samples come from the observation file.
    pub fn tabulated_from_obs(&self) -> Vec<(String, Interpolation)> {
        self.file
            .external_inputs
            .iter()
            .filter(|(_, s)| s.mode != InputMode::Formula && s.times.is_none())
            .map(|(n, s)| (n.clone(), interpolation(s.mode)))
            .collect()
    }

    /// Values for simulation: fixed values, then overrides.
    pub fn bound_parameters(&self, overrides: &Values) -> Result<Values, CliError> {
        let mut out = Values::new();
        for (name, p) in &self.file.parameters {
            if let Some(v) = p.fixed_value {
                out.insert(name.clone(), v);
            }
        }
        out.extend(overrides.iter().map(|(k, v)| (k.clone(), *v)));
        let missing = self.model.unbound_parameters(&out);
        if !missing.is_empty() {
            return Err(CliError::Validation(format!("unbound parameters: {}", missing.join(", "))));
        }
        Ok(out)
    }

    pub fn bound_x0(&self, overrides: &Values) -> Result<Values, CliError> {
        let mut out = Values::new();
        let mut missing = Vec::new();
        for (v, role) in self.model.variables().iter().zip(&self.x0) {
            match (overrides.get(v), role) {
                (Some(val), _) | (None, X0Role::Known(val)) => {
                    out.insert(v.clone(), *val);
                }
                _ => missing.push(v.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(CliError::Validation(format!("unbound initial values: {}", missing.join(", "))));
        }
        Ok(out)
    }
}

fn interpolation(mode: InputMode) -> Interpolation {
    match mode {
        InputMode::Previous => Interpolation::Previous,
        _ => Interpolation::Linear,
    }
}
