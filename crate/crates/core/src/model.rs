//! ODE systems `x'(t) = F(x(t); θ)` described by symbolic right-hand sides.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::expr::{parse_expression, CompiledExpr, Expr, ParseError};

/// Name of the implicit time symbol.
pub const TIME: &str = "t";

/// Name to value map used for parameter and initial-condition bindings.
pub type Values = BTreeMap<String, f64>;

/// Estimation role of a free parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Linear,
    Nonlinear,
    /// Only enters a user-supplied likelihood, never an equation.
    Likelihood,
}

impl ParamRole {
    pub fn label(self) -> &'static str {
        match self {
            ParamRole::Linear => "linear",
            ParamRole::Nonlinear => "non-linear",
            ParamRole::Likelihood => "likelihood",
        }
    }
}

/// Role of any name that may appear in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymbolRole {
    StateVariable,
    LinearParameter,
    NonlinearParameter,
    FixedValue,
    Time,
    ExternalInput,
    LikelihoodParameter,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("model has no state variables")]
    NoVariables,
    #[error("equation for '{variable}': {source}")]
    Parse { variable: String, source: ParseError },
    #[error("name '{0}' is declared more than once")]
    Duplicate(String),
    #[error("'t' is reserved for time and cannot be declared")]
    ReservedTime,
    #[error("equation for '{variable}' references undeclared symbol '{symbol}'")]
    Undeclared { variable: String, symbol: String },
    #[error("empty symbol name")]
    EmptyName,
}

/// A parsed, role-annotated ODE system. Immutable once built.
#[derive(Debug, Clone)]
pub struct OdeModel {
    variables: Vec<String>,
    equations: Vec<Expr>,
    sources: Vec<String>,
    parameters: Vec<(String, ParamRole)>,
    fixed: Vec<(String, f64)>,
    inputs: Vec<String>,
    compiled: Vec<CompiledExpr>,
}

/// Slot layout shared by every compiled expression of a model:
/// `[t, states.., parameters.., fixed.., inputs..]`.
#[derive(Debug, Clone, Copy)]
pub struct SlotLayout {
    pub n_states: usize,
    pub n_params: usize,
    pub n_fixed: usize,
    pub n_inputs: usize,
}

impl SlotLayout {
    pub fn len(&self) -> usize {
        1 + self.n_states + self.n_params + self.n_fixed + self.n_inputs
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn state(&self, j: usize) -> usize {
        1 + j
    }

    pub fn param(&self, k: usize) -> usize {
        1 + self.n_states + k
    }

    pub fn fixed(&self, i: usize) -> usize {
        1 + self.n_states + self.n_params + i
    }

    pub fn input(&self, i: usize) -> usize {
        1 + self.n_states + self.n_params + self.n_fixed + i
    }
}

impl OdeModel {
    pub fn builder() -> OdeModelBuilder {
        OdeModelBuilder::default()
    }

    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == name)
    }

    pub fn equations(&self) -> &[Expr] {
        &self.equations
    }

    /// Equation text as supplied, with fixed values left symbolic.
    pub fn equation_sources(&self) -> &[String] {
        &self.sources
    }

    pub fn parameters(&self) -> &[(String, ParamRole)] {
        &self.parameters
    }

    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|(n, _)| n == name)
    }

    pub fn parameter_names(&self, role: ParamRole) -> Vec<String> {
        self.parameters.iter().filter(|(_, r)| *r == role).map(|(n, _)| n.clone()).collect()
    }

    pub fn role_of(&self, name: &str) -> Option<SymbolRole> {
        if name == TIME {
            return Some(SymbolRole::Time);
        }
        if self.variables.iter().any(|v| v == name) {
            return Some(SymbolRole::StateVariable);
        }
        if let Some((_, r)) = self.parameters.iter().find(|(n, _)| n == name) {
            return Some(match r {
                ParamRole::Linear => SymbolRole::LinearParameter,
                ParamRole::Nonlinear => SymbolRole::NonlinearParameter,
                ParamRole::Likelihood => SymbolRole::LikelihoodParameter,
            });
        }
        if self.fixed.iter().any(|(n, _)| n == name) {
            return Some(SymbolRole::FixedValue);
        }
        if self.inputs.iter().any(|n| n == name) {
            return Some(SymbolRole::ExternalInput);
        }
        None
    }

    pub fn fixed(&self) -> &[(String, f64)] {
        &self.fixed
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn layout(&self) -> SlotLayout {
        SlotLayout {
            n_states: self.variables.len(),
            n_params: self.parameters.len(),
            n_fixed: self.fixed.len(),
            n_inputs: self.inputs.len(),
        }
    }

    /// Slot index of any model symbol under [`SlotLayout`].
    pub fn slot_of(&self, name: &str) -> Option<usize> {
        let l = self.layout();
        if name == TIME {
            return Some(0);
        }
        if let Some(j) = self.variable_index(name) {
            return Some(l.state(j));
        }
        if let Some(k) = self.parameter_index(name) {
            return Some(l.param(k));
        }
        if let Some(i) = self.fixed.iter().position(|(n, _)| n == name) {
            return Some(l.fixed(i));
        }
        self.inputs.iter().position(|n| n == name).map(|i| l.input(i))
    }

    pub fn compile(&self, e: &Expr) -> CompiledExpr {
        CompiledExpr::compile(e, &|s| self.slot_of(s)).expect("expression over model symbols")
    }

    pub fn compiled_equations(&self) -> &[CompiledExpr] {
        &self.compiled
    }

    /// Fresh slot vector with fixed values filled and parameters taken from
    /// `params` (missing ones left at NaN).
    pub fn slot_template(&self, params: &Values) -> Vec<f64> {
        let l = self.layout();
        let mut slots = vec![f64::NAN; l.len()];
        for (k, (name, _)) in self.parameters.iter().enumerate() {
            if let Some(v) = params.get(name) {
                slots[l.param(k)] = *v;
            }
        }
        for (i, (_, v)) in self.fixed.iter().enumerate() {
            slots[l.fixed(i)] = *v;
        }
        slots
    }

    /// Names of declared non-likelihood parameters missing from `params`.
    pub fn unbound_parameters(&self, params: &Values) -> Vec<String> {
        self.parameters
            .iter()
            .filter(|(n, r)| *r != ParamRole::Likelihood && !params.contains_key(n))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Copy of the model with the given parameters re-declared. Names absent
    /// from `roles` keep their current role.
    pub fn with_roles(&self, roles: &BTreeMap<String, ParamRole>) -> OdeModel {
        let mut m = self.clone();
        for (name, role) in m.parameters.iter_mut() {
            if let Some(r) = roles.get(name) {
                *role = *r;
            }
        }
        m
    }
}

/// Incremental construction of an [`OdeModel`].
#[derive(Debug, Default, Clone)]
pub struct OdeModelBuilder {
    equations: Vec<(String, String)>,
    parameters: Vec<(String, ParamRole)>,
    fixed: Vec<(String, f64)>,
    inputs: Vec<String>,
}

impl OdeModelBuilder {
    pub fn equation(mut self, variable: impl Into<String>, rhs: impl Into<String>) -> Self {
        self.equations.push((variable.into(), rhs.into()));
        self
    }

    pub fn param(mut self, name: impl Into<String>, role: ParamRole) -> Self {
        self.parameters.push((name.into(), role));
        self
    }

    pub fn linear<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.parameters.extend(names.into_iter().map(|n| (n.into(), ParamRole::Linear)));
        self
    }

    pub fn nonlinear<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.parameters.extend(names.into_iter().map(|n| (n.into(), ParamRole::Nonlinear)));
        self
    }

    pub fn likelihood<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.parameters.extend(names.into_iter().map(|n| (n.into(), ParamRole::Likelihood)));
        self
    }

    pub fn fixed(mut self, name: impl Into<String>, value: f64) -> Self {
        self.fixed.push((name.into(), value));
        self
    }

    pub fn input(mut self, name: impl Into<String>) -> Self {
        self.inputs.push(name.into());
        self
    }

    pub fn build(self) -> Result<OdeModel, ModelError> {
        if self.equations.is_empty() {
            return Err(ModelError::NoVariables);
        }
        let mut seen = BTreeSet::new();
        let names = self
            .equations
            .iter()
            .map(|(v, _)| v)
            .chain(self.parameters.iter().map(|(n, _)| n))
            .chain(self.fixed.iter().map(|(n, _)| n))
            .chain(self.inputs.iter());
        for n in names {
            if n.is_empty() {
                return Err(ModelError::EmptyName);
            }
            if n == TIME {
                return Err(ModelError::ReservedTime);
            }
            if !seen.insert(n.clone()) {
                return Err(ModelError::Duplicate(n.clone()));
            }
        }
        let mut variables = Vec::new();
        let mut equations = Vec::new();
        let mut sources = Vec::new();
        for (v, src) in &self.equations {
            let e = parse_expression(src).map_err(|source| ModelError::Parse { variable: v.clone(), source })?;
            for s in e.symbols() {
                if s != TIME && !seen.contains(&s) {
                    return Err(ModelError::Undeclared { variable: v.clone(), symbol: s });
                }
            }
            variables.push(v.clone());
            equations.push(e);
            sources.push(src.clone());
        }
        let mut model = OdeModel {
            variables,
            equations,
            sources,
            parameters: self.parameters,
            fixed: self.fixed,
            inputs: self.inputs,
            compiled: Vec::new(),
        };
        model.compiled = model.equations.iter().map(|e| model.compile(e)).collect();
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undeclared_symbols_rejected() {
        let err = OdeModel::builder().equation("x", "a*x + b").linear(["a"]).build().unwrap_err();
        assert_eq!(err, ModelError::Undeclared { variable: "x".into(), symbol: "b".into() });
    }

    #[test]
    fn time_is_implicit_and_reserved() {
        assert!(OdeModel::builder().equation("x", "sin(t)*a").linear(["a"]).build().is_ok());
        let err = OdeModel::builder().equation("x", "a").linear(["a", "t"]).build().unwrap_err();
        assert_eq!(err, ModelError::ReservedTime);
    }

    #[test]
    fn one_role_per_name() {
        let err = OdeModel::builder().equation("x", "a*x").linear(["a"]).fixed("a", 1.0).build().unwrap_err();
        assert_eq!(err, ModelError::Duplicate("a".into()));
        let err = OdeModel::builder().equation("x", "x").equation("x", "x").build().unwrap_err();
        assert_eq!(err, ModelError::Duplicate("x".into()));
    }

    #[test]
    fn roles_and_slots() {
        let m = OdeModel::builder()
            .equation("X", "alpha*X*(1+s)")
            .linear(["alpha"])
            .nonlinear(["k"])
            .fixed("c", 2.0)
            .input("s")
            .build()
            .unwrap();
        assert_eq!(m.role_of("X"), Some(SymbolRole::StateVariable));
        assert_eq!(m.role_of("alpha"), Some(SymbolRole::LinearParameter));
        assert_eq!(m.role_of("k"), Some(SymbolRole::NonlinearParameter));
        assert_eq!(m.role_of("c"), Some(SymbolRole::FixedValue));
        assert_eq!(m.role_of("s"), Some(SymbolRole::ExternalInput));
        assert_eq!(m.role_of("t"), Some(SymbolRole::Time));
        let slots: Vec<_> = ["t", "X", "alpha", "k", "c", "s"].iter().map(|n| m.slot_of(n).unwrap()).collect();
        assert_eq!(slots, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn parse_errors_name_the_equation() {
        let err = OdeModel::builder().equation("x", "a*(x").linear(["a"]).build().unwrap_err();
        assert!(matches!(err, ModelError::Parse { ref variable, .. } if variable == "x"));
    }
}
