//! Noisy time-series observations of model variables.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ode::ExternalInput;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObsError {
    #[error("series '{0}': times and values differ in length")]
    LengthMismatch(String),
    #[error("series '{0}': times must be strictly increasing")]
    Unsorted(String),
    #[error("series '{0}': non-finite entry")]
    NonFinite(String),
    #[error("observation set has no data")]
    Empty,
}

/// Samples of one variable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        Series { times, values }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// One replicate (Monte Carlo draw or subject) of observed series.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationSet {
    pub index: usize,
    pub series: BTreeMap<String, Series>,
    /// External inputs that belong to this set (tabulated signals).
    pub inputs: Vec<ExternalInput>,
}

impl ObservationSet {
    pub fn new(index: usize) -> Self {
        ObservationSet { index, ..Default::default() }
    }

    /// Set from columns sharing one time vector.
    pub fn shared(index: usize, times: &[f64], columns: &[(&str, Vec<f64>)]) -> Self {
        let mut s = ObservationSet::new(index);
        for (name, values) in columns {
            s.series.insert(name.to_string(), Series::new(times.to_vec(), values.clone()));
        }
        s
    }

    pub fn with_series(mut self, name: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Self {
        self.series.insert(name.into(), Series::new(times, values));
        self
    }

    pub fn with_input(mut self, input: ExternalInput) -> Self {
        self.inputs.push(input);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Series> {
        self.series.get(name)
    }

    pub fn validate(&self) -> Result<(), ObsError> {
        if self.series.values().all(|s| s.is_empty()) {
            return Err(ObsError::Empty);
        }
        for (name, s) in &self.series {
            if s.times.len() != s.values.len() {
                return Err(ObsError::LengthMismatch(name.clone()));
            }
            if s.times.iter().chain(&s.values).any(|v| !v.is_finite()) {
                return Err(ObsError::NonFinite(name.clone()));
            }
            if s.times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(ObsError::Unsorted(name.clone()));
            }
        }
        Ok(())
    }

    /// Sorted union of all sample times.
    pub fn union_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.series.values().flat_map(|s| s.times.iter().copied()).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    /// Total number of scalar observations.
    pub fn n_obs(&self) -> usize {
        self.series.values().map(Series::len).sum()
    }
}
