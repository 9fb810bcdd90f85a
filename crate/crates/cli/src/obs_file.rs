//! Observation CSV files: `time` plus one column per variable or input, with
//! an optional leading `set` column. Empty and `NA` cells are missing.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use odesep::{ExternalInput, Interpolation, ObservationSet, OdeModel, Trajectory};

use crate::CliError;

fn invalid(m: impl Into<String>) -> CliError {
    CliError::Validation(format!("observation file: {}", m.into()))
}

pub fn read_obs(reader: impl Read, model: &OdeModel, inputs: &[(String, Interpolation)]) -> Result<Vec<ObservationSet>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(|e| invalid(e.to_string()))?.iter().map(str::to_string).collect();
    let has_set = header.first().map(String::as_str) == Some("set");
    let time_col = header.iter().position(|h| h == "time").ok_or_else(|| invalid("no \"time\" column"))?;
    if has_set && time_col != 1 || !has_set && time_col != 0 {
        return Err(invalid("\"time\" must be the first column, after \"set\" when present"));
    }
    let data_cols: Vec<(usize, &String)> = header.iter().enumerate().skip(time_col + 1).collect();
    for (_, name) in &data_cols {
        let known = model.variable_index(name).is_some() || inputs.iter().any(|(n, _)| n == *name);
        if !known {
            return Err(invalid(format!("column \"{name}\" is neither a variable nor a tabulated input")));
        }
    }
    // set id -> (times, values) per column
    type Columns = BTreeMap<String, (Vec<f64>, Vec<f64>)>;
    let mut order: Vec<String> = Vec::new();
    let mut sets: BTreeMap<String, Columns> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| invalid(e.to_string()))?;
        let row = line + 2;
        let set = if has_set { rec.get(0).unwrap_or("").to_string() } else { "1".to_string() };
        if set.is_empty() {
            return Err(invalid(format!("row {row}: empty set id")));
        }
        let t = parse_cell(rec.get(time_col), row, "time")?.ok_or_else(|| invalid(format!("row {row}: missing time")))?;
        if !sets.contains_key(&set) {
            order.push(set.clone());
        }
        let cols = sets.entry(set).or_default();
        for (k, name) in &data_cols {
            if let Some(v) = parse_cell(rec.get(*k), row, name)? {
                let e = cols.entry((*name).clone()).or_default();
                e.0.push(t);
                e.1.push(v);
            }
        }
    }
    if order.is_empty() {
        return Err(invalid("no data rows"));
    }
    let mut out = Vec::new();
    for (index, id) in order.iter().enumerate() {
        let mut s = ObservationSet::new(index);
        for (name, (times, values)) in sets.remove(id).unwrap_or_default() {
            if let Some((_, mode)) = inputs.iter().find(|(n, _)| *n == name) {
                s = s.with_input(ExternalInput::table(name, times, values, *mode));
            } else {
                s = s.with_series(name, times, values);
            }
        }
        s.validate().map_err(|e| invalid(format!("set {id}: {e}")))?;
        out.push(s);
    }
    Ok(out)
}

fn parse_cell(cell: Option<&str>, row: usize, column: &str) -> Result<Option<f64>, CliError> {
    match cell {
        None | Some("") | Some("NA") => Ok(None),
        Some(text) => match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => Err(invalid(format!("row {row}, column \"{column}\": \"{text}\" is not a finite number"))),
        },
    }
}

/// Write sets sharing the trajectory layout of `model`; the `set` column is
/// written when there is more than one set.
pub fn write_sets(w: impl Write, model: &OdeModel, sets: &[ObservationSet]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Numeric(format!("writing observations: {e}"));
    let mut wtr = csv::Writer::from_writer(w);
    let multi = sets.len() > 1;
    let mut header: Vec<&str> = Vec::new();
    if multi {
        header.push("set");
    }
    header.push("time");
    header.extend(model.variables().iter().map(String::as_str));
    wtr.write_record(&header).map_err(io)?;
    for (k, s) in sets.iter().enumerate() {
        for (i, t) in s.union_times().iter().enumerate() {
            let mut rec: Vec<String> = Vec::new();
            if multi {
                rec.push((k + 1).to_string());
            }
            rec.push(t.to_string());
            for v in model.variables() {
                let cell = s.get(v).and_then(|series| series.times.get(i).filter(|ti| *ti == t).map(|_| series.values[i]));
                rec.push(cell.map(|x| x.to_string()).unwrap_or_default());
            }
            wtr.write_record(&rec).map_err(io)?;
        }
    }
    wtr.flush().map_err(|e| CliError::Numeric(format!("writing observations: {e}")))
}

pub fn write_trajectory(w: impl Write, model: &OdeModel, tr: &Trajectory) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Numeric(format!("writing trajectory: {e}"));
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["time".to_string()];
    header.extend(model.variables().iter().cloned());
    wtr.write_record(&header).map_err(io)?;
    for (i, t) in tr.times.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend((0..model.dim()).map(|j| tr.values[(i, j)].to_string()));
        wtr.write_record(&rec).map_err(io)?;
    }
    wtr.flush().map_err(|e| CliError::Numeric(format!("writing trajectory: {e}")))
}
