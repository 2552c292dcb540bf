//! Trajectory and event CSV formats.
//!
//! Trajectory: header `t,<node-id>,...` in node declaration order, one row per
//! sample. Events: header `type,node,time,value`. Utilities are written in
//! shortest round-trip form so a file reproduces the run bit for bit.

use std::fmt::Write as _;

use thiserror::Error;

use crate::integrate::{Event, EventKind, Trajectory};

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
}

/// Sample times are multiples of the grid step; print them without the
/// binary noise of `k * dt`.
pub fn format_time(t: f64) -> String {
    let s = format!("{t:.9}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut s = String::from("t");
    for id in &traj.node_ids {
        s.push(',');
        s.push_str(id);
    }
    s.push('\n');
    for (t, state) in traj.times.iter().zip(&traj.states) {
        s.push_str(&format_time(*t));
        for v in state {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn events_csv(events: &[Event]) -> String {
    let mut s = String::from("type,node,time,value\n");
    for e in events {
        let _ = writeln!(s, "{},{},{},{}", e.kind.as_str(), e.node, e.time, e.value);
    }
    s
}

/// Samples read back from a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub node_ids: Vec<String>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

fn parse_f64(field: &str, row: usize, col: &str) -> Result<f64, CsvError> {
    field.trim().parse::<f64>().map_err(|_| {
        CsvError::Format(format!(
            "row {row}, column `{col}`: `{field}` is not a number"
        ))
    })
}

pub fn read_trajectory_csv(text: &str) -> Result<Samples, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("t") {
        return Err(CsvError::Format("first column must be `t`".into()));
    }
    let node_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if node_ids.is_empty() {
        return Err(CsvError::Format("trajectory has no node columns".into()));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 2;
        let t = parse_f64(&rec[0], row, "t")?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(CsvError::Format(format!("row {row}: times must increase")));
            }
        }
        let state = rec
            .iter()
            .skip(1)
            .zip(&node_ids)
            .map(|(f, id)| parse_f64(f, row, id))
            .collect::<Result<Vec<_>, _>>()?;
        times.push(t);
        states.push(state);
    }
    if times.is_empty() {
        return Err(CsvError::Format("trajectory has no samples".into()));
    }
    Ok(Samples {
        node_ids,
        times,
        states,
    })
}

pub fn read_events_csv(text: &str) -> Result<Vec<Event>, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["type", "node", "time", "value"] {
        return Err(CsvError::Format(
            "events header must be `type,node,time,value`".into(),
        ));
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 2;
        let kind = match &rec[0] {
            "Failure" => EventKind::Failure,
            "Peak" => EventKind::Peak,
            other => {
                return Err(CsvError::Format(format!(
                    "row {row}: unknown event type `{other}`"
                )))
            }
        };
        out.push(Event {
            kind,
            node: rec[1].to_string(),
            time: parse_f64(&rec[2], row, "time")?,
            value: parse_f64(&rec[3], row, "value")?,
        });
    }
    Ok(out)
}

impl Samples {
    /// Rebuilds a trajectory for analysis. The horizon is the first failure
    /// in `events`, or the last sample time.
    pub fn into_trajectory(self, names: Option<Vec<String>>, events: Vec<Event>) -> Trajectory {
        let end = *self.times.last().expect("non-empty samples");
        let horizon = events
            .iter()
            .filter(|e| e.kind == EventKind::Failure)
            .map(|e| e.time)
            .fold(end, f64::min);
        let node_names = names.unwrap_or_else(|| self.node_ids.clone());
        Trajectory {
            node_ids: self.node_ids,
            node_names,
            times: self.times,
            states: self.states,
            events,
            validity_horizon: horizon,
            flows: None,
        }
    }
}
