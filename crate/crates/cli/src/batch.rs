//! Scenario batches.
//!
//! A batch file names a base network, optional simulation settings and a list
//! of scenarios:
//!
//! ```json
//! {
//!   "network": "humber.json",
//!   "config": { "t_end": 50 },
//!   "scenarios": [
//!     { "name": "base" },
//!     { "name": "half", "overrides": { "u0_scale": 0.5 } },
//!     { "name": "other", "network": "other.json" }
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the batch file's directory. Each scenario
//! gets `<out>/<name>/` with the same files as `simulate`; `<out>` also holds
//! `batch_summary.csv` and a manifest for the batch itself.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use firmweb::integrate::{
    run_scenario_batch, scenario_network, Overrides, Scenario, ScenarioError,
};
use firmweb::{NetworkFile, SimConfig};
use log::info;
use serde::Deserialize;

use crate::output::{create_dir, write_atomic, InputRecord, Manifest};
use crate::{load_network_file, parse_json, read_input, write_run, CliError, CliResult, SimArgs};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchFile {
    network: Option<PathBuf>,
    config: Option<SimConfig>,
    scenarios: Vec<ScenarioSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSpec {
    name: String,
    network: Option<PathBuf>,
    #[serde(default)]
    overrides: Overrides,
}

fn check_name(name: &str) -> CliResult {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(CliError::Domain(format!(
            "scenario name `{name}` must be non-empty and use only letters, digits, `-`, `_`, `.`"
        )))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cmd_batch(path: &Path, out: &Path, sim: &SimArgs) -> CliResult {
    let started = chrono::Utc::now();
    let bytes = read_input(path)?;
    let plan: BatchFile = parse_json(path, &bytes)?;
    let cfg = sim.resolve(plan.config.unwrap_or_default())?;
    if plan.scenarios.is_empty() {
        return Err(CliError::Domain(format!(
            "{}: no scenarios",
            path.display()
        )));
    }
    let mut seen = BTreeSet::new();
    for s in &plan.scenarios {
        check_name(&s.name)?;
        if !seen.insert(s.name.as_str()) {
            return Err(CliError::Domain(format!(
                "duplicate scenario name `{}`",
                s.name
            )));
        }
    }

    let root = path.parent().unwrap_or(Path::new("."));
    let mut files: BTreeMap<PathBuf, (NetworkFile, Vec<u8>)> = BTreeMap::new();
    let mut scenarios = Vec::with_capacity(plan.scenarios.len());
    let mut sources = Vec::with_capacity(plan.scenarios.len());
    for s in &plan.scenarios {
        let rel = s
            .network
            .as_ref()
            .or(plan.network.as_ref())
            .ok_or_else(|| CliError::Domain(format!("scenario `{}` has no network", s.name)))?;
        let p = root.join(rel);
        if !files.contains_key(&p) {
            files.insert(p.clone(), load_network_file(&p)?);
        }
        scenarios.push(Scenario {
            name: s.name.clone(),
            file: files[&p].0.clone(),
            overrides: s.overrides.clone(),
        });
        sources.push(p);
    }

    info!("running {} scenario(s)", scenarios.len());
    let outcomes = run_scenario_batch(&scenarios, &cfg);
    create_dir(out)?;

    let mut summary = String::from("scenario,status,validity_horizon,first_failure,message\n");
    let mut worst = 0u8;
    for ((outcome, scenario), src) in outcomes.into_iter().zip(&scenarios).zip(&sources) {
        let dir = out.join(&outcome.name);
        let inputs = vec![
            InputRecord::new("batch", path, &bytes),
            InputRecord::new("network", src, &files[src].1),
        ];
        let (status, horizon, first, message) = match outcome.result {
            Err(e @ (ScenarioError::Network(_) | ScenarioError::Override(_))) => {
                let msg = e.to_string();
                create_dir(&dir)?;
                let mut m = Manifest::new("batch", inputs, started);
                m.config = Some(cfg);
                m.status = "error".into();
                m.note = Some(msg.clone());
                m.write(&dir)?;
                worst = worst.max(1);
                ("error", String::new(), String::new(), msg)
            }
            result => {
                let net = scenario_network(scenario).expect("scenario network built once");
                let result = result.map_err(|e| match e {
                    ScenarioError::Integration(e) => e,
                    _ => unreachable!("build errors handled above"),
                });
                let traj_info = match &result {
                    Ok(t) => Some((t.validity_horizon, t.failures().next().cloned())),
                    Err(firmweb::IntegrationError::Failed { partial, .. }) => {
                        Some((partial.validity_horizon, partial.failures().next().cloned()))
                    }
                    Err(_) => None,
                };
                let written = write_run(&dir, "batch", inputs, &net, &cfg, result, started);
                let (horizon, first) = match traj_info {
                    Some((h, f)) => (
                        h.to_string(),
                        f.map(|e| format!("{}@{}", e.node, e.time))
                            .unwrap_or_default(),
                    ),
                    None => (String::new(), String::new()),
                };
                match written {
                    Ok(()) => ("ok", horizon, first, String::new()),
                    Err(e) => {
                        worst = worst.max(e.code());
                        let status = match e {
                            CliError::Numerical(_) => "numerical_failure",
                            _ => "error",
                        };
                        (status, horizon, first, e.message().to_string())
                    }
                }
            }
        };
        let _ = writeln!(
            summary,
            "{},{status},{horizon},{},{}",
            csv_field(&outcome.name),
            csv_field(&first),
            csv_field(&message)
        );
    }
    write_atomic(&out.join("batch_summary.csv"), summary.as_bytes())?;
    let mut m = Manifest::new(
        "batch",
        vec![InputRecord::new("batch", path, &bytes)],
        started,
    );
    m.config = Some(cfg);
    m.outputs = std::iter::once("batch_summary.csv".to_string())
        .chain(scenarios.iter().map(|s| format!("{}/", s.name)))
        .collect();
    if worst != 0 {
        m.status = "partial".into();
        m.note = Some("some scenarios failed; see batch_summary.csv".into());
    }
    m.write(out)?;
    match worst {
        0 => Ok(()),
        1 => Err(CliError::Domain("one or more scenarios failed".into())),
        _ => Err(CliError::Numerical(
            "one or more scenarios failed numerically".into(),
        )),
    }
}
