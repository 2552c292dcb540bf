//! `firmweb`: validate, calibrate, simulate and analyze district networks.
//!
//! Exit codes: 0 success, 1 domain or validation error, 2 input or parse
//! error, 3 numerical failure.

mod batch;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use firmweb::calibrate::calibrate_network;
use firmweb::integrate::Event;
use firmweb::io::{events_csv, read_events_csv, read_trajectory_csv, trajectory_csv};
use firmweb::netmodel::validate;
use firmweb::{analyze, narrative, simulate, IntegrationError, Network, NetworkFile, SimConfig};
use log::info;

use output::{write_atomic, InputRecord, Manifest};

#[derive(Debug)]
pub enum CliError {
    Domain(String),
    Input(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Domain(m) | CliError::Input(m) | CliError::Numerical(m) => m,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "firmweb",
    version,
    about = "Wealth dynamics of firms in an industrial district"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a network file and list every violation.
    Validate {
        network: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Derive parameters from financials and write the calibrated network.
    Calibrate {
        network: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Calibration report CSV. Defaults to `<out stem>.report.csv`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Integrate a network and write trajectory, events and manifest.
    Simulate {
        network: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Turn a simulation directory into report.json and narrative.txt.
    Analyze {
        dir: PathBuf,
        /// Output directory. Defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every scenario of a batch file, one subdirectory each.
    Batch {
        scenarios: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sim: SimArgs,
    },
}

#[derive(Args, Clone, Default)]
pub struct SimArgs {
    /// JSON file with any of the simulation settings below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    sample_dt: Option<f64>,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long)]
    abs_tol: Option<f64>,
    #[arg(long)]
    death_threshold: Option<f64>,
}

impl SimArgs {
    /// `base`, then the config file, then flags.
    pub fn resolve(&self, base: SimConfig) -> CliResult<SimConfig> {
        let mut cfg = match &self.config {
            Some(p) => parse_json::<SimConfig>(p, &read_input(p)?)?,
            None => base,
        };
        let flags = [
            (&mut cfg.t_end, self.t_end),
            (&mut cfg.sample_dt, self.sample_dt),
            (&mut cfg.rel_tol, self.rel_tol),
            (&mut cfg.abs_tol, self.abs_tol),
            (&mut cfg.death_threshold, self.death_threshold),
        ];
        for (slot, v) in flags {
            if let Some(v) = v {
                *slot = v;
            }
        }
        cfg.validate().map_err(CliError::Domain)?;
        Ok(cfg)
    }
}

pub fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> CliResult<T> {
    serde_json::from_slice(bytes).map_err(|e| {
        CliError::Input(format!(
            "{}:{}:{}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

pub fn load_network_file(path: &Path) -> CliResult<(NetworkFile, Vec<u8>)> {
    let bytes = read_input(path)?;
    let file = parse_json(path, &bytes)?;
    Ok((file, bytes))
}

pub fn build_network(path: &Path, file: &NetworkFile) -> CliResult<Network> {
    let net = Network::from_file(file).map_err(|e| {
        let lines: Vec<String> = e.violations().iter().map(|v| v.to_string()).collect();
        CliError::Domain(format!("{}: {}", path.display(), lines.join("\n  ")))
    })?;
    for w in &net.warnings {
        log::warn!("{w}");
    }
    Ok(net)
}

fn cmd_validate(path: &Path, json: bool) -> CliResult {
    let (file, _) = load_network_file(path)?;
    let report = validate(&file);
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serialises")
        );
    } else {
        for w in &report.warnings {
            println!("warning: {w}");
        }
        for v in &report.violations {
            println!("error: {v}");
        }
    }
    if report.is_valid() {
        if !json {
            println!(
                "{}: valid ({} nodes, {} edges, {} markets)",
                path.display(),
                file.nodes.len(),
                file.edges.len(),
                file.markets.len()
            );
        }
        Ok(())
    } else {
        Err(CliError::Domain(format!(
            "{}: {} violation(s)",
            path.display(),
            report.violations.len()
        )))
    }
}

fn cmd_calibrate(path: &Path, out: &Path, report: Option<&Path>) -> CliResult {
    let (file, _) = load_network_file(path)?;
    let (calibrated, rep) = calibrate_network(&file).map_err(|e| {
        let lines: Vec<String> = e.violations().iter().map(|v| v.to_string()).collect();
        CliError::Domain(format!("{}: {}", path.display(), lines.join("\n  ")))
    })?;
    let report_path = match report {
        Some(p) => p.to_path_buf(),
        None => out.with_extension("report.csv"),
    };
    write_atomic(out, calibrated.to_json_pretty().as_bytes())?;
    write_atomic(&report_path, rep.to_csv().as_bytes())?;
    info!(
        "calibrated {} node(s); wrote {} and {}",
        rep.rows.len(),
        out.display(),
        report_path.display()
    );
    Ok(())
}

/// Failures recorded during integration plus detected peaks, in time order.
pub fn all_events(traj: &firmweb::Trajectory) -> Vec<Event> {
    let report = analyze(traj);
    let mut events = traj.events.clone();
    events.extend(firmweb::analyze::peak_events(&report));
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.kind.cmp(&b.kind)));
    events
}

/// Writes one simulation directory. Returns the error to report when the
/// integration failed part way.
pub fn write_run(
    out: &Path,
    command: &str,
    inputs: Vec<InputRecord>,
    net: &Network,
    cfg: &SimConfig,
    result: Result<firmweb::Trajectory, IntegrationError>,
    started: chrono::DateTime<chrono::Utc>,
) -> CliResult {
    let (traj, failure) = match result {
        Ok(t) => (t, None),
        Err(IntegrationError::Failed {
            reason,
            last_time,
            partial,
        }) => (
            *partial,
            Some(format!("integration failed at t = {last_time}: {reason}")),
        ),
        Err(e @ IntegrationError::InvalidConfig(_)) => return Err(CliError::Domain(e.to_string())),
    };
    output::create_dir(out)?;
    let events = all_events(&traj);
    write_atomic(
        &out.join("trajectory.csv"),
        trajectory_csv(&traj).as_bytes(),
    )?;
    write_atomic(&out.join("events.csv"), events_csv(&events).as_bytes())?;
    let mut manifest = Manifest::new(command, inputs, started);
    manifest.config = Some(*cfg);
    manifest.nodes = net.nodes.iter().map(|n| n.id.clone()).collect();
    manifest.node_names = net.nodes.iter().map(|n| n.name.clone()).collect();
    manifest.samples = Some(traj.times.len());
    manifest.validity_horizon = Some(traj.validity_horizon);
    manifest.outputs = vec!["trajectory.csv".into(), "events.csv".into()];
    if let Some(note) = &failure {
        manifest.status = "numerical_failure".into();
        manifest.note = Some(format!(
            "{note}; trajectory holds the samples before the failure"
        ));
    }
    manifest.write(out)?;
    match failure {
        Some(note) => Err(CliError::Numerical(note)),
        None => Ok(()),
    }
}

fn cmd_simulate(path: &Path, out: &Path, sim: &SimArgs) -> CliResult {
    let started = chrono::Utc::now();
    let cfg = sim.resolve(SimConfig::default())?;
    let (file, bytes) = load_network_file(path)?;
    let net = build_network(path, &file)?;
    info!(
        "simulating {} nodes to t = {} (sample dt {})",
        net.len(),
        cfg.t_end,
        cfg.sample_dt
    );
    let result = simulate(&net, &cfg);
    let mut inputs = vec![InputRecord::new("network", path, &bytes)];
    if let Some(c) = &sim.config {
        inputs.push(InputRecord::new("config", c, &read_input(c)?));
    }
    write_run(out, "simulate", inputs, &net, &cfg, result, started)
}

fn cmd_analyze(dir: &Path, out: Option<&Path>) -> CliResult {
    let started = chrono::Utc::now();
    let traj_path = dir.join("trajectory.csv");
    let traj_bytes = read_input(&traj_path)?;
    let text = String::from_utf8(traj_bytes.clone())
        .map_err(|e| CliError::Input(format!("{}: {e}", traj_path.display())))?;
    let samples = read_trajectory_csv(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", traj_path.display())))?;

    let events_path = dir.join("events.csv");
    let events = if events_path.exists() {
        let text = String::from_utf8(read_input(&events_path)?)
            .map_err(|e| CliError::Input(format!("{}: {e}", events_path.display())))?;
        read_events_csv(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", events_path.display())))?
    } else {
        Vec::new()
    };
    let names = Manifest::read(dir)
        .map(|m| m.node_names)
        .filter(|n| n.len() == samples.node_ids.len());
    let traj = samples.into_trajectory(names, events);
    let report = analyze(&traj);
    let mut text = narrative(&traj, &report).join("\n");
    text.push('\n');

    let out = out.unwrap_or(dir);
    output::create_dir(out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
    write_atomic(&out.join("report.json"), json.as_bytes())?;
    write_atomic(&out.join("narrative.txt"), text.as_bytes())?;
    if !out.join("manifest.json").exists() {
        let mut manifest = Manifest::new(
            "analyze",
            vec![InputRecord::new("trajectory", &traj_path, &traj_bytes)],
            started,
        );
        manifest.nodes = traj.node_ids.clone();
        manifest.node_names = traj.node_names.clone();
        manifest.validity_horizon = Some(traj.validity_horizon);
        manifest.outputs = vec!["report.json".into(), "narrative.txt".into()];
        manifest.write(out)?;
    }
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Validate { network, json } => cmd_validate(&network, json),
        Command::Calibrate {
            network,
            out,
            report,
        } => cmd_calibrate(&network, &out, report.as_deref()),
        Command::Simulate { network, out, sim } => cmd_simulate(&network, &out, &sim),
        Command::Analyze { dir, out } => cmd_analyze(&dir, out.as_deref()),
        Command::Batch {
            scenarios,
            out,
            sim,
        } => batch::cmd_batch(&scenarios, &out, &sim),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
