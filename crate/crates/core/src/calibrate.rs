//! Turns yearly financial records into model parameters.
//!
//! For a record `(revenue, material, overheads, production)`:
//!
//! ```text
//! u0      = revenue + |material| + overheads + production
//! value   = revenue + |material|   if material < 0  (paid to take material)
//!         = revenue                otherwise
//! epsilon = (value - max(material, 0) - overheads - production) / value
//! beta    = max(material, 0) / u0
//! rho     = value / (u0 (1 + epsilon))
//! d       = overheads / u0
//! ```
//!
//! `beta` is halved for primary suppliers and hubs that also buy inside the
//! district; `rho` is halved for end consumers and hubs that also sell inside
//! the district.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{Flags, ModelParams, NetworkError, NetworkFile, Role, Structure};

/// One year of accounts, millions of 2013 GBP. `material` is negative when
/// the firm is paid to take its inputs (waste).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinancialRecord {
    pub revenue: f64,
    pub material: f64,
    pub overheads: f64,
    pub production: f64,
}

impl FinancialRecord {
    pub fn new(revenue: f64, material: f64, overheads: f64, production: f64) -> Self {
        Self {
            revenue,
            material,
            overheads,
            production,
        }
    }

    fn check(&self) -> Result<(), CalibrationError> {
        let fields = [
            ("revenue", self.revenue),
            ("material", self.material),
            ("overheads", self.overheads),
            ("production", self.production),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(CalibrationError::InvalidRecord(format!(
                    "{name} is not finite"
                )));
            }
        }
        for (name, v) in [fields[0], fields[2], fields[3]] {
            if v < 0.0 {
                return Err(CalibrationError::InvalidRecord(format!(
                    "{name} must be >= 0 (got {v})"
                )));
            }
        }
        Ok(())
    }

    /// Value of goods and services produced in the year.
    pub fn value(&self) -> f64 {
        if self.material < 0.0 {
            self.revenue + self.material.abs()
        } else {
            self.revenue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("invalid financial record: {0}")]
    InvalidRecord(String),
    #[error("value of goods and services must be > 0 (got {0})")]
    NonPositiveValue(f64),
    #[error("1 + epsilon must be > 0 (epsilon = {0})")]
    NonPositiveProfitFactor(f64),
}

/// A derived parameter row plus which halving adjustments fired.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub node: String,
    pub params: ModelParams,
    pub beta_halved: bool,
    pub rho_halved: bool,
}

pub fn derive_params(
    rec: &FinancialRecord,
    role: Role,
    flags: Flags,
) -> Result<ModelParams, CalibrationError> {
    derive(rec, role, flags).map(|(p, _, _)| p)
}

fn derive(
    rec: &FinancialRecord,
    role: Role,
    flags: Flags,
) -> Result<(ModelParams, bool, bool), CalibrationError> {
    rec.check()?;
    let value = rec.value();
    if value <= 0.0 {
        return Err(CalibrationError::NonPositiveValue(value));
    }
    let u0 = rec.revenue + rec.material.abs() + rec.overheads + rec.production;
    let bought = rec.material.max(0.0);
    let epsilon = (value - bought - rec.overheads - rec.production) / value;
    if 1.0 + epsilon <= 0.0 {
        return Err(CalibrationError::NonPositiveProfitFactor(epsilon));
    }

    let beta_halved = role.imports() && flags.buys_in_district;
    let rho_halved = role.exports() && flags.sells_in_district;

    let mut beta = if rec.material <= 0.0 {
        0.0
    } else {
        rec.material / u0
    };
    if beta_halved {
        beta /= 2.0;
    }
    let mut rho = value / (u0 * (1.0 + epsilon));
    if rho_halved {
        rho /= 2.0;
    }
    let params = ModelParams {
        u0,
        beta,
        rho,
        epsilon,
        d: rec.overheads / u0,
    };
    Ok((params, beta_halved, rho_halved))
}

/// Rows derived during one calibration pass, in node order. Nodes that already
/// carried params do not appear.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("node,u0,beta,rho,epsilon,d,flags_applied\n");
        for r in &self.rows {
            let applied = match (r.beta_halved, r.rho_halved) {
                (false, false) => "none",
                (true, false) => "beta_halved",
                (false, true) => "rho_halved",
                (true, true) => "beta_halved;rho_halved",
            };
            let p = &r.params;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.node, p.u0, p.beta, p.rho, p.epsilon, p.d, applied
            );
        }
        s
    }
}

/// Parameters for every node of `file`, deriving those that are missing.
/// `roles` must be the classified roles in node order.
pub fn calibrate_nodes(
    file: &NetworkFile,
    roles: &[Role],
) -> Result<(Vec<ModelParams>, CalibrationReport), NetworkError> {
    let mut params = Vec::with_capacity(file.nodes.len());
    let mut report = CalibrationReport::default();
    for (n, &role) in file.nodes.iter().zip(roles) {
        match (&n.params, &n.financials) {
            (Some(p), _) => params.push(*p),
            (None, Some(rec)) => {
                let (p, beta_halved, rho_halved) =
                    derive(rec, role, n.flags).map_err(|source| NetworkError::Calibration {
                        node: n.id.clone(),
                        source,
                    })?;
                params.push(p);
                report.rows.push(CalibrationRow {
                    node: n.id.clone(),
                    params: p,
                    beta_halved,
                    rho_halved,
                });
            }
            (None, None) => {
                return Err(NetworkError::Invalid(vec![
                    crate::netmodel::Violation::new(
                        format!("node {}", n.id),
                        "needs either params or financials",
                    ),
                ]))
            }
        }
    }
    Ok((params, report))
}

/// Fills in params for every node that arrived with financials. The returned
/// file carries params in place of financials and the classified role on
/// every node; nodes that already had params are copied untouched.
pub fn calibrate_network(
    file: &NetworkFile,
) -> Result<(NetworkFile, CalibrationReport), NetworkError> {
    let structure = Structure::build(file)?;
    let (params, report) = calibrate_nodes(file, &structure.roles)?;
    let mut out = file.clone();
    for ((node, p), role) in out.nodes.iter_mut().zip(params).zip(&structure.roles) {
        if node.financials.take().is_some() {
            node.params = Some(p);
            node.role = Some(*role);
        }
    }
    // Run the remaining parameter and market checks on the result.
    crate::netmodel::Network::from_file(&out)?;
    Ok((out, report))
}
