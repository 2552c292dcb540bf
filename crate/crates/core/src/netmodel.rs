//! District network: file schema, edge normalisation, role classification
//! and external market caps.
//!
//! Edges always point in the direction goods or services travel, with money
//! flowing the other way. Input files describe *material* flow, so a
//! `service` edge (paid waste disposal, where material and money move
//! together) is stored reversed: the disposer sells a disposal service to the
//! producer of the waste.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::calibrate::{self, CalibrationError, CalibrationReport, FinancialRecord};

/// Relationship of a firm with the world outside the modelled district.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    PrimarySupplier,
    Intermediary,
    EndConsumer,
    Hub,
}

impl Role {
    /// Buys from outside the district without limit (and takes no supply penalty).
    pub fn imports(self) -> bool {
        matches!(self, Role::PrimarySupplier | Role::Hub)
    }

    /// Sells into one or more bounded external markets.
    pub fn exports(self) -> bool {
        matches!(self, Role::EndConsumer | Role::Hub)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::PrimarySupplier => "primary_supplier",
            Role::Intermediary => "intermediary",
            Role::EndConsumer => "end_consumer",
            Role::Hub => "hub",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-firm dynamical parameters. Halving adjustments for in-district trade
/// are already folded into `beta` and `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Initial utility, millions of 2013 GBP.
    pub u0: f64,
    /// Required supply as a fraction of utility.
    pub beta: f64,
    /// Product value as a fraction of utility.
    pub rho: f64,
    /// Profit fraction.
    pub epsilon: f64,
    /// Overhead fraction.
    pub d: f64,
}

impl ModelParams {
    pub fn check(&self) -> Result<(), String> {
        let fields = [
            ("u0", self.u0),
            ("beta", self.beta),
            ("rho", self.rho),
            ("epsilon", self.epsilon),
            ("d", self.d),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(format!("{name} is not finite"));
            }
        }
        if self.u0 < 0.0 {
            return Err(format!("u0 must be >= 0 (got {})", self.u0));
        }
        if self.beta < 0.0 {
            return Err(format!("beta must be >= 0 (got {})", self.beta));
        }
        if self.rho <= 0.0 {
            return Err(format!("rho must be > 0 (got {})", self.rho));
        }
        if self.d < 0.0 {
            return Err(format!("d must be >= 0 (got {})", self.d));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    #[serde(default)]
    pub buys_in_district: bool,
    #[serde(default)]
    pub sells_in_district: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Goods,
    Service,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SupplyEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
}

impl SupplyEdge {
    pub fn new(from: impl Into<String>, to: impl Into<String>, kind: EdgeKind) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
            kind,
        }
    }
}

impl fmt::Display for SupplyEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            EdgeKind::Goods => "goods",
            EdgeKind::Service => "service",
        };
        write!(f, "{} -> {} ({kind})", self.from, self.to)
    }
}

/// Cap of an external market: an explicit value or the sum of the members'
/// initial rescaled utilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarketCap {
    Explicit(f64),
    Auto,
}

impl Serialize for MarketCap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            MarketCap::Explicit(v) => s.serialize_f64(*v),
            MarketCap::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for MarketCap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(MarketCap::Explicit(v)),
            Raw::Str(s) if s == "auto" => Ok(MarketCap::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "market cap must be a number or \"auto\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub id: String,
    pub cap: MarketCap,
}

/// A node as it appears in a network file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub markets: Vec<String>,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ModelParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub financials: Option<FinancialRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// The on-disk network document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub edges: Vec<SupplyEdge>,
    #[serde(default)]
    pub markets: Vec<MarketSpec>,
}

impl NetworkFile {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("network file serialises");
        s.push('\n');
        s
    }
}

/// One failed check, attributed to a node, edge or market.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub subject: String,
    pub reason: String,
}

impl Violation {
    pub fn new(subject: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("edge #{index} ({edge}): unknown node id `{id}`")]
    UnknownNode {
        index: usize,
        edge: SupplyEdge,
        id: String,
    },
    #[error("{}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("calibration failed for node `{node}`: {source}")]
    Calibration {
        node: String,
        #[source]
        source: CalibrationError,
    },
}

impl NetworkError {
    /// All violations carried by the error, one per line of a report.
    pub fn violations(&self) -> Vec<Violation> {
        match self {
            NetworkError::UnknownNode { index, edge, id } => vec![Violation::new(
                format!("edge #{index} ({edge})"),
                format!("unknown node id `{id}`"),
            )],
            NetworkError::Invalid(v) => v.clone(),
            NetworkError::Calibration { node, source } => {
                vec![Violation::new(format!("node {node}"), source.to_string())]
            }
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    let mut s = format!("{} validation error(s)", v.len());
    for x in v {
        s.push_str("\n  ");
        s.push_str(&x.to_string());
    }
    s
}

/// Reverses every service edge so that all edges follow the goods/service
/// flow. Goods edges pass through; order is preserved.
pub fn normalize_edges(
    raw: &[SupplyEdge],
    index: &HashMap<String, usize>,
) -> Result<Vec<SupplyEdge>, NetworkError> {
    raw.iter()
        .enumerate()
        .map(|(i, e)| {
            for id in [&e.from, &e.to] {
                if !index.contains_key(id) {
                    return Err(NetworkError::UnknownNode {
                        index: i,
                        edge: e.clone(),
                        id: id.clone(),
                    });
                }
            }
            Ok(match e.kind {
                EdgeKind::Goods => e.clone(),
                EdgeKind::Service => SupplyEdge::new(e.to.clone(), e.from.clone(), e.kind),
            })
        })
        .collect()
}

/// Node ids, normalised edges and the derived supplier/customer sets.
#[derive(Debug, Clone)]
pub struct Topology {
    pub ids: Vec<String>,
    pub index: HashMap<String, usize>,
    pub edges: Vec<SupplyEdge>,
    /// `(seller, buyer)` node indices, parallel to `edges`.
    pub links: Vec<(usize, usize)>,
    /// `S_i`, sorted by node index.
    pub suppliers: Vec<Vec<usize>>,
    /// `C_i`, sorted by node index.
    pub customers: Vec<Vec<usize>>,
}

impl Topology {
    pub fn build(ids: &[String], raw_edges: &[SupplyEdge]) -> Result<Self, NetworkError> {
        let mut violations = Vec::new();
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.is_empty() {
                violations.push(Violation::new(format!("node #{i}"), "empty id"));
            }
            if index.insert(id.clone(), i).is_some() {
                violations.push(Violation::new(format!("node {id}"), "duplicate id"));
            }
        }
        if !violations.is_empty() {
            return Err(NetworkError::Invalid(violations));
        }

        let edges = normalize_edges(raw_edges, &index)?;
        let n = ids.len();
        let mut suppliers = vec![BTreeSet::new(); n];
        let mut customers = vec![BTreeSet::new(); n];
        let mut links = Vec::with_capacity(edges.len());
        for (k, e) in edges.iter().enumerate() {
            let (s, b) = (index[&e.from], index[&e.to]);
            let label = format!("edge #{k} ({})", raw_edges[k]);
            if s == b {
                violations.push(Violation::new(label, "self-edge"));
                continue;
            }
            if !customers[s].insert(b) {
                violations.push(Violation::new(
                    label,
                    format!("duplicates an existing {} -> {} link", e.from, e.to),
                ));
                continue;
            }
            suppliers[b].insert(s);
            links.push((s, b));
        }
        if !violations.is_empty() {
            return Err(NetworkError::Invalid(violations));
        }
        Ok(Self {
            ids: ids.to_vec(),
            index,
            edges,
            links,
            suppliers: suppliers
                .into_iter()
                .map(|s| s.into_iter().collect())
                .collect(),
            customers: customers
                .into_iter()
                .map(|s| s.into_iter().collect())
                .collect(),
        })
    }

    /// Assigns a role to every node from its edge structure and optional
    /// declaration.
    ///
    /// A node without suppliers is a primary supplier, a node without
    /// customers an end consumer, unless declared a hub. A node with both is
    /// taken as declared, otherwise as an end consumer when it sells into an
    /// external market and an intermediary when it does not. `exports[i]` says
    /// whether node `i` lists any market.
    pub fn classify_roles(
        &self,
        declared: &[Option<Role>],
        exports: &[bool],
    ) -> Result<Vec<Role>, Vec<Violation>> {
        let mut roles = Vec::with_capacity(self.ids.len());
        let mut violations = Vec::new();
        for i in 0..self.ids.len() {
            let has_in = !self.suppliers[i].is_empty();
            let has_out = !self.customers[i].is_empty();
            let subject = || format!("node {}", self.ids[i]);
            let role = match (declared[i], has_in, has_out) {
                (Some(Role::Hub), _, _) => Role::Hub,
                (Some(Role::Intermediary), false, _) => {
                    violations.push(Violation::new(
                        subject(),
                        "declared intermediary but has no in-district suppliers",
                    ));
                    continue;
                }
                (Some(Role::Intermediary), true, false) => {
                    violations.push(Violation::new(
                        subject(),
                        "declared intermediary but has no in-district customers",
                    ));
                    continue;
                }
                (Some(Role::PrimarySupplier), _, false) => {
                    violations.push(Violation::new(
                        subject(),
                        "declared primary supplier but has no in-district customers \
                         (a node without customers is an end consumer or hub)",
                    ));
                    continue;
                }
                (Some(Role::EndConsumer), false, true) => {
                    violations.push(Violation::new(
                        subject(),
                        "declared end consumer but has no in-district suppliers \
                         (a node without suppliers is a primary supplier or hub)",
                    ));
                    continue;
                }
                (Some(r), _, _) => r,
                (None, false, true) => Role::PrimarySupplier,
                (None, _, false) => Role::EndConsumer,
                (None, true, true) if exports[i] => Role::EndConsumer,
                (None, true, true) => Role::Intermediary,
            };
            roles.push(role);
        }
        if violations.is_empty() {
            Ok(roles)
        } else {
            Err(violations)
        }
    }

    /// Mismatches between the stored in-district trade flags and the edges.
    /// Data wins; these are reported as warnings only.
    pub fn flag_warnings(&self, flags: &[Flags]) -> Vec<String> {
        let mut out = Vec::new();
        for (i, f) in flags.iter().enumerate() {
            let has_in = !self.suppliers[i].is_empty();
            let has_out = !self.customers[i].is_empty();
            if f.buys_in_district != has_in {
                out.push(format!(
                    "node {}: buys_in_district={} but it has {} in-district supplier(s)",
                    self.ids[i],
                    f.buys_in_district,
                    self.suppliers[i].len()
                ));
            }
            if f.sells_in_district != has_out {
                out.push(format!(
                    "node {}: sells_in_district={} but it has {} in-district customer(s)",
                    self.ids[i],
                    f.sells_in_district,
                    self.customers[i].len()
                ));
            }
        }
        out
    }
}

/// Resolves every market cap. Auto caps are `sum over members of u0_i / n_i`
/// where `n_i` is the number of markets member `i` sells to.
pub fn compute_market_caps(
    markets: &[MarketSpec],
    members: &[Vec<usize>],
    u0: &[f64],
    markets_per_node: &[usize],
) -> Result<Vec<f64>, Vec<Violation>> {
    let mut caps = Vec::with_capacity(markets.len());
    let mut violations = Vec::new();
    for (spec, m) in markets.iter().zip(members) {
        match spec.cap {
            MarketCap::Explicit(v) if v > 0.0 && !v.is_nan() => caps.push(v),
            MarketCap::Explicit(v) => violations.push(Violation::new(
                format!("market {}", spec.id),
                format!("explicit cap must be > 0 (got {v})"),
            )),
            MarketCap::Auto if m.is_empty() => violations.push(Violation::new(
                format!("market {}", spec.id),
                "auto cap requested but no node sells to this market",
            )),
            MarketCap::Auto => {
                caps.push(m.iter().map(|&i| u0[i] / markets_per_node[i] as f64).sum())
            }
        }
    }
    if violations.is_empty() {
        Ok(caps)
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirmNode {
    pub id: String,
    pub name: String,
    pub role: Role,
    /// Market indices, ascending.
    pub markets: Vec<usize>,
    pub params: ModelParams,
    pub flags: Flags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    pub id: String,
    pub cap: f64,
    pub auto: bool,
    /// Member node indices, ascending.
    pub members: Vec<usize>,
}

/// A validated, calibrated district network. Immutable once built.
#[derive(Debug, Clone)]
pub struct Network {
    pub nodes: Vec<FirmNode>,
    /// Normalised edges: every edge points from seller to buyer, service
    /// edges included (they keep their kind).
    pub edges: Vec<SupplyEdge>,
    /// `(seller, buyer)` node indices, parallel to `edges`.
    pub links: Vec<(usize, usize)>,
    pub markets: Vec<Market>,
    pub suppliers: Vec<Vec<usize>>,
    pub customers: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Structure checks up to (not including) calibration.
#[derive(Debug, Clone)]
pub struct Structure {
    pub topology: Topology,
    pub roles: Vec<Role>,
    /// Market indices per node.
    pub node_markets: Vec<Vec<usize>>,
    /// Member node indices per market.
    pub market_members: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

impl Structure {
    pub fn build(file: &NetworkFile) -> Result<Self, NetworkError> {
        let ids: Vec<String> = file.nodes.iter().map(|n| n.id.clone()).collect();
        let topology = Topology::build(&ids, &file.edges)?;
        let mut violations = Vec::new();

        let mut market_index = HashMap::new();
        for (k, m) in file.markets.iter().enumerate() {
            if market_index.insert(m.id.clone(), k).is_some() {
                violations.push(Violation::new(format!("market {}", m.id), "duplicate id"));
            }
        }
        let mut node_markets = vec![Vec::new(); ids.len()];
        let mut market_members = vec![Vec::new(); file.markets.len()];
        for (i, n) in file.nodes.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for m in &n.markets {
                match market_index.get(m) {
                    None => violations.push(Violation::new(
                        format!("node {}", n.id),
                        format!("unknown market `{m}`"),
                    )),
                    Some(&k) => {
                        if !seen.insert(k) {
                            violations.push(Violation::new(
                                format!("node {}", n.id),
                                format!("market `{m}` listed twice"),
                            ));
                        }
                    }
                }
            }
            for &k in &seen {
                market_members[k].push(i);
            }
            node_markets[i] = seen.into_iter().collect();

            match (&n.params, &n.financials) {
                (Some(_), Some(_)) => violations.push(Violation::new(
                    format!("node {}", n.id),
                    "has both params and financials; exactly one is allowed",
                )),
                (None, None) => violations.push(Violation::new(
                    format!("node {}", n.id),
                    "needs either params or financials",
                )),
                _ => {}
            }
        }

        let declared: Vec<Option<Role>> = file.nodes.iter().map(|n| n.role).collect();
        let exports: Vec<bool> = node_markets.iter().map(|m| !m.is_empty()).collect();
        let roles = match topology.classify_roles(&declared, &exports) {
            Ok(r) => r,
            Err(v) => {
                violations.extend(v);
                Vec::new()
            }
        };
        if !roles.is_empty() {
            for (i, role) in roles.iter().enumerate() {
                let has_markets = !node_markets[i].is_empty();
                if role.exports() && !has_markets {
                    violations.push(Violation::new(
                        format!("node {}", ids[i]),
                        format!("role {role} requires at least one external market"),
                    ));
                } else if !role.exports() && has_markets {
                    violations.push(Violation::new(
                        format!("node {}", ids[i]),
                        format!("role {role} cannot sell to external markets"),
                    ));
                }
            }
        }
        if !violations.is_empty() {
            return Err(NetworkError::Invalid(violations));
        }

        let flags: Vec<Flags> = file.nodes.iter().map(|n| n.flags).collect();
        let warnings = topology.flag_warnings(&flags);
        Ok(Self {
            topology,
            roles,
            node_markets,
            market_members,
            warnings,
        })
    }
}

impl Network {
    /// Validates the file, derives missing parameters and resolves caps.
    pub fn from_file(file: &NetworkFile) -> Result<Self, NetworkError> {
        Self::from_file_with_report(file).map(|(net, _)| net)
    }

    pub fn from_file_with_report(
        file: &NetworkFile,
    ) -> Result<(Self, CalibrationReport), NetworkError> {
        let structure = Structure::build(file)?;
        let (params, report) = calibrate::calibrate_nodes(file, &structure.roles)?;
        Ok((Self::assemble(file, structure, params)?, report))
    }

    /// Builds from an already checked structure with one parameter set per
    /// node (file order), ignoring the params/financials stored in `file`.
    pub fn from_structure(
        file: &NetworkFile,
        structure: Structure,
        params: Vec<ModelParams>,
    ) -> Result<Self, NetworkError> {
        Self::assemble(file, structure, params)
    }

    fn assemble(
        file: &NetworkFile,
        structure: Structure,
        params: Vec<ModelParams>,
    ) -> Result<Self, NetworkError> {
        let mut violations: Vec<Violation> = params
            .iter()
            .zip(&file.nodes)
            .filter_map(|(p, n)| {
                p.check()
                    .err()
                    .map(|e| Violation::new(format!("node {}", n.id), e))
            })
            .collect();
        if !violations.is_empty() {
            return Err(NetworkError::Invalid(violations));
        }

        let u0: Vec<f64> = params.iter().map(|p| p.u0).collect();
        let per_node: Vec<usize> = structure.node_markets.iter().map(Vec::len).collect();
        let caps = compute_market_caps(&file.markets, &structure.market_members, &u0, &per_node)
            .map_err(|v| {
                violations.extend(v);
                NetworkError::Invalid(violations.clone())
            })?;

        let Structure {
            topology,
            roles,
            node_markets,
            market_members,
            warnings,
        } = structure;
        let nodes = file
            .nodes
            .iter()
            .zip(roles)
            .zip(node_markets)
            .zip(params)
            .map(|(((spec, role), markets), params)| FirmNode {
                id: spec.id.clone(),
                name: spec.name.clone(),
                role,
                markets,
                params,
                flags: spec.flags,
            })
            .collect();
        let markets = file
            .markets
            .iter()
            .zip(caps)
            .zip(market_members)
            .map(|((spec, cap), members)| Market {
                id: spec.id.clone(),
                cap,
                auto: spec.cap == MarketCap::Auto,
                members,
            })
            .collect();
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(Self {
            nodes,
            edges: topology.edges,
            links: topology.links,
            markets,
            suppliers: topology.suppliers,
            customers: topology.customers,
            warnings,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn market(&self, id: &str) -> Option<&Market> {
        self.markets.iter().find(|m| m.id == id)
    }

    pub fn initial_state(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.params.u0).collect()
    }

    /// Sum of `u0` over all end consumers and hubs.
    pub fn total_export_utility(&self) -> f64 {
        self.nodes
            .iter()
            .filter(|n| n.role.exports())
            .map(|n| n.params.u0)
            .sum()
    }
}

/// Result of checking a network file without simulating it.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Runs every structural, calibration and parameter check on `file`.
pub fn validate(file: &NetworkFile) -> ValidationReport {
    match Network::from_file(file) {
        Ok(net) => ValidationReport {
            violations: Vec::new(),
            warnings: net.warnings,
        },
        Err(e) => ValidationReport {
            violations: e.violations(),
            warnings: Vec::new(),
        },
    }
}
