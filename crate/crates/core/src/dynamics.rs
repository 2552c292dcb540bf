//! Right-hand side of the district ODE system.
//!
//! For firm `i` with suppliers `S_i` and customers `C_i`:
//!
//! ```text
//! du_i/dt = (1 + eps_i) * sum_{j in C_i} G(u_i, u_j) * P_i
//!           - sum_{j in S_i} G(u_j, u_i)
//!           + Lambda_i * P_i
//!           - d_i * u_i
//! ```
//!
//! Buyer `l` spreads its requirement `beta_l u_l` over its suppliers in
//! proportion to their utility. Seller `j` can deliver at most `rho_j u_j`;
//! when the total demand on it reaches that capacity, every customer gets the
//! same fraction of what it asked for. Note the capacity that decides the
//! branch is the *seller's*; the same reading applies to ties.
//!
//! Ties at a capacity or market cap take the constrained branch. At a seller's
//! capacity both branches give the same trade, so only the reported flag
//! depends on it. At a market cap only the market total agrees: a member's
//! share jumps from `rho_i u~_i` to `cap u~_i / sum u~` unless all members
//! share the same `rho`.

use serde::Serialize;
use thiserror::Error;

use crate::netmodel::{Network, Role};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RhsError {
    #[error("non-finite derivative {value} for node `{node}`")]
    NonFinite { node: String, value: f64 },
}

/// Demand that buyer `l` places on its supplier `j`:
/// `beta_l u_l u_j / sum_{m in S_l} u_m`, or 0 when `u_l` or the sum is 0.
pub fn demand(net: &Network, l: usize, j: usize, u: &[f64]) -> f64 {
    debug_assert!(net.suppliers[l].contains(&j), "{j} does not supply {l}");
    let total: f64 = net.suppliers[l].iter().map(|&m| u[m]).sum();
    demand_share(net.nodes[l].params.beta, u[l], u[j], total)
}

fn demand_share(beta: f64, u_buyer: f64, u_seller: f64, supplier_total: f64) -> f64 {
    if u_buyer == 0.0 || supplier_total == 0.0 {
        0.0
    } else {
        beta * u_buyer * u_seller / supplier_total
    }
}

/// Value of what seller `j` delivers to buyer `i`, `G(u_j, u_i)`.
pub fn trade(net: &Network, j: usize, i: usize, u: &[f64]) -> f64 {
    let asked = demand(net, i, j, u);
    if asked == 0.0 {
        return 0.0;
    }
    let total: f64 = net.customers[j].iter().map(|&l| demand(net, l, j, u)).sum();
    let capacity = net.nodes[j].params.rho * u[j];
    if seller_capped(total, capacity) {
        capacity * asked / total
    } else {
        asked
    }
}

/// Fraction of its required supply that firm `i` obtains, in `[0, 1]`.
/// Primary suppliers and hubs import freely and always get 1.
pub fn penalty(net: &Network, i: usize, u: &[f64]) -> f64 {
    let node = &net.nodes[i];
    if node.role.imports() {
        return 1.0;
    }
    let required = node.params.beta * u[i];
    if required == 0.0 {
        return 1.0;
    }
    let got: f64 = net.suppliers[i].iter().map(|&j| trade(net, j, i, u)).sum();
    (got / required).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketFlows {
    /// `sum rho_j u~_j` over members.
    pub offered: f64,
    pub sold: f64,
    pub constrained: bool,
}

/// External sales `G~(u_i)` per node and the totals per market.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExternalSales {
    pub per_node: Vec<f64>,
    pub per_market: Vec<MarketFlows>,
}

pub fn external_sales(net: &Network, u: &[f64]) -> ExternalSales {
    external_sales_with(net, u, None)
}

fn external_sales_with(
    net: &Network,
    u: &[f64],
    branches: Option<&[Option<bool>]>,
) -> ExternalSales {
    let mut per_node = vec![0.0; net.len()];
    let mut per_market = Vec::with_capacity(net.markets.len());
    for (k, market) in net.markets.iter().enumerate() {
        let rescaled = |i: usize| u[i] / net.nodes[i].markets.len() as f64;
        let offered: f64 = market
            .members
            .iter()
            .map(|&i| net.nodes[i].params.rho * rescaled(i))
            .sum();
        let pool: f64 = market.members.iter().map(|&i| rescaled(i)).sum();
        let constrained = branches.and_then(|b| b[k]).unwrap_or(market.cap <= offered);
        let mut sold = 0.0;
        for &i in &market.members {
            let share = if !constrained {
                net.nodes[i].params.rho * rescaled(i)
            } else if pool > 0.0 {
                market.cap * rescaled(i) / pool
            } else {
                0.0
            };
            per_node[i] += share;
            sold += share;
        }
        per_market.push(MarketFlows {
            offered,
            sold,
            constrained,
        });
    }
    ExternalSales {
        per_node,
        per_market,
    }
}

/// Where the right-hand side changes formula. Entry `k < markets` is market
/// `k` (`M_k - sum rho_j u~_j`); entry `markets + j` is seller `j`
/// (`rho_j u_j - D_j`). `capped[k]` is the branch the evaluator takes.
/// Crossing a market switch makes member shares jump (only the market total
/// is continuous); crossing a seller switch is a kink.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Switches {
    pub slack: Vec<f64>,
    pub capped: Vec<bool>,
}

impl Switches {
    pub fn len(&self) -> usize {
        self.slack.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slack.is_empty()
    }
}

/// Evaluates every switching function at `u`, projected onto `u >= 0`.
pub fn switches(net: &Network, u: &[f64], out: &mut Switches) {
    let pos = |i: usize| u[i].max(0.0);
    out.slack.clear();
    out.capped.clear();
    for m in &net.markets {
        let offered: f64 = m
            .members
            .iter()
            .map(|&i| net.nodes[i].params.rho * pos(i) / net.nodes[i].markets.len() as f64)
            .sum();
        out.slack.push(m.cap - offered);
        out.capped.push(m.cap <= offered);
    }
    for j in 0..net.len() {
        let asked: f64 = net.customers[j]
            .iter()
            .map(|&l| {
                let total: f64 = net.suppliers[l].iter().map(|&m| pos(m)).sum();
                demand_share(net.nodes[l].params.beta, pos(l), pos(j), total)
            })
            .sum();
        let capacity = net.nodes[j].params.rho * pos(j);
        out.slack.push(capacity - asked);
        out.capped.push(seller_capped(asked, capacity));
    }
}

fn seller_capped(demand: f64, capacity: f64) -> bool {
    demand > 0.0 && demand >= capacity
}

/// Boundary term `Lambda_i`: imports cost `beta u`, exports earn
/// `(1 + eps) G~`.
pub fn boundary(net: &Network, i: usize, u: &[f64], ext: &ExternalSales) -> f64 {
    let p = &net.nodes[i].params;
    let import = p.beta * u[i];
    let export = (1.0 + p.epsilon) * ext.per_node[i];
    match net.nodes[i].role {
        Role::PrimarySupplier => -import,
        Role::Intermediary => 0.0,
        Role::EndConsumer => export,
        Role::Hub => -import + export,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeFlows {
    /// `sum_{j in C_i} G(u_i, u_j)`.
    pub sales: f64,
    /// `sum_{j in S_i} G(u_j, u_i)`.
    pub purchases: f64,
    pub penalty: f64,
    pub boundary: f64,
    /// `d_i u_i`.
    pub overhead: f64,
    pub external_sales: f64,
    /// Total demand on this node as a seller.
    pub demand_on: f64,
    /// Demand reached the seller's capacity `rho u`.
    pub capacity_bound: bool,
}

/// Every term of the right-hand side at one state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowBreakdown {
    pub nodes: Vec<NodeFlows>,
    pub markets: Vec<MarketFlows>,
    /// `G` along each link, parallel to `Network::links`.
    pub trades: Vec<f64>,
}

impl FlowBreakdown {
    /// Reassembles `du/dt` from the parts.
    pub fn derivative(&self, net: &Network) -> Vec<f64> {
        self.nodes
            .iter()
            .zip(&net.nodes)
            .map(|(f, n)| {
                (1.0 + n.params.epsilon) * f.sales * f.penalty - f.purchases
                    + f.boundary * f.penalty
                    - f.overhead
            })
            .collect()
    }
}

/// Scratch buffers for repeated evaluation.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    supplier_total: Vec<f64>,
    link_demand: Vec<f64>,
    link_trade: Vec<f64>,
    demand_on: Vec<f64>,
    sales: Vec<f64>,
    purchases: Vec<f64>,
}

impl Workspace {
    pub fn new(net: &Network) -> Self {
        let n = net.len();
        let m = net.links.len();
        Self {
            supplier_total: vec![0.0; n],
            link_demand: vec![0.0; m],
            link_trade: vec![0.0; m],
            demand_on: vec![0.0; n],
            sales: vec![0.0; n],
            purchases: vec![0.0; n],
        }
    }
}

/// `du/dt` and the flows behind it. `u` must be non-negative.
pub fn rhs(net: &Network, u: &[f64]) -> Result<(Vec<f64>, FlowBreakdown), RhsError> {
    let mut ws = Workspace::new(net);
    let mut du = vec![0.0; net.len()];
    let flows = evaluate(net, u, &mut du, &mut ws, true, None)?;
    Ok((du, flows.expect("flows requested")))
}

/// Derivative only, reusing `ws`. The integrator hot path.
pub fn rhs_into(
    net: &Network,
    u: &[f64],
    du: &mut [f64],
    ws: &mut Workspace,
) -> Result<(), RhsError> {
    evaluate(net, u, du, ws, false, None).map(|_| ())
}

/// Like [`rhs_into`], but with some branches pinned. `branches` follows the
/// layout of [`Switches`]; `Some(capped)` forces that branch and `None`
/// decides from `u` as usual. Pinning keeps the right-hand side smooth across
/// one integration step, with each branch formula continued past its switch.
pub fn rhs_into_with(
    net: &Network,
    u: &[f64],
    du: &mut [f64],
    ws: &mut Workspace,
    branches: &[Option<bool>],
) -> Result<(), RhsError> {
    evaluate(net, u, du, ws, false, Some(branches)).map(|_| ())
}

fn evaluate(
    net: &Network,
    u: &[f64],
    du: &mut [f64],
    ws: &mut Workspace,
    want_flows: bool,
    branches: Option<&[Option<bool>]>,
) -> Result<Option<FlowBreakdown>, RhsError> {
    let n = net.len();
    let n_markets = net.markets.len();
    debug_assert_eq!(u.len(), n);

    for (l, total) in ws.supplier_total.iter_mut().enumerate() {
        *total = net.suppliers[l].iter().map(|&m| u[m]).sum();
    }
    ws.demand_on.iter_mut().for_each(|x| *x = 0.0);
    for (k, &(seller, buyer)) in net.links.iter().enumerate() {
        let q = demand_share(
            net.nodes[buyer].params.beta,
            u[buyer],
            u[seller],
            ws.supplier_total[buyer],
        );
        ws.link_demand[k] = q;
        ws.demand_on[seller] += q;
    }
    ws.sales.iter_mut().for_each(|x| *x = 0.0);
    ws.purchases.iter_mut().for_each(|x| *x = 0.0);
    for (k, &(seller, buyer)) in net.links.iter().enumerate() {
        let asked = ws.link_demand[k];
        let total = ws.demand_on[seller];
        let capacity = net.nodes[seller].params.rho * u[seller];
        let capped = branches
            .and_then(|b| b[n_markets + seller])
            .unwrap_or_else(|| seller_capped(total, capacity));
        let g = if asked == 0.0 {
            0.0
        } else if !capped {
            asked
        } else {
            capacity * asked / total
        };
        ws.link_trade[k] = g;
        ws.sales[seller] += g;
        ws.purchases[buyer] += g;
    }

    let ext = external_sales_with(net, u, branches);
    let mut node_flows = if want_flows {
        Vec::with_capacity(n)
    } else {
        Vec::new()
    };
    for i in 0..n {
        let node = &net.nodes[i];
        let p = &node.params;
        let required = p.beta * u[i];
        let pen = if node.role.imports() || required == 0.0 {
            1.0
        } else {
            (ws.purchases[i] / required).clamp(0.0, 1.0)
        };
        let lambda = boundary(net, i, u, &ext);
        let overhead = p.d * u[i];
        let mut rate =
            (1.0 + p.epsilon) * ws.sales[i] * pen - ws.purchases[i] + lambda * pen - overhead;
        if u[i] == 0.0 {
            // Every term carries a factor u_i.
            rate = 0.0;
        }
        if !rate.is_finite() {
            return Err(RhsError::NonFinite {
                node: node.id.clone(),
                value: rate,
            });
        }
        du[i] = rate;
        if want_flows {
            let capacity = p.rho * u[i];
            node_flows.push(NodeFlows {
                sales: ws.sales[i],
                purchases: ws.purchases[i],
                penalty: pen,
                boundary: lambda,
                overhead,
                external_sales: ext.per_node[i],
                demand_on: ws.demand_on[i],
                capacity_bound: seller_capped(ws.demand_on[i], capacity),
            });
        }
    }

    Ok(want_flows.then(|| FlowBreakdown {
        nodes: node_flows,
        markets: ext.per_market,
        trades: ws.link_trade.clone(),
    }))
}
