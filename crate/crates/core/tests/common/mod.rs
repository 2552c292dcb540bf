// Shared fixtures for the integration tests: a random network generator and
// two independent oracles (a brute-force right-hand side and fixed-step RK4).
#![allow(dead_code)]

use firmweb::{
    EdgeKind, Flags, MarketCap, MarketSpec, ModelParams, Network, NetworkFile, NodeSpec, Role,
    SupplyEdge,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct GenOptions {
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub edge_prob: f64,
    /// Probability that a market gets an explicit cap instead of `auto`.
    pub explicit_cap_prob: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            min_nodes: 2,
            max_nodes: 8,
            edge_prob: 0.3,
            explicit_cap_prob: 0.5,
        }
    }
}

fn params(rng: &mut ChaCha8Rng) -> ModelParams {
    ModelParams {
        u0: 10f64.powf(rng.gen_range(-1.0..2.5)),
        beta: if rng.gen_bool(0.15) {
            0.0
        } else {
            rng.gen_range(0.0..0.6)
        },
        rho: rng.gen_range(0.05..0.7),
        epsilon: rng.gen_range(0.0..0.8),
        d: rng.gen_range(0.0..0.3),
    }
}

/// A structurally valid network file with explicit params on every node.
pub fn random_file(rng: &mut ChaCha8Rng, opts: &GenOptions) -> NetworkFile {
    let n = rng.gen_range(opts.min_nodes..=opts.max_nodes);
    let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();

    let mut edges = Vec::new();
    let mut has_in = vec![false; n];
    let mut has_out = vec![false; n];
    for seller in 0..n {
        for buyer in 0..n {
            if seller == buyer || !rng.gen_bool(opts.edge_prob) {
                continue;
            }
            has_out[seller] = true;
            has_in[buyer] = true;
            // Service edges point from customer to provider.
            edges.push(if rng.gen_bool(0.3) {
                SupplyEdge::new(&ids[buyer], &ids[seller], EdgeKind::Service)
            } else {
                SupplyEdge::new(&ids[seller], &ids[buyer], EdgeKind::Goods)
            });
        }
    }

    let n_markets = rng.gen_range(1..=3);
    let mut declared = vec![None; n];
    let mut exports = vec![false; n];
    for i in 0..n {
        if rng.gen_bool(0.2) {
            declared[i] = Some(Role::Hub);
            exports[i] = true;
        } else if !has_out[i] {
            exports[i] = true;
        } else if has_in[i] {
            exports[i] = rng.gen_bool(0.4);
        }
    }

    let mut node_markets: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut used = vec![false; n_markets];
    for i in 0..n {
        if !exports[i] {
            continue;
        }
        let first = rng.gen_range(0..n_markets);
        node_markets[i].push(first);
        used[first] = true;
        if n_markets > 1 && rng.gen_bool(0.3) {
            let second = (first + rng.gen_range(1..n_markets)) % n_markets;
            node_markets[i].push(second);
            used[second] = true;
        }
    }

    let nodes: Vec<NodeSpec> = (0..n)
        .map(|i| NodeSpec {
            id: ids[i].clone(),
            name: format!("Firm {i}"),
            role: declared[i],
            markets: node_markets[i].iter().map(|k| format!("m{k}")).collect(),
            flags: Flags {
                buys_in_district: has_in[i],
                sells_in_district: has_out[i],
            },
            params: Some(params(rng)),
            financials: None,
            note: None,
        })
        .collect();

    let markets = (0..n_markets)
        .filter(|&k| used[k])
        .map(|k| MarketSpec {
            id: format!("m{k}"),
            cap: if rng.gen_bool(opts.explicit_cap_prob) {
                MarketCap::Explicit(10f64.powf(rng.gen_range(-1.0..2.5)))
            } else {
                MarketCap::Auto
            },
        })
        .collect();

    NetworkFile {
        description: None,
        nodes,
        edges,
        markets,
    }
}

pub fn random_network(rng: &mut ChaCha8Rng, opts: &GenOptions) -> Network {
    let file = random_file(rng, opts);
    Network::from_file(&file).unwrap_or_else(|e| panic!("generator produced invalid file: {e}"))
}

/// A random non-negative state near `u0`, with some dead firms.
pub fn random_state(rng: &mut ChaCha8Rng, net: &Network) -> Vec<f64> {
    net.nodes
        .iter()
        .map(|node| {
            if rng.gen_bool(0.1) {
                0.0
            } else {
                node.params.u0 * rng.gen_range(0.1..3.0)
            }
        })
        .collect()
}

/// Straight transcription of the model equations with naive loops over the
/// edge list. Shares nothing with the library's evaluator beyond the network
/// data.
pub struct Oracle<'a> {
    pub net: &'a Network,
    suppliers: Vec<Vec<usize>>,
    customers: Vec<Vec<usize>>,
}

impl<'a> Oracle<'a> {
    pub fn new(net: &'a Network) -> Self {
        let n = net.len();
        let mut suppliers = vec![Vec::new(); n];
        let mut customers = vec![Vec::new(); n];
        // Network edges are already oriented seller -> buyer.
        for e in &net.edges {
            let s = net.node_index(&e.from).unwrap();
            let b = net.node_index(&e.to).unwrap();
            suppliers[b].push(s);
            customers[s].push(b);
        }
        Self {
            net,
            suppliers,
            customers,
        }
    }

    pub fn demand(&self, l: usize, j: usize, u: &[f64]) -> f64 {
        let mut total = 0.0;
        for &m in &self.suppliers[l] {
            total += u[m];
        }
        if u[l] == 0.0 || total == 0.0 {
            return 0.0;
        }
        self.net.nodes[l].params.beta * u[l] * u[j] / total
    }

    pub fn total_demand(&self, j: usize, u: &[f64]) -> f64 {
        let mut total = 0.0;
        for &l in &self.customers[j] {
            total += self.demand(l, j, u);
        }
        total
    }

    pub fn trade(&self, j: usize, i: usize, u: &[f64]) -> f64 {
        let dij = self.demand(i, j, u);
        if dij == 0.0 {
            return 0.0;
        }
        let total = self.total_demand(j, u);
        let cap = self.net.nodes[j].params.rho * u[j];
        if total <= cap {
            dij
        } else {
            cap * dij / total
        }
    }

    pub fn procured(&self, i: usize, u: &[f64]) -> f64 {
        let mut s = 0.0;
        for &j in &self.suppliers[i] {
            s += self.trade(j, i, u);
        }
        s
    }

    pub fn sold(&self, j: usize, u: &[f64]) -> f64 {
        let mut s = 0.0;
        for &i in &self.customers[j] {
            s += self.trade(j, i, u);
        }
        s
    }

    pub fn penalty(&self, i: usize, u: &[f64]) -> f64 {
        let node = &self.net.nodes[i];
        if matches!(node.role, Role::PrimarySupplier | Role::Hub) {
            return 1.0;
        }
        let need = node.params.beta * u[i];
        if need == 0.0 {
            return 1.0;
        }
        (self.procured(i, u) / need).clamp(0.0, 1.0)
    }

    /// External sales of node `i` summed over its markets.
    pub fn external(&self, i: usize, u: &[f64]) -> f64 {
        let mut out = 0.0;
        for k in 0..self.net.markets.len() {
            if self.net.nodes[i].markets.contains(&k) {
                out += self.market_share(k, i, u);
            }
        }
        out
    }

    fn rescaled(&self, i: usize, u: &[f64]) -> f64 {
        u[i] / self.net.nodes[i].markets.len() as f64
    }

    pub fn market_offer(&self, k: usize, u: &[f64]) -> f64 {
        let mut offered = 0.0;
        for (j, node) in self.net.nodes.iter().enumerate() {
            if node.markets.contains(&k) {
                offered += node.params.rho * self.rescaled(j, u);
            }
        }
        offered
    }

    pub fn market_share(&self, k: usize, i: usize, u: &[f64]) -> f64 {
        let cap = self.net.markets[k].cap;
        let offered = self.market_offer(k, u);
        if cap > offered {
            return self.net.nodes[i].params.rho * self.rescaled(i, u);
        }
        let mut pool = 0.0;
        for (j, node) in self.net.nodes.iter().enumerate() {
            if node.markets.contains(&k) {
                pool += self.rescaled(j, u);
            }
        }
        if pool == 0.0 {
            0.0
        } else {
            cap * self.rescaled(i, u) / pool
        }
    }

    pub fn market_total(&self, k: usize, u: &[f64]) -> f64 {
        let mut total = 0.0;
        for (i, node) in self.net.nodes.iter().enumerate() {
            if node.markets.contains(&k) {
                total += self.market_share(k, i, u);
            }
        }
        total
    }

    pub fn boundary(&self, i: usize, u: &[f64]) -> f64 {
        let p = &self.net.nodes[i].params;
        match self.net.nodes[i].role {
            Role::PrimarySupplier => -p.beta * u[i],
            Role::Intermediary => 0.0,
            Role::EndConsumer => (1.0 + p.epsilon) * self.external(i, u),
            Role::Hub => -p.beta * u[i] + (1.0 + p.epsilon) * self.external(i, u),
        }
    }

    pub fn rhs(&self, u: &[f64]) -> Vec<f64> {
        (0..self.net.len())
            .map(|i| {
                let p = &self.net.nodes[i].params;
                let pen = self.penalty(i, u);
                (1.0 + p.epsilon) * self.sold(i, u) * pen - self.procured(i, u)
                    + self.boundary(i, u) * pen
                    - p.d * u[i]
            })
            .collect()
    }
}

/// Classical RK4 with fixed step on the oracle right-hand side. Stage states
/// are projected onto `u >= 0` and firms below `threshold` are set to zero
/// after every step, mirroring the contract of the adaptive integrator.
pub fn rk4(net: &Network, u0: &[f64], t_end: f64, dt: f64, threshold: f64) -> Vec<f64> {
    let oracle = Oracle::new(net);
    let f = |u: &[f64]| {
        let p: Vec<f64> = u.iter().map(|v| v.max(0.0)).collect();
        oracle.rhs(&p)
    };
    let axpy = |u: &[f64], h: f64, k: &[f64]| -> Vec<f64> {
        u.iter().zip(k).map(|(a, b)| a + h * b).collect()
    };
    let steps = (t_end / dt).round() as usize;
    let mut u = u0.to_vec();
    for _ in 0..steps {
        let k1 = f(&u);
        let k2 = f(&axpy(&u, dt / 2.0, &k1));
        let k3 = f(&axpy(&u, dt / 2.0, &k2));
        let k4 = f(&axpy(&u, dt, &k3));
        for i in 0..u.len() {
            u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            if u[i] < threshold {
                u[i] = 0.0;
            }
        }
    }
    u
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest relative difference, measured against the largest entry so that
/// near-zero components do not dominate.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

/// Difference in the integrator's tolerance norm: RMS of
/// `(a - b) / (atol + rtol * max(|a|, |b|))`. Below 1 means within tolerance.
pub fn tolerance_norm(a: &[f64], b: &[f64], rtol: f64, atol: f64) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x - y) / (atol + rtol * x.abs().max(y.abs()))).powi(2))
        .sum();
    (sum / a.len().max(1) as f64).sqrt()
}

/// Componentwise relative difference with an absolute floor.
pub fn componentwise_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// One end consumer with no in-district links selling to a single market.
pub fn isolated_end_consumer(p: ModelParams, cap: f64) -> Network {
    let file = NetworkFile {
        description: None,
        nodes: vec![NodeSpec {
            id: "solo".into(),
            name: "Solo".into(),
            role: Some(Role::EndConsumer),
            markets: vec!["out".into()],
            flags: Flags::default(),
            params: Some(p),
            financials: None,
            note: None,
        }],
        edges: vec![],
        markets: vec![MarketSpec {
            id: "out".into(),
            cap: MarketCap::Explicit(cap),
        }],
    };
    Network::from_file(&file).unwrap()
}

/// End consumers sharing one external market and trading with nobody.
pub fn shared_market(params: &[ModelParams], cap: f64) -> Network {
    let file = NetworkFile {
        description: None,
        nodes: params
            .iter()
            .enumerate()
            .map(|(i, &p)| NodeSpec {
                id: format!("f{i}"),
                name: format!("Firm {i}"),
                role: Some(Role::EndConsumer),
                markets: vec!["out".into()],
                flags: Flags::default(),
                params: Some(p),
                financials: None,
                note: None,
            })
            .collect(),
        edges: vec![],
        markets: vec![MarketSpec {
            id: "out".into(),
            cap: MarketCap::Explicit(cap),
        }],
    };
    Network::from_file(&file).unwrap()
}

/// Reference Humber parameters `[u0, beta, rho, epsilon, d]` in node order.
pub fn humber_table() -> Vec<(&'static str, [f64; 5])> {
    vec![
        ("refinery_crude_oil", [9445.45, 0.228, 0.493, 0.027, 0.007]),
        ("food_processor", [24.99, 0.153, 0.238, 0.119, 0.191]),
        ("farming_arable", [0.11, 0.061, 0.444, 0.507, 0.066]),
        ("farming_livestock", [0.28, 0.105, 0.465, 0.184, 0.029]),
        ("power_coal_fired", [451.62, 0.080, 0.226, 0.690, 0.046]),
        ("power_co_fired", [1627.35, 0.080, 0.227, 0.714, 0.038]),
        ("composter_low_grade", [0.25, 0.0, 0.470, 0.845, 0.045]),
        ("composter_high_grade", [0.25, 0.0, 0.470, 0.845, 0.045]),
        ("composter_in_vessel", [0.25, 0.0, 0.470, 0.845, 0.045]),
        ("waste_incinerator", [11.76, 0.0, 0.234, 0.163, 0.104]),
        ("landfill_non_hazardous", [4.97, 0.0, 0.444, 0.484, 0.140]),
        ("landfill_hazardous", [2.55, 0.0, 0.444, 0.502, 0.136]),
        (
            "waste_aggregator_national",
            [1590.72, 0.0, 0.497, 0.011, 0.032],
        ),
        (
            "waste_aggregator_regional",
            [159.07, 0.0, 0.497, 0.011, 0.032],
        ),
        ("waste_aggregator_local", [1.59, 0.0, 0.497, 0.011, 0.032]),
        ("power_biomass", [209.21, 0.167, 0.239, 0.106, 0.030]),
        ("biodiesel_virgin", [37.57, 0.138, 0.484, 0.073, 0.048]),
        ("anaerobic_digester", [8.59, 0.0, 0.225, 0.661, 0.013]),
        ("chemical_biological", [1850.60, 0.173, 0.229, 0.241, 0.056]),
        ("bioethanol_virgin", [120.87, 0.084, 0.223, 0.570, 0.019]),
        ("biodiesel_waste", [26.98, 0.076, 0.225, 0.340, 0.067]),
        ("bioprocessor", [199.61, 0.383, 0.470, 0.148, 0.014]),
    ]
}
