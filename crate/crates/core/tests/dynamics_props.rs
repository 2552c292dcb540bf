mod common;

use common::{max_rel_err, random_network, random_state, rel_err, rng, GenOptions, Oracle};
use firmweb::dynamics::{self, Workspace};
use proptest::prelude::*;

const CASES: u32 = 256;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(CASES)
}

#[test]
fn rhs_matches_brute_force_oracle() {
    let opts = GenOptions::default();
    let mut worst = 0.0f64;
    for seed in 0..300 {
        let mut r = rng(seed);
        let net = random_network(&mut r, &opts);
        let oracle = Oracle::new(&net);
        for _ in 0..4 {
            let u = random_state(&mut r, &net);
            let (du, _) = dynamics::rhs(&net, &u).unwrap();
            let want = oracle.rhs(&u);
            let err = max_rel_err(&du, &want);
            worst = worst.max(err);
            assert!(err < 1e-12, "seed {seed}: {du:?} vs {want:?} (err {err:e})");
        }
    }
    eprintln!("worst relative deviation from oracle: {worst:e}");
}

#[test]
fn pointwise_functions_match_oracle() {
    let opts = GenOptions::default();
    for seed in 1000..1200 {
        let mut r = rng(seed);
        let net = random_network(&mut r, &opts);
        let oracle = Oracle::new(&net);
        let u = random_state(&mut r, &net);
        for &(j, i) in &net.links {
            let a = dynamics::demand(&net, i, j, &u);
            assert!(rel_err(a, oracle.demand(i, j, &u)) < 1e-12);
            let a = dynamics::trade(&net, j, i, &u);
            assert!(rel_err(a, oracle.trade(j, i, &u)) < 1e-12);
        }
        let ext = dynamics::external_sales(&net, &u);
        for i in 0..net.len() {
            assert!(rel_err(dynamics::penalty(&net, i, &u), oracle.penalty(i, &u)) < 1e-12);
            assert!(rel_err(ext.per_node[i], oracle.external(i, &u)) < 1e-12);
            let b = dynamics::boundary(&net, i, &u, &ext);
            assert!(
                rel_err(b, oracle.boundary(i, &u)) < 1e-12,
                "seed {seed} node {i}"
            );
        }
    }
}

#[test]
fn workspace_path_equals_allocating_path() {
    let opts = GenOptions::default();
    for seed in 2000..2100 {
        let mut r = rng(seed);
        let net = random_network(&mut r, &opts);
        let mut ws = Workspace::new(&net);
        let mut du = vec![0.0; net.len()];
        for _ in 0..3 {
            let u = random_state(&mut r, &net);
            dynamics::rhs_into(&net, &u, &mut du, &mut ws).unwrap();
            let (want, flows) = dynamics::rhs(&net, &u).unwrap();
            assert_eq!(du, want);
            assert!(max_rel_err(&flows.derivative(&net), &want) < 1e-14);
        }
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn flow_invariants(seed in any::<u64>()) {
        let mut r = rng(seed);
        let net = random_network(&mut r, &GenOptions::default());
        let u = random_state(&mut r, &net);
        let (du, flows) = dynamics::rhs(&net, &u).unwrap();

        for (i, f) in flows.nodes.iter().enumerate() {
            let p = &net.nodes[i].params;
            prop_assert!((0.0..=1.0).contains(&f.penalty));
            let bound = f.demand_on.min(p.rho * u[i]);
            prop_assert!(
                (f.sales - bound).abs() <= 1e-9 * bound.max(f.sales),
                "seller {i}: sold {} vs min(D, rho u) = {bound}", f.sales
            );
            let need = p.beta * u[i];
            prop_assert!(f.purchases <= need * (1.0 + 1e-12), "buyer {i} over-procured");
            if u[i] == 0.0 {
                prop_assert_eq!(du[i], 0.0);
            }
            prop_assert!(du[i].is_finite());
        }
        for (k, m) in flows.markets.iter().enumerate() {
            let want = m.offered.min(net.markets[k].cap);
            prop_assert!(
                (m.sold - want).abs() <= 1e-9 * want.max(m.sold),
                "market {k}: sold {} vs {want}", m.sold
            );
        }
    }

    #[test]
    fn buyer_gets_full_supply_when_no_supplier_is_bound(seed in any::<u64>()) {
        let mut r = rng(seed);
        let net = random_network(&mut r, &GenOptions::default());
        let u = random_state(&mut r, &net);
        let (_, flows) = dynamics::rhs(&net, &u).unwrap();
        for i in 0..net.len() {
            let free = net.suppliers[i].iter().all(|&j| !flows.nodes[j].capacity_bound);
            let total: f64 = net.suppliers[i].iter().map(|&j| u[j]).sum();
            if free && total > 0.0 {
                let need = net.nodes[i].params.beta * u[i];
                prop_assert!(rel_err(flows.nodes[i].purchases, need) < 1e-12);
            }
        }
    }

    #[test]
    fn zero_state_is_fixed_point(seed in any::<u64>()) {
        let mut r = rng(seed);
        let net = random_network(&mut r, &GenOptions::default());
        let (du, _) = dynamics::rhs(&net, &vec![0.0; net.len()]).unwrap();
        prop_assert!(du.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn homogeneous_of_degree_one(seed in any::<u64>(), lambda in 0.01f64..100.0) {
        let mut r = rng(seed);
        let net = random_network(&mut r, &GenOptions::default());
        let u = random_state(&mut r, &net);
        let (du, _) = dynamics::rhs(&net, &u).unwrap();

        let mut scaled = net.clone();
        for m in &mut scaled.markets {
            m.cap *= lambda;
        }
        let us: Vec<f64> = u.iter().map(|v| v * lambda).collect();
        let (dus, _) = dynamics::rhs(&scaled, &us).unwrap();
        let want: Vec<f64> = du.iter().map(|v| v * lambda).collect();
        prop_assert!(max_rel_err(&dus, &want) < 1e-12);
    }
}
