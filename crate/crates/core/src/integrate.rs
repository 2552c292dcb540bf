//! Time integration with an embedded Dormand-Prince 5(4) pair.
//!
//! Step control is the PI controller of Hairer, Nørsett & Wanner (`dopri5`),
//! with local extrapolation and the 4th-order continuous extension for dense
//! output. The system is only defined for `u >= 0`, so stage states are
//! projected onto the non-negative orthant before each evaluation. After every
//! accepted step, firms below `death_threshold` are clamped to exactly zero; a
//! zero firm has zero derivative and stays dead.
//!
//! A market switching between its free and capped branch moves the member
//! shares discontinuously (only the market total is continuous), and a seller
//! reaching capacity puts a kink in its customers' trade. Integrating through
//! either with a fixed-order method costs accuracy the error estimate does
//! not see. So each step runs with every branch pinned to its state at the
//! step start; when the solution leaves a pinned branch the crossing is
//! located on the interpolant and the step is cut back to end just past it.
//! When both branches of a market push the state onto its cap surface the
//! solution slides along it: member shares become the blend of the free and
//! capped shares that holds the offer at the cap, until the blend weight
//! reaches 0 or 1. A switch that changed branch twice within a tenth of a
//! sample interval is left to follow the state, since pinning a chattering
//! switch would stall the integrator.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate;
use crate::dynamics::{self, RhsError, Switches, Workspace};
use crate::netmodel::{MarketCap, ModelParams, Network, NetworkError, NetworkFile, Structure};

// The system is autonomous, so the node coefficients c_i are not needed.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
/// Lund stabilisation exponent of the PI controller.
const PI_BETA: f64 = 0.04;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const MAX_STEPS: usize = 5_000_000;
/// Retries allowed while homing in on one market switch.
const MAX_SWITCH_REFINES: usize = 40;
/// Interpolant points checked per step for switches crossed inside it.
const SWITCH_SCAN: usize = 8;
const SLIDE_BAND: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub t_end: f64,
    pub sample_dt: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Absolute utility floor (millions GBP) below which a firm fails.
    pub death_threshold: f64,
    /// Keep a full flow breakdown for every sample.
    pub record_flows: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            t_end: 100.0,
            sample_dt: 0.1,
            rel_tol: 1e-6,
            abs_tol: 1e-9,
            death_threshold: 1e-6,
            record_flows: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("t_end", self.t_end),
            ("sample_dt", self.sample_dt),
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be a finite value > 0 (got {v})"));
            }
        }
        if !(self.death_threshold.is_finite() && self.death_threshold >= 0.0) {
            return Err(format!(
                "death_threshold must be a finite value >= 0 (got {})",
                self.death_threshold
            ));
        }
        Ok(())
    }

    /// Output grid `0, dt, 2 dt, ...` ending exactly at `t_end`.
    pub fn sample_times(&self) -> Vec<f64> {
        let mut times = Vec::new();
        let mut k = 0u64;
        loop {
            let t = k as f64 * self.sample_dt;
            if t >= self.t_end - 1e-9 * self.sample_dt {
                break;
            }
            times.push(t);
            k += 1;
        }
        times.push(self.t_end);
        times
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Failure,
    Peak,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Failure => "Failure",
            EventKind::Peak => "Peak",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub node: String,
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub node_ids: Vec<String>,
    pub node_names: Vec<String>,
    pub times: Vec<f64>,
    /// One utility vector per sample, in node order.
    pub states: Vec<Vec<f64>>,
    pub events: Vec<Event>,
    /// First failure time, or `t_end`.
    pub validity_horizon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flows: Option<Vec<dynamics::FlowBreakdown>>,
}

impl Trajectory {
    pub fn final_state(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }

    /// Utility of node `i` over the whole grid.
    pub fn series(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[i]).collect()
    }

    pub fn failures(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.kind == EventKind::Failure)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrationError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("integration failed at t = {last_time}: {reason}")]
    Failed {
        reason: String,
        last_time: f64,
        /// Samples produced before the failure.
        partial: Box<Trajectory>,
    },
}

struct System<'a> {
    net: &'a Network,
    ws: Workspace,
    projected: Vec<f64>,
    /// Branch pinned for the current step, in the layout of `Switches`.
    branches: Vec<Option<bool>>,
    /// Markets held on their cap surface by the sliding field.
    sliding: Vec<bool>,
    /// Unclamped blend weight of each sliding market in the last evaluation.
    alpha: Vec<f64>,
    /// Offer rate of each sliding market under its free and capped branch
    /// (the other sliding markets free) in the last evaluation.
    rates: Vec<(f64, f64)>,
    forced: Vec<Option<bool>>,
    delta: Vec<Vec<f64>>,
}

impl<'a> System<'a> {
    fn new(net: &'a Network) -> Self {
        let m = net.markets.len();
        Self {
            net,
            ws: Workspace::new(net),
            projected: vec![0.0; net.len()],
            branches: Vec::new(),
            sliding: vec![false; m],
            alpha: vec![f64::NAN; m],
            rates: vec![(0.0, 0.0); m],
            forced: Vec::new(),
            delta: vec![vec![0.0; net.len()]; m],
        }
    }

    /// Pins every switch for which `pinnable(k)` holds to its branch in
    /// `sw`; the rest follow the state. Sliding markets are left alone.
    /// Returns whether anything changed.
    fn pin(&mut self, sw: &Switches, pinnable: impl Fn(usize) -> bool) -> bool {
        let next: Vec<Option<bool>> = (0..sw.len())
            .map(|k| {
                if self.is_sliding(k) {
                    None
                } else {
                    pinnable(k).then_some(sw.capped[k])
                }
            })
            .collect();
        let changed = next != self.branches;
        self.branches = next;
        changed
    }

    fn is_sliding(&self, k: usize) -> bool {
        self.sliding.get(k).copied().unwrap_or(false)
    }

    /// Rate of change of market `k`'s offer along `du`.
    fn offer_rate(&self, k: usize, du: &[f64]) -> f64 {
        self.net.markets[k]
            .members
            .iter()
            .map(|&i| {
                let node = &self.net.nodes[i];
                node.params.rho / node.markets.len() as f64 * du[i]
            })
            .sum()
    }

    /// Whether both branches of market `k` push the state at `y` onto its
    /// cap surface, in which case it starts sliding.
    fn try_slide(&mut self, k: usize, y: &[f64], scratch: &mut [f64]) -> Result<bool, RhsError> {
        let (branch, was) = (self.branches[k], self.sliding[k]);
        self.branches[k] = None;
        self.sliding[k] = true;
        self.eval(y, scratch)?;
        let (free, capped) = self.rates[k];
        let slides = free > 0.0 && capped < 0.0;
        if !slides {
            self.branches[k] = branch;
            self.sliding[k] = was;
        }
        Ok(slides)
    }

    /// Ends sliding for markets whose blend weight left `[0, 1]` at the last
    /// evaluation, pinning the branch the field now points into.
    fn release(&mut self) -> bool {
        let mut changed = false;
        for k in 0..self.sliding.len() {
            if !self.sliding[k] {
                continue;
            }
            let a = self.alpha[k];
            if leaves_surface(a) {
                self.sliding[k] = false;
                self.branches[k] = Some(a >= 1.0);
                changed = true;
            }
        }
        changed
    }

    fn eval(&mut self, y: &[f64], dy: &mut [f64]) -> Result<(), RhsError> {
        for (p, &v) in self.projected.iter_mut().zip(y) {
            *p = v.max(0.0);
        }
        if !self.sliding.contains(&true) {
            return dynamics::rhs_into_with(
                self.net,
                &self.projected,
                dy,
                &mut self.ws,
                &self.branches,
            );
        }

        // Market sales enter the derivative additively, one market at a
        // time, so the sliding field is the free field plus a blend of each
        // sliding market's capped-minus-free difference, with weights that
        // hold every sliding offer at its cap.
        let on: Vec<usize> = (0..self.sliding.len())
            .filter(|&k| self.sliding[k])
            .collect();
        self.forced.clone_from(&self.branches);
        for &k in &on {
            self.forced[k] = Some(false);
        }
        dynamics::rhs_into_with(self.net, &self.projected, dy, &mut self.ws, &self.forced)?;
        for &k in &on {
            self.forced[k] = Some(true);
            let mut delta = std::mem::take(&mut self.delta[k]);
            dynamics::rhs_into_with(
                self.net,
                &self.projected,
                &mut delta,
                &mut self.ws,
                &self.forced,
            )?;
            for (d, f) in delta.iter_mut().zip(dy.iter()) {
                *d -= f;
            }
            self.delta[k] = delta;
            self.forced[k] = Some(false);
        }
        let mut a: Vec<Vec<f64>> = on
            .iter()
            .map(|&k| {
                on.iter()
                    .map(|&l| self.offer_rate(k, &self.delta[l]))
                    .collect()
            })
            .collect();
        let mut b: Vec<f64> = on.iter().map(|&k| -self.offer_rate(k, dy)).collect();
        for (idx, &k) in on.iter().enumerate() {
            self.rates[k] = (-b[idx], a[idx][idx] - b[idx]);
        }
        let weights = solve(&mut a, &mut b);
        for (idx, &k) in on.iter().enumerate() {
            let w = weights.as_ref().map_or(f64::NAN, |w| w[idx]);
            self.alpha[k] = w;
            let w = if w.is_nan() { 0.0 } else { w };
            for (d, &delta) in dy.iter_mut().zip(&self.delta[k]) {
                *d += w * delta;
            }
        }
        Ok(())
    }
}

/// Whether a blend weight ends sliding. Within a step the weight is used
/// unclamped, so the sliding field continues smoothly past its exit like a
/// pinned branch; the band keeps rounding near a tangency (weight tending to
/// 0 or 1) from releasing the market early.
fn leaves_surface(a: f64) -> bool {
    !(-SLIDE_BAND..=1.0 + SLIDE_BAND).contains(&a)
}

/// Solves the small dense system `a x = b` by elimination with partial
/// pivoting; `None` if it is singular.
fn solve(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let m = b.len();
    for c in 0..m {
        let p = (c..m).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c] == 0.0 || !a[p][c].is_finite() {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..m {
            let f = a[r][c] / a[c][c];
            for k in c..m {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; m];
    for c in (0..m).rev() {
        let s: f64 = (c + 1..m).map(|k| a[c][k] * x[k]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    Some(x)
}

fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], cfg: &SimConfig) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sk = cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs());
            (e / sk).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn initial_step(
    sys: &mut System<'_>,
    y0: &[f64],
    f0: &[f64],
    cfg: &SimConfig,
    hmax: f64,
) -> Result<f64, RhsError> {
    let sk: Vec<f64> = y0
        .iter()
        .map(|y| cfg.abs_tol + cfg.rel_tol * y.abs())
        .collect();
    let dnf: f64 = f0.iter().zip(&sk).map(|(f, s)| (f / s).powi(2)).sum();
    let dny: f64 = y0.iter().zip(&sk).map(|(y, s)| (y / s).powi(2)).sum();
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 {
        1e-6
    } else {
        0.01 * (dny / dnf).sqrt()
    };
    h = h.min(hmax);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h * f).collect();
    let mut f1 = vec![0.0; y0.len()];
    sys.eval(&y1, &mut f1)?;
    let der2 = f1
        .iter()
        .zip(f0)
        .zip(&sk)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        .sqrt()
        / h;
    let der12 = der2.abs().max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 {
        (h * 1e-3).max(1e-6)
    } else {
        (0.01 / der12).powf(0.2)
    };
    Ok((100.0 * h).min(h1).min(hmax))
}

/// Continuous extension over one accepted step `[t, t + h]`.
struct Dense {
    t: f64,
    h: f64,
    r: [Vec<f64>; 5],
}

impl Dense {
    fn at(&self, i: usize, time: f64) -> f64 {
        let theta = (time - self.t) / self.h;
        let th1 = 1.0 - theta;
        let r = &self.r;
        r[0][i] + theta * (r[1][i] + th1 * (r[2][i] + theta * (r[3][i] + th1 * r[4][i])))
    }

    fn state(&self, time: f64, out: &mut [f64]) {
        for (i, v) in out.iter_mut().enumerate() {
            *v = self.at(i, time).max(0.0);
        }
    }

    /// Time at which component `i` falls through `level`, known to lie
    /// inside the step.
    fn crossing(&self, i: usize, level: f64) -> f64 {
        let (mut lo, mut hi) = (self.t, self.t + self.h);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.at(i, mid) >= level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

/// Integrates the district from its calibrated initial state.
pub fn simulate(net: &Network, cfg: &SimConfig) -> Result<Trajectory, IntegrationError> {
    simulate_from(net, &net.initial_state(), cfg)
}

/// Integrates from an arbitrary non-negative initial state.
pub fn simulate_from(
    net: &Network,
    u0: &[f64],
    cfg: &SimConfig,
) -> Result<Trajectory, IntegrationError> {
    cfg.validate().map_err(IntegrationError::InvalidConfig)?;
    if u0.len() != net.len() {
        return Err(IntegrationError::InvalidConfig(format!(
            "initial state has {} entries for {} nodes",
            u0.len(),
            net.len()
        )));
    }
    if let Some(i) = u0.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(IntegrationError::InvalidConfig(format!(
            "initial utility of node `{}` must be finite and >= 0 (got {})",
            net.nodes[i].id, u0[i]
        )));
    }

    let n = net.len();
    let grid = cfg.sample_times();
    let mut out = Trajectory {
        node_ids: net.nodes.iter().map(|x| x.id.clone()).collect(),
        node_names: net.nodes.iter().map(|x| x.name.clone()).collect(),
        times: Vec::with_capacity(grid.len()),
        states: Vec::with_capacity(grid.len()),
        events: Vec::new(),
        validity_horizon: cfg.t_end,
        flows: cfg.record_flows.then(Vec::new),
    };

    let mut y = u0.to_vec();
    for (i, v) in y.iter_mut().enumerate() {
        if *v > 0.0 && *v < cfg.death_threshold {
            out.events.push(Event {
                kind: EventKind::Failure,
                node: net.nodes[i].id.clone(),
                time: 0.0,
                value: *v,
            });
            *v = 0.0;
        }
    }

    let mut sys = System::new(net);
    let fail = |out: Trajectory, t: f64, reason: String| IntegrationError::Failed {
        reason,
        last_time: t,
        partial: Box::new(finish(out, cfg)),
    };

    let mut next_sample = 0;
    push_sample(net, &mut out, grid[0], y.clone());
    next_sample += 1;

    let mut sw_start = Switches::default();
    let mut sw_end = Switches::default();
    let mut sw_probe = Switches::default();
    let mut sw_bisect = Switches::default();
    dynamics::switches(net, &y, &mut sw_start);
    // Times of the last two branch changes of each switching function.
    let mut flips = vec![[f64::NEG_INFINITY; 2]; sw_start.len()];
    let mut repinned = vec![false; sw_start.len()];
    let chatter = 0.1 * cfg.sample_dt;
    // A function that changed branch twice within the window is chattering
    // and is left to follow the state.
    let window = |t: f64, k: usize, flips: &[[f64; 2]]| t - flips[k][0] > chatter;
    sys.pin(&sw_start, |k| window(0.0, k, &flips));

    let mut k1 = vec![0.0; n];
    if let Err(e) = sys.eval(&y, &mut k1) {
        return Err(fail(out, 0.0, e.to_string()));
    }
    let hmax = cfg.t_end;
    let mut h = match initial_step(&mut sys, &y, &k1, cfg, hmax) {
        Ok(h) => h,
        Err(e) => return Err(fail(out, 0.0, e.to_string())),
    };

    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut probe = vec![0.0; n];
    let mut crossed: Vec<(usize, f64)> = Vec::new();
    let mut flipped: Vec<usize> = Vec::new();
    let mut scratch = vec![0.0; n];
    let mut exit_capped = vec![false; net.markets.len()];
    let n_markets = net.markets.len();

    let mut t = 0.0_f64;
    let mut facold = 1e-4_f64;
    let mut reject = false;
    let mut refines = 0usize;
    let mut steps = 0usize;
    let expo1 = 0.2 - PI_BETA * 0.75;

    while t < cfg.t_end {
        steps += 1;
        if steps > MAX_STEPS {
            return Err(fail(out, t, format!("exceeded {MAX_STEPS} steps")));
        }
        if !(h.is_finite()) || 0.1 * h <= t.abs().max(1.0) * f64::EPSILON {
            return Err(fail(out, t, format!("step size underflow (h = {h:e})")));
        }
        let mut last = false;
        // Never stretch a step that was cut back to a switch.
        let stretch = if refines > 0 { 1.0 } else { 1.01 };
        if t + stretch * h >= cfg.t_end {
            h = cfg.t_end - t;
            last = true;
        }

        let stages = (|| -> Result<(), RhsError> {
            for i in 0..n {
                stage[i] = y[i] + h * A21 * k1[i];
            }
            sys.eval(&stage, &mut k2)?;
            for i in 0..n {
                stage[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
            }
            sys.eval(&stage, &mut k3)?;
            for i in 0..n {
                stage[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            sys.eval(&stage, &mut k4)?;
            for i in 0..n {
                stage[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            sys.eval(&stage, &mut k5)?;
            for i in 0..n {
                stage[i] = y[i]
                    + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            sys.eval(&stage, &mut k6)?;
            for i in 0..n {
                y_new[i] = y[i]
                    + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            sys.eval(&y_new, &mut k7)
        })();
        if let Err(e) = stages {
            return Err(fail(out, t, e.to_string()));
        }

        for i in 0..n {
            err[i] =
                h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let e = error_norm(&err, &y, &y_new, cfg);
        if !e.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            return Err(fail(out, t, "non-finite state".to_string()));
        }

        let fac11 = e.powf(expo1);
        let fac = (fac11 / facold.powf(PI_BETA) / SAFETY).clamp(1.0 / MAX_FACTOR, 1.0 / MIN_FACTOR);
        let mut h_new = h / fac;

        if e <= 1.0 {
            let dense = Dense {
                t,
                h,
                r: [
                    y.clone(),
                    y.iter().zip(&y_new).map(|(a, b)| b - a).collect(),
                    (0..n).map(|i| h * k1[i] - (y_new[i] - y[i])).collect(),
                    (0..n)
                        .map(|i| {
                            let diff = y_new[i] - y[i];
                            diff - h * k7[i] - (h * k1[i] - diff)
                        })
                        .collect(),
                    (0..n)
                        .map(|i| {
                            h * (D1 * k1[i]
                                + D3 * k3[i]
                                + D4 * k4[i]
                                + D5 * k5[i]
                                + D6 * k6[i]
                                + D7 * k7[i])
                        })
                        .collect(),
                ],
            };
            let t_new = if last { cfg.t_end } else { t + h };

            // Pinned branches the solution has left during this step. The
            // interpolant is scanned so that a switch crossed and recrossed
            // within one step is not missed.
            dynamics::switches(net, &y_new, &mut sw_end);
            crossed.clear();
            if refines < MAX_SWITCH_REFINES && sys.branches.iter().any(Option::is_some) {
                let mut prev = t;
                for j in 1..=SWITCH_SCAN {
                    let tj = t + h * j as f64 / SWITCH_SCAN as f64;
                    let sw = if j == SWITCH_SCAN {
                        &sw_end
                    } else {
                        dense.state(tj, &mut probe);
                        dynamics::switches(net, &probe, &mut sw_probe);
                        &sw_probe
                    };
                    for (k, pin) in sys.branches.iter().enumerate() {
                        if let Some(capped) = *pin {
                            if sw.capped[k] != capped {
                                let ts = leaves_branch(
                                    net,
                                    &dense,
                                    k,
                                    capped,
                                    (prev, tj),
                                    &mut scratch,
                                    &mut sw_bisect,
                                );
                                crossed.push((k, ts));
                            }
                        }
                    }
                    if !crossed.is_empty() {
                        break;
                    }
                    prev = tj;
                }
            }
            if refines < MAX_SWITCH_REFINES && sys.sliding.contains(&true) {
                // Blend weights from the last stage evaluation, at `y_new`.
                for k in 0..n_markets {
                    let a = sys.alpha[k];
                    if sys.sliding[k] && leaves_surface(a) {
                        exit_capped[k] = a >= 1.0;
                        match sliding_exit(&mut sys, &dense, k, &mut probe, &mut scratch) {
                            Ok(ts) => crossed.push((k, ts)),
                            Err(e) => return Err(fail(out, t, e.to_string())),
                        }
                    }
                }
            }
            if !crossed.is_empty() {
                let margin = 1e-9 * t.abs().max(1.0);
                let ts = crossed.iter().map(|c| c.1).fold(t_new, f64::min);
                if ts - t <= margin {
                    // Leaves its branch right at the step start: repin (or,
                    // the second time, unpin) and redo the step.
                    for &(k, tk) in &crossed {
                        if tk - t <= margin {
                            if sys.is_sliding(k) {
                                sys.sliding[k] = false;
                                sys.branches[k] = Some(exit_capped[k]);
                                continue;
                            }
                            if k < n_markets {
                                match sys.try_slide(k, &y, &mut probe) {
                                    Ok(true) => continue,
                                    Ok(false) => {}
                                    Err(e) => return Err(fail(out, t, e.to_string())),
                                }
                            }
                            sys.branches[k] = if repinned[k] {
                                None
                            } else {
                                Some(sw_end.capped[k])
                            };
                            repinned[k] = true;
                        }
                    }
                    refines += 1;
                    if let Err(e) = sys.eval(&y, &mut k1) {
                        return Err(fail(out, t, e.to_string()));
                    }
                    continue;
                }
                if t_new - ts > margin {
                    refines += 1;
                    h = ts - t + 0.5 * margin;
                    continue;
                }
            }
            refines = 0;
            repinned.iter_mut().for_each(|r| *r = false);
            facold = e.max(1e-4);

            // Failures inside this step.
            let mut died_at: BTreeMap<usize, f64> = BTreeMap::new();
            for i in 0..n {
                if y[i] > 0.0 && y_new[i] < cfg.death_threshold {
                    let tf = if y[i] >= cfg.death_threshold {
                        dense.crossing(i, cfg.death_threshold).min(t_new)
                    } else {
                        t
                    };
                    out.events.push(Event {
                        kind: EventKind::Failure,
                        node: net.nodes[i].id.clone(),
                        time: tf,
                        value: dense.at(i, tf).max(0.0),
                    });
                    died_at.insert(i, tf);
                    y_new[i] = 0.0;
                } else if y_new[i] < 0.0 {
                    y_new[i] = 0.0;
                }
            }

            while next_sample < grid.len() && grid[next_sample] <= t_new {
                let ts = grid[next_sample];
                let state: Vec<f64> = if ts >= t_new {
                    y_new.clone()
                } else {
                    (0..n)
                        .map(|i| match died_at.get(&i) {
                            Some(&tf) if ts >= tf => 0.0,
                            _ if y[i] == 0.0 => 0.0,
                            _ => dense.at(i, ts).max(0.0),
                        })
                        .collect()
                };
                push_sample(net, &mut out, ts, state);
                next_sample += 1;
            }

            std::mem::swap(&mut y, &mut y_new);
            if !died_at.is_empty() {
                dynamics::switches(net, &y, &mut sw_end);
            }
            flipped.clear();
            for k in 0..sw_end.len() {
                if sw_end.capped[k] != sw_start.capped[k] && !sys.is_sliding(k) {
                    flips[k] = [flips[k][1], t_new];
                    if k < n_markets {
                        flipped.push(k);
                    }
                }
            }
            std::mem::swap(&mut sw_start, &mut sw_end);
            t = t_new;
            let mut repin = sys.pin(&sw_start, |k| window(t, k, &flips));
            if sys.sliding.contains(&true) {
                // Blend weights from the last evaluation are at the new state
                // unless a failure has since zeroed part of it.
                if !died_at.is_empty() {
                    if let Err(e) = sys.eval(&y, &mut k1) {
                        return Err(fail(out, t, e.to_string()));
                    }
                }
                repin |= sys.release();
            }
            for &k in &flipped {
                match sys.try_slide(k, &y, &mut probe) {
                    Ok(slides) => repin |= slides,
                    Err(e) => return Err(fail(out, t, e.to_string())),
                }
            }
            if died_at.is_empty() && !repin {
                std::mem::swap(&mut k1, &mut k7);
            } else if let Err(e) = sys.eval(&y, &mut k1) {
                return Err(fail(out, t, e.to_string()));
            }
            if last {
                break;
            }
            h_new = h_new.min(hmax);
            if reject {
                h_new = h_new.min(h);
                reject = false;
            }
        } else {
            h_new = h / (1.0 / MIN_FACTOR).min(fac11 / SAFETY);
            reject = true;
        }
        h = h_new;
    }

    Ok(finish(out, cfg))
}

/// Time inside `(lo, hi]` at which switching function `k` leaves the pinned
/// branch `capped`, by bisection on the interpolant. The pinned
/// right-hand side is smooth over the step, so the interpolant is accurate up
/// to and past the switch.
fn leaves_branch(
    net: &Network,
    dense: &Dense,
    k: usize,
    capped: bool,
    (mut lo, mut hi): (f64, f64),
    probe: &mut [f64],
    sw: &mut Switches,
) -> f64 {
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        dense.state(mid, probe);
        dynamics::switches(net, probe, sw);
        if sw.capped[k] == capped {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// First time inside the step at which sliding market `k`'s blend weight
/// leaves `[0, 1]`, by bisection on the interpolant.
fn sliding_exit(
    sys: &mut System,
    dense: &Dense,
    k: usize,
    probe: &mut [f64],
    scratch: &mut [f64],
) -> Result<f64, RhsError> {
    let (mut lo, mut hi) = (dense.t, dense.t + dense.h);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        dense.state(mid, probe);
        sys.eval(probe, scratch)?;
        let a = sys.alpha[k];
        if !leaves_surface(a) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

fn push_sample(net: &Network, out: &mut Trajectory, t: f64, state: Vec<f64>) {
    if let Some(flows) = out.flows.as_mut() {
        // State is non-negative and the derivative was already finite here.
        if let Ok((_, f)) = dynamics::rhs(net, &state) {
            flows.push(f);
        }
    }
    out.times.push(t);
    out.states.push(state);
}

fn finish(mut out: Trajectory, cfg: &SimConfig) -> Trajectory {
    out.events.sort_by(|a, b| a.time.total_cmp(&b.time));
    out.validity_horizon = out.failures().map(|e| e.time).fold(cfg.t_end, f64::min);
    out
}

/// Changes applied to a network before a scenario run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Overrides {
    /// Multiplies every node's `u0` (auto caps follow).
    pub u0_scale: Option<f64>,
    /// Multiplies every explicit market cap.
    pub cap_scale: Option<f64>,
    /// Per-node parameter replacements, applied before scaling.
    pub nodes: BTreeMap<String, ParamOverride>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamOverride {
    pub u0: Option<f64>,
    pub beta: Option<f64>,
    pub rho: Option<f64>,
    pub epsilon: Option<f64>,
    pub d: Option<f64>,
}

impl ParamOverride {
    fn apply(&self, p: &mut ModelParams) {
        if let Some(v) = self.u0 {
            p.u0 = v;
        }
        if let Some(v) = self.beta {
            p.beta = v;
        }
        if let Some(v) = self.rho {
            p.rho = v;
        }
        if let Some(v) = self.epsilon {
            p.epsilon = v;
        }
        if let Some(v) = self.d {
            p.d = v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub file: NetworkFile,
    pub overrides: Overrides,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid override: {0}")]
    Override(String),
    #[error(transparent)]
    Integration(#[from] IntegrationError),
}

#[derive(Debug)]
pub struct ScenarioOutcome {
    pub name: String,
    pub result: Result<Trajectory, ScenarioError>,
}

/// Builds the network for one scenario, applying its overrides.
pub fn scenario_network(s: &Scenario) -> Result<Network, ScenarioError> {
    let ov = &s.overrides;
    for (label, v) in [("u0_scale", ov.u0_scale), ("cap_scale", ov.cap_scale)] {
        if let Some(v) = v {
            if !(v.is_finite() && v > 0.0) {
                return Err(ScenarioError::Override(format!(
                    "{label} must be > 0 (got {v})"
                )));
            }
        }
    }
    let mut file = s.file.clone();
    if let Some(id) = ov
        .nodes
        .keys()
        .find(|id| !file.nodes.iter().any(|n| &n.id == *id))
    {
        return Err(ScenarioError::Override(format!("unknown node `{id}`")));
    }
    if let Some(scale) = ov.cap_scale {
        for m in &mut file.markets {
            if let MarketCap::Explicit(v) = &mut m.cap {
                *v *= scale;
            }
        }
    }
    let structure = Structure::build(&file)?;
    let (mut params, _) = calibrate::calibrate_nodes(&file, &structure.roles)?;
    for (node, p) in file.nodes.iter().zip(params.iter_mut()) {
        if let Some(o) = ov.nodes.get(&node.id) {
            o.apply(p);
        }
        if let Some(scale) = ov.u0_scale {
            p.u0 *= scale;
        }
    }
    Ok(Network::from_structure(&file, structure, params)?)
}

/// Runs independent scenarios in parallel. Results keep input order and a
/// failing scenario does not stop the others.
pub fn run_scenario_batch(scenarios: &[Scenario], cfg: &SimConfig) -> Vec<ScenarioOutcome> {
    scenarios
        .par_iter()
        .map(|s| ScenarioOutcome {
            name: s.name.clone(),
            result: scenario_network(s).and_then(|net| Ok(simulate(&net, cfg)?)),
        })
        .collect()
}
