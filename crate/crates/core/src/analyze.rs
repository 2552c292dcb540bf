//! Post-processing of trajectories: interior peaks, dominance ranking over
//! time, overtaking events and a plain-text narrative.
//!
//! Everything works on the sample grid, truncated at the validity horizon.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::integrate::{Event, EventKind, Trajectory};

/// Peaks lower than this fraction of the series maximum (measured as
/// prominence) are treated as numerical ripple.
pub const DEFAULT_PROMINENCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub node: String,
    pub index: usize,
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedInterval {
    pub start: f64,
    pub end: f64,
    /// Node ids, largest utility first.
    pub ranking: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overtake {
    /// Crossing time, linearly interpolated between samples.
    pub time: f64,
    /// First sample at which the new order holds.
    pub sample: usize,
    pub leader: String,
    pub overtaken: String,
    /// The overtaking node took first place.
    pub takes_lead: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub node: String,
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub peaks: Vec<Peak>,
    pub failures: Vec<Failure>,
    pub dominance: Vec<RankedInterval>,
    pub overtakes: Vec<Overtake>,
    pub validity_horizon: f64,
}

/// Index of the first prominent strict interior maximum of `series`, if any.
///
/// A sample qualifies when it is strictly above both neighbours, above the
/// first and last samples, and its prominence is at least
/// `min_prominence * max(series)`.
pub fn first_peak(series: &[f64], min_prominence: f64) -> Option<usize> {
    let n = series.len();
    if n < 3 {
        return None;
    }
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (first, last) = (series[0], series[n - 1]);
    (1..n - 1).find(|&m| {
        let v = series[m];
        v > series[m - 1]
            && v > series[m + 1]
            && v > first
            && v > last
            && prominence(series, m) >= min_prominence * max
    })
}

/// Height of `series[m]` above the higher of the lowest points reached on
/// each side before climbing above it.
fn prominence(series: &[f64], m: usize) -> f64 {
    let v = series[m];
    let left = series[..m]
        .iter()
        .rev()
        .take_while(|&&x| x <= v)
        .copied()
        .fold(v, f64::min);
    let right = series[m + 1..]
        .iter()
        .take_while(|&&x| x <= v)
        .copied()
        .fold(v, f64::min);
    v - left.max(right)
}

/// Number of samples at or before the validity horizon.
fn horizon_len(traj: &Trajectory) -> usize {
    traj.times
        .iter()
        .take_while(|&&t| t <= traj.validity_horizon)
        .count()
}

pub fn find_peaks(traj: &Trajectory) -> Vec<Peak> {
    find_peaks_with(traj, DEFAULT_PROMINENCE)
}

pub fn find_peaks_with(traj: &Trajectory, min_prominence: f64) -> Vec<Peak> {
    let len = horizon_len(traj);
    (0..traj.node_ids.len())
        .filter_map(|i| {
            let series: Vec<f64> = traj.states[..len].iter().map(|s| s[i]).collect();
            first_peak(&series, min_prominence).map(|m| Peak {
                node: traj.node_ids[i].clone(),
                index: m,
                time: traj.times[m],
                value: series[m],
            })
        })
        .collect()
}

fn ranking(ids: &[String], state: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| before(ids, state, a, b));
    order
}

fn before(ids: &[String], state: &[f64], a: usize, b: usize) -> Ordering {
    state[b]
        .total_cmp(&state[a])
        .then_with(|| ids[a].cmp(&ids[b]))
}

/// Ranking intervals and pairwise overtaking events up to the horizon.
pub fn dominance_timeline(traj: &Trajectory) -> (Vec<RankedInterval>, Vec<Overtake>) {
    let len = horizon_len(traj);
    let ids = &traj.node_ids;
    let n = ids.len();
    if len == 0 || n == 0 {
        return (Vec::new(), Vec::new());
    }
    let names = |order: &[usize]| order.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();

    let mut intervals = Vec::new();
    let mut events = Vec::new();
    let mut current = ranking(ids, &traj.states[0]);
    let mut start = traj.times[0];
    for k in 1..len {
        let (prev, next) = (&traj.states[k - 1], &traj.states[k]);
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                // b was ahead of a, now a is ahead of b
                let was = before(ids, prev, b, a) == Ordering::Less;
                let now = before(ids, next, a, b) == Ordering::Less;
                if was && now {
                    let d0 = prev[a] - prev[b];
                    let d1 = next[a] - next[b];
                    let (t0, t1) = (traj.times[k - 1], traj.times[k]);
                    let frac = if d1 != d0 { -d0 / (d1 - d0) } else { 1.0 };
                    events.push((t0 + (t1 - t0) * frac.clamp(0.0, 1.0), k, a, b));
                }
            }
        }
        let order = ranking(ids, next);
        if order != current {
            intervals.push(RankedInterval {
                start,
                end: traj.times[k],
                ranking: names(&current),
            });
            start = traj.times[k];
            current = order;
        }
    }
    let end = traj.validity_horizon.max(start);
    intervals.push(RankedInterval {
        start,
        end,
        ranking: names(&current),
    });

    events.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let overtakes = events
        .into_iter()
        .map(|(time, k, a, b)| Overtake {
            time,
            sample: k,
            leader: ids[a].clone(),
            overtaken: ids[b].clone(),
            takes_lead: ranking(ids, &traj.states[k])[0] == a
                && ranking(ids, &traj.states[k - 1])[0] == b,
        })
        .collect();
    (intervals, overtakes)
}

pub fn analyze(traj: &Trajectory) -> AnalysisReport {
    let (dominance, overtakes) = dominance_timeline(traj);
    AnalysisReport {
        peaks: find_peaks(traj),
        failures: traj
            .failures()
            .filter(|e| e.time <= traj.validity_horizon)
            .map(|e| Failure {
                node: e.node.clone(),
                time: e.time,
                value: e.value,
            })
            .collect(),
        dominance,
        overtakes,
        validity_horizon: traj.validity_horizon,
    }
}

/// Peaks as trajectory events, for the events CSV.
pub fn peak_events(report: &AnalysisReport) -> Vec<Event> {
    report
        .peaks
        .iter()
        .map(|p| Event {
            kind: EventKind::Peak,
            node: p.node.clone(),
            time: p.time,
            value: p.value,
        })
        .collect()
}

/// Time-ordered findings, one line each.
pub fn narrative(traj: &Trajectory, report: &AnalysisReport) -> Vec<String> {
    let label = |id: &str| {
        traj.node_ids
            .iter()
            .position(|x| x == id)
            .and_then(|i| traj.node_names.get(i))
            .filter(|n| !n.is_empty())
            .cloned()
            .unwrap_or_else(|| id.to_string())
    };

    // (time, kind order, text)
    let mut lines: Vec<(f64, u8, String)> = Vec::new();
    for p in &report.peaks {
        lines.push((
            p.time,
            0,
            format!(
                "t={:.1}: {} peaks at {:.1} and declines",
                p.time,
                label(&p.node),
                p.value
            ),
        ));
    }
    for o in &report.overtakes {
        let mut s = format!(
            "t={:.1}: {} overtakes {}",
            o.time,
            label(&o.leader),
            label(&o.overtaken)
        );
        if o.takes_lead {
            s.push_str(" and becomes the largest firm in the district");
        }
        lines.push((o.time, 1, s));
    }
    for (k, f) in report.failures.iter().enumerate() {
        let mut s = format!("t={:.1}: {} fails", f.time, label(&f.node));
        if k == 0 {
            let _ = write!(
                s,
                "; output is unlikely to be valid beyond this first failure \
                 (validity horizon t={:.1})",
                report.validity_horizon
            );
        }
        lines.push((f.time, 2, s));
    }
    if lines.is_empty() {
        return vec!["no transitions detected before horizon".to_string()];
    }
    lines.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    lines.into_iter().map(|(_, _, s)| s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(ids: &[&str], times: Vec<f64>, series: Vec<Vec<f64>>) -> Trajectory {
        let states = (0..times.len())
            .map(|k| series.iter().map(|s| s[k]).collect())
            .collect();
        let horizon = *times.last().unwrap();
        Trajectory {
            node_ids: ids.iter().map(|s| s.to_string()).collect(),
            node_names: ids.iter().map(|s| s.to_uppercase()).collect(),
            times,
            states,
            events: Vec::new(),
            validity_horizon: horizon,
            flows: None,
        }
    }

    #[test]
    fn simple_peak() {
        assert_eq!(
            first_peak(&[1.0, 2.0, 3.0, 2.0, 1.0], DEFAULT_PROMINENCE),
            Some(2)
        );
    }

    #[test]
    fn monotone_and_constant_have_no_peak() {
        assert_eq!(first_peak(&[1.0, 2.0, 3.0, 4.0], DEFAULT_PROMINENCE), None);
        assert_eq!(first_peak(&[2.0; 6], DEFAULT_PROMINENCE), None);
    }

    #[test]
    fn ripple_is_filtered() {
        let s = [1.0, 5.0, 10.0, 10.001, 10.0005, 10.002, 8.0, 3.0];
        // 10.001 is a strict local max with prominence 0.0005 < 0.1: skipped.
        assert_eq!(first_peak(&s, DEFAULT_PROMINENCE), Some(5));
    }

    #[test]
    fn peak_must_beat_endpoints() {
        assert_eq!(
            first_peak(&[5.0, 1.0, 2.0, 1.0, 0.5], DEFAULT_PROMINENCE),
            None
        );
    }

    #[test]
    fn linear_crossing() {
        let times: Vec<f64> = (0..5).map(|k| k as f64 * 0.5).collect();
        let a: Vec<f64> = times.iter().map(|t| 2.0 - t).collect();
        let b: Vec<f64> = times.clone();
        let tr = traj(&["a", "b"], times, vec![a, b]);
        let (intervals, events) = dominance_timeline(&tr);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].leader, "b");
        assert_eq!(events[0].overtaken, "a");
        assert!((events[0].time - 1.0).abs() < 1e-12);
        assert!(events[0].takes_lead);
        assert_eq!(intervals.len(), 2);
        assert_eq!(intervals[0].ranking, vec!["a", "b"]);
        assert_eq!(intervals[1].ranking, vec!["b", "a"]);
        assert_eq!(intervals[1].end, 2.0);
    }

    #[test]
    fn equal_constant_series() {
        let tr = traj(
            &["b", "a"],
            vec![0.0, 1.0, 2.0],
            vec![vec![1.0; 3], vec![1.0; 3]],
        );
        let (intervals, events) = dominance_timeline(&tr);
        assert!(events.is_empty());
        assert_eq!(intervals.len(), 1);
        assert_eq!(intervals[0].ranking, vec!["a", "b"]);
        assert_eq!((intervals[0].start, intervals[0].end), (0.0, 2.0));
    }

    #[test]
    fn no_crossings_single_interval() {
        let tr = traj(
            &["x", "y", "z"],
            vec![0.0, 1.0, 2.0],
            vec![
                vec![3.0, 4.0, 5.0],
                vec![2.0, 2.5, 3.0],
                vec![1.0, 1.0, 1.0],
            ],
        );
        let (intervals, events) = dominance_timeline(&tr);
        assert!(events.is_empty());
        assert_eq!(intervals.len(), 1);
    }

    #[test]
    fn empty_narrative() {
        let tr = traj(&["a"], vec![0.0, 1.0], vec![vec![1.0, 2.0]]);
        let report = analyze(&tr);
        assert_eq!(
            narrative(&tr, &report),
            vec!["no transitions detected before horizon"]
        );
    }

    #[test]
    fn narrative_orders_peak_and_overtake() {
        // a peaks at t=1, b overtakes a between t=2 and t=3.
        let tr = traj(
            &["a", "b"],
            vec![0.0, 1.0, 2.0, 3.0, 4.0],
            vec![vec![1.0, 5.0, 3.0, 1.0, 0.5], vec![0.1, 0.2, 0.3, 2.0, 3.0]],
        );
        let report = analyze(&tr);
        let lines = narrative(&tr, &report);
        assert_eq!(lines.len(), 2, "{lines:?}");
        assert_eq!(lines[0], "t=1.0: A peaks at 5.0 and declines");
        assert!(lines[1].starts_with("t=2."), "{}", lines[1]);
        assert!(lines[1].contains("B overtakes A"));
    }

    #[test]
    fn failure_line_mentions_horizon() {
        let mut tr = traj(
            &["a", "b"],
            vec![0.0, 1.0, 2.0],
            vec![vec![1.0, 0.5, 0.0], vec![2.0; 3]],
        );
        tr.events.push(Event {
            kind: EventKind::Failure,
            node: "a".into(),
            time: 1.5,
            value: 1e-6,
        });
        tr.validity_horizon = 1.5;
        let report = analyze(&tr);
        assert_eq!(report.failures.len(), 1);
        let lines = narrative(&tr, &report);
        assert_eq!(lines.len(), 1);
        assert!(lines[0].contains("A fails"));
        assert!(lines[0].contains("validity horizon t=1.5"));
        // analysis grid is cut at the horizon
        assert_eq!(report.dominance.last().unwrap().end, 1.5);
    }
}
