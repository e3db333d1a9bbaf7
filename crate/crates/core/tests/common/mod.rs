//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod gen;

use std::collections::{BTreeMap, BTreeSet};

use chaosflow::crawler::{FailReason, RunResult, Verdict};
use chaosflow::rca::{BaselineStats, ErrorFinding, FindingMethod, PatternCounts};
use chaosflow::simmesh::{AppInstance, RpcRecord, RpcStatus};
use chaosflow::topology::{Relevance, Topology};
use rand::Rng;

/// Weights written out by hand rather than read from the engine.
pub fn f_status_oracle(s: RpcStatus) -> f64 {
    match s {
        RpcStatus::TimedOut => 1.0,
        RpcStatus::Code(c) if (500..600).contains(&c) => 1.0,
        RpcStatus::Code(c) if (400..500).contains(&c) => 0.5,
        RpcStatus::Code(_) => 0.2,
    }
}

pub fn f_tier_oracle(tier: u8) -> f64 {
    match tier {
        0 => 1.0,
        1 => 0.9,
        2 => 0.7,
        3 => 0.4,
        _ => 0.1,
    }
}

pub fn f_category_oracle(c: Relevance) -> f64 {
    match c {
        Relevance::Direct => 3.0,
        Relevance::Indirect => 2.0,
        Relevance::Supporting => 1.2,
        Relevance::Unrelated => 0.3,
    }
}

pub fn score_oracle(s: RpcStatus, nfr: f64, tier: u8, c: Relevance) -> f64 {
    f_status_oracle(s) * (1.0 - nfr) * f_tier_oracle(tier) * f_category_oracle(c)
}

/// One representative status per class: 503, 404, 200.
pub const GRID_STATUSES: [RpcStatus; 3] = [RpcStatus::Code(503), RpcStatus::Code(404), RpcStatus::Code(200)];
pub const GRID_NFRS: [f64; 5] = [0.0, 0.25, 0.5, 0.9, 1.0];

pub fn scoring_grid() -> Vec<(RpcStatus, u8, Relevance, f64)> {
    let mut out = Vec::new();
    for s in GRID_STATUSES {
        for tier in 0..=5u8 {
            for c in Relevance::ALL {
                for nfr in GRID_NFRS {
                    out.push((s, tier, c, nfr));
                }
            }
        }
    }
    out
}

pub fn record(callee: &str, endpoint: &str, status: RpcStatus, start: u64, end: u64) -> RpcRecord {
    RpcRecord {
        caller: "client".into(),
        callee: callee.into(),
        endpoint: endpoint.into(),
        start_ms: start,
        end_ms: end,
        status_code: status,
        injected: false,
        degraded: false,
        app_instance: AppInstance::Rider,
    }
}

pub struct SyntheticCase {
    pub log: Vec<RpcRecord>,
    pub findings: Vec<ErrorFinding>,
    pub stats: BaselineStats,
}

const STATUSES: [RpcStatus; 6] = [
    RpcStatus::Code(200),
    RpcStatus::Code(200),
    RpcStatus::Code(404),
    RpcStatus::Code(500),
    RpcStatus::Code(503),
    RpcStatus::TimedOut,
];

/// A random log over the topology's real endpoints plus one unknown callee,
/// with coarse times so that score and start ties are common.
pub fn synthetic_case(rng: &mut impl Rng, topology: &Topology, max_len: usize) -> SyntheticCase {
    let mut endpoints: Vec<(String, String)> = topology
        .services
        .values()
        .flat_map(|s| s.endpoints.iter().map(move |e| (s.name.clone(), e.path.clone())))
        .collect();
    endpoints.push(("ghost".into(), "/ghost/x".into()));
    let callers: Vec<String> =
        std::iter::once("client".to_string()).chain(topology.services.keys().cloned()).collect();
    let apps = [AppInstance::Rider, AppInstance::Driver];
    let len = rng.gen_range(0..=max_len);
    let log = (0..len)
        .map(|_| {
            let (callee, endpoint) = endpoints[rng.gen_range(0..endpoints.len())].clone();
            let start = rng.gen_range(0..20u64) * 10;
            RpcRecord {
                caller: callers[rng.gen_range(0..callers.len())].clone(),
                callee,
                endpoint,
                start_ms: start,
                end_ms: start + rng.gen_range(0..6u64) * 10,
                status_code: STATUSES[rng.gen_range(0..STATUSES.len())],
                injected: false,
                degraded: false,
                app_instance: apps[rng.gen_range(0..2)],
            }
        })
        .collect();
    let findings = (0..rng.gen_range(0..3))
        .map(|_| ErrorFinding {
            screen_id: "error".into(),
            at_ms: rng.gen_range(0..25u64) * 10,
            method: FindingMethod::Regex,
            evidence: "x".into(),
        })
        .collect();
    let mut stats = BaselineStats { runs_observed: rng.gen_range(0..4), ..Default::default() };
    for (callee, endpoint) in &endpoints {
        if rng.gen_bool(0.5) {
            let total = rng.gen_range(0..10);
            stats.patterns.insert(
                (callee.clone(), endpoint.clone()),
                PatternCounts { failures: rng.gen_range(0..=total), total },
            );
        }
    }
    SyntheticCase { log, findings, stats }
}

pub fn is_failure(s: RpcStatus) -> bool {
    !matches!(s, RpcStatus::Code(c) if (200..300).contains(&c))
}

/// `(callee, endpoint, status, start, score, f_status)` in expected ranked order.
pub type OracleEntry = (String, String, RpcStatus, u64, f64, f64);

/// Brute force: score every eligible record, sort all of them, keep the first
/// occurrence of each `(callee, endpoint, status class)`.
pub fn oracle_ranking(case: &SyntheticCase, topology: &Topology, category: impl Fn(&str, &str) -> Relevance) -> Vec<OracleEntry> {
    let cutoff = case.findings.iter().map(|f| f.at_ms).min();
    let log = &case.log;
    let mut rows: Vec<OracleEntry> = Vec::new();
    for (i, r) in log.iter().enumerate() {
        if cutoff.is_some_and(|c| r.start_ms > c) {
            continue;
        }
        let relayed = is_failure(r.status_code)
            && (0..log.len()).any(|j| {
                let c = &log[j];
                j != i
                    && is_failure(c.status_code)
                    && c.app_instance == r.app_instance
                    && c.caller == r.callee
                    && r.start_ms <= c.start_ms
                    && c.end_ms <= r.end_ms
            });
        if relayed {
            continue;
        }
        let Some(svc) = topology.services.get(&r.callee) else { continue };
        let nfr = match case.stats.patterns.get(&(r.callee.clone(), r.endpoint.clone())) {
            Some(c) => (c.failures as f64 + 1.0) / (c.total as f64 + 2.0),
            None => 0.5,
        };
        let score = score_oracle(r.status_code, nfr, svc.tier.value(), category(&r.callee, &r.endpoint));
        rows.push((r.callee.clone(), r.endpoint.clone(), r.status_code, r.start_ms, score, f_status_oracle(r.status_code)));
    }
    // Insertion sort with an explicit "a goes first" predicate.
    let before = |a: &OracleEntry, b: &OracleEntry| -> bool {
        if a.4 != b.4 {
            return a.4 > b.4;
        }
        if a.5 != b.5 {
            return a.5 > b.5;
        }
        if a.3 != b.3 {
            return a.3 < b.3;
        }
        (&a.0, &a.1, a.2) < (&b.0, &b.1, b.2)
    };
    let mut sorted: Vec<OracleEntry> = Vec::with_capacity(rows.len());
    for row in rows {
        let pos = sorted.iter().position(|s| before(&row, s)).unwrap_or(sorted.len());
        sorted.insert(pos, row);
    }
    let class = |s: RpcStatus| f_status_oracle(s).to_bits();
    let mut seen = BTreeSet::new();
    sorted.retain(|e| seen.insert((e.0.clone(), e.1.clone(), class(e.2))));
    sorted
}

/// Nearest rank by full sort: smallest value with at least `q%` of the data at or below it.
pub fn percentile_oracle(values: &[u64], q: u64) -> u64 {
    let mut v = values.to_vec();
    v.sort();
    let n = v.len() as u64;
    for (i, x) in v.iter().enumerate() {
        if (i as u64 + 1) * 100 >= q * n {
            return *x;
        }
    }
    unreachable!("q <= 100")
}

pub fn result_with(flow: &str, verdict: Verdict) -> RunResult {
    RunResult {
        flow_id: flow.into(),
        verdict,
        end_state_reached: verdict.is_pass(),
        transitions: vec![],
        screens_mosaic: vec![],
        action_count: 0,
        duration_ms: 0,
        decisions: vec![],
        assertions: vec![],
    }
}

pub fn fail_end_state() -> Verdict {
    Verdict::Fail(FailReason::EndStateNotReached)
}

pub fn counts<K: Ord + Clone>(items: impl IntoIterator<Item = K>) -> BTreeMap<K, usize> {
    let mut m = BTreeMap::new();
    for k in items {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}
