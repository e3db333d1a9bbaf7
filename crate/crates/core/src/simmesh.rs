//! Deterministic virtual-time execution of one request through a topology.
//!
//! Timing rules for a call that reaches service `S` at `t0`:
//! - `S` spends `base_latency_ms + jitter` of its own, then runs its call plan
//!   stage by stage. Calls in a stage all start together; the stage ends at the
//!   latest observed child end.
//! - An injected abort answers at `t0 + 1` without running `S`. An injected
//!   timeout is observed at `t0 + budget`. Injected latency is added to `S`'s end.
//! - Whenever `S` would answer after `t0 + budget`, the caller observes `timed_out`
//!   at exactly `t0 + budget` and keeps only the child spans that finished by then.
//! - A failed child on an actually non-critical edge is replaced by its fallback
//!   marker; a failed child on an actually critical edge fails `S` with 500 once
//!   the stage completes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::havoc::{apply_fault, FaultEffect, HavocHeaders};
use crate::seed;
use crate::topology::{Criticality, DegradationMarker, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown entry point `{0}`")]
    UnknownEntry(String),
    #[error("duplicate app instance `{0}` in merged logs")]
    DuplicateApp(AppInstance),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AppInstance {
    Rider,
    Driver,
    Eats,
    #[default]
    None,
}

impl AppInstance {
    pub fn as_str(self) -> &'static str {
        match self {
            AppInstance::Rider => "rider",
            AppInstance::Driver => "driver",
            AppInstance::Eats => "eats",
            AppInstance::None => "none",
        }
    }

    /// Caller name recorded on the request the app itself issues.
    pub fn client_name(self) -> &'static str {
        match self {
            AppInstance::None => "client",
            other => other.as_str(),
        }
    }
}

impl fmt::Display for AppInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RpcStatus {
    Code(u16),
    #[serde(with = "timed_out_marker")]
    TimedOut,
}

mod timed_out_marker {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("timed_out")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "timed_out" {
            Ok(())
        } else {
            Err(D::Error::custom(format!("expected `timed_out`, got `{s}`")))
        }
    }
}

impl RpcStatus {
    pub const OK: RpcStatus = RpcStatus::Code(200);

    pub fn is_success(self) -> bool {
        matches!(self, RpcStatus::Code(c) if (200..300).contains(&c))
    }

    pub fn is_failure(self) -> bool {
        !self.is_success()
    }
}

impl fmt::Display for RpcStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RpcStatus::Code(c) => write!(f, "{c}"),
            RpcStatus::TimedOut => f.write_str("timed_out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpcRecord {
    pub caller: String,
    pub callee: String,
    pub endpoint: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub status_code: RpcStatus,
    pub injected: bool,
    pub degraded: bool,
    pub app_instance: AppInstance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceTree {
    pub root: RpcRecord,
    pub children: Vec<TraceTree>,
}

impl TraceTree {
    pub fn len(&self) -> usize {
        1 + self.children.iter().map(TraceTree::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> impl Iterator<Item = &RpcRecord> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            let node = stack.pop()?;
            stack.extend(node.children.iter().rev());
            Some(&node.root)
        })
    }

    /// Every child interval lies within its parent's, recursively.
    pub fn is_contained(&self) -> bool {
        self.children.iter().all(|c| {
            c.root.start_ms >= self.root.start_ms && c.root.end_ms <= self.root.end_ms && c.is_contained()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponsePayload {
    pub status_code: RpcStatus,
    pub degradation_markers: BTreeSet<DegradationMarker>,
}

impl ResponsePayload {
    pub fn ok() -> Self {
        Self { status_code: RpcStatus::OK, degradation_markers: BTreeSet::new() }
    }

    pub fn failed(status_code: RpcStatus) -> Self {
        Self { status_code, degradation_markers: BTreeSet::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VirtualClock {
    now_ms: u64,
}

impl VirtualClock {
    pub fn new(now_ms: u64) -> Self {
        Self { now_ms }
    }

    pub fn now(&self) -> u64 {
        self.now_ms
    }

    pub fn advance(&mut self, ms: u64) -> u64 {
        self.now_ms += ms;
        self.now_ms
    }

    /// Moves forward to `t`; never moves backward.
    pub fn advance_to(&mut self, t: u64) -> u64 {
        self.now_ms = self.now_ms.max(t);
        self.now_ms
    }
}

/// Where in a run a request happens; feeds the per-RPC seed derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestContext {
    pub seed: u64,
    pub request_seq: u64,
    pub start_ms: u64,
    pub app: AppInstance,
}

impl RequestContext {
    pub fn new(seed: u64) -> Self {
        Self { seed, request_seq: 0, start_ms: 0, app: AppInstance::None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub trace: TraceTree,
    pub payload: ResponsePayload,
    pub log: Vec<RpcRecord>,
}

impl Execution {
    pub fn duration_ms(&self) -> u64 {
        self.trace.root.end_ms - self.trace.root.start_ms
    }
}

pub fn execute_request(
    topology: &Topology,
    flow_entry: &str,
    headers: &HavocHeaders,
    seed: u64,
) -> Result<Execution, SimError> {
    execute_at(topology, flow_entry, headers, RequestContext::new(seed))
}

pub fn execute_at(
    topology: &Topology,
    flow_entry: &str,
    headers: &HavocHeaders,
    ctx: RequestContext,
) -> Result<Execution, SimError> {
    let entry = topology
        .entry_points
        .get(flow_entry)
        .ok_or_else(|| SimError::UnknownEntry(flow_entry.to_string()))?;
    let exec = Executor { topology, headers, ctx };
    let mut path = Vec::new();
    let node = exec.call(
        ctx.app.client_name(),
        &entry.service,
        &entry.endpoint,
        entry.timeout_budget_ms,
        ctx.start_ms,
        &mut path,
    );
    let payload = ResponsePayload { status_code: node.tree.root.status_code, degradation_markers: node.markers };
    let log = trace_to_log(&node.tree);
    Ok(Execution { trace: node.tree, payload, log })
}

const DRAW_FAULT: u64 = 0;
const DRAW_ORGANIC: u64 = 1;
const DRAW_JITTER: u64 = 2;

struct Executor<'a> {
    topology: &'a Topology,
    headers: &'a HavocHeaders,
    ctx: RequestContext,
}

struct Node {
    tree: TraceTree,
    markers: BTreeSet<DegradationMarker>,
}

impl Executor<'_> {
    fn rng(&self, purpose: u64, path: &[u64]) -> rand_chacha::ChaCha8Rng {
        let bytes: Vec<u8> = path.iter().flat_map(|p| p.to_le_bytes()).collect();
        seed::stream(self.ctx.seed, &[self.ctx.request_seq, purpose, seed::fnv1a(&bytes)])
    }

    fn call(&self, caller: &str, callee: &str, endpoint: &str, budget: u64, start: u64, path: &mut Vec<u64>) -> Node {
        let service = &self.topology.services[callee];
        let record = |end_ms, status_code, injected, degraded| RpcRecord {
            caller: caller.to_string(),
            callee: callee.to_string(),
            endpoint: endpoint.to_string(),
            start_ms: start,
            end_ms,
            status_code,
            injected,
            degraded,
            app_instance: self.ctx.app,
        };
        let leaf = |rec| Node { tree: TraceTree { root: rec, children: Vec::new() }, markers: BTreeSet::new() };

        let outcome = apply_fault(self.headers, service, endpoint, &mut self.rng(DRAW_FAULT, path));
        let organic_draw: f64 = self.rng(DRAW_ORGANIC, path).gen();
        let jitter = if service.jitter_ms == 0 { 0 } else { self.rng(DRAW_JITTER, path).gen_range(0..=service.jitter_ms) };

        let extra = match outcome.effect {
            FaultEffect::Aborted(code) => return leaf(record(start + 1, RpcStatus::Code(code), true, false)),
            FaultEffect::TimedOut => return leaf(record(start + budget, RpcStatus::TimedOut, true, false)),
            FaultEffect::Delayed(ms) => ms,
            FaultEffect::None => 0,
        };
        let injected = outcome.applied;
        let own = service.base_latency_ms + jitter;
        let weight = service.endpoint(endpoint).map_or(0.0, |e| e.baseline_failure_weight);

        let (mut end, status, degraded, children, markers) = if organic_draw < weight {
            (start + own, RpcStatus::Code(500), false, Vec::new(), BTreeSet::new())
        } else {
            let mut t = start + own;
            let mut failed = false;
            let mut degraded = false;
            let mut children = Vec::new();
            let mut markers = BTreeSet::new();
            for (si, stage) in service.call_plan.iter().enumerate() {
                let mut stage_end = t;
                let mut ran = false;
                for (ci, edge) in stage.parallel_calls.iter().enumerate() {
                    if !edge.applies_to(endpoint) {
                        continue;
                    }
                    ran = true;
                    path.push(si as u64);
                    path.push(ci as u64);
                    let child = self.call(callee, &edge.callee, &edge.endpoint, edge.timeout_budget_ms, t, path);
                    path.truncate(path.len() - 2);
                    stage_end = stage_end.max(child.tree.root.end_ms);
                    if child.tree.root.status_code.is_success() {
                        markers.extend(child.markers);
                    } else if edge.actual_criticality == Criticality::NonCritical {
                        degraded = true;
                        markers.extend(edge.fallback_payload.iter().cloned());
                    } else {
                        failed = true;
                    }
                    children.push(child.tree);
                }
                if ran {
                    t = stage_end;
                }
                if failed {
                    break;
                }
            }
            if failed {
                (t, RpcStatus::Code(500), degraded, children, BTreeSet::new())
            } else {
                (t, RpcStatus::OK, degraded, children, markers)
            }
        };
        end += extra;

        if end - start > budget {
            let cutoff = start + budget;
            let kept = children.into_iter().filter(|c| c.root.end_ms <= cutoff).collect();
            return Node {
                tree: TraceTree { root: record(cutoff, RpcStatus::TimedOut, injected, false), children: kept },
                markers: BTreeSet::new(),
            };
        }
        Node { tree: TraceTree { root: record(end, status, injected, degraded), children }, markers }
    }
}

fn record_order(a: &RpcRecord, b: &RpcRecord) -> Ordering {
    (a.start_ms, &a.caller, &a.callee).cmp(&(b.start_ms, &b.caller, &b.callee))
}

/// Pre-order flatten, then stable sort by `(start_ms, caller, callee)`.
pub fn trace_to_log(trace: &TraceTree) -> Vec<RpcRecord> {
    let mut log: Vec<RpcRecord> = trace.iter().cloned().collect();
    log.sort_by(record_order);
    log
}

/// Combines per-app network logs into one, stable-sorted by `(start_ms, app_instance)`.
pub fn merge_app_logs(logs: Vec<(AppInstance, Vec<RpcRecord>)>) -> Result<Vec<RpcRecord>, SimError> {
    let mut seen = BTreeMap::new();
    for (app, _) in &logs {
        if seen.insert(*app, ()).is_some() {
            return Err(SimError::DuplicateApp(*app));
        }
    }
    let mut merged: Vec<RpcRecord> = logs.into_iter().flat_map(|(_, l)| l).collect();
    merged.sort_by_key(|r| (r.start_ms, r.app_instance));
    Ok(merged)
}
