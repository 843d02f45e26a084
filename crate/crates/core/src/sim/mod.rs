//! Pipelined discrete-event execution model for placed kernel graphs.
//!
//! The model follows the disaggregated worker protocol: a kernel becomes
//! ready once every producer's output is available on its GPU (local
//! producers at kernel-end, remote ones at recv-end), each GPU computes
//! one kernel at a time, kernels of one request issue in sequence order on
//! each GPU, and sends are posted at producer kernel-end on dedicated
//! channels that never block compute. Channels are full-duplex per ordered
//! GPU pair and serialize transmissions per direction: a transfer of `d`
//! bytes issued at `s` finishes transmitting at `max(s, channel_free) +
//! d/bw` and is delivered `ell` later.
//!
//! Multiple in-flight requests pipeline: when one request stalls on a
//! transfer, ready kernels of other requests keep the GPU busy. Priority
//! selection decides which ready kernel runs: `fifo-priority` favors the
//! earliest-admitted request, which staggers requests through the pattern;
//! `equal` models undifferentiated round-robin sharing by favoring the
//! request with the least progress, which makes concurrent requests march
//! in lockstep and stall on communication together.

mod engine;

pub use engine::run;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{LinkMatrix, Placement, PlacementProblem};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("pattern `{0}` has no placement")]
    MissingPlacement(String),
    #[error("placement for `{pattern}` covers {got} nodes, pattern has {want}")]
    PlacementShape { pattern: String, got: usize, want: usize },
    #[error("workload references unknown pattern `{0}`")]
    UnknownPattern(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("deadlock at t={time}: no runnable event with {in_flight} requests in flight; stuck frontier: {frontier:?}")]
    Deadlock { time: f64, in_flight: usize, frontier: Vec<(u64, usize)> },
}

/// What the simulator needs to know about one execution pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPattern {
    /// durations[node][gpu], seconds.
    pub durations: Vec<Vec<f64>>,
    /// (producer, consumer, bytes); forward edges only.
    pub edges: Vec<(usize, usize, u64)>,
}

impl SimPattern {
    /// Extract the parts of a placement problem the simulator uses.
    pub fn from_problem(problem: &PlacementProblem) -> Self {
        let instance_t = (0..problem.node_count())
            .map(|k| (0..problem.gpu_count()).map(|g| problem.latency(k, g)).collect())
            .collect();
        SimPattern {
            durations: instance_t,
            edges: problem.ddg.edges.iter().map(|e| (e.src, e.dst, e.bytes)).collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.durations.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorityPolicy {
    /// Earliest-admitted request first; staggers pipeline phases.
    FifoPriority,
    /// Undifferentiated sharing modeled as least-progress-first.
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Workload {
    /// Keep `in_flight` requests of one pattern running; a completion
    /// immediately admits the next request.
    ClosedLoop { pattern: String, in_flight: usize },
    /// Poisson arrivals at `rate_rps`, seeded; one pattern.
    OpenLoopRate { pattern: String, rate_rps: f64 },
    /// Explicit arrival trace: (arrival time, pattern id).
    OpenLoopTrace { arrivals: Vec<(f64, String)> },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub gpu_ids: Vec<String>,
    pub links: LinkMatrix,
    pub patterns: BTreeMap<String, SimPattern>,
    /// Active placement per pattern (gpu index per node).
    pub placements: BTreeMap<String, Vec<usize>>,
    pub workload: Workload,
    /// Statistics are collected in `[warmup, warmup + measure]`.
    pub warmup: f64,
    pub measure: f64,
    pub priority: PriorityPolicy,
    /// Admission cap override; `Some(1)` disables pipelining entirely.
    pub max_in_flight: Option<usize>,
    /// Fractional critical-path inflation modeling background replication
    /// of cross-iteration buffers. Must lie in [0, 0.01].
    pub background_overhead: f64,
    /// Converts request throughput to tokens/s in reports.
    pub tokens_per_request: f64,
    pub seed: u64,
    pub record_events: bool,
}

impl SimConfig {
    /// Single-pattern config from a solved placement problem.
    pub fn from_problem(
        problem: &PlacementProblem,
        placement: &Placement,
        pattern_id: &str,
        workload: Workload,
    ) -> Self {
        let mut patterns = BTreeMap::new();
        patterns.insert(pattern_id.to_string(), SimPattern::from_problem(problem));
        let mut placements = BTreeMap::new();
        placements.insert(pattern_id.to_string(), placement.assign.clone());
        SimConfig {
            gpu_ids: problem.gpus.iter().map(|g| g.id.clone()).collect(),
            links: problem.links.clone(),
            patterns,
            placements,
            workload,
            warmup: 0.0,
            measure: 60.0,
            priority: PriorityPolicy::FifoPriority,
            max_in_flight: None,
            background_overhead: 0.001,
            tokens_per_request: 1.0,
            seed: 0,
            record_events: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.warmup < 0.0 || self.measure <= 0.0 {
            return Err(SimError::BadConfig("warmup must be >= 0 and measure > 0".into()));
        }
        if !(0.0..=0.01).contains(&self.background_overhead) {
            return Err(SimError::BadConfig(
                "background_overhead must lie in [0, 0.01]".into(),
            ));
        }
        if let Workload::ClosedLoop { in_flight, .. } = &self.workload {
            if *in_flight < 1 {
                return Err(SimError::BadConfig("closed loop needs in_flight >= 1".into()));
            }
        }
        if let Some(cap) = self.max_in_flight {
            if cap < 1 {
                return Err(SimError::BadConfig("max_in_flight must be >= 1".into()));
            }
        }
        let patterns_used: Vec<&String> = match &self.workload {
            Workload::ClosedLoop { pattern, .. } | Workload::OpenLoopRate { pattern, .. } => {
                vec![pattern]
            }
            Workload::OpenLoopTrace { arrivals } => arrivals.iter().map(|(_, p)| p).collect(),
        };
        for pattern in patterns_used {
            let spec = self
                .patterns
                .get(pattern)
                .ok_or_else(|| SimError::UnknownPattern(pattern.clone()))?;
            let assign = self
                .placements
                .get(pattern)
                .ok_or_else(|| SimError::MissingPlacement(pattern.clone()))?;
            if assign.len() != spec.node_count() {
                return Err(SimError::PlacementShape {
                    pattern: pattern.clone(),
                    got: assign.len(),
                    want: spec.node_count(),
                });
            }
            if assign.iter().any(|&g| g >= self.gpu_ids.len()) {
                return Err(SimError::BadConfig(format!(
                    "placement for `{pattern}` references a gpu out of range"
                )));
            }
        }
        self.links
            .validate(self.gpu_ids.len())
            .map_err(|e| SimError::BadConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    RequestArrival,
    KernelStart,
    KernelEnd,
    SendStart,
    RecvEnd,
    RequestDone,
    PolicySwitchBarrier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gpu: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub pattern: String,
    pub arrival: f64,
    /// First kernel dispatch; queueing delay is `start - arrival`.
    pub start: f64,
    pub completion: f64,
    /// Segment durations between consecutive communication operations on
    /// this request's path: cut-edge crossings + 1 entries.
    pub group_latencies: Vec<f64>,
}

impl RequestRecord {
    pub fn req_latency(&self) -> f64 {
        self.completion - self.arrival
    }
    pub fn exec_latency(&self) -> f64 {
        self.completion - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuBreakdown {
    pub gpu: String,
    /// Fractions of the measurement window; they sum to 1.
    pub compute_frac: f64,
    /// Idle while at least one incoming transfer was outstanding.
    pub comm_frac: f64,
    pub idle_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchRecord {
    /// Window boundary that triggered the switch.
    pub decided_at: f64,
    /// When the last in-flight request drained.
    pub drained_at: f64,
    /// Dispatch resumed at `drained_at + stall`.
    pub resumed_at: f64,
    pub from_policy: String,
    pub to_policy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub seed: u64,
    /// Completed requests, in completion order (all of them, with the
    /// measurement window applied only to the aggregates below).
    pub requests: Vec<RequestRecord>,
    /// Completions inside the measurement window / window length.
    pub throughput_rps: f64,
    pub tokens_per_s: f64,
    pub per_gpu: Vec<GpuBreakdown>,
    /// Transmission-busy fraction per ordered gpu pair over the window.
    pub channel_utilization: Vec<Vec<f64>>,
    pub switches: Vec<SwitchRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub event_log: Option<Vec<SimEvent>>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn mean_req_latency(&self) -> Option<f64> {
        mean(self.requests.iter().map(|r| r.req_latency()))
    }

    pub fn mean_exec_latency(&self) -> Option<f64> {
        mean(self.requests.iter().map(|r| r.exec_latency()))
    }
}

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Run one simulation.
pub fn simulate(cfg: &SimConfig) -> Result<SimReport, SimError> {
    engine::run(cfg, None)
}

/// Run the same workload under two placements (same seed) and report both.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyComparison {
    pub throughput_policy: SimReport,
    pub latency_policy: SimReport,
}

pub fn compare_policies(
    base: &SimConfig,
    throughput_assign: &BTreeMap<String, Vec<usize>>,
    latency_assign: &BTreeMap<String, Vec<usize>>,
) -> Result<PolicyComparison, SimError> {
    let mut thr_cfg = base.clone();
    thr_cfg.placements = throughput_assign.clone();
    let mut lat_cfg = base.clone();
    lat_cfg.placements = latency_assign.clone();
    Ok(PolicyComparison {
        throughput_policy: simulate(&thr_cfg)?,
        latency_policy: simulate(&lat_cfg)?,
    })
}

/// Pipeline ablation: no pipelining, naive (equal priority) pipelining,
/// and priority-aware pipelining, on the same workload and seed.
#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub no_pipeline: SimReport,
    pub naive: SimReport,
    pub priority: SimReport,
}

pub fn ablate_pipeline(cfg: &SimConfig) -> Result<AblationReport, SimError> {
    let mut no_pipe = cfg.clone();
    no_pipe.max_in_flight = Some(1);
    no_pipe.priority = PriorityPolicy::FifoPriority;
    let mut naive = cfg.clone();
    naive.priority = PriorityPolicy::Equal;
    let mut priority = cfg.clone();
    priority.priority = PriorityPolicy::FifoPriority;
    Ok(AblationReport {
        no_pipeline: simulate(&no_pipe)?,
        naive: simulate(&naive)?,
        priority: simulate(&priority)?,
    })
}
