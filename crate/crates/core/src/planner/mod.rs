//! Kernel-to-GPU placement: problem types, objective evaluation, and the
//! exact/heuristic solvers built on them.
//!
//! Two objectives are supported. The throughput objective minimizes the
//! maximum per-GPU stage time `max_g max(T_g, M_g)`, where `T_g` is the
//! compute time of kernels assigned to `g` and `M_g` the cost of incoming
//! cut edges; under steady-state pipelining the slowest stage bounds
//! throughput. The latency objective minimizes the additive per-request
//! cost `sum t + sum c` over all kernels and cut edges. Cut-edge cost is
//! `c = ell(u,g) + bytes / bw(u,g)`.
//!
//! Time is in seconds (floating) throughout; byte sizes are exact integers.

mod exact;
mod heuristic;
mod lp;
mod milp;
mod reduce;
#[cfg(test)]
pub(crate) mod test_support;

pub use exact::{solve_exact, ExactOptions};
pub use heuristic::{solve_heuristic, HeuristicOptions};
pub use lp::{parse_lp, write_lp};
pub use milp::{build_milp, CmpOp, LinearConstraint, LinearModel, MilpModel};
pub use reduce::{reduce_repeated_layers, ExpansionMap, ReducedProblem};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddg::{DependencyGraph, PinReason};

pub const PLACEMENT_SCHEMA_VERSION: u32 = 1;
pub const GPU_SPEC_SCHEMA_VERSION: u32 = 1;
pub const LINKS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("node {node} pinned to both gpu {a} and gpu {b}")]
    PinConflict { node: usize, a: usize, b: usize },
    #[error("pin references unknown node {node} or gpu index {gpu}")]
    BadPin { node: usize, gpu: usize },
    #[error("no latency profile for kernel `{kernel}` on gpu `{gpu}`")]
    MissingLatency { kernel: String, gpu: String },
    #[error("latency for kernel `{kernel}` on gpu `{gpu}` must be > 0")]
    NonPositiveLatency { kernel: String, gpu: String },
    #[error("link matrix shape does not match gpu count {gpus}")]
    BadLinkShape { gpus: usize },
    #[error("link bandwidth must be > 0 and latency >= 0 between `{a}` and `{b}`")]
    BadLink { a: String, b: String },
    #[error("problem needs at least one gpu")]
    NoGpus,
    #[error("instance has {vars} binary placement variables, above the exact-solver guard of {limit}")]
    SizeGuard { vars: usize, limit: usize },
    #[error("lp: {0}")]
    Lp(String),
    #[error("placement file: {0}")]
    PlacementFile(String),
}

/// One GPU: identity, profiled kernel latencies, and display metadata.
/// Memory capacity is recorded but not constrained; overflow only produces
/// a post-hoc capacity warning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpuSpec {
    pub id: String,
    pub name: String,
    /// Device memory bandwidth, display metadata only.
    pub mem_bw_gbps: f64,
    pub mem_capacity_bytes: u64,
    /// Relative rental price, used for cost-efficiency reporting.
    pub price: f64,
    /// Profiled kernel latency in seconds, keyed by kernel name.
    #[serde(default)]
    pub latencies: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpuSpecFile {
    pub schema_version: u32,
    pub gpus: Vec<GpuSpec>,
}

/// Inter-GPU link parameters, indexed by GPU position. `bw` is bytes/s,
/// `latency` seconds. The diagonal is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkMatrix {
    pub bw: Vec<Vec<f64>>,
    pub latency: Vec<Vec<f64>>,
}

impl LinkMatrix {
    /// Uniform full-duplex fabric: every ordered pair gets the same
    /// bandwidth (bytes/s) and base latency (seconds).
    pub fn uniform(gpus: usize, bw: f64, latency: f64) -> Self {
        LinkMatrix {
            bw: vec![vec![bw; gpus]; gpus],
            latency: vec![vec![latency; gpus]; gpus],
        }
    }

    pub fn validate(&self, gpus: usize) -> Result<(), PlanError> {
        if self.bw.len() != gpus
            || self.latency.len() != gpus
            || self.bw.iter().any(|r| r.len() != gpus)
            || self.latency.iter().any(|r| r.len() != gpus)
        {
            return Err(PlanError::BadLinkShape { gpus });
        }
        for u in 0..gpus {
            for g in 0..gpus {
                if u != g && (self.bw[u][g] <= 0.0 || self.latency[u][g] < 0.0) {
                    return Err(PlanError::BadLink { a: u.to_string(), b: g.to_string() });
                }
            }
        }
        Ok(())
    }
}

/// JSON form of the link matrix; bandwidths in GB/s for readability,
/// converted once at load (1 GB/s = 1e9 bytes/s).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkMatrixFile {
    pub schema_version: u32,
    pub gpu_ids: Vec<String>,
    pub bw_gbps: Vec<Vec<f64>>,
    pub latency_s: Vec<Vec<f64>>,
}

impl LinkMatrixFile {
    pub fn to_matrix(&self) -> LinkMatrix {
        LinkMatrix {
            bw: self
                .bw_gbps
                .iter()
                .map(|row| row.iter().map(|b| b * 1e9).collect())
                .collect(),
            latency: self.latency_s.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Throughput,
    Latency,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Objective::Throughput => write!(f, "throughput"),
            Objective::Latency => write!(f, "latency"),
        }
    }
}

/// A complete placement problem: graph, GPUs, links, objective, pins.
#[derive(Debug, Clone)]
pub struct PlacementProblem {
    pub ddg: DependencyGraph,
    pub gpus: Vec<GpuSpec>,
    pub links: LinkMatrix,
    pub objective: Objective,
    /// Final node -> gpu-index pins (indirect/collective/user merged).
    pub pins: BTreeMap<usize, usize>,
}

impl PlacementProblem {
    /// Assemble and validate a problem. Graph-declared pins (indirect and
    /// collective fallbacks) go to `default_pin_gpu`; explicit `user_pins`
    /// may pin additional nodes or re-pin graph-pinned nodes, but two
    /// contradictory pins for one node are rejected.
    pub fn new(
        ddg: DependencyGraph,
        gpus: Vec<GpuSpec>,
        links: LinkMatrix,
        objective: Objective,
        user_pins: &[(usize, usize)],
        default_pin_gpu: usize,
    ) -> Result<Self, PlanError> {
        if gpus.is_empty() {
            return Err(PlanError::NoGpus);
        }
        links.validate(gpus.len())?;
        if default_pin_gpu >= gpus.len() {
            return Err(PlanError::BadPin { node: 0, gpu: default_pin_gpu });
        }
        for node in &ddg.nodes {
            for gpu in &gpus {
                match gpu.latencies.get(&node.kernel) {
                    None => {
                        return Err(PlanError::MissingLatency {
                            kernel: node.kernel.clone(),
                            gpu: gpu.id.clone(),
                        })
                    }
                    Some(&t) if t <= 0.0 => {
                        return Err(PlanError::NonPositiveLatency {
                            kernel: node.kernel.clone(),
                            gpu: gpu.id.clone(),
                        })
                    }
                    _ => {}
                }
            }
        }

        let mut pins: BTreeMap<usize, usize> = BTreeMap::new();
        let mut add_pin = |node: usize, gpu: usize, pins: &mut BTreeMap<usize, usize>| {
            if node >= ddg.nodes.len() || gpu >= gpus.len() {
                return Err(PlanError::BadPin { node, gpu });
            }
            match pins.get(&node) {
                Some(&existing) if existing != gpu => {
                    Err(PlanError::PinConflict { node, a: existing, b: gpu })
                }
                _ => {
                    pins.insert(node, gpu);
                    Ok(())
                }
            }
        };
        // User pins take precedence and are applied first; a graph pin to
        // the default GPU then only conflicts if it disagrees... it would,
        // so graph pins defer to an existing user pin for the same node.
        for &(node, gpu) in user_pins {
            add_pin(node, gpu, &mut pins)?;
        }
        for (&node, reason) in &ddg.pinned {
            if pins.contains_key(&node) {
                continue;
            }
            debug_assert!(matches!(reason, PinReason::Indirect | PinReason::Collective | PinReason::User));
            add_pin(node, default_pin_gpu, &mut pins)?;
        }

        Ok(PlacementProblem { ddg, gpus, links, objective, pins })
    }

    pub fn node_count(&self) -> usize {
        self.ddg.nodes.len()
    }

    pub fn gpu_count(&self) -> usize {
        self.gpus.len()
    }

    /// Profiled latency of node `k` on gpu index `g`, seconds.
    pub fn latency(&self, k: usize, g: usize) -> f64 {
        self.gpus[g].latencies[&self.ddg.nodes[k].kernel]
    }

    /// Transfer cost of `bytes` over the ordered link `u -> g`.
    pub fn edge_cost(&self, u: usize, g: usize, bytes: u64) -> f64 {
        self.links.latency[u][g] + bytes as f64 / self.links.bw[u][g]
    }

    pub(crate) fn instance(&self) -> SolveInstance {
        let n = self.node_count();
        let gc = self.gpu_count();
        let t = (0..n)
            .map(|k| (0..gc).map(|g| self.latency(k, g)).collect())
            .collect();
        let edges = self
            .ddg
            .edges
            .iter()
            .map(|e| InstEdge { src: e.src, dst: e.dst, bytes: e.bytes, count: 1 })
            .collect();
        SolveInstance {
            t,
            edges,
            bw: self.links.bw.clone(),
            ell: self.links.latency.clone(),
            pins: self.pins.clone(),
            objective: self.objective,
        }
    }
}

/// Per-GPU load breakdown of a placement, per request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpuLoad {
    /// `T_g`: total compute seconds of kernels assigned here.
    pub compute: f64,
    /// `M_g`: total cost of incoming cut edges.
    pub incoming_comm: f64,
    /// `W_g = max(T_g, M_g)`.
    pub stage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutEdge {
    pub src: usize,
    pub dst: usize,
    pub from_gpu: usize,
    pub to_gpu: usize,
    pub bytes: u64,
    /// `ell + bytes / bw` for this ordered GPU pair, seconds.
    pub cost: f64,
}

/// A kernel-to-GPU assignment with its audited objective value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub objective: Objective,
    /// gpu index per node, dense by node seq.
    pub assign: Vec<usize>,
    pub gpu_ids: Vec<String>,
    pub objective_value: f64,
    pub per_gpu: Vec<GpuLoad>,
    pub cut_edges: Vec<CutEdge>,
}

/// Recompute every reported quantity of a placement from first principles.
///
/// This is the audit route: solvers derive their objective incrementally,
/// and callers can cross-check the two to 1e-9 relative.
pub fn audit_placement(problem: &PlacementProblem, assign: &[usize]) -> Placement {
    assert_eq!(assign.len(), problem.node_count());
    let gc = problem.gpu_count();
    let mut per_gpu = vec![GpuLoad { compute: 0.0, incoming_comm: 0.0, stage: 0.0 }; gc];
    for (k, &g) in assign.iter().enumerate() {
        per_gpu[g].compute += problem.latency(k, g);
    }
    let mut cut_edges = Vec::new();
    for e in &problem.ddg.edges {
        let (u, g) = (assign[e.src], assign[e.dst]);
        if u != g {
            let cost = problem.edge_cost(u, g, e.bytes);
            per_gpu[g].incoming_comm += cost;
            cut_edges.push(CutEdge {
                src: e.src,
                dst: e.dst,
                from_gpu: u,
                to_gpu: g,
                bytes: e.bytes,
                cost,
            });
        }
    }
    for load in &mut per_gpu {
        load.stage = load.compute.max(load.incoming_comm);
    }
    let objective_value = match problem.objective {
        Objective::Throughput => per_gpu.iter().map(|l| l.stage).fold(0.0, f64::max),
        Objective::Latency => {
            per_gpu.iter().map(|l| l.compute).sum::<f64>()
                + cut_edges.iter().map(|c| c.cost).sum::<f64>()
        }
    };
    Placement {
        objective: problem.objective,
        assign: assign.to_vec(),
        gpu_ids: problem.gpus.iter().map(|g| g.id.clone()).collect(),
        objective_value,
        per_gpu,
        cut_edges,
    }
}

/// Versioned placement file payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlacementFile {
    pub schema_version: u32,
    pub pattern: String,
    #[serde(flatten)]
    pub placement: Placement,
}

impl PlacementFile {
    pub fn new(pattern: &str, placement: Placement) -> Self {
        PlacementFile {
            schema_version: PLACEMENT_SCHEMA_VERSION,
            pattern: pattern.to_string(),
            placement,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("placement serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        let file: PlacementFile =
            serde_json::from_str(text).map_err(|e| PlanError::PlacementFile(e.to_string()))?;
        if file.schema_version != PLACEMENT_SCHEMA_VERSION {
            return Err(PlanError::PlacementFile(format!(
                "unsupported schema version {}",
                file.schema_version
            )));
        }
        Ok(file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityWarning {
    pub gpu: String,
    pub estimated_bytes: u64,
    pub capacity_bytes: u64,
}

/// Post-hoc memory estimate: each GPU holds every buffer touched by a
/// kernel assigned to it. Weights are replicated everywhere at runtime, so
/// this underestimates if the graph omits weight buffers — it is a warning
/// aid, not a constraint.
pub fn capacity_report(problem: &PlacementProblem, placement: &Placement) -> Vec<CapacityWarning> {
    let mut per_gpu: Vec<std::collections::BTreeSet<&str>> =
        vec![Default::default(); problem.gpu_count()];
    for (k, &g) in placement.assign.iter().enumerate() {
        for b in &problem.ddg.nodes[k].buffers {
            per_gpu[g].insert(b.as_str());
        }
    }
    let mut warnings = Vec::new();
    for (g, bufs) in per_gpu.iter().enumerate() {
        let estimated: u64 = bufs
            .iter()
            .filter_map(|b| problem.ddg.buffer_sizes.get(*b))
            .sum();
        let capacity = problem.gpus[g].mem_capacity_bytes;
        if capacity > 0 && estimated > capacity {
            warnings.push(CapacityWarning {
                gpu: problem.gpus[g].id.clone(),
                estimated_bytes: estimated,
                capacity_bytes: capacity,
            });
        }
    }
    warnings
}

/// Weighted edge of a solver instance. `count` folds identical repeated
/// edges (from layer reduction) into one term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct InstEdge {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub count: u64,
}

/// Normalized form both solvers operate on. A placement problem lowers to
/// one directly; layer reduction lowers to one with grouped nodes and
/// weighted edges.
#[derive(Debug, Clone)]
pub(crate) struct SolveInstance {
    /// t[node][gpu], seconds. For grouped nodes this is the sum over
    /// members, which all share one decision.
    pub t: Vec<Vec<f64>>,
    pub edges: Vec<InstEdge>,
    pub bw: Vec<Vec<f64>>,
    pub ell: Vec<Vec<f64>>,
    pub pins: BTreeMap<usize, usize>,
    pub objective: Objective,
}

impl SolveInstance {
    pub fn node_count(&self) -> usize {
        self.t.len()
    }

    pub fn gpu_count(&self) -> usize {
        self.bw.len()
    }

    pub fn edge_cost(&self, u: usize, g: usize, bytes: u64) -> f64 {
        self.ell[u][g] + bytes as f64 / self.bw[u][g]
    }

    /// Full objective evaluation of a complete assignment.
    pub fn eval(&self, assign: &[usize]) -> f64 {
        let gc = self.gpu_count();
        match self.objective {
            Objective::Throughput => {
                let mut compute = vec![0.0f64; gc];
                let mut comm = vec![0.0f64; gc];
                for (k, &g) in assign.iter().enumerate() {
                    compute[g] += self.t[k][g];
                }
                for e in &self.edges {
                    let (u, g) = (assign[e.src], assign[e.dst]);
                    if u != g {
                        comm[g] += e.count as f64 * self.edge_cost(u, g, e.bytes);
                    }
                }
                (0..gc).map(|g| compute[g].max(comm[g])).fold(0.0, f64::max)
            }
            Objective::Latency => {
                let mut total = 0.0;
                for (k, &g) in assign.iter().enumerate() {
                    total += self.t[k][g];
                }
                for e in &self.edges {
                    let (u, g) = (assign[e.src], assign[e.dst]);
                    if u != g {
                        total += e.count as f64 * self.edge_cost(u, g, e.bytes);
                    }
                }
                total
            }
        }
    }
}
