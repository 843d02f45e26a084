//! Synthetic instance generators for benchmarks and validation.
//!
//! Everything here is seeded and deterministic: the same seed always
//! produces the same trace, problem, or workload, which the golden-file
//! and oracle-equivalence tests rely on.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ddg::{DependencyGraph, Edge, Node};
use crate::planner::{GpuSpec, LinkMatrix, Objective, PlacementProblem};
use crate::trace::LaunchKind;

/// GPUs `g0..g{count-1}` with the given per-kernel latency columns.
/// `latencies[kernel][g]` is the time on GPU `g`.
pub fn uniform_gpus(count: usize, latencies: &BTreeMap<String, Vec<f64>>) -> Vec<GpuSpec> {
    (0..count)
        .map(|g| GpuSpec {
            id: format!("g{g}"),
            name: format!("synthetic-{g}"),
            mem_bw_gbps: 1000.0,
            mem_capacity_bytes: 80 * 1024 * 1024 * 1024,
            price: 1.0,
            latencies: latencies
                .iter()
                .map(|(k, row)| (k.clone(), row[g]))
                .collect(),
        })
        .collect()
}

/// Straight-line graph with explicit nodes and edges; edge buffers are
/// synthesized as `b<src>_<dst>`.
pub fn chain_ddg(kernels: &[&str], edges: &[(usize, usize, u64)]) -> DependencyGraph {
    DependencyGraph {
        pattern_id: "synthetic".to_string(),
        nodes: kernels
            .iter()
            .enumerate()
            .map(|(seq, k)| Node {
                seq,
                kernel: k.to_string(),
                kind: LaunchKind::Opaque,
                buffers: Vec::new(),
            })
            .collect(),
        edges: edges
            .iter()
            .map(|&(src, dst, bytes)| Edge {
                src,
                dst,
                bytes,
                buffer: format!("b{src}_{dst}"),
            })
            .collect(),
        pinned: BTreeMap::new(),
        buffer_sizes: BTreeMap::new(),
    }
}

/// Two-GPU problem from kernel latency pairs; links run at 1 GB/s with
/// zero base latency, so an edge of `n` bytes costs `n / 1e9` seconds.
pub fn problem_from_parts(
    kernels: &[(&str, [f64; 2])],
    edges: &[(usize, usize, u64)],
    objective: Objective,
    user_pins: &[(usize, usize)],
) -> PlacementProblem {
    let latencies: BTreeMap<String, Vec<f64>> = kernels
        .iter()
        .map(|(name, row)| (name.to_string(), row.to_vec()))
        .collect();
    let gpus = uniform_gpus(2, &latencies);
    let names: Vec<&str> = kernels.iter().map(|(n, _)| *n).collect();
    let ddg = chain_ddg(&names, edges);
    let links = LinkMatrix::uniform(2, 1e9, 0.0);
    PlacementProblem::new(ddg, gpus, links, objective, user_pins, 0).unwrap()
}

/// Random placement problem: latencies in [0.5, 3.0) seconds, forward
/// edges with ~35% density, transfer sizes up to 3 GB over 1 GB/s links
/// (costs comparable to compute, so neither term dominates).
pub fn random_problem(seed: u64, kernels: usize, gpus: usize, objective: Objective) -> PlacementProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latencies: BTreeMap<String, Vec<f64>> = (0..kernels)
        .map(|k| {
            let row: Vec<f64> = (0..gpus).map(|_| rng.gen_range(0.5..3.0)).collect();
            (format!("k{k}"), row)
        })
        .collect();
    let gpu_specs = uniform_gpus(gpus, &latencies);
    let names: Vec<String> = (0..kernels).map(|k| format!("k{k}")).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut edges = Vec::new();
    for src in 0..kernels {
        for dst in (src + 1)..kernels {
            if rng.gen_bool(0.35) {
                edges.push((src, dst, rng.gen_range(1u64..3_000_000_000)));
            }
        }
    }
    let ddg = chain_ddg(&name_refs, &edges);
    let links = LinkMatrix::uniform(gpus, 1e9, 0.0);
    PlacementProblem::new(ddg, gpu_specs, links, objective, &[], 0).unwrap()
}

/// Repeated-layer problem: `layers` identical blocks of `per_layer`
/// kernels. Kernels alternate GPU affinity (even positions fast on g0,
/// odd on g1), intra-layer edges chain positions, and one boundary edge
/// links consecutive layers. Communication is cheap relative to compute,
/// so the optimum follows per-kernel affinity and is layer-consistent.
pub fn layered_problem(
    layers: usize,
    per_layer: usize,
    objective: Objective,
    extra_comm_bytes: u64,
) -> PlacementProblem {
    let latencies: BTreeMap<String, Vec<f64>> = (0..per_layer)
        .map(|k| {
            let (fast, slow) = (1.0 + 0.1 * k as f64, 2.0 + 0.1 * k as f64);
            let row = if k % 2 == 0 { vec![fast, slow] } else { vec![slow, fast] };
            (format!("k{k}"), row)
        })
        .collect();
    let gpus = uniform_gpus(2, &latencies);
    let mut names = Vec::new();
    let mut edges = Vec::new();
    for layer in 0..layers {
        let base = layer * per_layer;
        for k in 0..per_layer {
            names.push(format!("k{k}"));
            if k > 0 {
                edges.push((base + k - 1, base + k, 1_000_000 + extra_comm_bytes));
            }
        }
        if layer > 0 {
            edges.push((base - 1, base, 2_000_000 + extra_comm_bytes));
        }
    }
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let ddg = chain_ddg(&name_refs, &edges);
    let links = LinkMatrix::uniform(2, 1e9, 0.0);
    PlacementProblem::new(ddg, gpus, links, objective, &[], 0).unwrap()
}

/// Random single-iteration trace of library launches with contiguous,
/// in-bounds access spans: the ground truth a per-byte last-writer oracle
/// can check exactly. Returns the trace text.
pub fn random_trace_text(seed: u64, max_launches: usize, max_buffers: usize) -> String {
    use std::fmt::Write;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buffers = rng.gen_range(1..=max_buffers.max(1));
    let launches = rng.gen_range(1..=max_launches.max(1));

    let mut out = String::new();
    let _ = writeln!(out, "KDTRACE 1");
    let _ = writeln!(out, "pattern synth_{seed}");
    let mut sizes = Vec::new();
    for b in 0..buffers {
        let size = rng.gen_range(64u64..=4096);
        sizes.push(size);
        let _ = writeln!(out, "alloc B{b} {:#x} {size}", 0x10000 + b as u64 * 0x10000);
    }
    for l in 0..launches {
        let span = |rng: &mut ChaCha8Rng, b: usize| {
            let size = sizes[b];
            let off = rng.gen_range(0..size);
            let len = rng.gen_range(1..=size - off);
            format!("B{b}:{off}:{len}")
        };
        let n_reads = rng.gen_range(0..=3usize);
        let n_writes = rng.gen_range(0..=2usize);
        let reads: Vec<String> =
            (0..n_reads).map(|_| { let b = rng.gen_range(0..buffers); span(&mut rng, b) }).collect();
        let writes: Vec<String> =
            (0..n_writes).map(|_| { let b = rng.gen_range(0..buffers); span(&mut rng, b) }).collect();
        let mut args: Vec<String> = (0..buffers).map(|b| format!("B{b}")).collect();
        args.dedup();
        let _ = write!(out, "launch library k{l} args={}", args.join(","));
        if !reads.is_empty() {
            let _ = write!(out, " reads={}", reads.join(","));
        }
        if !writes.is_empty() {
            let _ = write!(out, " writes={}", writes.join(","));
        }
        let _ = writeln!(out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        let a = random_trace_text(5, 20, 4);
        let b = random_trace_text(5, 20, 4);
        assert_eq!(a, b);
        let p = random_problem(5, 6, 2, Objective::Latency);
        let q = random_problem(5, 6, 2, Objective::Latency);
        assert_eq!(p.ddg, q.ddg);
    }

    #[test]
    fn random_trace_parses_and_summarizes() {
        for seed in 0..10 {
            let text = random_trace_text(seed, 30, 6);
            let trace = crate::trace::parse_trace(&text).unwrap();
            let summaries = crate::access::summarize_pattern(&trace, &BTreeMap::new()).unwrap();
            assert_eq!(summaries.len(), trace.launches.len());
        }
    }
}
