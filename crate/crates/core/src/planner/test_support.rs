//! Shared fixtures for planner unit tests; the real generators live in
//! [`crate::synth`].

pub use crate::synth::{chain_ddg, layered_problem, problem_from_parts, random_problem};

use std::collections::BTreeMap;

use super::GpuSpec;

pub fn two_gpu_specs(kernels: &[(&str, [f64; 2])]) -> Vec<GpuSpec> {
    let latencies: BTreeMap<String, Vec<f64>> = kernels
        .iter()
        .map(|(name, row)| (name.to_string(), row.to_vec()))
        .collect();
    crate::synth::uniform_gpus(2, &latencies)
}
