//! Planning and simulation toolkit for kernel-level disaggregation of AI
//! inference across heterogeneous GPUs.
//!
//! The pipeline runs in four stages, each usable on its own:
//!
//! 1. [`kir`] + [`trace`] + [`access`] — parse kernel text, replay recorded
//!    address streams through instrumentation plans, and resolve the buffers
//!    each kernel launch reads and writes.
//! 2. [`ddg`] — turn per-launch access summaries into a data dependency
//!    graph (RAW edges annotated with transfer bytes) per execution pattern.
//! 3. [`planner`] — place kernels onto GPUs by solving the dependency graph
//!    under a throughput (min-max stage time) or latency (additive) objective.
//! 4. [`sim`] + [`monitor`] — evaluate placements with a pipelined
//!    discrete-event model and drive online policy switching over it.

pub mod access;
pub mod ddg;
pub mod kir;
pub mod monitor;
pub mod planner;
pub mod sim;
pub mod synth;
pub mod trace;

/// Relative closeness check used by objective audits and report invariants.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    let scale = a.abs().max(b.abs()).max(1e-30);
    (a - b).abs() <= tol * scale
}
