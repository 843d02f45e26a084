//! Queueing-aware online policy switching over the serving simulation.
//!
//! At fixed window boundaries the monitor compares mean request latency
//! (arrival to completion) against mean execution latency (first dispatch
//! to completion). Their ratio `rho` measures queueing pressure: `rho`
//! above the threshold switches to the throughput placement, at or below
//! it switches back to the latency placement. A switch drains in-flight
//! requests, stalls for the synchronization cost, then resumes with the
//! other placement. Decisions use only completed-request measurements,
//! never knowledge of future arrivals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{engine, SimConfig, SimError, SimReport};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("bad monitor config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Latency,
    Throughput,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Latency => "latency",
            PolicyKind::Throughput => "throughput",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    /// Measurement window W, seconds.
    pub window: f64,
    /// Queueing threshold beta; switch up when `rho > beta`, down when
    /// `rho <= beta`.
    pub beta: f64,
    /// Synchronization stall S injected per switch, seconds.
    pub stall: f64,
    pub initial: PolicyKind,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig { window: 0.300, beta: 1.5, stall: 0.030, initial: PolicyKind::Latency }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), MonitorError> {
        if self.window <= 0.0 {
            return Err(MonitorError::BadConfig("window must be > 0".into()));
        }
        if self.beta < 1.0 {
            return Err(MonitorError::BadConfig("beta must be >= 1".into()));
        }
        if self.stall < 0.0 {
            return Err(MonitorError::BadConfig("stall must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-window measurement row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub index: u64,
    pub start: f64,
    pub end: f64,
    pub completed: usize,
    pub mean_req_latency: Option<f64>,
    /// Computation + communication, excluding queueing.
    pub mean_exec_latency: Option<f64>,
    /// `mean_req / mean_exec`; undefined in windows with no completions,
    /// in which case the previous decision carries forward.
    pub rho: Option<f64>,
    /// Policy in force after this window's decision.
    pub active_policy: PolicyKind,
    pub switched: bool,
    /// Position-wise mean kernel-group latencies of requests completed in
    /// this window.
    pub mean_group_latencies: Vec<f64>,
}

pub fn windows_to_csv(windows: &[WindowStats]) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "index,start,end,completed,mean_req_latency,mean_exec_latency,rho,policy,switched"
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for w in windows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            w.index,
            w.start,
            w.end,
            w.completed,
            opt(w.mean_req_latency),
            opt(w.mean_exec_latency),
            opt(w.rho),
            w.active_policy.name(),
            w.switched
        );
    }
    out
}

/// Run a monitored serve: the workload from `cfg`, switching between the
/// two placements per the monitor config.
pub fn run_monitored(
    cfg: &SimConfig,
    latency_placements: &BTreeMap<String, Vec<usize>>,
    throughput_placements: &BTreeMap<String, Vec<usize>>,
    mc: &MonitorConfig,
) -> Result<(SimReport, Vec<WindowStats>), MonitorError> {
    mc.validate()?;
    let setup = engine::MonitorSetup {
        config: *mc,
        latency_placements: latency_placements.clone(),
        throughput_placements: throughput_placements.clone(),
    };
    Ok(engine::run(cfg, Some(&setup))?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub window: f64,
    pub beta: f64,
    /// Mean request latency divided by tokens per request.
    pub mean_normalized_latency: f64,
    pub switch_count: usize,
}

/// Full-factorial sensitivity sweep over window sizes and thresholds with
/// a fixed seed; emits one row per (W, beta) pair.
pub fn sweep_sensitivity(
    cfg: &SimConfig,
    latency_placements: &BTreeMap<String, Vec<usize>>,
    throughput_placements: &BTreeMap<String, Vec<usize>>,
    base: &MonitorConfig,
    windows: &[f64],
    betas: &[f64],
) -> Result<Vec<SweepRow>, MonitorError> {
    let mut rows = Vec::new();
    for &window in windows {
        for &beta in betas {
            let mc = MonitorConfig { window, beta, ..*base };
            let (report, _) = run_monitored(cfg, latency_placements, throughput_placements, &mc)?;
            let mean_req = report.mean_req_latency().unwrap_or(f64::NAN);
            rows.push(SweepRow {
                window,
                beta,
                mean_normalized_latency: mean_req / cfg.tokens_per_request,
                switch_count: report.switches.len(),
            });
        }
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "window,beta,mean_normalized_latency,switch_count");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.window, r.beta, r.mean_normalized_latency, r.switch_count
        );
    }
    out
}

/// Event-log stall audit: every switch must satisfy
/// `resumed - decided = (drained - decided) + stall` to within a tick.
pub fn audit_stall_accounting(report: &SimReport, mc: &MonitorConfig) -> Result<(), String> {
    const TICK: f64 = 1e-9;
    let mut total_injected = 0.0;
    for s in &report.switches {
        let drain_delta = s.drained_at - s.decided_at;
        if drain_delta < -TICK {
            return Err(format!("switch at {} drained before it was decided", s.decided_at));
        }
        let expected = drain_delta + mc.stall;
        let actual = s.resumed_at - s.decided_at;
        if (actual - expected).abs() > TICK {
            return Err(format!(
                "switch at {}: injected {} but drain+stall is {}",
                s.decided_at, actual, expected
            ));
        }
        total_injected += actual;
    }
    let recomputed: f64 = report
        .switches
        .iter()
        .map(|s| (s.drained_at - s.decided_at) + mc.stall)
        .sum();
    if (total_injected - recomputed).abs() > TICK * (1 + report.switches.len()) as f64 {
        return Err("total injected stall does not balance".to_string());
    }
    Ok(())
}
