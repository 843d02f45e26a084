//! Execution trace file format and the buffer registry built from it.
//!
//! A trace is a line-delimited records file (`.kdt`) describing one
//! execution pattern: allocation/free events, kernel launch records, and
//! iteration boundary markers, in order. The header is a magic word plus a
//! schema version integer.
//!
//! ```text
//! KDTRACE 1
//! pattern decode_b1
//! alloc A 0x10000 4096
//! launch opaque scale args=A
//! stream 0 0x10000 0x10ff0
//! launch library sgemm args=A,B,C reads=A,B writes=C flags=collective
//! launch memcopy src=C dst=D bytes=1024
//! iter
//! free A
//! ```
//!
//! Record reference:
//! * `pattern <id>` — pattern identifier, required once before any launch.
//! * `alloc <buffer> <base> <size>` — base accepts hex (`0x..`) or decimal.
//! * `free <buffer>`
//! * `launch opaque <kernel> [args=a,b]` — followed by `stream`/`interval`
//!   records carrying its instrumentation data.
//! * `stream <instr> <addr>...` — raw recorded addresses for one
//!   instruction of the preceding opaque launch; repeatable.
//! * `interval <instr> <min> <max>` — pre-aggregated alternative to
//!   `stream`; mixing both forms for one instruction is an error.
//! * `launch library <name> [args=..] reads=b[:off:len],.. writes=..
//!   [flags=collective]` — declared accesses; a bare buffer name means the
//!   whole buffer.
//! * `launch memcopy src=<buf> dst=<buf> bytes=<n>`
//! * `iter` — iteration boundary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

pub const TRACE_MAGIC: &str = "KDTRACE";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad header: expected `{TRACE_MAGIC} <version>`")]
    BadHeader,
    #[error("unsupported trace schema version {0} (reader supports {TRACE_VERSION})")]
    UnsupportedVersion(u32),
    #[error("trace declares no pattern identifier")]
    MissingPattern,
    #[error("line {line}: buffer `{id}` re-allocated (buffer ids are unique per trace)")]
    DuplicateAlloc { line: usize, id: String },
    #[error("line {line}: free of unknown or already freed buffer `{id}`")]
    BadFree { line: usize, id: String },
    #[error("allocation `{id}` overlaps live allocation `{other}`")]
    OverlappingAlloc { id: String, other: String },
    #[error("allocation `{id}` violates base > 0 / size > 0")]
    BadAllocBounds { id: String },
}

/// One buffer allocation with its live interval in global event order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub id: String,
    pub base: u64,
    pub size: u64,
    /// Event sequence at which the allocation happened.
    pub alloc_seq: usize,
    /// Event sequence of the free, or `usize::MAX` while live to trace end.
    pub free_seq: usize,
}

impl Allocation {
    pub fn live_at(&self, event_seq: usize) -> bool {
        self.alloc_seq <= event_seq && event_seq < self.free_seq
    }
    pub fn contains_span(&self, start: u64, end: u64) -> bool {
        self.base <= start && end <= self.base + self.size
    }
    pub fn overlaps_span(&self, start: u64, end: u64) -> bool {
        start < self.base + self.size && self.base < end
    }
}

/// Allocation log mapping address intervals to buffer identities.
#[derive(Debug, Clone, Default)]
pub struct BufferRegistry {
    pub allocations: Vec<Allocation>,
    by_id: BTreeMap<String, usize>,
}

impl BufferRegistry {
    pub fn get(&self, id: &str) -> Option<&Allocation> {
        self.by_id.get(id).map(|&i| &self.allocations[i])
    }

    /// Live allocations whose address range overlaps `[start, end)`.
    pub fn live_overlapping(&self, start: u64, end: u64, event_seq: usize) -> Vec<&Allocation> {
        self.allocations
            .iter()
            .filter(|a| a.live_at(event_seq) && a.overlaps_span(start, end))
            .collect()
    }

    fn insert(&mut self, alloc: Allocation, line: usize) -> Result<(), TraceError> {
        if self.by_id.contains_key(&alloc.id) {
            return Err(TraceError::DuplicateAlloc { line, id: alloc.id });
        }
        if alloc.base == 0 || alloc.size == 0 {
            return Err(TraceError::BadAllocBounds { id: alloc.id });
        }
        for other in &self.allocations {
            let other_live = other.free_seq == usize::MAX;
            if other_live && other.overlaps_span(alloc.base, alloc.base + alloc.size) {
                return Err(TraceError::OverlappingAlloc {
                    id: alloc.id,
                    other: other.id.clone(),
                });
            }
        }
        self.by_id.insert(alloc.id.clone(), self.allocations.len());
        self.allocations.push(alloc);
        Ok(())
    }

    fn free(&mut self, id: &str, event_seq: usize, line: usize) -> Result<(), TraceError> {
        let idx = *self
            .by_id
            .get(id)
            .ok_or_else(|| TraceError::BadFree { line, id: id.to_string() })?;
        let alloc = &mut self.allocations[idx];
        if alloc.free_seq != usize::MAX {
            return Err(TraceError::BadFree { line, id: id.to_string() });
        }
        alloc.free_seq = event_seq;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaunchKind {
    Opaque,
    Library,
    Memcopy,
}

/// Declared access of a library launch. `span` is `None` for "the whole
/// buffer", resolved against the registry during analysis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeclaredAccess {
    pub buffer: String,
    pub span: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchRecord {
    /// Launch ordinal within the trace, dense from 0.
    pub seq: usize,
    /// Global event sequence, shared with alloc/free events; used for
    /// liveness checks.
    pub event_seq: usize,
    pub kind: LaunchKind,
    /// Kernel name (opaque), library signature, or `memcopy`.
    pub kernel: String,
    /// Buffers passed as parameters, in declared order.
    pub args: Vec<String>,
    /// Raw address streams per instruction index (opaque launches).
    pub streams: BTreeMap<usize, Vec<u64>>,
    /// Pre-aggregated `[min, max]` intervals per instruction index.
    pub intervals: BTreeMap<usize, (u64, u64)>,
    /// Declared reads/writes (library and memcopy launches).
    pub declared_reads: Vec<DeclaredAccess>,
    pub declared_writes: Vec<DeclaredAccess>,
    pub collective: bool,
    /// Iteration this launch belongs to (0-based).
    pub iteration: usize,
}

#[derive(Debug, Clone)]
pub struct ExecutionTrace {
    pub version: u32,
    pub pattern_id: String,
    pub launches: Vec<LaunchRecord>,
    pub registry: BufferRegistry,
    /// Number of iterations (boundary marker count + 1, when any launch
    /// follows the last marker; a trailing marker is allowed).
    pub iterations: usize,
}

impl ExecutionTrace {
    pub fn launches_in_iteration(&self, iteration: usize) -> Vec<&LaunchRecord> {
        self.launches.iter().filter(|l| l.iteration == iteration).collect()
    }
}

fn parse_u64(tok: &str, line: usize) -> Result<u64, TraceError> {
    let r = if let Some(hex) = tok.strip_prefix("0x") {
        u64::from_str_radix(hex, 16)
    } else {
        tok.parse()
    };
    r.map_err(|_| TraceError::Parse { line, msg: format!("bad number `{tok}`") })
}

fn kv<'a>(tok: &'a str, key: &str) -> Option<&'a str> {
    tok.strip_prefix(key).and_then(|r| r.strip_prefix('='))
}

fn parse_access_list(value: &str, line: usize) -> Result<Vec<DeclaredAccess>, TraceError> {
    let mut out = Vec::new();
    for item in value.split(',').filter(|s| !s.is_empty()) {
        let mut parts = item.split(':');
        let buffer = parts.next().unwrap().to_string();
        let span = match (parts.next(), parts.next()) {
            (None, _) => None,
            (Some(off), Some(len)) => Some((parse_u64(off, line)?, parse_u64(len, line)?)),
            (Some(_), None) => {
                return Err(TraceError::Parse {
                    line,
                    msg: format!("access `{item}` must be `buf` or `buf:off:len`"),
                })
            }
        };
        if parts.next().is_some() {
            return Err(TraceError::Parse { line, msg: format!("access `{item}` has too many fields") });
        }
        out.push(DeclaredAccess { buffer, span });
    }
    Ok(out)
}

/// Parse a trace file. Identical bytes always yield an identical trace.
pub fn parse_trace(text: &str) -> Result<ExecutionTrace, TraceError> {
    let mut lines = text.lines().enumerate();

    let header = loop {
        match lines.next() {
            Some((_, l)) => {
                let l = l.trim();
                if !l.is_empty() && !l.starts_with('#') {
                    break l;
                }
            }
            None => return Err(TraceError::BadHeader),
        }
    };
    let mut htoks = header.split_whitespace();
    if htoks.next() != Some(TRACE_MAGIC) {
        return Err(TraceError::BadHeader);
    }
    let version: u32 = htoks
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or(TraceError::BadHeader)?;
    if version != TRACE_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }

    let mut pattern_id: Option<String> = None;
    let mut registry = BufferRegistry::default();
    let mut launches: Vec<LaunchRecord> = Vec::new();
    let mut event_seq = 0usize;
    let mut iteration = 0usize;
    let mut saw_trailing_marker = false;

    for (lineno, raw) in lines {
        let line = lineno + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut toks = l.split_whitespace();
        let rec = toks.next().unwrap();
        match rec {
            "pattern" => {
                let id = toks
                    .next()
                    .ok_or_else(|| TraceError::Parse { line, msg: "pattern requires an id".into() })?;
                pattern_id = Some(id.to_string());
            }
            "alloc" => {
                let id = toks.next().ok_or_else(|| TraceError::Parse { line, msg: "alloc: missing id".into() })?;
                let base = parse_u64(
                    toks.next().ok_or_else(|| TraceError::Parse { line, msg: "alloc: missing base".into() })?,
                    line,
                )?;
                let size = parse_u64(
                    toks.next().ok_or_else(|| TraceError::Parse { line, msg: "alloc: missing size".into() })?,
                    line,
                )?;
                registry.insert(
                    Allocation {
                        id: id.to_string(),
                        base,
                        size,
                        alloc_seq: event_seq,
                        free_seq: usize::MAX,
                    },
                    line,
                )?;
                event_seq += 1;
            }
            "free" => {
                let id = toks.next().ok_or_else(|| TraceError::Parse { line, msg: "free: missing id".into() })?;
                registry.free(id, event_seq, line)?;
                event_seq += 1;
            }
            "iter" => {
                iteration += 1;
                saw_trailing_marker = true;
            }
            "launch" => {
                saw_trailing_marker = false;
                let kind_tok = toks
                    .next()
                    .ok_or_else(|| TraceError::Parse { line, msg: "launch: missing kind".into() })?;
                let kind = match kind_tok {
                    "opaque" => LaunchKind::Opaque,
                    "library" => LaunchKind::Library,
                    "memcopy" => LaunchKind::Memcopy,
                    other => {
                        return Err(TraceError::Parse { line, msg: format!("unknown launch kind `{other}`") })
                    }
                };
                let mut kernel = String::new();
                let mut args = Vec::new();
                let mut declared_reads = Vec::new();
                let mut declared_writes = Vec::new();
                let mut collective = false;
                let mut mc_src: Option<String> = None;
                let mut mc_dst: Option<String> = None;
                let mut mc_bytes: Option<u64> = None;

                if kind != LaunchKind::Memcopy {
                    kernel = toks
                        .next()
                        .ok_or_else(|| TraceError::Parse { line, msg: "launch: missing kernel name".into() })?
                        .to_string();
                }
                for tok in toks {
                    if let Some(v) = kv(tok, "args") {
                        args = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
                    } else if let Some(v) = kv(tok, "reads") {
                        declared_reads = parse_access_list(v, line)?;
                    } else if let Some(v) = kv(tok, "writes") {
                        declared_writes = parse_access_list(v, line)?;
                    } else if let Some(v) = kv(tok, "flags") {
                        for f in v.split(',') {
                            match f {
                                "collective" => collective = true,
                                "" => {}
                                other => {
                                    return Err(TraceError::Parse {
                                        line,
                                        msg: format!("unknown launch flag `{other}`"),
                                    })
                                }
                            }
                        }
                    } else if let Some(v) = kv(tok, "src") {
                        mc_src = Some(v.to_string());
                    } else if let Some(v) = kv(tok, "dst") {
                        mc_dst = Some(v.to_string());
                    } else if let Some(v) = kv(tok, "bytes") {
                        mc_bytes = Some(parse_u64(v, line)?);
                    } else {
                        return Err(TraceError::Parse { line, msg: format!("unknown launch field `{tok}`") });
                    }
                }

                if kind == LaunchKind::Memcopy {
                    let src = mc_src.ok_or_else(|| TraceError::Parse { line, msg: "memcopy: missing src".into() })?;
                    let dst = mc_dst.ok_or_else(|| TraceError::Parse { line, msg: "memcopy: missing dst".into() })?;
                    let bytes =
                        mc_bytes.ok_or_else(|| TraceError::Parse { line, msg: "memcopy: missing bytes".into() })?;
                    kernel = "memcopy".to_string();
                    args = vec![src.clone(), dst.clone()];
                    declared_reads = vec![DeclaredAccess { buffer: src, span: Some((0, bytes)) }];
                    declared_writes = vec![DeclaredAccess { buffer: dst, span: Some((0, bytes)) }];
                }

                launches.push(LaunchRecord {
                    seq: launches.len(),
                    event_seq,
                    kind,
                    kernel,
                    args,
                    streams: BTreeMap::new(),
                    intervals: BTreeMap::new(),
                    declared_reads,
                    declared_writes,
                    collective,
                    iteration,
                });
                event_seq += 1;
            }
            "stream" | "interval" => {
                let launch = launches.last_mut().ok_or_else(|| TraceError::Parse {
                    line,
                    msg: format!("`{rec}` record before any launch"),
                })?;
                if launch.kind != LaunchKind::Opaque {
                    return Err(TraceError::Parse {
                        line,
                        msg: format!("`{rec}` record attached to a non-opaque launch"),
                    });
                }
                let index: usize = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| TraceError::Parse { line, msg: format!("{rec}: bad instruction index") })?;
                if rec == "stream" {
                    if launch.intervals.contains_key(&index) {
                        return Err(TraceError::Parse {
                            line,
                            msg: format!("instruction {index} has both stream and interval records"),
                        });
                    }
                    let entry = launch.streams.entry(index).or_default();
                    for t in toks {
                        entry.push(parse_u64(t, line)?);
                    }
                } else {
                    if launch.streams.contains_key(&index) || launch.intervals.contains_key(&index) {
                        return Err(TraceError::Parse {
                            line,
                            msg: format!("instruction {index} has conflicting instrumentation records"),
                        });
                    }
                    let min = parse_u64(
                        toks.next().ok_or_else(|| TraceError::Parse { line, msg: "interval: missing min".into() })?,
                        line,
                    )?;
                    let max = parse_u64(
                        toks.next().ok_or_else(|| TraceError::Parse { line, msg: "interval: missing max".into() })?,
                        line,
                    )?;
                    if min > max {
                        return Err(TraceError::Parse { line, msg: format!("interval: min {min:#x} > max {max:#x}") });
                    }
                    launch.intervals.insert(index, (min, max));
                }
            }
            other => {
                return Err(TraceError::Parse { line, msg: format!("unknown record `{other}`") });
            }
        }
    }

    let pattern_id = pattern_id.ok_or(TraceError::MissingPattern)?;
    let iterations = if launches.is_empty() {
        0
    } else if saw_trailing_marker {
        iteration
    } else {
        iteration + 1
    };
    Ok(ExecutionTrace { version, pattern_id, launches, registry, iterations })
}

/// Serialize a trace back to its file form. Round-trips through
/// [`parse_trace`]; emission is deterministic.
pub fn write_trace(trace: &ExecutionTrace) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{TRACE_MAGIC} {}", trace.version);
    let _ = writeln!(out, "pattern {}", trace.pattern_id);

    // Interleave alloc/free/launch records back into event order.
    #[derive(Debug)]
    enum Ev<'a> {
        Alloc(&'a Allocation),
        Free(&'a Allocation),
        Launch(&'a LaunchRecord),
    }
    let mut events: Vec<(usize, Ev)> = Vec::new();
    for a in &trace.registry.allocations {
        events.push((a.alloc_seq, Ev::Alloc(a)));
        if a.free_seq != usize::MAX {
            events.push((a.free_seq, Ev::Free(a)));
        }
    }
    for l in &trace.launches {
        events.push((l.event_seq, Ev::Launch(l)));
    }
    events.sort_by_key(|(seq, _)| *seq);

    let mut current_iteration = 0usize;
    for (_, ev) in events {
        if let Ev::Launch(l) = &ev {
            while current_iteration < l.iteration {
                let _ = writeln!(out, "iter");
                current_iteration += 1;
            }
        }
        match ev {
            Ev::Alloc(a) => {
                let _ = writeln!(out, "alloc {} {:#x} {}", a.id, a.base, a.size);
            }
            Ev::Free(a) => {
                let _ = writeln!(out, "free {}", a.id);
            }
            Ev::Launch(l) => {
                match l.kind {
                    LaunchKind::Opaque => {
                        let _ = write!(out, "launch opaque {}", l.kernel);
                        if !l.args.is_empty() {
                            let _ = write!(out, " args={}", l.args.join(","));
                        }
                        if l.collective {
                            let _ = write!(out, " flags=collective");
                        }
                        let _ = writeln!(out);
                        for (idx, addrs) in &l.streams {
                            let _ = write!(out, "stream {idx}");
                            for a in addrs {
                                let _ = write!(out, " {a:#x}");
                            }
                            let _ = writeln!(out);
                        }
                        for (idx, (min, max)) in &l.intervals {
                            let _ = writeln!(out, "interval {idx} {min:#x} {max:#x}");
                        }
                    }
                    LaunchKind::Library => {
                        let fmt_list = |list: &[DeclaredAccess]| {
                            list.iter()
                                .map(|d| match d.span {
                                    Some((off, len)) => format!("{}:{}:{}", d.buffer, off, len),
                                    None => d.buffer.clone(),
                                })
                                .collect::<Vec<_>>()
                                .join(",")
                        };
                        let _ = write!(out, "launch library {}", l.kernel);
                        if !l.args.is_empty() {
                            let _ = write!(out, " args={}", l.args.join(","));
                        }
                        if !l.declared_reads.is_empty() {
                            let _ = write!(out, " reads={}", fmt_list(&l.declared_reads));
                        }
                        if !l.declared_writes.is_empty() {
                            let _ = write!(out, " writes={}", fmt_list(&l.declared_writes));
                        }
                        if l.collective {
                            let _ = write!(out, " flags=collective");
                        }
                        let _ = writeln!(out);
                    }
                    LaunchKind::Memcopy => {
                        let bytes = l.declared_reads[0].span.unwrap().1;
                        let _ = writeln!(
                            out,
                            "launch memcopy src={} dst={} bytes={}",
                            l.declared_reads[0].buffer, l.declared_writes[0].buffer, bytes
                        );
                    }
                }
            }
        }
    }
    out
}

/// Stable dispatch key for a trace's execution pattern. Traces declare
/// their pattern identifier (e.g. a batch-shape key); identical patterns
/// map to identical dependency graphs downstream.
pub fn pattern_dispatch_key(trace: &ExecutionTrace) -> String {
    trace.pattern_id.clone()
}

/// Validate that every iteration launches the same kernel sequence, which
/// is what "one captured graph per pattern" requires. Patterns must be
/// straight-line; traces where iterations diverge are rejected.
pub fn check_iterations_consistent(trace: &ExecutionTrace) -> Result<(), TraceError> {
    if trace.iterations <= 1 {
        return Ok(());
    }
    let signature = |it: usize| -> Vec<(String, LaunchKind)> {
        trace
            .launches_in_iteration(it)
            .iter()
            .map(|l| (l.kernel.clone(), l.kind))
            .collect()
    };
    let first = signature(0);
    for it in 1..trace.iterations {
        if signature(it) != first {
            return Err(TraceError::Parse {
                line: 0,
                msg: format!("iteration {it} launches a different kernel sequence than iteration 0"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
KDTRACE 1
pattern demo
alloc A 0x1000 4096
alloc B 0x2000 4096
launch opaque k0 args=A
stream 0 0x1000 0x1ff0
launch library sgemm args=A,B reads=A writes=B
launch memcopy src=B dst=A bytes=128
iter
launch opaque k0 args=A
interval 0 0x1000 0x1ff0
launch library sgemm args=A,B reads=A writes=B
launch memcopy src=B dst=A bytes=128
free B
";

    #[test]
    fn parses_and_roundtrips() {
        let t = parse_trace(SMALL).unwrap();
        assert_eq!(t.pattern_id, "demo");
        assert_eq!(t.launches.len(), 6);
        assert_eq!(t.iterations, 2);
        assert_eq!(t.launches[0].streams[&0], vec![0x1000, 0x1ff0]);
        assert_eq!(t.launches[3].intervals[&0], (0x1000, 0x1ff0));
        assert_eq!(t.launches[2].kind, LaunchKind::Memcopy);
        assert_eq!(t.launches[2].declared_reads[0].span, Some((0, 128)));

        let text = write_trace(&t);
        let t2 = parse_trace(&text).unwrap();
        assert_eq!(t.launches, t2.launches);
        assert_eq!(write_trace(&t2), text);
    }

    #[test]
    fn header_and_version_enforced() {
        assert!(matches!(parse_trace("NOTATRACE 1\n"), Err(TraceError::BadHeader)));
        assert!(matches!(
            parse_trace("KDTRACE 99\npattern p\n"),
            Err(TraceError::UnsupportedVersion(99))
        ));
    }

    #[test]
    fn missing_pattern_rejected() {
        assert!(matches!(
            parse_trace("KDTRACE 1\nalloc A 0x1000 16\n"),
            Err(TraceError::MissingPattern)
        ));
    }

    #[test]
    fn live_overlap_rejected() {
        let text = "KDTRACE 1\npattern p\nalloc A 0x1000 4096\nalloc B 0x1800 16\n";
        assert!(matches!(parse_trace(text), Err(TraceError::OverlappingAlloc { .. })));
        // Address reuse after free is fine.
        let text = "KDTRACE 1\npattern p\nalloc A 0x1000 4096\nfree A\nalloc B 0x1800 16\n";
        assert!(parse_trace(text).is_ok());
    }

    #[test]
    fn liveness_intervals_recorded() {
        let t = parse_trace(SMALL).unwrap();
        let b = t.registry.get("B").unwrap();
        assert!(b.live_at(t.launches[1].event_seq));
        assert!(!b.live_at(b.free_seq));
    }

    #[test]
    fn iteration_consistency_checked() {
        let good = parse_trace(SMALL).unwrap();
        assert!(check_iterations_consistent(&good).is_ok());

        let bad = "\
KDTRACE 1
pattern p
alloc A 0x1000 64
launch memcopy src=A dst=A bytes=1
iter
launch library other args=A reads=A writes=A
";
        // src == dst would overlap-error at resolve time, not parse time;
        // the consistency check still sees diverging sequences.
        let t = parse_trace(bad).unwrap();
        assert!(check_iterations_consistent(&t).is_err());
    }

    #[test]
    fn dispatch_key_is_declared_pattern() {
        let t = parse_trace(SMALL).unwrap();
        assert_eq!(pattern_dispatch_key(&t), "demo");
    }
}
