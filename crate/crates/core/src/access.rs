//! Resolve per-instruction address intervals against the buffer registry
//! into per-launch read/write spans.
//!
//! A framework allocator can hand out one large parent allocation and carve
//! tensors out of it; the registry then contains the parent while the
//! instrumentation intervals pinpoint the bytes a kernel actually touched.
//! Resolution reports the precise sub-span, not the allocation size.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::kir::{plan_instrumentation, InstrInterval, InstrumentationResult, KernelIR, KirError};
use crate::trace::{BufferRegistry, ExecutionTrace, LaunchKind, LaunchRecord, TraceError};

#[derive(Debug, Error)]
pub enum AccessError {
    #[error("launch {seq}: interval [{start:#x}, {end:#x}) straddles buffers `{a}` and `{b}`")]
    Straddle { seq: usize, start: u64, end: u64, a: String, b: String },
    #[error("launch {seq}: interval [{start:#x}, {end:#x}) overruns buffer `{buffer}`")]
    Overrun { seq: usize, start: u64, end: u64, buffer: String },
    #[error("launch {seq}: declared access references unknown buffer `{buffer}`")]
    UnknownBuffer { seq: usize, buffer: String },
    #[error("launch {seq}: declared access to `{buffer}` outside its bounds (offset {offset}, len {len})")]
    DeclaredOutOfBounds { seq: usize, buffer: String, offset: u64, len: u64 },
    #[error("launch {seq}: buffer `{buffer}` is not live at this launch")]
    DeadBuffer { seq: usize, buffer: String },
    #[error("launch {seq}: opaque kernel `{kernel}` has no source in the kernel set")]
    MissingKernel { seq: usize, kernel: String },
    #[error("launch {seq}: {source}")]
    Replay { seq: usize, source: KirError },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// One contiguous byte span within a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Span {
    pub offset: u64,
    pub len: u64,
}

impl Span {
    pub fn end(&self) -> u64 {
        self.offset + self.len
    }
}

/// Buffers read and written by one kernel launch, with byte spans.
///
/// Spans are the union interval per buffer per direction: exact byte sets
/// are unobtainable from `[min, max]` instrumentation, and the union can
/// only enlarge transfer sizes, never miss bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessSummary {
    pub seq: usize,
    pub kernel: String,
    pub kind: LaunchKind,
    pub collective: bool,
    pub iteration: usize,
    pub reads: BTreeMap<String, Span>,
    pub writes: BTreeMap<String, Span>,
    /// Set when some interval landed outside every live buffer or inside a
    /// buffer not reachable from the launch arguments. Such launches must
    /// fall back to pinned execution.
    pub indirect: bool,
}

fn widen(map: &mut BTreeMap<String, Span>, buffer: &str, start: u64, end: u64) {
    let span = map.entry(buffer.to_string()).or_insert(Span { offset: start, len: end - start });
    let lo = span.offset.min(start);
    let hi = span.end().max(end);
    *span = Span { offset: lo, len: hi - lo };
}

/// Resolve one launch's accesses against the registry.
///
/// For opaque launches the instrumentation result drives resolution: each
/// instruction's byte span `[min, max + width)` is mapped to the unique
/// live buffer containing it. Loads become reads, stores writes, atomics
/// both. Spans in the same buffer are unioned per direction.
///
/// An interval contained in a live buffer that is not among the launch
/// arguments — or contained in no live buffer at all — marks the launch
/// indirect rather than failing: the analyzer cannot see how the kernel
/// obtained that address, so the kernel must stay pinned. Intervals
/// touching two live buffers mean the trace is malformed.
pub fn resolve_accesses(
    launch: &LaunchRecord,
    result: Option<&InstrumentationResult>,
    registry: &BufferRegistry,
) -> Result<AccessSummary, AccessError> {
    let seq = launch.seq;
    let mut summary = AccessSummary {
        seq,
        kernel: launch.kernel.clone(),
        kind: launch.kind,
        collective: launch.collective,
        iteration: launch.iteration,
        reads: BTreeMap::new(),
        writes: BTreeMap::new(),
        indirect: false,
    };

    match launch.kind {
        LaunchKind::Library | LaunchKind::Memcopy => {
            let mut apply = |list: &[crate::trace::DeclaredAccess],
                             dir: &mut BTreeMap<String, Span>|
             -> Result<(), AccessError> {
                for acc in list {
                    let alloc = registry
                        .get(&acc.buffer)
                        .ok_or_else(|| AccessError::UnknownBuffer { seq, buffer: acc.buffer.clone() })?;
                    if !alloc.live_at(launch.event_seq) {
                        return Err(AccessError::DeadBuffer { seq, buffer: acc.buffer.clone() });
                    }
                    let (offset, len) = acc.span.unwrap_or((0, alloc.size));
                    if offset + len > alloc.size {
                        return Err(AccessError::DeclaredOutOfBounds {
                            seq,
                            buffer: acc.buffer.clone(),
                            offset,
                            len,
                        });
                    }
                    widen(dir, &acc.buffer, offset, offset + len);
                }
                Ok(())
            };
            let mut reads = BTreeMap::new();
            let mut writes = BTreeMap::new();
            apply(&launch.declared_reads, &mut reads)?;
            apply(&launch.declared_writes, &mut writes)?;
            summary.reads = reads;
            summary.writes = writes;
        }
        LaunchKind::Opaque => {
            let result = result.expect("opaque launches carry an instrumentation result");
            for interval in result.intervals.values() {
                let (start, end) = interval.byte_span();
                let hits = registry.live_overlapping(start, end, launch.event_seq);
                match hits.len() {
                    0 => {
                        summary.indirect = true;
                        continue;
                    }
                    1 => {
                        let alloc = hits[0];
                        if !alloc.contains_span(start, end) {
                            return Err(AccessError::Overrun {
                                seq,
                                start,
                                end,
                                buffer: alloc.id.clone(),
                            });
                        }
                        if !launch.args.iter().any(|a| a == &alloc.id) {
                            // Reachable only through state the analyzer
                            // cannot see; keep the span (it is real) but
                            // force the fallback pin.
                            summary.indirect = true;
                        }
                        let off = start - alloc.base;
                        let end_off = end - alloc.base;
                        if interval.class.reads() {
                            widen(&mut summary.reads, &alloc.id, off, end_off);
                        }
                        if interval.class.writes() {
                            widen(&mut summary.writes, &alloc.id, off, end_off);
                        }
                    }
                    _ => {
                        return Err(AccessError::Straddle {
                            seq,
                            start,
                            end,
                            a: hits[0].id.clone(),
                            b: hits[1].id.clone(),
                        })
                    }
                }
            }
        }
    }
    Ok(summary)
}

/// Build the instrumentation result for an opaque launch from its recorded
/// streams and/or pre-aggregated intervals.
fn launch_result(
    launch: &LaunchRecord,
    kernel: &KernelIR,
) -> Result<InstrumentationResult, AccessError> {
    let plan = plan_instrumentation(kernel);
    let mut result = if launch.streams.is_empty() {
        InstrumentationResult::default()
    } else {
        // Replay validates stream coverage against the full plan only when
        // no pre-aggregated intervals fill the gaps, so check per slot below.
        let mut partial = InstrumentationResult::default();
        for (&index, addrs) in &launch.streams {
            let inst = kernel
                .instructions
                .get(index)
                .filter(|i| i.opcode.is_memory())
                .ok_or(AccessError::Replay {
                    seq: launch.seq,
                    source: KirError::NotAMemoryInstruction { index },
                })?;
            if addrs.is_empty() {
                return Err(AccessError::Replay {
                    seq: launch.seq,
                    source: KirError::EmptyStream { index },
                });
            }
            partial.intervals.insert(
                index,
                InstrInterval {
                    min: *addrs.iter().min().unwrap(),
                    max: *addrs.iter().max().unwrap(),
                    access_width: inst.access_width.unwrap(),
                    class: crate::kir::class_of_opcode(inst.opcode),
                },
            );
        }
        partial
    };

    for (&index, &(min, max)) in &launch.intervals {
        let inst = kernel
            .instructions
            .get(index)
            .filter(|i| i.opcode.is_memory())
            .ok_or(AccessError::Replay {
                seq: launch.seq,
                source: KirError::NotAMemoryInstruction { index },
            })?;
        result.intervals.insert(
            index,
            InstrInterval {
                min,
                max,
                access_width: inst.access_width.unwrap(),
                class: crate::kir::class_of_opcode(inst.opcode),
            },
        );
    }

    // Every memory instruction must be covered by one record or the other.
    if let Some(slot) = plan.slots.iter().find(|s| !result.intervals.contains_key(&s.instruction_index)) {
        return Err(AccessError::Replay {
            seq: launch.seq,
            source: KirError::MissingStream { index: slot.instruction_index },
        });
    }
    Ok(result)
}

/// Summarize every launch of a trace, in sequence order. Deterministic:
/// identical trace bytes yield identical summaries.
pub fn summarize_pattern(
    trace: &ExecutionTrace,
    kernels: &BTreeMap<String, KernelIR>,
) -> Result<Vec<AccessSummary>, AccessError> {
    let mut out = Vec::with_capacity(trace.launches.len());
    for launch in &trace.launches {
        let summary = match launch.kind {
            LaunchKind::Opaque => {
                let kernel = kernels.get(&launch.kernel).ok_or_else(|| AccessError::MissingKernel {
                    seq: launch.seq,
                    kernel: launch.kernel.clone(),
                })?;
                let result = launch_result(launch, kernel)?;
                resolve_accesses(launch, Some(&result), &trace.registry)?
            }
            _ => resolve_accesses(launch, None, &trace.registry)?,
        };
        out.push(summary);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kir::parse_kernel;
    use crate::trace::parse_trace;

    fn kernel_set(srcs: &[(&str, &str)]) -> BTreeMap<String, KernelIR> {
        srcs.iter()
            .map(|(name, src)| (name.to_string(), parse_kernel(src).unwrap()))
            .collect()
    }

    const LOAD_K: &str = ".visible .entry loadk(.param .u64 a) {\n    ld.global.v4.f32 %f1, [%rd1];\n}\n";

    #[test]
    fn whole_buffer_span_from_interval() {
        // Buffer A = [0x1000, 0x1000+4096); one load interval
        // [0x1000, 0x1ff0] at width 16 covers exactly 4096 bytes.
        let trace = parse_trace(
            "KDTRACE 1\npattern p\nalloc A 0x1000 4096\nlaunch opaque loadk args=A\ninterval 0 0x1000 0x1ff0\n",
        )
        .unwrap();
        let kernels = kernel_set(&[("loadk", LOAD_K)]);
        let summaries = summarize_pattern(&trace, &kernels).unwrap();
        assert_eq!(summaries.len(), 1);
        assert_eq!(summaries[0].reads["A"], Span { offset: 0, len: 4096 });
        assert!(summaries[0].writes.is_empty());
        assert!(!summaries[0].indirect);
    }

    #[test]
    fn library_kernel_uses_signature() {
        let trace = parse_trace(
            "KDTRACE 1\npattern p\nalloc A 0x1000 64\nalloc B 0x2000 64\nalloc C 0x3000 32\nlaunch library sgemm args=A,B,C reads=A,B writes=C\n",
        )
        .unwrap();
        let summaries = summarize_pattern(&trace, &BTreeMap::new()).unwrap();
        let s = &summaries[0];
        assert_eq!(s.reads.len(), 2);
        assert_eq!(s.reads["A"], Span { offset: 0, len: 64 });
        assert_eq!(s.writes["C"], Span { offset: 0, len: 32 });
    }

    #[test]
    fn unreachable_buffer_flags_indirect() {
        // The interval lands in B, which is live but not a launch arg.
        let trace = parse_trace(
            "KDTRACE 1\npattern p\nalloc A 0x1000 64\nalloc B 0x2000 64\nlaunch opaque loadk args=A\ninterval 0 0x2000 0x2020\n",
        )
        .unwrap();
        let kernels = kernel_set(&[("loadk", LOAD_K)]);
        let summaries = summarize_pattern(&trace, &kernels).unwrap();
        assert!(summaries[0].indirect);
        assert_eq!(summaries[0].reads["B"], Span { offset: 0, len: 0x30 });
    }

    #[test]
    fn unallocated_interval_flags_indirect_without_span() {
        let trace = parse_trace(
            "KDTRACE 1\npattern p\nalloc A 0x1000 64\nlaunch opaque loadk args=A\ninterval 0 0x9000 0x9000\n",
        )
        .unwrap();
        let kernels = kernel_set(&[("loadk", LOAD_K)]);
        let summaries = summarize_pattern(&trace, &kernels).unwrap();
        assert!(summaries[0].indirect);
        assert!(summaries[0].reads.is_empty());
    }

    #[test]
    fn straddling_interval_is_an_error() {
        let trace = parse_trace(
            "KDTRACE 1\npattern p\nalloc A 0x1000 0x40\nalloc B 0x1040 0x40\nlaunch opaque loadk args=A,B\ninterval 0 0x1030 0x1050\n",
        )
        .unwrap();
        let kernels = kernel_set(&[("loadk", LOAD_K)]);
        assert!(matches!(
            summarize_pattern(&trace, &kernels),
            Err(AccessError::Straddle { .. })
        ));
    }

    #[test]
    fn memcopy_read_and_write_of_equal_len() {
        let trace = parse_trace(
            "KDTRACE 1\npattern p\nalloc A 0x1000 256\nalloc B 0x2000 256\nlaunch memcopy src=A dst=B bytes=128\n",
        )
        .unwrap();
        let summaries = summarize_pattern(&trace, &BTreeMap::new()).unwrap();
        let s = &summaries[0];
        assert_eq!(s.reads["A"].len, s.writes["B"].len);
        assert_eq!(s.reads["A"].len, 128);
    }

    #[test]
    fn empty_trace_empty_summaries() {
        let trace = parse_trace("KDTRACE 1\npattern p\n").unwrap();
        assert!(summarize_pattern(&trace, &BTreeMap::new()).unwrap().is_empty());
    }

    #[test]
    fn three_launch_produce_transform_consume() {
        let trace = parse_trace(
            "KDTRACE 1\npattern p\nalloc A 0x1000 256\n\
             launch library produce args=A writes=A\n\
             launch library transform args=A reads=A writes=A\n\
             launch library consume args=A reads=A\n",
        )
        .unwrap();
        let summaries = summarize_pattern(&trace, &BTreeMap::new()).unwrap();
        assert_eq!(summaries.len(), 3);
        assert!(summaries[0].writes.contains_key("A"));
        assert!(summaries[1].reads.contains_key("A") && summaries[1].writes.contains_key("A"));
        assert!(summaries[2].reads.contains_key("A"));
    }

    #[test]
    fn spans_stay_within_buffers() {
        let trace = parse_trace(
            "KDTRACE 1\npattern p\nalloc A 0x1000 64\nlaunch library k args=A reads=A:32:64\n",
        )
        .unwrap();
        assert!(matches!(
            summarize_pattern(&trace, &BTreeMap::new()),
            Err(AccessError::DeclaredOutOfBounds { .. })
        ));
    }

    #[test]
    fn dead_buffer_rejected() {
        let trace = parse_trace(
            "KDTRACE 1\npattern p\nalloc A 0x1000 64\nfree A\nlaunch library k args=A reads=A\n",
        )
        .unwrap();
        assert!(matches!(
            summarize_pattern(&trace, &BTreeMap::new()),
            Err(AccessError::DeadBuffer { .. })
        ));
    }
}
