//! Data dependency graph construction.
//!
//! Execution order is preserved by disaggregation, so only true (RAW)
//! dependencies need edges: write-after-read and write-after-write hazards
//! cannot occur when kernels run in sequence. The builder tracks the last
//! writer of every byte span and adds an edge from that writer to each
//! later reader, annotated with the overlapping byte count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::access::AccessSummary;
use crate::trace::LaunchKind;

pub const DDG_MAGIC: &str = "KDDDG";
pub const DDG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DdgError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad header: expected `{DDG_MAGIC} <version>`")]
    BadHeader,
    #[error("unsupported graph schema version {0} (reader supports {DDG_VERSION})")]
    UnsupportedVersion(u32),
    #[error("cross-iteration detection needs at least 2 iterations, got {0}")]
    TooFewIterations(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PinReason {
    /// Kernel performed an access the analyzer could not attribute to a
    /// launch argument; it must stay on the pattern's default GPU.
    Indirect,
    /// Collective operation; stays on its original GPU group.
    Collective,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub seq: usize,
    pub kernel: String,
    pub kind: LaunchKind,
    /// Buffers this launch touches, for the post-hoc capacity report.
    pub buffers: Vec<String>,
}

/// RAW edge: consumer `dst` reads `bytes` produced by `src` in `buffer`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub buffer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DependencyGraph {
    pub pattern_id: String,
    pub nodes: Vec<Node>,
    /// Edges sorted by (src, dst, buffer); forward-only (src < dst), so the
    /// graph is a DAG whose topological order is the sequence order.
    pub edges: Vec<Edge>,
    pub pinned: BTreeMap<usize, PinReason>,
    /// Sizes of buffers referenced by nodes/edges, for capacity reporting.
    pub buffer_sizes: BTreeMap<String, u64>,
}

impl DependencyGraph {
    pub fn node(&self, seq: usize) -> Option<&Node> {
        self.nodes.get(seq)
    }

    pub fn incoming(&self, dst: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.dst == dst)
    }

    pub fn outgoing(&self, src: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.src == src)
    }

    /// Plot-friendly edge list: one `src<TAB>dst<TAB>bytes` line per edge.
    pub fn to_edge_list_text(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            let _ = writeln!(out, "{}\t{}\t{}", e.src, e.dst, e.bytes);
        }
        out
    }
}

/// Warning raised while building a graph; not fatal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuildWarning {
    /// A launch read bytes no earlier launch wrote. Model weights and
    /// request inputs behave like this: they are treated as initialized by
    /// a virtual source before the pattern starts (weights are replicated
    /// on every GPU, so such reads create no transfer edges).
    ReadFromVirtualSource { seq: usize, buffer: String },
}

#[derive(Debug, Clone)]
pub struct DdgBuild {
    pub graph: DependencyGraph,
    pub warnings: Vec<BuildWarning>,
}

/// Last-writer state for one buffer: disjoint, sorted byte intervals, each
/// owned by the launch that most recently wrote them.
#[derive(Debug, Default)]
struct WriterMap {
    /// (start, end, writer seq), sorted by start, pairwise disjoint.
    intervals: Vec<(u64, u64, usize)>,
}

impl WriterMap {
    /// Bytes of `[start, end)` owned by each writer.
    fn readers_view(&self, start: u64, end: u64) -> BTreeMap<usize, u64> {
        let mut per_writer: BTreeMap<usize, u64> = BTreeMap::new();
        for &(s, e, w) in &self.intervals {
            let lo = s.max(start);
            let hi = e.min(end);
            if lo < hi {
                *per_writer.entry(w).or_default() += hi - lo;
            }
        }
        per_writer
    }

    fn covered(&self, start: u64, end: u64) -> u64 {
        self.intervals
            .iter()
            .map(|&(s, e, _)| {
                let lo = s.max(start);
                let hi = e.min(end);
                hi.saturating_sub(lo)
            })
            .sum()
    }

    fn record_write(&mut self, start: u64, end: u64, writer: usize) {
        let mut next = Vec::with_capacity(self.intervals.len() + 2);
        for &(s, e, w) in &self.intervals {
            if e <= start || end <= s {
                next.push((s, e, w));
                continue;
            }
            if s < start {
                next.push((s, start, w));
            }
            if end < e {
                next.push((end, e, w));
            }
        }
        next.push((start, end, writer));
        next.sort_by_key(|&(s, _, _)| s);
        self.intervals = next;
    }
}

/// Build the dependency graph for one iteration's summaries.
///
/// Reads are resolved before writes within a launch, so a kernel that reads
/// and writes the same buffer depends on the previous writer, not itself.
/// Reads of bytes never written within the iteration produce a warning and
/// no edge. Indirect and collective launches land in the pinned set.
pub fn build_ddg(pattern_id: &str, summaries: &[AccessSummary]) -> DdgBuild {
    build_ddg_with_sizes(pattern_id, summaries, &BTreeMap::new())
}

/// [`build_ddg`] with buffer sizes recorded for capacity reporting.
pub fn build_ddg_with_sizes(
    pattern_id: &str,
    summaries: &[AccessSummary],
    buffer_sizes: &BTreeMap<String, u64>,
) -> DdgBuild {
    let mut warnings = Vec::new();
    let mut writers: BTreeMap<String, WriterMap> = BTreeMap::new();
    let mut nodes = Vec::with_capacity(summaries.len());
    let mut pinned = BTreeMap::new();
    // (src, dst, buffer) -> bytes; merges multiple reads from one producer.
    let mut edge_bytes: BTreeMap<(usize, usize, String), u64> = BTreeMap::new();
    let mut touched: BTreeSet<String> = BTreeSet::new();

    let base = summaries.first().map(|s| s.seq).unwrap_or(0);
    for summary in summaries {
        let node_seq = summary.seq - base;
        let mut bufs: BTreeSet<String> = BTreeSet::new();
        for (buffer, span) in &summary.reads {
            bufs.insert(buffer.clone());
            let map = writers.entry(buffer.clone()).or_default();
            let (start, end) = (span.offset, span.end());
            if map.covered(start, end) < end - start {
                warnings.push(BuildWarning::ReadFromVirtualSource {
                    seq: summary.seq,
                    buffer: buffer.clone(),
                });
            }
            for (writer, bytes) in map.readers_view(start, end) {
                if writer != node_seq && bytes > 0 {
                    *edge_bytes.entry((writer, node_seq, buffer.clone())).or_default() += bytes;
                }
            }
        }
        for (buffer, span) in &summary.writes {
            bufs.insert(buffer.clone());
            writers
                .entry(buffer.clone())
                .or_default()
                .record_write(span.offset, span.end(), node_seq);
        }
        touched.extend(bufs.iter().cloned());
        nodes.push(Node {
            seq: node_seq,
            kernel: summary.kernel.clone(),
            kind: summary.kind,
            buffers: bufs.into_iter().collect(),
        });
        if summary.indirect {
            pinned.insert(node_seq, PinReason::Indirect);
        }
        if summary.collective {
            pinned.insert(node_seq, PinReason::Collective);
        }
    }

    let edges = edge_bytes
        .into_iter()
        .map(|((src, dst, buffer), bytes)| Edge { src, dst, bytes, buffer })
        .collect();
    let buffer_sizes = touched
        .into_iter()
        .filter_map(|b| buffer_sizes.get(&b).map(|&s| (b, s)))
        .collect();

    DdgBuild {
        graph: DependencyGraph {
            pattern_id: pattern_id.to_string(),
            nodes,
            edges,
            pinned,
            buffer_sizes,
        },
        warnings,
    }
}

/// Buffer written in one iteration and read in a later one (a KV cache is
/// the canonical case). Such buffers never generate intra-pattern edges;
/// they are replicated in the background at runtime.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossIterationBuffer {
    pub buffer: String,
    /// Launch seqs that wrote the buffer in an iteration some later
    /// iteration reads from.
    pub writers: Vec<usize>,
    /// Launch seqs that read the buffer written in an earlier iteration.
    pub readers: Vec<usize>,
}

/// Detect cross-iteration RAW buffers from per-iteration summaries.
pub fn detect_cross_iteration(
    per_iteration: &[Vec<AccessSummary>],
) -> Result<Vec<CrossIterationBuffer>, DdgError> {
    if per_iteration.len() < 2 {
        return Err(DdgError::TooFewIterations(per_iteration.len()));
    }
    // buffer -> per-iteration (writer seqs, reader seqs)
    let mut by_buffer: BTreeMap<String, BTreeMap<usize, (Vec<usize>, Vec<usize>)>> = BTreeMap::new();
    for (it, summaries) in per_iteration.iter().enumerate() {
        for s in summaries {
            for buffer in s.writes.keys() {
                by_buffer
                    .entry(buffer.clone())
                    .or_default()
                    .entry(it)
                    .or_default()
                    .0
                    .push(s.seq);
            }
            for buffer in s.reads.keys() {
                by_buffer
                    .entry(buffer.clone())
                    .or_default()
                    .entry(it)
                    .or_default()
                    .1
                    .push(s.seq);
            }
        }
    }

    let mut out = Vec::new();
    for (buffer, per_it) in by_buffer {
        let mut writers = Vec::new();
        let mut readers = Vec::new();
        for (&wit, (w, _)) in &per_it {
            if per_it.iter().any(|(&rit, (_, r))| rit > wit && !r.is_empty()) && !w.is_empty() {
                writers.extend(w.iter().copied());
            }
        }
        for (&rit, (_, r)) in &per_it {
            if per_it.iter().any(|(&wit, (w, _))| wit < rit && !w.is_empty()) {
                readers.extend(r.iter().copied());
            }
        }
        if !writers.is_empty() && !readers.is_empty() {
            out.push(CrossIterationBuffer { buffer, writers, readers });
        }
    }
    Ok(out)
}

/// Serialize a graph to its versioned file form (`.kdg`).
pub fn write_ddg(graph: &DependencyGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{DDG_MAGIC} {DDG_VERSION}");
    let _ = writeln!(out, "pattern {}", graph.pattern_id);
    for (buffer, size) in &graph.buffer_sizes {
        let _ = writeln!(out, "buffer {buffer} {size}");
    }
    for n in &graph.nodes {
        let kind = match n.kind {
            LaunchKind::Opaque => "opaque",
            LaunchKind::Library => "library",
            LaunchKind::Memcopy => "memcopy",
        };
        let _ = write!(out, "node {} {} {}", n.seq, n.kernel, kind);
        if !n.buffers.is_empty() {
            let _ = write!(out, " bufs={}", n.buffers.join(","));
        }
        let _ = writeln!(out);
    }
    for e in &graph.edges {
        let _ = writeln!(out, "edge {} {} {} {}", e.src, e.dst, e.bytes, e.buffer);
    }
    for (&node, reason) in &graph.pinned {
        let reason = match reason {
            PinReason::Indirect => "indirect",
            PinReason::Collective => "collective",
            PinReason::User => "user",
        };
        let _ = writeln!(out, "pin {node} {reason}");
    }
    out
}

/// Parse a `.kdg` graph file.
pub fn parse_ddg(text: &str) -> Result<DependencyGraph, DdgError> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if !l.trim().is_empty() && !l.trim_start().starts_with('#') => break l.trim(),
            Some(_) => continue,
            None => return Err(DdgError::BadHeader),
        }
    };
    let mut toks = header.split_whitespace();
    if toks.next() != Some(DDG_MAGIC) {
        return Err(DdgError::BadHeader);
    }
    let version: u32 = toks.next().and_then(|v| v.parse().ok()).ok_or(DdgError::BadHeader)?;
    if version != DDG_VERSION {
        return Err(DdgError::UnsupportedVersion(version));
    }

    let mut graph = DependencyGraph::default();
    for (lineno, raw) in lines {
        let line = lineno + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut toks = l.split_whitespace();
        let err = |msg: String| DdgError::Parse { line, msg };
        match toks.next().unwrap() {
            "pattern" => {
                graph.pattern_id = toks.next().ok_or_else(|| err("pattern: missing id".into()))?.to_string();
            }
            "buffer" => {
                let id = toks.next().ok_or_else(|| err("buffer: missing id".into()))?.to_string();
                let size: u64 = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("buffer: bad size".into()))?;
                graph.buffer_sizes.insert(id, size);
            }
            "node" => {
                let seq: usize = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("node: bad seq".into()))?;
                let kernel = toks.next().ok_or_else(|| err("node: missing kernel".into()))?.to_string();
                let kind = match toks.next().ok_or_else(|| err("node: missing kind".into()))? {
                    "opaque" => LaunchKind::Opaque,
                    "library" => LaunchKind::Library,
                    "memcopy" => LaunchKind::Memcopy,
                    other => return Err(err(format!("node: unknown kind `{other}`"))),
                };
                let mut buffers = Vec::new();
                if let Some(tok) = toks.next() {
                    let v = tok
                        .strip_prefix("bufs=")
                        .ok_or_else(|| err(format!("node: unknown field `{tok}`")))?;
                    buffers = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
                }
                if seq != graph.nodes.len() {
                    return Err(err(format!("node seq {seq} out of order")));
                }
                graph.nodes.push(Node { seq, kernel, kind, buffers });
            }
            "edge" => {
                let mut num = |what: &str| -> Result<usize, DdgError> {
                    toks.next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| DdgError::Parse { line, msg: format!("edge: bad {what}") })
                };
                let src = num("src")?;
                let dst = num("dst")?;
                let bytes = num("bytes")? as u64;
                let buffer = toks.next().ok_or_else(|| err("edge: missing buffer".into()))?.to_string();
                if src >= dst {
                    return Err(err(format!("edge {src}->{dst} is not forward")));
                }
                if bytes == 0 {
                    return Err(err(format!("edge {src}->{dst} has zero bytes")));
                }
                graph.edges.push(Edge { src, dst, bytes, buffer });
            }
            "pin" => {
                let node: usize = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("pin: bad node".into()))?;
                let reason = match toks.next().ok_or_else(|| err("pin: missing reason".into()))? {
                    "indirect" => PinReason::Indirect,
                    "collective" => PinReason::Collective,
                    "user" => PinReason::User,
                    other => return Err(err(format!("pin: unknown reason `{other}`"))),
                };
                graph.pinned.insert(node, reason);
            }
            other => return Err(err(format!("unknown record `{other}`"))),
        }
    }
    for e in &graph.edges {
        if e.dst >= graph.nodes.len() {
            return Err(DdgError::Parse {
                line: 0,
                msg: format!("edge {}->{} references a missing node", e.src, e.dst),
            });
        }
    }
    for &node in graph.pinned.keys() {
        if node >= graph.nodes.len() {
            return Err(DdgError::Parse { line: 0, msg: format!("pin references missing node {node}") });
        }
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access::Span;

    fn summary(seq: usize, reads: &[(&str, u64, u64)], writes: &[(&str, u64, u64)]) -> AccessSummary {
        AccessSummary {
            seq,
            kernel: format!("k{seq}"),
            kind: LaunchKind::Opaque,
            collective: false,
            iteration: 0,
            reads: reads
                .iter()
                .map(|&(b, o, l)| (b.to_string(), Span { offset: o, len: l }))
                .collect(),
            writes: writes
                .iter()
                .map(|&(b, o, l)| (b.to_string(), Span { offset: o, len: l }))
                .collect(),
            indirect: false,
        }
    }

    #[test]
    fn raw_edge_with_overlap_bytes() {
        let s = vec![
            summary(0, &[], &[("A", 0, 100)]),
            summary(1, &[("A", 0, 100)], &[]),
        ];
        let g = build_ddg("p", &s).graph;
        assert_eq!(g.edges, vec![Edge { src: 0, dst: 1, bytes: 100, buffer: "A".into() }]);
    }

    #[test]
    fn last_writer_wins() {
        let s = vec![
            summary(0, &[], &[("A", 0, 100)]),
            summary(1, &[], &[("A", 0, 100)]),
            summary(2, &[("A", 0, 100)], &[]),
        ];
        let g = build_ddg("p", &s).graph;
        assert_eq!(g.edges, vec![Edge { src: 1, dst: 2, bytes: 100, buffer: "A".into() }]);
    }

    #[test]
    fn partial_overwrite_splits_edge_sizes() {
        // k0 writes all 100 bytes, k1 overwrites the first 50; k2 reads all.
        let s = vec![
            summary(0, &[], &[("A", 0, 100)]),
            summary(1, &[], &[("A", 0, 50)]),
            summary(2, &[("A", 0, 100)], &[]),
        ];
        let g = build_ddg("p", &s).graph;
        assert_eq!(
            g.edges,
            vec![
                Edge { src: 0, dst: 2, bytes: 50, buffer: "A".into() },
                Edge { src: 1, dst: 2, bytes: 50, buffer: "A".into() },
            ]
        );
    }

    #[test]
    fn war_and_waw_produce_no_edges() {
        let s = vec![
            summary(0, &[("A", 0, 64)], &[]),
            summary(1, &[], &[("A", 0, 64)]),
            summary(2, &[], &[("A", 0, 64)]),
        ];
        let g = build_ddg("p", &s).graph;
        assert!(g.edges.is_empty());
    }

    #[test]
    fn read_before_any_write_warns_without_edge() {
        let s = vec![summary(0, &[("W", 0, 10)], &[])];
        let b = build_ddg("p", &s);
        assert!(b.graph.edges.is_empty());
        assert_eq!(
            b.warnings,
            vec![BuildWarning::ReadFromVirtualSource { seq: 0, buffer: "W".into() }]
        );
    }

    #[test]
    fn self_read_after_own_write_no_edge() {
        let mut s1 = summary(1, &[("A", 0, 10)], &[("A", 0, 10)]);
        s1.kernel = "rw".into();
        let s = vec![summary(0, &[], &[("A", 0, 10)]), s1];
        let g = build_ddg("p", &s).graph;
        // The read of launch 1 resolves against launch 0's write, not its own.
        assert_eq!(g.edges.len(), 1);
        assert_eq!((g.edges[0].src, g.edges[0].dst), (0, 1));
    }

    #[test]
    fn indirect_summaries_are_pinned() {
        let mut s0 = summary(0, &[], &[("A", 0, 10)]);
        s0.indirect = true;
        let mut s1 = summary(1, &[("A", 0, 10)], &[]);
        s1.collective = true;
        let g = build_ddg("p", &[s0, s1]).graph;
        assert_eq!(g.pinned[&0], PinReason::Indirect);
        assert_eq!(g.pinned[&1], PinReason::Collective);
    }

    #[test]
    fn idempotent_build() {
        let s = vec![
            summary(0, &[], &[("A", 0, 100)]),
            summary(1, &[("A", 10, 50)], &[("B", 0, 8)]),
            summary(2, &[("B", 0, 8), ("A", 0, 100)], &[]),
        ];
        let a = build_ddg("p", &s).graph;
        let b = build_ddg("p", &s).graph;
        assert_eq!(a, b);
    }

    #[test]
    fn cross_iteration_flags_kv_like_buffer() {
        // KV written each iteration, read the next; scratch is intra-only.
        let it = |base: usize| {
            vec![
                summary(base, &[("KV", 0, 64)], &[("KV", 64, 64), ("S", 0, 16)]),
                summary(base + 1, &[("S", 0, 16)], &[]),
            ]
        };
        let flagged = detect_cross_iteration(&[it(0), it(2), it(4)]).unwrap();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].buffer, "KV");
        assert!(flagged[0].writers.contains(&0));
        assert!(flagged[0].readers.contains(&2));
    }

    #[test]
    fn cross_iteration_requires_two_iterations() {
        assert!(matches!(
            detect_cross_iteration(&[vec![]]),
            Err(DdgError::TooFewIterations(1))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let s = vec![
            summary(0, &[], &[("A", 0, 100)]),
            summary(1, &[("A", 0, 100)], &[]),
        ];
        let mut sizes = BTreeMap::new();
        sizes.insert("A".to_string(), 4096u64);
        let g = build_ddg_with_sizes("p", &s, &sizes).graph;
        let text = write_ddg(&g);
        let g2 = parse_ddg(&text).unwrap();
        assert_eq!(g, g2);
        assert_eq!(write_ddg(&g2), text);
    }

    #[test]
    fn edge_list_text() {
        let s = vec![
            summary(0, &[], &[("A", 0, 100)]),
            summary(1, &[("A", 0, 100)], &[]),
        ];
        let g = build_ddg("p", &s).graph;
        assert_eq!(g.to_edge_list_text(), "0\t1\t100\n");
    }

    #[test]
    fn dag_topological_order_is_seq_order() {
        let s = vec![
            summary(0, &[], &[("A", 0, 10)]),
            summary(1, &[("A", 0, 10)], &[("B", 0, 10)]),
            summary(2, &[("B", 0, 10), ("A", 0, 10)], &[]),
        ];
        let g = build_ddg("p", &s).graph;
        assert!(g.edges.iter().all(|e| e.src < e.dst));
    }
}
