//! Replay recorded address streams through an instrumentation plan.
//!
//! Replay simulates what the injected atomics would have left in the
//! instrumentation buffer: the minimum and maximum address touched by each
//! memory instruction across all threads of a launch. Aggregation is a pure
//! min/max fold, so it is invariant under any permutation of the stream —
//! the property the hardware atomics guarantee. Slots start undefined and
//! only exist after the first recorded access.

use std::collections::BTreeMap;

use super::{InstrumentationPlan, KernelIR, KirError, Opcode};

/// Recorded virtual addresses per instruction index: the union over all
/// threads of one launch. Duplicates are allowed and meaningless.
pub type AddressStream = BTreeMap<usize, Vec<u64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessClass {
    Read,
    Write,
    ReadWrite,
}

impl AccessClass {
    pub fn reads(self) -> bool {
        matches!(self, AccessClass::Read | AccessClass::ReadWrite)
    }
    pub fn writes(self) -> bool {
        matches!(self, AccessClass::Write | AccessClass::ReadWrite)
    }
}

/// Aggregated `[min, max]` interval of base addresses for one instruction,
/// both ends inclusive and members of the original stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstrInterval {
    pub min: u64,
    pub max: u64,
    pub access_width: u8,
    pub class: AccessClass,
}

impl InstrInterval {
    /// Covered byte span `[min, max + width)`.
    pub fn byte_span(&self) -> (u64, u64) {
        (self.min, self.max + self.access_width as u64)
    }
}

/// Per-instruction aggregation results for one kernel launch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InstrumentationResult {
    pub intervals: BTreeMap<usize, InstrInterval>,
}

pub(crate) fn class_of(opcode: Opcode) -> AccessClass {
    match opcode {
        Opcode::LoadGlobal => AccessClass::Read,
        Opcode::StoreGlobal => AccessClass::Write,
        // Atomics in the original kernel both read and write their target.
        Opcode::AtomicGlobal => AccessClass::ReadWrite,
        Opcode::Other => unreachable!("other instructions carry no access semantics"),
    }
}

/// Fold each instruction's address stream into its `[min, max]` interval.
///
/// Every memory instruction in the plan must have a non-empty stream (the
/// grammar is straight-line, so every memory instruction of a launched
/// kernel executes). Streams for non-memory indices are rejected.
pub fn replay(
    kernel: &KernelIR,
    plan: &InstrumentationPlan,
    stream: &AddressStream,
) -> Result<InstrumentationResult, KirError> {
    for index in stream.keys() {
        let is_mem = kernel
            .instructions
            .get(*index)
            .map(|i| i.opcode.is_memory())
            .unwrap_or(false);
        if !is_mem {
            return Err(KirError::NotAMemoryInstruction { index: *index });
        }
    }

    let mut intervals = BTreeMap::new();
    for slot in &plan.slots {
        let index = slot.instruction_index;
        let addrs = stream.get(&index).ok_or(KirError::MissingStream { index })?;
        if addrs.is_empty() {
            return Err(KirError::EmptyStream { index });
        }
        let min = *addrs.iter().min().unwrap();
        let max = *addrs.iter().max().unwrap();
        let inst = &kernel.instructions[index];
        intervals.insert(
            index,
            InstrInterval {
                min,
                max,
                access_width: inst.access_width.unwrap(),
                class: class_of(inst.opcode),
            },
        );
    }
    Ok(InstrumentationResult { intervals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kir::{parse_kernel, plan_instrumentation};

    fn one_load() -> KernelIR {
        parse_kernel(".visible .entry k(.param .u64 a) {\n    ld.global.f32 %f1, [%rd1];\n}\n")
            .unwrap()
    }

    #[test]
    fn interval_is_min_max_of_stream() {
        let k = one_load();
        let plan = plan_instrumentation(&k);
        let mut s = AddressStream::new();
        s.insert(0, vec![0x1ff0, 0x1000]);
        let r = replay(&k, &plan, &s).unwrap();
        let iv = r.intervals[&0];
        assert_eq!((iv.min, iv.max), (0x1000, 0x1ff0));
        assert_eq!(iv.class, AccessClass::Read);
    }

    #[test]
    fn single_address_degenerate_interval() {
        let k = one_load();
        let plan = plan_instrumentation(&k);
        let mut s = AddressStream::new();
        s.insert(0, vec![0x2000]);
        let iv = replay(&k, &plan, &s).unwrap().intervals[&0];
        assert_eq!((iv.min, iv.max), (0x2000, 0x2000));
    }

    #[test]
    fn randomized_stream_matches_bruteforce_fold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let k = one_load();
        let plan = plan_instrumentation(&k);
        let addrs: Vec<u64> = (0..10_000).map(|_| rng.gen_range(0x1000..0x9000u64)).collect();

        // Brute-force oracle over the multiset.
        let mut lo = u64::MAX;
        let mut hi = 0;
        for &a in &addrs {
            lo = lo.min(a);
            hi = hi.max(a);
        }

        let mut s = AddressStream::new();
        s.insert(0, addrs);
        let iv = replay(&k, &plan, &s).unwrap().intervals[&0];
        assert_eq!((iv.min, iv.max), (lo, hi));
    }

    #[test]
    fn missing_stream_is_an_error() {
        let k = one_load();
        let plan = plan_instrumentation(&k);
        let s = AddressStream::new();
        assert!(matches!(replay(&k, &plan, &s), Err(KirError::MissingStream { index: 0 })));
    }

    #[test]
    fn stream_for_non_memory_instruction_rejected() {
        let k = parse_kernel(".visible .entry k(.param .u64 a) {\n    add.u32 %r1, %r2, %r3;\n}\n")
            .unwrap();
        let plan = plan_instrumentation(&k);
        let mut s = AddressStream::new();
        s.insert(0, vec![0x1000]);
        assert!(matches!(
            replay(&k, &plan, &s),
            Err(KirError::NotAMemoryInstruction { index: 0 })
        ));
    }
}
