//! Instrumentation planning and byte-deterministic emission.
//!
//! Every global memory instruction gets a 16-byte slot in an appended
//! instrumentation buffer: an atomic-min of the accessed address at offset
//! `16k` and an atomic-max at `16k + 8`, where `k` is the ordinal of the
//! memory instruction.

use super::{KernelIR, Opcode, SLOT_STRIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub instruction_index: usize,
    /// Byte offset of the slot in the instrumentation buffer.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentationPlan {
    pub kernel: String,
    /// Name of the appended buffer parameter, unique within the kernel.
    pub buffer_param: String,
    /// One slot per memory instruction, in program order.
    pub slots: Vec<Slot>,
}

impl InstrumentationPlan {
    /// Total instrumentation buffer size in bytes.
    pub fn buffer_size(&self) -> u64 {
        self.slots.len() as u64 * SLOT_STRIDE
    }

    pub fn slot_for(&self, instruction_index: usize) -> Option<&Slot> {
        self.slots.iter().find(|s| s.instruction_index == instruction_index)
    }
}

/// Build the instrumentation plan for a parsed kernel. Kernels with no
/// memory instructions yield an empty plan.
pub fn plan_instrumentation(kernel: &KernelIR) -> InstrumentationPlan {
    let mut buffer_param = "inst_buf".to_string();
    let mut n = 0;
    while kernel.param(&buffer_param).is_some() {
        n += 1;
        buffer_param = format!("inst_buf{n}");
    }
    let slots = kernel
        .memory_instructions()
        .into_iter()
        .enumerate()
        .map(|(k, instruction_index)| Slot {
            instruction_index,
            offset: k as u64 * SLOT_STRIDE,
        })
        .collect();
    InstrumentationPlan { kernel: kernel.name.clone(), buffer_param, slots }
}

/// Emit instrumented kernel text.
///
/// The output appends the instrumentation buffer parameter, loads it at the
/// top of the body, and inserts a slot-address computation plus an
/// atomic-min/atomic-max pair immediately before each memory instruction.
/// All original instructions are preserved in order. Emission is
/// byte-deterministic for golden-file testing.
pub fn emit_instrumented(kernel: &KernelIR, plan: &InstrumentationPlan) -> String {
    let max_rd = highest_rd_register(kernel);
    let base_reg = format!("%rd{}", max_rd + 1);
    let slot_reg = format!("%rd{}", max_rd + 2);
    let tmp_reg = format!("%rd{}", max_rd + 3);

    let mut out = String::new();
    out.push_str(&format!(".visible .entry {}(\n", kernel.name));
    for p in &kernel.params {
        out.push_str(&format!("    .param .{} {},\n", p.ty, p.name));
    }
    out.push_str(&format!("    .param .u64 {}\n", plan.buffer_param));
    out.push_str(") {\n");
    if !plan.slots.is_empty() {
        out.push_str(&format!("    ld.param.u64 {base_reg}, [{}];\n", plan.buffer_param));
    }

    let mut slot_ordinal = 0usize;
    for inst in &kernel.instructions {
        if inst.opcode != Opcode::Other {
            let slot = &plan.slots[slot_ordinal];
            debug_assert_eq!(slot.instruction_index, inst.index);
            let addr = inst.address.as_ref().expect("memory instruction has address");
            let value_reg = if addr.offset == 0 {
                addr.base.clone()
            } else {
                let op = if addr.offset >= 0 { "add.u64" } else { "add.s64" };
                out.push_str(&format!(
                    "    {op} {tmp_reg}, {}, {};\n",
                    addr.base, addr.offset
                ));
                tmp_reg.clone()
            };
            out.push_str(&format!(
                "    mad.wide.u32 {slot_reg}, {}, 16, {base_reg};\n",
                slot_ordinal
            ));
            out.push_str(&format!(
                "    atom.global.min.u64 %unused, [{slot_reg}], {value_reg};\n"
            ));
            out.push_str(&format!(
                "    atom.global.max.u64 %unused, [{slot_reg}+8], {value_reg};\n"
            ));
            slot_ordinal += 1;
        }
        out.push_str("    ");
        out.push_str(&inst.text);
        out.push('\n');
    }
    out.push_str("}\n");
    out
}

fn highest_rd_register(kernel: &KernelIR) -> u64 {
    let mut max = 0;
    for inst in &kernel.instructions {
        let mut rest = inst.text.as_str();
        while let Some(pos) = rest.find("%rd") {
            rest = &rest[pos + 3..];
            let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
            if let Ok(n) = digits.parse::<u64>() {
                max = max.max(n);
            }
        }
    }
    max
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kir::parse_kernel;

    fn saxpy_like() -> KernelIR {
        parse_kernel(
            "
.visible .entry saxpy(
    .param .u64 x,
    .param .u64 y,
    .param .u32 n
) {
    ld.param.u64 %rd1, [x];
    ld.param.u64 %rd2, [y];
    cvta.to.global.u64 %rd3, %rd1;
    cvta.to.global.u64 %rd4, %rd2;
    ld.global.f32 %f1, [%rd3];
    add.f32 %f2, %f1, %f1;
    st.global.f32 [%rd4], %f2;
}
",
        )
        .unwrap()
    }

    #[test]
    fn slots_are_16_bytes_apart_in_program_order() {
        let k = saxpy_like();
        let plan = plan_instrumentation(&k);
        assert_eq!(plan.slots.len(), 2);
        assert_eq!(plan.slots[0], Slot { instruction_index: 4, offset: 0 });
        assert_eq!(plan.slots[1], Slot { instruction_index: 6, offset: 16 });
        assert_eq!(plan.buffer_size(), 32);
    }

    #[test]
    fn zero_memory_instructions_empty_plan() {
        let k = parse_kernel(".visible .entry noop(.param .u32 n) {\n    add.u32 %r1, %r2, %r3;\n}\n").unwrap();
        let plan = plan_instrumentation(&k);
        assert!(plan.slots.is_empty());
        assert_eq!(plan.buffer_size(), 0);
    }

    #[test]
    fn five_memory_instructions_is_80_bytes() {
        let mut body = String::from(".visible .entry k(.param .u64 a) {\n");
        for i in 0..5 {
            body.push_str(&format!("    ld.global.f32 %f{i}, [%rd1];\n"));
        }
        body.push_str("}\n");
        let k = parse_kernel(&body).unwrap();
        assert_eq!(plan_instrumentation(&k).buffer_size(), 80);
    }

    #[test]
    fn emit_shape_matches_instrumentation_listing() {
        let k = saxpy_like();
        let plan = plan_instrumentation(&k);
        let text = emit_instrumented(&k, &plan);
        let lines: Vec<&str> = text.lines().map(str::trim).collect();

        // Appended parameter plus its load.
        assert!(lines.contains(&".param .u64 inst_buf"));
        assert!(lines.contains(&"ld.param.u64 %rd5, [inst_buf];"));

        // Each memory instruction is preceded by slot computation + atomics.
        let ld_pos = lines.iter().position(|l| l.starts_with("ld.global.f32")).unwrap();
        assert_eq!(lines[ld_pos - 3], "mad.wide.u32 %rd6, 0, 16, %rd5;");
        assert_eq!(lines[ld_pos - 2], "atom.global.min.u64 %unused, [%rd6], %rd3;");
        assert_eq!(lines[ld_pos - 1], "atom.global.max.u64 %unused, [%rd6+8], %rd3;");

        let st_pos = lines.iter().position(|l| l.starts_with("st.global.f32")).unwrap();
        assert_eq!(lines[st_pos - 3], "mad.wide.u32 %rd6, 1, 16, %rd5;");
        assert_eq!(lines[st_pos - 2], "atom.global.min.u64 %unused, [%rd6], %rd4;");
        assert_eq!(lines[st_pos - 1], "atom.global.max.u64 %unused, [%rd6+8], %rd4;");
    }

    #[test]
    fn empty_plan_output_is_input_plus_param() {
        let k = parse_kernel(".visible .entry noop(.param .u32 n) {\n    add.u32 %r1, %r2, %r3;\n}\n").unwrap();
        let plan = plan_instrumentation(&k);
        let text = emit_instrumented(&k, &plan);
        assert_eq!(
            text,
            ".visible .entry noop(\n    .param .u32 n,\n    .param .u64 inst_buf\n) {\n    add.u32 %r1, %r2, %r3;\n}\n"
        );
    }

    #[test]
    fn offset_addresses_get_an_add() {
        let src = ".visible .entry k(.param .u64 a) {\n    ld.global.f32 %f1, [%rd1+32];\n}\n";
        let k = parse_kernel(src).unwrap();
        let plan = plan_instrumentation(&k);
        let text = emit_instrumented(&k, &plan);
        assert!(text.contains("add.u64 %rd4, %rd1, 32;"));
        assert!(text.contains("atom.global.min.u64 %unused, [%rd3], %rd4;"));
    }

    #[test]
    fn instrument_buffer_param_name_is_uniquified() {
        let src = ".visible .entry k(.param .u64 inst_buf) {\n    ld.global.f32 %f1, [%rd1];\n}\n";
        let k = parse_kernel(src).unwrap();
        let plan = plan_instrumentation(&k);
        assert_eq!(plan.buffer_param, "inst_buf1");
    }

    #[test]
    fn instrument_then_parse_preserves_memory_instruction_order() {
        let k = saxpy_like();
        let plan = plan_instrumentation(&k);
        let reparsed = parse_kernel(&emit_instrumented(&k, &plan)).unwrap();

        let orig_mem: Vec<&str> = k
            .instructions
            .iter()
            .filter(|i| i.opcode.is_memory())
            .map(|i| i.text.as_str())
            .collect();
        // In the instrumented kernel the original memory instructions are
        // still present, in order, each preceded by exactly two
        // atomic-global instructions.
        let mem_texts: Vec<(usize, &str)> = reparsed
            .instructions
            .iter()
            .filter(|i| i.opcode.is_memory() && !i.text.starts_with("atom.global"))
            .map(|i| (i.index, i.text.as_str()))
            .collect();
        assert_eq!(
            mem_texts.iter().map(|(_, t)| *t).collect::<Vec<_>>(),
            orig_mem
        );
        for (idx, _) in mem_texts {
            assert!(reparsed.instructions[idx - 1].text.starts_with("atom.global.max"));
            assert!(reparsed.instructions[idx - 2].text.starts_with("atom.global.min"));
        }
    }
}
