//! Kernel IR: a small PTX-style kernel text format plus the memory-access
//! instrumentation machinery built on top of it.
//!
//! The grammar is deliberately tiny — just enough to identify global memory
//! instructions and their operands:
//!
//! ```text
//! // comment
//! .visible .entry saxpy(
//!     .param .u64 x,
//!     .param .u64 y,
//!     .param .u32 n
//! ) {
//!     ld.param.u64 %rd1, [x];
//!     cvta.to.global.u64 %rd2, %rd1;
//!     ld.global.f32 %f1, [%rd2];
//!     add.f32 %f2, %f1, %f1;
//!     st.global.f32 [%rd3], %f2;
//! }
//! ```
//!
//! Rules:
//! * one instruction per line, terminated by `;`; `//` comments allowed
//!   anywhere; blank lines ignored.
//! * opcodes are classified by prefix: `ld.global*`, `st.global*`,
//!   `atom.global*`; everything else is `other` and carries no access
//!   semantics.
//! * `.param .u64` (or `.b64`/`.s64`) parameters are buffer handles; all
//!   other parameter types are scalars.
//! * memory instruction addresses must be `[%reg]` or `[%reg+imm]`; the
//!   parser records which buffer parameter the register derives from, when
//!   a derivation chain through `ld.param`/`cvta`/`mov`/arithmetic exists.

mod instrument;
mod parse;
mod replay;

pub use instrument::{emit_instrumented, plan_instrumentation, InstrumentationPlan, Slot};
pub use parse::parse_kernel;
pub use replay::{replay, AccessClass, AddressStream, InstrInterval, InstrumentationResult};

pub(crate) use replay::class_of as class_of_opcode;

use std::collections::BTreeMap;

use thiserror::Error;

/// Bytes reserved per instrumented memory instruction: an 8-byte min slot
/// followed by an 8-byte max slot.
pub const SLOT_STRIDE: u64 = 16;

#[derive(Debug, Error)]
pub enum KirError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}: duplicate parameter name `{name}`")]
    DuplicateParam { line: usize, name: String },
    #[error("{line}: memory opcode `{opcode}` has unparsable access width")]
    BadWidth { line: usize, opcode: String },
    #[error("instruction {index} executed but has no address stream")]
    MissingStream { index: usize },
    #[error("instruction {index} has an empty address stream")]
    EmptyStream { index: usize },
    #[error("stream references instruction {index} which is not a memory instruction")]
    NotAMemoryInstruction { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    BufferHandle,
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub name: String,
    /// Declared type token without the leading dot, e.g. `u64`.
    pub ty: String,
    pub kind: ParamKind,
}

/// Opcode class. Only global-memory classes carry access semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Opcode {
    LoadGlobal,
    StoreGlobal,
    AtomicGlobal,
    Other,
}

impl Opcode {
    pub fn is_memory(self) -> bool {
        !matches!(self, Opcode::Other)
    }
}

/// Address operand of a memory instruction: `[base]` or `[base+offset]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressOperand {
    /// Register name including the `%` sigil.
    pub base: String,
    pub offset: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    /// Dense program-order index, 0-based.
    pub index: usize,
    pub opcode: Opcode,
    /// Access width in bytes for memory opcodes, `None` for `other`.
    pub access_width: Option<u8>,
    /// Trimmed source text including the trailing `;`, comments stripped.
    pub text: String,
    /// Address operand for memory opcodes.
    pub address: Option<AddressOperand>,
    /// Buffer parameter the address register derives from, when the chain
    /// is visible in the kernel body.
    pub derived_param: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelIR {
    pub name: String,
    pub params: Vec<Param>,
    pub instructions: Vec<Instruction>,
}

impl KernelIR {
    /// Indices of memory instructions in program order.
    pub fn memory_instructions(&self) -> Vec<usize> {
        self.instructions
            .iter()
            .filter(|i| i.opcode.is_memory())
            .map(|i| i.index)
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Canonical text form. Parsing the printed text yields an equal IR.
    pub fn print(&self) -> String {
        let mut out = String::new();
        if self.params.is_empty() {
            out.push_str(&format!(".visible .entry {}() {{\n", self.name));
        } else {
            out.push_str(&format!(".visible .entry {}(\n", self.name));
            for (i, p) in self.params.iter().enumerate() {
                let sep = if i + 1 == self.params.len() { "" } else { "," };
                out.push_str(&format!("    .param .{} {}{}\n", p.ty, p.name, sep));
            }
            out.push_str(") {\n");
        }
        for inst in &self.instructions {
            out.push_str("    ");
            out.push_str(&inst.text);
            out.push('\n');
        }
        out.push_str("}\n");
        out
    }
}

/// Width in bytes encoded by a memory opcode's type suffixes, e.g.
/// `ld.global.v2.f32` -> 8. Returns `None` when no width can be derived or
/// the width falls outside the supported {1,2,4,8,16} set.
pub(crate) fn opcode_access_width(opcode: &str) -> Option<u8> {
    let mut scalar: Option<u32> = None;
    let mut lanes: u32 = 1;
    for part in opcode.split('.') {
        match part {
            "v2" => lanes = 2,
            "v4" => lanes = 4,
            _ => {
                let mut chars = part.chars();
                let tag = chars.next();
                if matches!(tag, Some('b' | 'u' | 's' | 'f')) {
                    if let Ok(bits) = chars.as_str().parse::<u32>() {
                        if matches!(bits, 8 | 16 | 32 | 64) {
                            scalar = Some(bits / 8);
                        }
                    }
                }
            }
        }
    }
    let width = scalar? * lanes;
    u8::try_from(width).ok().filter(|w| matches!(w, 1 | 2 | 4 | 8 | 16))
}

/// Register-to-buffer-parameter derivation map built while parsing a body.
pub(crate) type DerivationMap = BTreeMap<String, String>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_table() {
        assert_eq!(opcode_access_width("ld.global.f32"), Some(4));
        assert_eq!(opcode_access_width("st.global.u8"), Some(1));
        assert_eq!(opcode_access_width("atom.global.min.u64"), Some(8));
        assert_eq!(opcode_access_width("ld.global.v4.f32"), Some(16));
        assert_eq!(opcode_access_width("ld.global.v2.f16"), Some(4));
        // v4.f64 would be 32 bytes: outside the supported set.
        assert_eq!(opcode_access_width("ld.global.v4.f64"), None);
        assert_eq!(opcode_access_width("ld.global"), None);
    }
}
