//! Parser for the kernel text format.

use super::{
    opcode_access_width, AddressOperand, DerivationMap, Instruction, KernelIR, KirError, Opcode,
    Param, ParamKind,
};

/// Parse kernel source text into [`KernelIR`].
///
/// Instruction order is preserved; memory opcodes are classified and get
/// their access width from the opcode type suffix; unknown opcodes become
/// `other`.
pub fn parse_kernel(text: &str) -> Result<KernelIR, KirError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, strip_comment(l)));

    // Header: accumulate lines up to and including the one holding `{`.
    let mut header = String::new();
    let mut header_line = 0usize;
    let mut body_started = false;
    let mut pending: Vec<(usize, String)> = Vec::new();
    for (lineno, line) in &mut lines {
        if header_line == 0 && !line.trim().is_empty() {
            header_line = lineno;
        }
        if let Some(brace) = line.find('{') {
            header.push_str(&line[..brace]);
            let rest = line[brace + 1..].trim().to_string();
            if !rest.is_empty() {
                pending.push((lineno, rest));
            }
            body_started = true;
            break;
        }
        header.push_str(&line);
        header.push(' ');
    }
    if !body_started {
        return Err(KirError::Syntax {
            line: header_line.max(1),
            col: 1,
            msg: "missing `{` after entry header".into(),
        });
    }

    let (name, params) = parse_header(&header, header_line)?;

    let mut instructions = Vec::new();
    let mut derivations: DerivationMap = DerivationMap::new();
    let mut closed = false;
    let body_lines = pending.into_iter().chain(&mut lines);
    for (lineno, raw) in body_lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if closed {
            return Err(KirError::Syntax {
                line: lineno,
                col: 1,
                msg: "content after closing `}`".into(),
            });
        }
        if line == "}" {
            closed = true;
            continue;
        }
        // Tolerate a trailing `}` on the last instruction line.
        let (stmt, tail_brace) = match line.strip_suffix('}') {
            Some(s) => (s.trim(), true),
            None => (line, false),
        };
        if tail_brace {
            closed = true;
        }
        if stmt.is_empty() {
            continue;
        }
        let stmt = stmt.strip_suffix(';').ok_or_else(|| KirError::Syntax {
            line: lineno,
            col: raw.len(),
            msg: "instruction must end with `;`".into(),
        })?;
        let inst = parse_instruction(
            instructions.len(),
            stmt.trim(),
            lineno,
            &params,
            &mut derivations,
        )?;
        instructions.push(inst);
    }
    if !closed {
        return Err(KirError::Syntax {
            line: header_line,
            col: 1,
            msg: "missing closing `}`".into(),
        });
    }

    Ok(KernelIR { name, params, instructions })
}

fn strip_comment(line: &str) -> String {
    match line.find("//") {
        Some(i) => line[..i].to_string(),
        None => line.to_string(),
    }
}

fn parse_header(header: &str, line: usize) -> Result<(String, Vec<Param>), KirError> {
    let header = header.trim();
    let rest = header.strip_prefix(".visible").map(str::trim).unwrap_or(header);
    let rest = rest.strip_prefix(".entry").map(str::trim).ok_or_else(|| KirError::Syntax {
        line,
        col: 1,
        msg: "expected `.visible .entry` header".into(),
    })?;
    let open = rest.find('(').ok_or_else(|| KirError::Syntax {
        line,
        col: 1,
        msg: "expected `(` after kernel name".into(),
    })?;
    let name = rest[..open].trim();
    if name.is_empty() || !is_identifier(name) {
        return Err(KirError::Syntax {
            line,
            col: open,
            msg: format!("bad kernel name `{name}`"),
        });
    }
    let close = rest.rfind(')').ok_or_else(|| KirError::Syntax {
        line,
        col: rest.len(),
        msg: "missing `)` in parameter list".into(),
    })?;
    let mut params = Vec::new();
    for piece in rest[open + 1..close].split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        let mut toks = piece.split_whitespace();
        let kw = toks.next().unwrap_or("");
        let ty = toks.next().unwrap_or("");
        let pname = toks.next().unwrap_or("");
        if kw != ".param" || !ty.starts_with('.') || pname.is_empty() || toks.next().is_some() {
            return Err(KirError::Syntax {
                line,
                col: 1,
                msg: format!("bad parameter declaration `{piece}`"),
            });
        }
        let ty = ty[1..].to_string();
        if params.iter().any(|p: &Param| p.name == pname) {
            return Err(KirError::DuplicateParam { line, name: pname.to_string() });
        }
        let kind = if matches!(ty.as_str(), "u64" | "b64" | "s64") {
            ParamKind::BufferHandle
        } else {
            ParamKind::Scalar
        };
        params.push(Param { name: pname.to_string(), ty, kind });
    }
    Ok((name.to_string(), params))
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn classify(opcode: &str) -> Opcode {
    if opcode.starts_with("ld.global") {
        Opcode::LoadGlobal
    } else if opcode.starts_with("st.global") {
        Opcode::StoreGlobal
    } else if opcode.starts_with("atom.global") {
        Opcode::AtomicGlobal
    } else {
        Opcode::Other
    }
}

fn parse_instruction(
    index: usize,
    stmt: &str,
    line: usize,
    params: &[Param],
    derivations: &mut DerivationMap,
) -> Result<Instruction, KirError> {
    let (opcode, operand_text) = match stmt.find(char::is_whitespace) {
        Some(i) => (&stmt[..i], stmt[i..].trim()),
        None => (stmt, ""),
    };
    let operands: Vec<String> = if operand_text.is_empty() {
        Vec::new()
    } else {
        operand_text.split(',').map(|o| o.trim().to_string()).collect()
    };
    let kind = classify(opcode);

    let text = format!("{stmt};");
    if kind == Opcode::Other {
        track_derivation(opcode, &operands, params, derivations);
        return Ok(Instruction {
            index,
            opcode: kind,
            access_width: None,
            text,
            address: None,
            derived_param: None,
        });
    }

    let width = opcode_access_width(opcode)
        .ok_or_else(|| KirError::BadWidth { line, opcode: opcode.to_string() })?;
    let addr_operand = operands.iter().find(|o| o.starts_with('[')).ok_or_else(|| {
        KirError::Syntax {
            line,
            col: 1,
            msg: format!("memory instruction `{opcode}` has no [address] operand"),
        }
    })?;
    let address = parse_address(addr_operand, line)?;
    if !address.base.starts_with('%') {
        return Err(KirError::Syntax {
            line,
            col: 1,
            msg: format!(
                "memory address base `{}` must be a register (load parameters via ld.param first)",
                address.base
            ),
        });
    }
    let derived_param = derivations.get(&address.base).cloned();
    Ok(Instruction {
        index,
        opcode: kind,
        access_width: Some(width),
        text,
        address: Some(address),
        derived_param,
    })
}

fn parse_address(operand: &str, line: usize) -> Result<AddressOperand, KirError> {
    let inner = operand
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| KirError::Syntax {
            line,
            col: 1,
            msg: format!("malformed address operand `{operand}`"),
        })?
        .trim();
    let (base, offset) = match inner.find(['+', '-']) {
        // A leading sign would mean an absolute address, which the grammar
        // does not allow; only `base+imm` / `base-imm` forms are split.
        Some(0) | None => (inner, 0),
        Some(i) => {
            let off: i64 = inner[i..].replace(' ', "").parse().map_err(|_| KirError::Syntax {
                line,
                col: 1,
                msg: format!("bad address offset in `{operand}`"),
            })?;
            (inner[..i].trim_end(), off)
        }
    };
    if base.is_empty() {
        return Err(KirError::Syntax {
            line,
            col: 1,
            msg: format!("empty address base in `{operand}`"),
        });
    }
    Ok(AddressOperand { base: base.to_string(), offset })
}

/// Track which registers hold addresses derived from buffer parameters.
///
/// `ld.param` roots a chain at a parameter; `cvta`/`mov` forward it; any
/// other instruction propagates the first chained source operand to the
/// destination (first operand). This is a linear scan, not dataflow
/// analysis, which is all the straight-line grammar needs.
fn track_derivation(
    opcode: &str,
    operands: &[String],
    params: &[Param],
    derivations: &mut DerivationMap,
) {
    if operands.is_empty() {
        return;
    }
    let dest = operands[0].clone();
    if !dest.starts_with('%') {
        return;
    }
    if opcode.starts_with("ld.param") {
        if let Some(src) = operands.get(1) {
            let inner = src.trim_start_matches('[').trim_end_matches(']');
            if params
                .iter()
                .any(|p| p.name == inner && p.kind == ParamKind::BufferHandle)
            {
                derivations.insert(dest, inner.to_string());
            }
        }
        return;
    }
    for src in &operands[1..] {
        let reg = src.split(['+', ']']).next().unwrap_or(src).trim_start_matches('[');
        if let Some(root) = derivations.get(reg) {
            let root = root.clone();
            derivations.insert(dest, root);
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LISTING_BODY: &str = r#"
.visible .entry opaque_kernel(
    .param .u64 in_ptr,
    .param .u32 n
) {
    ld.param.u64 %rd9, [in_ptr];
    cvta.to.global.u64 %rd1, %rd9;
    ld.global.f32 %f1, [%rd1];
}
"#;

    #[test]
    fn parses_single_load_kernel() {
        let k = parse_kernel(LISTING_BODY).unwrap();
        assert_eq!(k.name, "opaque_kernel");
        assert_eq!(k.params.len(), 2);
        assert_eq!(k.params[0].kind, ParamKind::BufferHandle);
        assert_eq!(k.params[1].kind, ParamKind::Scalar);
        assert_eq!(k.memory_instructions(), vec![2]);
        let ld = &k.instructions[2];
        assert_eq!(ld.opcode, Opcode::LoadGlobal);
        assert_eq!(ld.access_width, Some(4));
        assert_eq!(ld.derived_param.as_deref(), Some("in_ptr"));
    }

    #[test]
    fn empty_body_parses_to_zero_instructions() {
        let k = parse_kernel(".visible .entry noop() {\n}\n").unwrap();
        assert_eq!(k.name, "noop");
        assert!(k.instructions.is_empty());
        assert!(k.params.is_empty());
    }

    #[test]
    fn memory_indices_skip_other_instructions() {
        let src = "
.visible .entry mix(
    .param .u64 a
) {
    ld.global.f32 %f1, [%rd1];
    add.f32 %f2, %f1, %f1;
    st.global.f32 [%rd2], %f2;
}
";
        let k = parse_kernel(src).unwrap();
        assert_eq!(k.memory_instructions(), vec![0, 2]);
        assert_eq!(k.instructions[1].opcode, Opcode::Other);
        assert_eq!(k.instructions[1].access_width, None);
    }

    #[test]
    fn duplicate_param_rejected() {
        let err = parse_kernel(".visible .entry k(.param .u64 a, .param .u64 a) {\n}\n");
        assert!(matches!(err, Err(KirError::DuplicateParam { .. })));
    }

    #[test]
    fn bad_width_reported_with_line() {
        let src = ".visible .entry k(.param .u64 a) {\n    ld.global %f1, [%rd1];\n}\n";
        match parse_kernel(src) {
            Err(KirError::BadWidth { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected BadWidth, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_carries_position() {
        let src = ".visible .entry k(.param .u64 a) {\n    st.global.f32 [%rd1], %f1\n}\n";
        match parse_kernel(src) {
            Err(KirError::Syntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected Syntax, got {other:?}"),
        }
    }

    #[test]
    fn atomic_classified_with_width() {
        let src = ".visible .entry k(.param .u64 a) {\n    atom.global.add.u64 %rd2, [%rd1], %rd3;\n}\n";
        let k = parse_kernel(src).unwrap();
        assert_eq!(k.instructions[0].opcode, Opcode::AtomicGlobal);
        assert_eq!(k.instructions[0].access_width, Some(8));
    }

    #[test]
    fn address_offset_parsed() {
        let src = ".visible .entry k(.param .u64 a) {\n    ld.global.f32 %f1, [%rd1+16];\n}\n";
        let k = parse_kernel(src).unwrap();
        let addr = k.instructions[0].address.as_ref().unwrap();
        assert_eq!(addr.base, "%rd1");
        assert_eq!(addr.offset, 16);
    }

    #[test]
    fn print_roundtrips() {
        let k = parse_kernel(LISTING_BODY).unwrap();
        let printed = k.print();
        let again = parse_kernel(&printed).unwrap();
        assert_eq!(k, again);
        // Canonical form is a fixed point.
        assert_eq!(printed, again.print());
    }

    #[test]
    fn derivation_through_arithmetic() {
        let src = "
.visible .entry k(
    .param .u64 a
) {
    ld.param.u64 %rd1, [a];
    cvta.to.global.u64 %rd2, %rd1;
    mad.wide.u32 %rd3, %r1, 4, %rd2;
    st.global.f32 [%rd3], %f0;
}
";
        let k = parse_kernel(src).unwrap();
        assert_eq!(k.instructions[3].derived_param.as_deref(), Some("a"));
    }

    #[test]
    fn underived_address_is_recorded_not_rejected() {
        let src = ".visible .entry k(.param .u64 a) {\n    ld.global.f32 %f1, [%rd7];\n}\n";
        let k = parse_kernel(src).unwrap();
        assert_eq!(k.instructions[0].derived_param, None);
    }
}
