//! LP-format export and import of the linearized placement model.
//!
//! The writer targets the industry LP text format (objective section,
//! `Subject To`, `Binary`, `End`) so models can be handed to off-the-shelf
//! MILP solvers. Variable naming is deterministic: `x_<k>_<g>`,
//! `y_<i>_<j>_<u>_<g>`, and an auxiliary `z` carrying the min-max
//! throughput objective (LP files cannot express `max` directly; `z`
//! upper-bounds every per-GPU load, and minimizing `z` recovers it).
//! Coefficients print with Rust's shortest round-trip float formatting, so
//! a parse of the emitted file reproduces the model exactly.

use std::fmt::Write as _;

use super::milp::{CmpOp, LinearConstraint, LinearModel};
use super::PlanError;

/// Serialize a model to LP text.
pub fn write_lp(model: &LinearModel, name: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "\\ {name}");
    let _ = writeln!(out, "Minimize");
    let _ = writeln!(out, " obj: {}", terms_text(model, &model.objective));
    let _ = writeln!(out, "Subject To");
    for c in &model.constraints {
        let _ = writeln!(
            out,
            " {}: {} {} {}",
            c.name,
            terms_text(model, &c.terms),
            c.op.symbol(),
            c.rhs
        );
    }
    if !model.binaries.is_empty() {
        let _ = writeln!(out, "Binary");
        for &b in &model.binaries {
            let _ = writeln!(out, " {}", model.var_names[b]);
        }
    }
    let _ = writeln!(out, "End");
    out
}

fn terms_text(model: &LinearModel, terms: &[(f64, usize)]) -> String {
    if terms.is_empty() {
        return "0".to_string();
    }
    let mut out = String::new();
    for (i, &(coef, var)) in terms.iter().enumerate() {
        if i == 0 {
            if coef < 0.0 {
                let _ = write!(out, "- ");
            }
        } else if coef < 0.0 {
            let _ = write!(out, " - ");
        } else {
            let _ = write!(out, " + ");
        }
        let _ = write!(out, "{} {}", coef.abs(), model.var_names[var]);
    }
    out
}

/// Parse LP text produced by [`write_lp`] (or hand-written in the same
/// dialect) back into a [`LinearModel`]. Variables are indexed in order of
/// first appearance, which matches the writer's emission order.
pub fn parse_lp(text: &str) -> Result<LinearModel, PlanError> {
    #[derive(PartialEq)]
    enum Section {
        Preamble,
        Objective,
        Constraints,
        Binary,
        Done,
    }
    let mut model = LinearModel::default();
    let mut names: std::collections::BTreeMap<String, usize> = Default::default();
    let mut section = Section::Preamble;

    let mut intern = |model: &mut LinearModel,
                      names: &mut std::collections::BTreeMap<String, usize>,
                      name: &str| {
        *names
            .entry(name.to_string())
            .or_insert_with(|| model.var(name.to_string()))
    };

    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('\\') {
            continue;
        }
        match line {
            "Minimize" => {
                section = Section::Objective;
                continue;
            }
            "Subject To" => {
                section = Section::Constraints;
                continue;
            }
            "Binary" => {
                section = Section::Binary;
                continue;
            }
            "End" => {
                section = Section::Done;
                continue;
            }
            _ => {}
        }
        match section {
            Section::Preamble => {
                return Err(PlanError::Lp(format!("unexpected line before Minimize: `{line}`")))
            }
            Section::Done => {
                return Err(PlanError::Lp(format!("unexpected line after End: `{line}`")))
            }
            Section::Objective => {
                let (label, expr) = split_label(line)?;
                if label != "obj" {
                    return Err(PlanError::Lp(format!("objective must be labeled obj, got `{label}`")));
                }
                model.objective = parse_terms(expr, &mut model, &mut names, &mut intern)?;
            }
            Section::Constraints => {
                let (label, rest) = split_label(line)?;
                let (op, op_pos, op_len) = find_op(rest)?;
                let terms = parse_terms(&rest[..op_pos], &mut model, &mut names, &mut intern)?;
                let rhs: f64 = rest[op_pos + op_len..]
                    .trim()
                    .parse()
                    .map_err(|_| PlanError::Lp(format!("bad rhs in `{line}`")))?;
                model.constraints.push(LinearConstraint {
                    name: label.to_string(),
                    terms,
                    op,
                    rhs,
                });
            }
            Section::Binary => {
                for tok in line.split_whitespace() {
                    let var = intern(&mut model, &mut names, tok);
                    model.binaries.push(var);
                }
            }
        }
    }
    if section != Section::Done {
        return Err(PlanError::Lp("missing End marker".to_string()));
    }
    Ok(model)
}

fn split_label(line: &str) -> Result<(&str, &str), PlanError> {
    let colon = line
        .find(':')
        .ok_or_else(|| PlanError::Lp(format!("missing `:` label in `{line}`")))?;
    Ok((line[..colon].trim(), line[colon + 1..].trim()))
}

fn find_op(expr: &str) -> Result<(CmpOp, usize, usize), PlanError> {
    for (sym, op) in [("<=", CmpOp::Le), (">=", CmpOp::Ge), ("=", CmpOp::Eq)] {
        if let Some(pos) = expr.find(sym) {
            return Ok((op, pos, sym.len()));
        }
    }
    Err(PlanError::Lp(format!("no comparison operator in `{expr}`")))
}

fn parse_terms(
    expr: &str,
    model: &mut LinearModel,
    names: &mut std::collections::BTreeMap<String, usize>,
    intern: &mut impl FnMut(&mut LinearModel, &mut std::collections::BTreeMap<String, usize>, &str) -> usize,
) -> Result<Vec<(f64, usize)>, PlanError> {
    let expr = expr.trim();
    if expr == "0" {
        return Ok(Vec::new());
    }
    let mut terms = Vec::new();
    let mut sign = 1.0;
    let mut coef: Option<f64> = None;
    for tok in expr.split_whitespace() {
        match tok {
            "+" => sign = 1.0,
            "-" => sign = -1.0,
            _ => {
                if let Ok(value) = tok.parse::<f64>() {
                    if coef.is_some() {
                        return Err(PlanError::Lp(format!("two coefficients in a row near `{tok}`")));
                    }
                    coef = Some(value);
                } else {
                    let var = intern(model, names, tok);
                    terms.push((sign * coef.take().unwrap_or(1.0), var));
                    sign = 1.0;
                }
            }
        }
    }
    if coef.is_some() {
        return Err(PlanError::Lp("dangling coefficient at end of expression".to_string()));
    }
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::milp::build_milp;
    use crate::planner::test_support::problem_from_parts;
    use crate::planner::Objective;

    #[test]
    fn single_kernel_single_gpu_is_trivial() {
        let mut p = problem_from_parts(&[("k0", [2.5, 1.0])], &[], Objective::Latency, &[]);
        p.gpus.truncate(1);
        p.links = crate::planner::LinkMatrix::uniform(1, 1e9, 0.0);
        let m = build_milp(&p).unwrap();
        let lp = write_lp(&m.linear, "trivial");
        assert!(lp.contains(" obj: 2.5 x_0_0\n"));
        assert!(lp.contains(" assign_0: 1 x_0_0 = 1\n"));
        assert!(lp.contains("Binary\n x_0_0\n"));
    }

    #[test]
    fn roundtrip_is_identical() {
        for objective in [Objective::Throughput, Objective::Latency] {
            let p = problem_from_parts(
                &[("k0", [1.0, 2.0]), ("k1", [2.0, 1.0]), ("k2", [0.5, 0.25])],
                &[(0, 1, 4096), (1, 2, 128)],
                objective,
                &[(2, 1)],
            );
            let m = build_milp(&p).unwrap();
            let lp = write_lp(&m.linear, "roundtrip");
            let parsed = parse_lp(&lp).unwrap();
            assert_eq!(parsed.canonical_form(), m.linear.canonical_form());
            // Emission of the parsed model is byte-identical too.
            assert_eq!(write_lp(&parsed, "roundtrip"), lp);
        }
    }

    #[test]
    fn negative_coefficients_survive() {
        let p = problem_from_parts(
            &[("k0", [1.0, 2.0]), ("k1", [2.0, 1.0])],
            &[(0, 1, 1024)],
            Objective::Throughput,
            &[],
        );
        let m = build_milp(&p).unwrap();
        let lp = write_lp(&m.linear, "neg");
        // Linearization rows carry -1 coefficients.
        assert!(lp.contains("- 1 x_0_0"));
        let parsed = parse_lp(&lp).unwrap();
        assert_eq!(parsed.canonical_form(), m.linear.canonical_form());
    }

    #[test]
    fn reader_rejects_garbage() {
        assert!(parse_lp("Minimize\n obj: 1 x\n").is_err()); // no End
        assert!(parse_lp("noise\nMinimize\n obj: 1 x\nEnd\n").is_err());
        assert!(parse_lp("Minimize\n obj: 1 1 x\nEnd\n").is_err());
    }
}
