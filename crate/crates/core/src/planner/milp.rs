//! Explicit MILP form of a placement problem.
//!
//! The solvers in this crate branch over assignments directly, but the
//! linearized model is still materialized: it is what gets exported to LP
//! files for off-the-shelf optimizers, and its constraint set doubles as a
//! checker that every solver-produced solution satisfies the boolean
//! linearization `y[i,j,u,g] = x[i,u] * x[j,g]` exactly.

use std::collections::BTreeMap;

use super::{Objective, PlacementProblem, PlanError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Le,
    Ge,
    Eq,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Le => "<=",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub name: String,
    /// (coefficient, variable index) pairs, in canonical emission order.
    pub terms: Vec<(f64, usize)>,
    pub op: CmpOp,
    pub rhs: f64,
}

/// A generic minimization MILP: named variables, a linear objective, and
/// linear constraints. Binary variables are listed by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearModel {
    pub var_names: Vec<String>,
    pub objective: Vec<(f64, usize)>,
    pub constraints: Vec<LinearConstraint>,
    pub binaries: Vec<usize>,
}

impl LinearModel {
    pub fn var(&mut self, name: String) -> usize {
        self.var_names.push(name);
        self.var_names.len() - 1
    }

    /// Check a complete variable assignment against every constraint.
    /// Returns the name of the first violated constraint.
    pub fn check_assignment(&self, values: &[f64]) -> Result<(), String> {
        const EPS: f64 = 1e-9;
        for c in &self.constraints {
            let lhs: f64 = c.terms.iter().map(|&(coef, v)| coef * values[v]).sum();
            let ok = match c.op {
                CmpOp::Le => lhs <= c.rhs + EPS,
                CmpOp::Ge => lhs >= c.rhs - EPS,
                CmpOp::Eq => (lhs - c.rhs).abs() <= EPS,
            };
            if !ok {
                return Err(format!("constraint `{}` violated: lhs={lhs}, rhs={}", c.name, c.rhs));
            }
        }
        for &b in &self.binaries {
            let v = values[b];
            if (v - 0.0).abs() > EPS && (v - 1.0).abs() > EPS {
                return Err(format!("binary `{}` has non-binary value {v}", self.var_names[b]));
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, values: &[f64]) -> f64 {
        self.objective.iter().map(|&(coef, v)| coef * values[v]).sum()
    }

    /// Canonical text form used for structural equality in round-trip
    /// tests: variables by name, terms in emission order.
    pub fn canonical_form(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let term = |t: &(f64, usize)| format!("{} {}", t.0, self.var_names[t.1]);
        let _ = writeln!(
            out,
            "min: {}",
            self.objective.iter().map(term).collect::<Vec<_>>().join(" + ")
        );
        for c in &self.constraints {
            let _ = writeln!(
                out,
                "{}: {} {} {}",
                c.name,
                c.terms.iter().map(term).collect::<Vec<_>>().join(" + "),
                c.op.symbol(),
                c.rhs
            );
        }
        let _ = writeln!(
            out,
            "bin: {}",
            self.binaries.iter().map(|&b| self.var_names[b].as_str()).collect::<Vec<_>>().join(" ")
        );
        out
    }
}

/// The linearized placement MILP plus the index maps back into the problem.
#[derive(Debug, Clone)]
pub struct MilpModel {
    pub problem: PlacementProblem,
    pub linear: LinearModel,
    /// x[k][g] variable index.
    pub x: Vec<Vec<usize>>,
    /// y[(edge, u, g)] variable index, only for u != g.
    pub y: BTreeMap<(usize, usize, usize), usize>,
    /// Auxiliary stage-time bound variable for the throughput objective.
    pub z: Option<usize>,
}

/// Build the explicit MILP:
///
/// * binaries `x_k_g`, one per (kernel, gpu);
/// * binaries `y_i_j_u_g` per edge and ordered pair `u != g`, tied to the
///   x variables by the standard three linearization constraints;
/// * assignment constraints `sum_g x_k_g = 1`;
/// * pins as `x_k_g = 1`;
/// * throughput: minimize `z` with `T_g <= z` and `M_g <= z` per gpu;
///   latency: minimize `sum t x + sum c y`.
pub fn build_milp(problem: &PlacementProblem) -> Result<MilpModel, PlanError> {
    let n = problem.node_count();
    let gc = problem.gpu_count();
    let mut linear = LinearModel::default();

    let x: Vec<Vec<usize>> = (0..n)
        .map(|k| (0..gc).map(|g| linear.var(format!("x_{k}_{g}"))).collect())
        .collect();
    linear.binaries.extend(x.iter().flatten().copied());

    let mut y = BTreeMap::new();
    for (e_idx, edge) in problem.ddg.edges.iter().enumerate() {
        for u in 0..gc {
            for g in 0..gc {
                if u != g {
                    let v = linear.var(format!("y_{}_{}_{u}_{g}", edge.src, edge.dst));
                    y.insert((e_idx, u, g), v);
                    linear.binaries.push(v);
                }
            }
        }
    }
    let z = match problem.objective {
        Objective::Throughput => Some(linear.var("z".to_string())),
        Objective::Latency => None,
    };

    for k in 0..n {
        linear.constraints.push(LinearConstraint {
            name: format!("assign_{k}"),
            terms: (0..gc).map(|g| (1.0, x[k][g])).collect(),
            op: CmpOp::Eq,
            rhs: 1.0,
        });
    }

    for (e_idx, edge) in problem.ddg.edges.iter().enumerate() {
        for u in 0..gc {
            for g in 0..gc {
                if u == g {
                    continue;
                }
                let yv = y[&(e_idx, u, g)];
                let tag = format!("{}_{}_{u}_{g}", edge.src, edge.dst);
                linear.constraints.push(LinearConstraint {
                    name: format!("ylin1_{tag}"),
                    terms: vec![(1.0, yv), (-1.0, x[edge.src][u])],
                    op: CmpOp::Le,
                    rhs: 0.0,
                });
                linear.constraints.push(LinearConstraint {
                    name: format!("ylin2_{tag}"),
                    terms: vec![(1.0, yv), (-1.0, x[edge.dst][g])],
                    op: CmpOp::Le,
                    rhs: 0.0,
                });
                linear.constraints.push(LinearConstraint {
                    name: format!("ylin3_{tag}"),
                    terms: vec![(1.0, yv), (-1.0, x[edge.src][u]), (-1.0, x[edge.dst][g])],
                    op: CmpOp::Ge,
                    rhs: -1.0,
                });
            }
        }
    }

    match problem.objective {
        Objective::Throughput => {
            let z = z.unwrap();
            linear.objective = vec![(1.0, z)];
            for g in 0..gc {
                let terms: Vec<(f64, usize)> = (0..n)
                    .map(|k| (problem.latency(k, g), x[k][g]))
                    .chain(std::iter::once((-1.0, z)))
                    .collect();
                linear.constraints.push(LinearConstraint {
                    name: format!("tload_{g}"),
                    terms,
                    op: CmpOp::Le,
                    rhs: 0.0,
                });
                let mut terms: Vec<(f64, usize)> = Vec::new();
                for (e_idx, edge) in problem.ddg.edges.iter().enumerate() {
                    for u in 0..gc {
                        if u != g {
                            terms.push((problem.edge_cost(u, g, edge.bytes), y[&(e_idx, u, g)]));
                        }
                    }
                }
                if !terms.is_empty() {
                    terms.push((-1.0, z));
                    linear.constraints.push(LinearConstraint {
                        name: format!("mload_{g}"),
                        terms,
                        op: CmpOp::Le,
                        rhs: 0.0,
                    });
                }
            }
        }
        Objective::Latency => {
            let mut objective = Vec::new();
            for k in 0..n {
                for g in 0..gc {
                    objective.push((problem.latency(k, g), x[k][g]));
                }
            }
            for (e_idx, edge) in problem.ddg.edges.iter().enumerate() {
                for u in 0..gc {
                    for g in 0..gc {
                        if u != g {
                            objective.push((problem.edge_cost(u, g, edge.bytes), y[&(e_idx, u, g)]));
                        }
                    }
                }
            }
            linear.objective = objective;
        }
    }

    for (&node, &gpu) in &problem.pins {
        if node >= n || gpu >= gc {
            return Err(PlanError::BadPin { node, gpu });
        }
        linear.constraints.push(LinearConstraint {
            name: format!("pin_{node}"),
            terms: vec![(1.0, x[node][gpu])],
            op: CmpOp::Eq,
            rhs: 1.0,
        });
    }

    Ok(MilpModel { problem: problem.clone(), linear, x, y, z })
}

impl MilpModel {
    /// Expand a node assignment into the full MILP variable vector:
    /// `x` from the assignment, `y` as the product `x_iu * x_jg`, and `z`
    /// as the realized max stage time.
    pub fn full_assignment(&self, assign: &[usize]) -> Vec<f64> {
        let mut values = vec![0.0; self.linear.var_names.len()];
        for (k, &g) in assign.iter().enumerate() {
            values[self.x[k][g]] = 1.0;
        }
        for ((e_idx, u, g), &var) in &self.y {
            let edge = &self.problem.ddg.edges[*e_idx];
            values[var] = if assign[edge.src] == *u && assign[edge.dst] == *g { 1.0 } else { 0.0 };
        }
        if let Some(z) = self.z {
            let audit = super::audit_placement(&self.problem, assign);
            values[z] = audit.per_gpu.iter().map(|l| l.stage).fold(0.0, f64::max);
        }
        values
    }

    /// Assert the linearization identity `y = x_iu * x_jg` and all model
    /// constraints for a solver-produced assignment.
    pub fn verify_solution(&self, assign: &[usize]) -> Result<(), String> {
        let values = self.full_assignment(assign);
        for ((e_idx, u, g), &var) in &self.y {
            let edge = &self.problem.ddg.edges[*e_idx];
            let expected = if assign[edge.src] == *u && assign[edge.dst] == *g { 1.0 } else { 0.0 };
            if values[var] != expected {
                return Err(format!(
                    "linearization identity broken for edge {e_idx} ({u}->{g})"
                ));
            }
        }
        self.linear.check_assignment(&values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::test_support::{problem_from_parts, two_gpu_specs};

    #[test]
    fn variable_and_constraint_counts() {
        // |K|=3, |G|=2, 2 edges: 6 x-vars, 4 y-vars, 3 assignment
        // constraints, 12 linearization constraints.
        let p = problem_from_parts(
            &[("k0", [1.0, 2.0]), ("k1", [2.0, 1.0]), ("k2", [1.0, 1.0])],
            &[(0, 1, 1000), (1, 2, 1000)],
            Objective::Throughput,
            &[],
        );
        let m = build_milp(&p).unwrap();
        let xs = m.linear.var_names.iter().filter(|v| v.starts_with("x_")).count();
        let ys = m.linear.var_names.iter().filter(|v| v.starts_with("y_")).count();
        assert_eq!(xs, 6);
        assert_eq!(ys, 4);
        assert_eq!(
            m.linear.constraints.iter().filter(|c| c.name.starts_with("assign_")).count(),
            3
        );
        assert_eq!(
            m.linear.constraints.iter().filter(|c| c.name.starts_with("ylin")).count(),
            12
        );
    }

    #[test]
    fn one_gpu_problem_degenerates() {
        let mut gpus = two_gpu_specs(&[("k0", [3.0, 1.0]), ("k1", [4.0, 1.0])]);
        gpus.truncate(1);
        let ddg = crate::planner::test_support::chain_ddg(&["k0", "k1"], &[(0, 1, 100)]);
        let links = crate::planner::LinkMatrix::uniform(1, 1e9, 0.0);
        let p = PlacementProblem::new(ddg, gpus, links, Objective::Latency, &[], 0).unwrap();
        let m = build_milp(&p).unwrap();
        assert!(m.y.is_empty());
        let values = m.full_assignment(&[0, 0]);
        assert_eq!(m.linear.objective_value(&values), 7.0);
        m.verify_solution(&[0, 0]).unwrap();
    }

    #[test]
    fn pin_conflict_detected() {
        let ddg = crate::planner::test_support::chain_ddg(&["k0"], &[]);
        let gpus = two_gpu_specs(&[("k0", [1.0, 1.0])]);
        let links = crate::planner::LinkMatrix::uniform(2, 1e9, 0.0);
        let err = PlacementProblem::new(ddg, gpus, links, Objective::Latency, &[(0, 0), (0, 1)], 0);
        assert!(matches!(err, Err(PlanError::PinConflict { node: 0, .. })));
    }

    #[test]
    fn full_assignment_satisfies_model() {
        let p = problem_from_parts(
            &[("k0", [1.0, 3.0]), ("k1", [3.0, 1.0])],
            &[(0, 1, 5_000_000_000)],
            Objective::Throughput,
            &[],
        );
        let m = build_milp(&p).unwrap();
        for assign in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            m.verify_solution(&assign).unwrap();
        }
    }
}
