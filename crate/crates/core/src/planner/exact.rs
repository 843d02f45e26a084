//! Exact branch-and-bound placement solver.
//!
//! Depth-first search over nodes in sequence order, trying GPUs in index
//! order, with combinatorial admissible bounds instead of an LP relaxation:
//! communication costs of undecided edges relax to zero (they are
//! nonnegative), and unassigned kernels contribute at least their fastest
//! latency. Leaves are therefore visited in lexicographic assignment order
//! and only strict improvements replace the incumbent, so the returned
//! optimum is the lexicographically smallest one — deterministic output
//! for golden files.

use super::milp::MilpModel;
use super::{audit_placement, Objective, Placement, PlanError, SolveInstance};

#[derive(Debug, Clone, Copy)]
pub struct ExactOptions {
    /// Guard on `free nodes x gpus`; larger instances must go through the
    /// heuristic or an exported LP file.
    pub max_binary_vars: usize,
}

impl Default for ExactOptions {
    fn default() -> Self {
        ExactOptions { max_binary_vars: 60 }
    }
}

/// Solve a placement model to proven optimality.
pub fn solve_exact(model: &MilpModel, options: ExactOptions) -> Result<Placement, PlanError> {
    let instance = model.problem.instance();
    let assign = solve_instance_exact(&instance, options)?;
    let placement = audit_placement(&model.problem, &assign);
    debug_assert!(
        crate::rel_close(placement.objective_value, instance.eval(&assign), 1e-9),
        "audit disagrees with solver objective"
    );
    Ok(placement)
}

pub(crate) fn solve_instance_exact(
    instance: &SolveInstance,
    options: ExactOptions,
) -> Result<Vec<usize>, PlanError> {
    let n = instance.node_count();
    let gc = instance.gpu_count();
    for (&node, &gpu) in &instance.pins {
        if node >= n || gpu >= gc {
            return Err(PlanError::BadPin { node, gpu });
        }
    }
    let free = n - instance.pins.len();
    if free * gc > options.max_binary_vars {
        return Err(PlanError::SizeGuard { vars: free * gc, limit: options.max_binary_vars });
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    let mut search = Search::new(instance);
    search.dfs(0);
    Ok(search.best_assign.expect("search space is non-empty"))
}

/// Incremental DFS state. `assign[k] == usize::MAX` marks unassigned.
struct Search<'a> {
    instance: &'a SolveInstance,
    assign: Vec<usize>,
    compute: Vec<f64>,
    incoming: Vec<f64>,
    /// Additive accumulator for the latency objective: assigned compute
    /// plus cost of fully-decided cut edges.
    additive: f64,
    /// sum over unassigned nodes of min_g t[k][g].
    remaining_min: f64,
    min_t: Vec<f64>,
    /// Edges incident to each node whose other endpoint precedes it in the
    /// assignment order (so the edge gets decided when this node is set).
    decided_at: Vec<Vec<usize>>,
    best: f64,
    best_assign: Option<Vec<usize>>,
}

impl<'a> Search<'a> {
    fn new(instance: &'a SolveInstance) -> Self {
        let n = instance.node_count();
        let gc = instance.gpu_count();
        let min_t: Vec<f64> = (0..n)
            .map(|k| instance.t[k].iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let mut decided_at = vec![Vec::new(); n];
        for (e_idx, e) in instance.edges.iter().enumerate() {
            decided_at[e.src.max(e.dst)].push(e_idx);
        }
        Search {
            instance,
            assign: vec![usize::MAX; n],
            compute: vec![0.0; gc],
            incoming: vec![0.0; gc],
            additive: 0.0,
            remaining_min: min_t.iter().sum(),
            min_t,
            decided_at,
            best: f64::INFINITY,
            best_assign: None,
        }
    }

    fn place(&mut self, k: usize, g: usize) -> (f64, f64) {
        self.assign[k] = g;
        self.compute[g] += self.instance.t[k][g];
        self.remaining_min -= self.min_t[k];
        self.additive += self.instance.t[k][g];
        let mut comm_delta = 0.0;
        for &e_idx in &self.decided_at[k] {
            let e = &self.instance.edges[e_idx];
            let (u, v) = (self.assign[e.src], self.assign[e.dst]);
            debug_assert!(u != usize::MAX && v != usize::MAX);
            if u != v {
                let cost = e.count as f64 * self.instance.edge_cost(u, v, e.bytes);
                self.incoming[v] += cost;
                comm_delta += cost;
            }
        }
        self.additive += comm_delta;
        (self.instance.t[k][g], comm_delta)
    }

    fn unplace(&mut self, k: usize, g: usize, deltas: (f64, f64)) {
        for &e_idx in &self.decided_at[k] {
            let e = &self.instance.edges[e_idx];
            let (u, v) = (self.assign[e.src], self.assign[e.dst]);
            if u != v {
                self.incoming[v] -= e.count as f64 * self.instance.edge_cost(u, v, e.bytes);
            }
        }
        self.additive -= deltas.0 + deltas.1;
        self.compute[g] -= self.instance.t[k][g];
        self.remaining_min += self.min_t[k];
        self.assign[k] = usize::MAX;
    }

    /// Admissible lower bound for the current partial assignment.
    fn bound(&self) -> f64 {
        let gc = self.instance.gpu_count();
        match self.instance.objective {
            Objective::Latency => self.additive + self.remaining_min,
            Objective::Throughput => {
                let mut current = 0.0f64;
                let mut total_compute = 0.0;
                for g in 0..gc {
                    current = current.max(self.compute[g].max(self.incoming[g]));
                    total_compute += self.compute[g];
                }
                // Remaining compute must land somewhere; the average load
                // lower-bounds the maximum.
                let spread = (total_compute + self.remaining_min) / gc as f64;
                current.max(spread)
            }
        }
    }

    fn dfs(&mut self, k: usize) {
        let n = self.instance.node_count();
        if k == n {
            let value = self.instance.eval(&self.assign);
            if value < self.best {
                self.best = value;
                self.best_assign = Some(self.assign.clone());
            }
            return;
        }
        let candidates: Vec<usize> = match self.instance.pins.get(&k) {
            Some(&g) => vec![g],
            None => (0..self.instance.gpu_count()).collect(),
        };
        for g in candidates {
            let deltas = self.place(k, g);
            if self.bound() < self.best {
                self.dfs(k + 1);
            }
            self.unplace(k, g, deltas);
        }
    }
}

/// Exhaustive enumeration over all `gc^n` assignments honoring pins.
/// Test oracle for the branch-and-bound path; intentionally simple.
pub fn brute_force(model: &MilpModel) -> Option<Placement> {
    let instance = model.problem.instance();
    let assign = brute_force_instance(&instance)?;
    Some(audit_placement(&model.problem, &assign))
}

pub(crate) fn brute_force_instance(instance: &SolveInstance) -> Option<Vec<usize>> {
    let n = instance.node_count();
    let gc = instance.gpu_count();
    if n == 0 {
        return Some(Vec::new());
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut assign = vec![0usize; n];
    loop {
        let feasible = instance.pins.iter().all(|(&k, &g)| assign[k] == g);
        if feasible {
            let value = instance.eval(&assign);
            let better = match &best {
                None => true,
                Some((b, _)) => value < *b,
            };
            if better {
                best = Some((value, assign.clone()));
            }
        }
        // Odometer increment, node-major so earlier nodes vary slowest:
        // ties resolve to the lexicographically smallest assignment, the
        // same order the exact solver visits leaves in.
        let mut pos = n;
        loop {
            if pos == 0 {
                return best.map(|(_, a)| a);
            }
            pos -= 1;
            assign[pos] += 1;
            if assign[pos] < gc {
                break;
            }
            assign[pos] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::milp::build_milp;
    use crate::planner::test_support::{problem_from_parts, random_problem};
    use crate::planner::Objective;

    #[test]
    fn independent_minmax_splits() {
        let p = problem_from_parts(
            &[("k0", [1.0, 3.0]), ("k1", [3.0, 1.0])],
            &[],
            Objective::Throughput,
            &[],
        );
        let m = build_milp(&p).unwrap();
        let placement = solve_exact(&m, ExactOptions::default()).unwrap();
        assert_eq!(placement.assign, vec![0, 1]);
        assert!((placement.objective_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn expensive_edge_forces_colocation() {
        // Transfer cost 5s: splitting costs max(1, 5) = 5, co-locating 4.
        let p = problem_from_parts(
            &[("k0", [1.0, 3.0]), ("k1", [3.0, 1.0])],
            &[(0, 1, 5_000_000_000)],
            Objective::Throughput,
            &[],
        );
        let m = build_milp(&p).unwrap();
        let placement = solve_exact(&m, ExactOptions::default()).unwrap();
        let brute = brute_force(&m).unwrap();
        assert_eq!(placement.assign, vec![0, 0]);
        assert!((placement.objective_value - 4.0).abs() < 1e-12);
        assert_eq!(placement.objective_value, brute.objective_value);
        assert_eq!(placement.per_gpu[0].compute, 4.0);
        assert_eq!(placement.per_gpu[0].incoming_comm, 0.0);
    }

    #[test]
    fn randomized_chains_match_brute_force() {
        for seed in 0..30u64 {
            for objective in [Objective::Throughput, Objective::Latency] {
                let p = random_problem(seed, 6, 2, objective);
                let m = build_milp(&p).unwrap();
                let exact = solve_exact(&m, ExactOptions::default()).unwrap();
                let brute = brute_force(&m).unwrap();
                assert!(
                    crate::rel_close(exact.objective_value, brute.objective_value, 1e-9),
                    "seed {seed} {objective}: exact {} vs brute {}",
                    exact.objective_value,
                    brute.objective_value
                );
                m.verify_solution(&exact.assign).unwrap();
            }
        }
    }

    #[test]
    fn pins_are_respected() {
        let p = problem_from_parts(
            &[("k0", [1.0, 3.0]), ("k1", [3.0, 1.0])],
            &[],
            Objective::Latency,
            &[(0, 1)],
        );
        let m = build_milp(&p).unwrap();
        let placement = solve_exact(&m, ExactOptions::default()).unwrap();
        assert_eq!(placement.assign[0], 1);
    }

    #[test]
    fn size_guard_trips() {
        let kernels: Vec<(String, [f64; 2])> =
            (0..40).map(|i| (format!("k{i}"), [1.0, 2.0])).collect();
        let refs: Vec<(&str, [f64; 2])> =
            kernels.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let p = problem_from_parts(&refs, &[], Objective::Latency, &[]);
        let m = build_milp(&p).unwrap();
        assert!(matches!(
            solve_exact(&m, ExactOptions::default()),
            Err(PlanError::SizeGuard { .. })
        ));
        assert!(solve_exact(&m, ExactOptions { max_binary_vars: 100 }).is_ok());
    }
}
