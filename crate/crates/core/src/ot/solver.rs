//! Interchangeable transport solvers, selectable by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::sinkhorn::{sinkhorn, sinkhorn_linear, sinkhorn_log, Domain, SinkhornOptions, TransportPlan};
use super::{exact_assignment_oracle, marginal_violation, CostMatrix, Marginals};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub trait TransportSolver: Send + Sync {
    fn name(&self) -> &'static str;

    fn solve(&self, cost: &CostMatrix, marginals: &Marginals, opts: &SinkhornOptions) -> Result<TransportPlan>;
}

/// Linear-domain scaling with automatic log-domain fallback.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sinkhorn;

impl TransportSolver for Sinkhorn {
    fn name(&self) -> &'static str {
        "sinkhorn"
    }

    fn solve(&self, cost: &CostMatrix, marginals: &Marginals, opts: &SinkhornOptions) -> Result<TransportPlan> {
        sinkhorn(cost, marginals, opts)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LogSinkhorn;

impl TransportSolver for LogSinkhorn {
    fn name(&self) -> &'static str {
        "sinkhorn-log"
    }

    fn solve(&self, cost: &CostMatrix, marginals: &Marginals, opts: &SinkhornOptions) -> Result<TransportPlan> {
        sinkhorn_log(cost, marginals, opts)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LinearSinkhorn;

impl TransportSolver for LinearSinkhorn {
    fn name(&self) -> &'static str {
        "sinkhorn-linear"
    }

    fn solve(&self, cost: &CostMatrix, marginals: &Marginals, opts: &SinkhornOptions) -> Result<TransportPlan> {
        sinkhorn_linear(cost, marginals, opts)
    }
}

/// Unregularized optimum by permutation enumeration; square, uniform, M ≤ 8 only.
#[derive(Debug, Default, Clone, Copy)]
pub struct ExactAssignment;

impl TransportSolver for ExactAssignment {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn solve(&self, cost: &CostMatrix, marginals: &Marginals, opts: &SinkhornOptions) -> Result<TransportPlan> {
        let m = cost.rows();
        if *marginals != Marginals::uniform(m, cost.cols()) {
            return Err(Error::Unsupported(
                "exact assignment solver only supports uniform marginals".into(),
            ));
        }
        let (_, perm) = exact_assignment_oracle(cost)?;
        let mut plan = Tensor::zeros(&[m, m]);
        for (i, &j) in perm.iter().enumerate() {
            plan.data_mut()[i * m + j] = 1.0 / m as f64;
        }
        let marginal_violation = marginal_violation(&plan, marginals);
        Ok(TransportPlan {
            plan,
            gamma: opts.gamma,
            iterations_used: 0,
            marginal_violation,
            domain: Domain::Exact,
        })
    }
}

pub struct SolverRegistry {
    solvers: BTreeMap<&'static str, Arc<dyn TransportSolver>>,
}

impl Default for SolverRegistry {
    fn default() -> Self {
        let mut r = SolverRegistry::empty();
        r.register(Arc::new(Sinkhorn));
        r.register(Arc::new(LogSinkhorn));
        r.register(Arc::new(LinearSinkhorn));
        r.register(Arc::new(ExactAssignment));
        r
    }
}

impl SolverRegistry {
    pub fn empty() -> Self {
        SolverRegistry {
            solvers: BTreeMap::new(),
        }
    }

    /// Adds or replaces the solver registered under `solver.name()`.
    pub fn register(&mut self, solver: Arc<dyn TransportSolver>) {
        self.solvers.insert(solver.name(), solver);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn TransportSolver>> {
        self.solvers.get(name).cloned().ok_or_else(|| {
            Error::invalid(format!(
                "unknown transport solver '{name}' (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.solvers.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_names() {
        let r = SolverRegistry::default();
        assert_eq!(r.names(), vec!["exact", "sinkhorn", "sinkhorn-linear", "sinkhorn-log"]);
        assert!(r.get("hungarian").is_err());
    }

    #[test]
    fn exact_solver_builds_permutation_plan() {
        let cost = CostMatrix::new(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
        let plan = SolverRegistry::default()
            .get("exact")
            .unwrap()
            .solve(&cost, &Marginals::uniform(2, 2), &SinkhornOptions::default())
            .unwrap();
        assert_eq!(plan.plan.data(), &[0.0, 0.5, 0.5, 0.0]);
        assert_eq!(plan.marginal_violation, 0.0);
    }
}
