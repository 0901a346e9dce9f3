//! Entropic optimal transport between visual and textual attribute sets.

mod cost;
mod oracle;
mod similarity;
mod sinkhorn;
mod solver;

pub use cost::{build_cost_matrix, cosine_similarity_matrix, normalize_rows, CostMatrix, Marginals};
pub use oracle::{exact_assignment_oracle, ORACLE_MAX_SIZE};
pub use similarity::{attribute_similarity, attribute_similarity_with, psi_detached, psi_unrolled, similarity};
pub use sinkhorn::{
    marginal_violation, sinkhorn, sinkhorn_linear, sinkhorn_log, sinkhorn_log_annealed, transport_cost, Domain,
    SinkhornOptions, TransportPlan, DEFAULT_GAMMA, DEFAULT_MAX_ITER, DEFAULT_TOL, LOG_DOMAIN_SWITCH, UNDERFLOW_FLOOR,
};
pub use solver::{ExactAssignment, LinearSinkhorn, LogSinkhorn, Sinkhorn, SolverRegistry, TransportSolver};
