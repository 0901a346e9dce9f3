//! Plan-weighted attribute similarity `ψ(F, G) = Σ_mn cos(f_m, g_n) T*_mn`.

use super::cost::cosine_similarity_matrix;
use super::solver::TransportSolver;
use super::{CostMatrix, Marginals, Sinkhorn, SinkhornOptions, TransportPlan};
use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};

/// ψ and the Sinkhorn plan for uniform marginals.
pub fn attribute_similarity(f: &Tensor, g: &Tensor, opts: &SinkhornOptions) -> Result<(f64, TransportPlan)> {
    let marginals = Marginals::uniform(f.rows(), g.rows());
    attribute_similarity_with(&Sinkhorn, f, g, &marginals, opts)
}

pub fn attribute_similarity_with(
    solver: &dyn TransportSolver,
    f: &Tensor,
    g: &Tensor,
    marginals: &Marginals,
    opts: &SinkhornOptions,
) -> Result<(f64, TransportPlan)> {
    let s = cosine_similarity_matrix(f, g)?;
    let cost = CostMatrix::from_similarity(&s)?;
    let plan = solver.solve(&cost, marginals, opts)?;
    let psi = s.dot(&plan.plan)?;
    Ok((psi, plan))
}

/// ψ on the graph with `plan` entering as a constant: gradients reach the
/// features only through the cosine similarities. `f` and `g` must hold
/// unit rows.
pub fn psi_detached(graph: &mut Graph, f: Var, g: Var, plan: &Tensor) -> Result<Var> {
    let s = similarity(graph, f, g)?;
    let t = graph.constant(plan.clone());
    let weighted = graph.mul(s, t)?;
    Ok(graph.sum_all(weighted))
}

/// `F Gᵀ` on the graph.
pub fn similarity(graph: &mut Graph, f: Var, g: Var) -> Result<Var> {
    let gt = graph.transpose(g);
    graph.matmul(f, gt)
}

/// ψ with the plan built on the graph by exactly `iterations` log-domain
/// Sinkhorn updates, so gradients also flow through the plan.
pub fn psi_unrolled(
    graph: &mut Graph,
    f: Var,
    g: Var,
    marginals: &Marginals,
    gamma: f64,
    iterations: usize,
) -> Result<(Var, Tensor)> {
    let s = similarity(graph, f, g)?;
    let (m, n) = (graph.value(s).rows(), graph.value(s).cols());
    // −C/γ = (S − 1)/γ
    let scaled = graph.scale(s, 1.0 / gamma);
    let shift = graph.constant(Tensor::filled(&[m, n], -1.0 / gamma));
    let kernel = graph.add(scaled, shift)?;
    let kernel_t = graph.transpose(kernel);
    let log_mu = graph.constant(Tensor::matrix(m, 1, marginals.mu.iter().map(|x| x.ln()).collect())?);
    let log_nu = graph.constant(Tensor::matrix(n, 1, marginals.nu.iter().map(|x| x.ln()).collect())?);
    let mut lv_row = graph.constant(Tensor::zeros(&[1, n]));
    let mut lu_col = graph.constant(Tensor::zeros(&[m, 1]));
    for _ in 0..iterations.max(1) {
        let a = graph.add_row_broadcast(kernel, lv_row)?;
        let lse = graph.log_sum_exp_rows(a);
        lu_col = graph.sub(log_mu, lse)?;
        let lu_row = graph.transpose(lu_col);
        let b = graph.add_row_broadcast(kernel_t, lu_row)?;
        let lse = graph.log_sum_exp_rows(b);
        let lv_col = graph.sub(log_nu, lse)?;
        lv_row = graph.transpose(lv_col);
    }
    let with_u = graph.add_col_broadcast(kernel, lu_col)?;
    let logits = graph.add_row_broadcast(with_u, lv_row)?;
    let plan = graph.exp(logits);
    let weighted = graph.mul(s, plan)?;
    let psi = graph.sum_all(weighted);
    Ok((psi, graph.value(plan).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check_all, ParamStore, Rng};
    use crate::ot::transport_cost;

    fn tight() -> SinkhornOptions {
        SinkhornOptions {
            gamma: 0.1,
            max_iter: 5000,
            tol: 1e-12,
        }
    }

    #[test]
    fn equal_similarities_give_that_value() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let g = Tensor::from_rows(&[[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]]).unwrap();
        let (psi, _) = attribute_similarity(&f, &g, &tight()).unwrap();
        assert!((psi - 0.6).abs() < 1e-12);
    }

    #[test]
    fn self_alignment_approaches_one() {
        let mut rng = Rng::new(3);
        let f = rng.normal_tensor(&[3, 8], 1.0);
        let opts = SinkhornOptions {
            gamma: 0.005,
            max_iter: 10_000,
            tol: 1e-10,
        };
        let (psi, _) = attribute_similarity(&f, &f, &opts).unwrap();
        assert!(psi > 0.99, "{psi}");
    }

    #[test]
    fn psi_matches_one_minus_cost() {
        let mut rng = Rng::new(5);
        let f = rng.normal_tensor(&[4, 6], 1.0);
        let g = rng.normal_tensor(&[3, 6], 1.0);
        let s = cosine_similarity_matrix(&f, &g).unwrap();
        let (psi, plan) = attribute_similarity(&f, &g, &tight()).unwrap();
        let c = CostMatrix::from_similarity(&s).unwrap();
        let cost = transport_cost(&plan, &c).unwrap();
        assert!((psi - (1.0 - cost)).abs() < 1e-10);
    }

    #[test]
    fn graph_psi_matches_value_psi() {
        let mut rng = Rng::new(9);
        let f = crate::ot::cost::normalize_rows(&rng.normal_tensor(&[2, 5], 1.0)).unwrap();
        let g = crate::ot::cost::normalize_rows(&rng.normal_tensor(&[3, 5], 1.0)).unwrap();
        let opts = SinkhornOptions {
            gamma: 0.1,
            max_iter: 200,
            tol: 1e-300,
        };
        let (psi, plan) = attribute_similarity(&f, &g, &opts).unwrap();
        let mut graph = Graph::new();
        let fv = graph.constant(f.clone());
        let gv = graph.constant(g.clone());
        let d = psi_detached(&mut graph, fv, gv, &plan.plan).unwrap();
        assert!((graph.scalar(d) - psi).abs() < 1e-14);
        let (u, uplan) = psi_unrolled(&mut graph, fv, gv, &Marginals::uniform(2, 3), 0.1, 200).unwrap();
        assert!((graph.scalar(u) - psi).abs() < 1e-10);
        for (a, b) in uplan.data().iter().zip(plan.plan.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn unrolled_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let mut store = ParamStore::new();
        store.insert("f", rng.normal_tensor(&[2, 4], 1.0)).unwrap();
        store.insert("g", rng.normal_tensor(&[3, 4], 1.0)).unwrap();
        let loss = |graph: &mut Graph, s: &ParamStore| {
            let f = graph.param(s, "f")?;
            let g = graph.param(s, "g")?;
            let f = graph.l2_normalize_rows(f)?;
            let g = graph.l2_normalize_rows(g)?;
            let (psi, _) = psi_unrolled(graph, f, g, &Marginals::uniform(2, 3), 0.2, 30)?;
            Ok(psi)
        };
        for r in finite_diff_check_all(&store, loss, 1e-5, 1e-5).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }
}
