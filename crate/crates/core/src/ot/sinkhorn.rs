//! Entropic optimal transport by Sinkhorn scaling.
//!
//! The solver alternates `u = μ / (A v)` and `v = ν / (Aᵀ u)` with
//! `A = exp(−C/γ)` and `v⁽⁰⁾ = 1`, returning `T = diag(u) A diag(v)`. For small
//! `γ` the same recursion is run on `log u`, `log v` with log-sum-exp so that
//! `exp(−C/γ)` never has to be formed.

use serde::Serialize;

use super::{CostMatrix, Marginals};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Tensor};

/// Below this regularization the solver starts in the log domain.
pub const LOG_DOMAIN_SWITCH: f64 = 0.05;
/// A scaling denominator below this in the linear domain forces a log-domain solve.
pub const UNDERFLOW_FLOOR: f64 = 1e-300;

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SinkhornOptions {
    pub gamma: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            gamma: DEFAULT_GAMMA,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

impl SinkhornOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        Ok(())
    }
}

/// Which scaling recursion produced a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Linear,
    Log,
    /// Not produced by scaling (e.g. the exact assignment solver).
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Tensor,
    pub gamma: f64,
    pub iterations_used: usize,
    /// `max(‖T1 − μ‖∞, ‖Tᵀ1 − ν‖∞)` of the returned plan.
    pub marginal_violation: f64,
    pub domain: Domain,
}

impl TransportPlan {
    pub fn converged(&self, tol: f64) -> bool {
        self.marginal_violation <= tol
    }

    /// `−Σ T log T` (with `0 log 0 = 0`).
    pub fn entropy(&self) -> f64 {
        -self
            .plan
            .data()
            .iter()
            .filter(|&&t| t > 0.0)
            .map(|&t| t * t.ln())
            .sum::<f64>()
    }
}

pub fn marginal_violation(plan: &Tensor, marginals: &Marginals) -> f64 {
    let (m, n) = (plan.rows(), plan.cols());
    let mut worst = 0.0f64;
    for i in 0..m {
        let row: f64 = plan.row(i).iter().sum();
        worst = worst.max((row - marginals.mu[i]).abs());
    }
    for j in 0..n {
        let col: f64 = (0..m).map(|i| plan.get(i, j)).sum();
        worst = worst.max((col - marginals.nu[j]).abs());
    }
    worst
}

fn check_shapes(cost: &CostMatrix, marginals: &Marginals) -> Result<()> {
    if marginals.mu.len() != cost.rows() || marginals.nu.len() != cost.cols() {
        return Err(Error::invalid(format!(
            "cost is {}x{} but marginals have lengths {} and {}",
            cost.rows(),
            cost.cols(),
            marginals.mu.len(),
            marginals.nu.len()
        )));
    }
    Ok(())
}

fn finish(
    plan: Tensor,
    marginals: &Marginals,
    gamma: f64,
    iterations_used: usize,
    domain: Domain,
) -> Result<TransportPlan> {
    if !plan.is_finite() {
        return Err(Error::NumericFailure(format!(
            "sinkhorn produced non-finite plan entries (gamma {gamma}, {domain:?} domain)"
        )));
    }
    let marginal_violation = marginal_violation(&plan, marginals);
    Ok(TransportPlan {
        plan,
        gamma,
        iterations_used,
        marginal_violation,
        domain,
    })
}

/// Solves the entropic problem, choosing the annealed log domain when
/// `gamma < LOG_DOMAIN_SWITCH` or when linear scaling underflows.
///
/// Non-convergence is not an error: the plan comes back with
/// `marginal_violation > tol` and the caller decides.
pub fn sinkhorn(cost: &CostMatrix, marginals: &Marginals, opts: &SinkhornOptions) -> Result<TransportPlan> {
    opts.validate()?;
    check_shapes(cost, marginals)?;
    if opts.gamma < LOG_DOMAIN_SWITCH {
        return sinkhorn_log_annealed(cost, marginals, opts);
    }
    match sinkhorn_linear_inner(cost, marginals, opts)? {
        Some(plan) => Ok(plan),
        None => sinkhorn_log_annealed(cost, marginals, opts),
    }
}

/// Multiplicative scaling only; underflow is reported as a numeric failure.
pub fn sinkhorn_linear(cost: &CostMatrix, marginals: &Marginals, opts: &SinkhornOptions) -> Result<TransportPlan> {
    opts.validate()?;
    check_shapes(cost, marginals)?;
    sinkhorn_linear_inner(cost, marginals, opts)?
        .ok_or_else(|| Error::NumericFailure(format!("linear-domain sinkhorn underflowed at gamma {}", opts.gamma)))
}

/// `Ok(None)` signals underflow of a scaling denominator.
fn sinkhorn_linear_inner(
    cost: &CostMatrix,
    marginals: &Marginals,
    opts: &SinkhornOptions,
) -> Result<Option<TransportPlan>> {
    let (m, n) = (cost.rows(), cost.cols());
    let kernel = cost.tensor().map(|c| (-c / opts.gamma).exp());
    let k = kernel.data();
    let mut u = vec![0.0; m];
    let mut v = vec![1.0; n];
    let mut plan = vec![0.0; m * n];
    let mut used = 0;
    for it in 1..=opts.max_iter {
        used = it;
        for i in 0..m {
            let av: f64 = (0..n).map(|j| k[i * n + j] * v[j]).sum();
            if av < UNDERFLOW_FLOOR {
                return Ok(None);
            }
            u[i] = marginals.mu[i] / av;
        }
        for j in 0..n {
            let atu: f64 = (0..m).map(|i| k[i * n + j] * u[i]).sum();
            if atu < UNDERFLOW_FLOOR {
                return Ok(None);
            }
            v[j] = marginals.nu[j] / atu;
        }
        for i in 0..m {
            for j in 0..n {
                plan[i * n + j] = u[i] * k[i * n + j] * v[j];
            }
        }
        if u.iter().chain(&v).any(|x| x.is_nan()) {
            return Err(Error::NumericFailure("NaN in sinkhorn scaling vectors".into()));
        }
        if row_violation(&plan, &marginals.mu, n) <= opts.tol {
            break;
        }
    }
    let plan = Tensor::matrix(m, n, plan)?;
    finish(plan, marginals, opts.gamma, used, Domain::Linear).map(Some)
}

/// Log-domain scaling: `log u = log μ − LSE_j(−C/γ + log v)` and symmetrically for `v`.
pub fn sinkhorn_log(cost: &CostMatrix, marginals: &Marginals, opts: &SinkhornOptions) -> Result<TransportPlan> {
    opts.validate()?;
    check_shapes(cost, marginals)?;
    let mut duals = Duals::new(cost.rows(), cost.cols());
    let (plan, used) = log_stage(cost, marginals, opts.gamma, &mut duals, opts.max_iter, opts.tol)?;
    finish(plan, marginals, opts.gamma, used, Domain::Log)
}

/// Log-domain scaling preceded by warm-up solves at `γ₀ = max(C) − min(C)`
/// halved until it reaches `gamma`, each started from the previous duals.
/// Every stage may use up to `max_iter` iterations; `iterations_used`
/// counts all of them.
pub fn sinkhorn_log_annealed(
    cost: &CostMatrix,
    marginals: &Marginals,
    opts: &SinkhornOptions,
) -> Result<TransportPlan> {
    opts.validate()?;
    check_shapes(cost, marginals)?;
    let data = cost.tensor().data();
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let mut schedule = Vec::new();
    let mut g = hi - lo;
    while g > 2.0 * opts.gamma {
        schedule.push(g);
        g *= 0.5;
    }
    schedule.push(opts.gamma);

    let mut duals = Duals::new(cost.rows(), cost.cols());
    let mut total = 0;
    let mut last = None;
    for gamma in schedule {
        let (plan, used) = log_stage(cost, marginals, gamma, &mut duals, opts.max_iter, opts.tol)?;
        total += used;
        last = Some(plan);
    }
    finish(
        last.expect("schedule ends at gamma"),
        marginals,
        opts.gamma,
        total,
        Domain::Log,
    )
}

/// Dual potentials `f`, `g` in cost units, so `T_ij = exp((f_i + g_j − C_ij)/γ)`.
struct Duals {
    f: Vec<f64>,
    g: Vec<f64>,
}

impl Duals {
    fn new(m: usize, n: usize) -> Self {
        Duals {
            f: vec![0.0; m],
            g: vec![0.0; n],
        }
    }
}

fn log_stage(
    cost: &CostMatrix,
    marginals: &Marginals,
    gamma: f64,
    duals: &mut Duals,
    max_iter: usize,
    tol: f64,
) -> Result<(Tensor, usize)> {
    let (m, n) = (cost.rows(), cost.cols());
    let c = cost.tensor().data();
    let log_mu: Vec<f64> = marginals.mu.iter().map(|x| x.ln()).collect();
    let log_nu: Vec<f64> = marginals.nu.iter().map(|x| x.ln()).collect();
    let Duals { f, g } = duals;
    let mut plan = vec![0.0; m * n];
    let mut scratch = vec![0.0; m.max(n)];
    let mut used = 0;
    for it in 1..=max_iter {
        used = it;
        for i in 0..m {
            for j in 0..n {
                scratch[j] = (g[j] - c[i * n + j]) / gamma;
            }
            f[i] = gamma * (log_mu[i] - log_sum_exp(&scratch[..n]));
        }
        for j in 0..n {
            for i in 0..m {
                scratch[i] = (f[i] - c[i * n + j]) / gamma;
            }
            g[j] = gamma * (log_nu[j] - log_sum_exp(&scratch[..m]));
        }
        if f.iter().chain(g.iter()).any(|x| x.is_nan()) {
            return Err(Error::NumericFailure("NaN in log-domain sinkhorn potentials".into()));
        }
        for i in 0..m {
            for j in 0..n {
                plan[i * n + j] = ((f[i] + g[j] - c[i * n + j]) / gamma).exp();
            }
        }
        if row_violation(&plan, &marginals.mu, n) <= tol {
            break;
        }
    }
    Ok((Tensor::matrix(m, n, plan)?, used))
}

fn row_violation(plan: &[f64], mu: &[f64], n: usize) -> f64 {
    plan.chunks(n)
        .zip(mu)
        .map(|(row, &target)| (row.iter().sum::<f64>() - target).abs())
        .fold(0.0, f64::max)
}

/// Frobenius inner product `⟨T, C⟩`.
pub fn transport_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    if plan.plan.rows() != cost.rows() || plan.plan.cols() != cost.cols() {
        return Err(Error::invalid(format!(
            "plan is {}x{} but cost is {}x{}",
            plan.plan.rows(),
            plan.plan.cols(),
            cost.rows(),
            cost.cols()
        )));
    }
    plan.plan.dot(cost.tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tight(gamma: f64) -> SinkhornOptions {
        SinkhornOptions {
            gamma,
            max_iter: 10_000,
            tol: 1e-9,
        }
    }

    #[test]
    fn zero_cost_gives_uniform_plan() {
        for gamma in [1.0, 0.1, 0.01] {
            let cost = CostMatrix::new(Tensor::zeros(&[3, 4])).unwrap();
            let plan = sinkhorn(&cost, &Marginals::uniform(3, 4), &tight(gamma)).unwrap();
            for &t in plan.plan.data() {
                assert!((t - 1.0 / 12.0).abs() < 1e-12, "{t}");
            }
        }
    }

    #[test]
    fn anti_diagonal_cost_concentrates_on_identity() {
        let cost = CostMatrix::new(Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap()).unwrap();
        let plan = sinkhorn(&cost, &Marginals::uniform(2, 2), &tight(0.05)).unwrap();
        let expected = [0.5, 0.0, 0.0, 0.5];
        for (t, e) in plan.plan.data().iter().zip(expected) {
            assert!((t - e).abs() < 1e-3, "{:?}", plan.plan);
        }
        assert!(plan.marginal_violation <= 1e-9);
    }

    #[test]
    fn linear_and_log_domains_agree() {
        let cost =
            CostMatrix::new(Tensor::from_rows(&[[0.2, 1.4, 0.9], [1.1, 0.3, 1.7], [0.5, 0.8, 0.1]]).unwrap()).unwrap();
        let marg = Marginals::uniform(3, 3);
        let a = sinkhorn_linear(&cost, &marg, &tight(0.2)).unwrap();
        let b = sinkhorn_log(&cost, &marg, &tight(0.2)).unwrap();
        for (x, y) in a.plan.data().iter().zip(b.plan.data()) {
            assert!((x - y).abs() < 1e-10);
        }
        assert_eq!(a.domain, Domain::Linear);
        assert_eq!(b.domain, Domain::Log);
    }

    #[test]
    fn small_gamma_switches_to_log_domain() {
        let cost = CostMatrix::new(Tensor::filled(&[2, 2], 2.0)).unwrap();
        let plan = sinkhorn(&cost, &Marginals::uniform(2, 2), &tight(0.001)).unwrap();
        assert_eq!(plan.domain, Domain::Log);
        assert!(plan.plan.is_finite());
        assert!(sinkhorn_linear(&cost, &Marginals::uniform(2, 2), &tight(0.001)).is_err());
    }

    #[test]
    fn underflow_in_linear_mode_falls_back() {
        // exp(-2/0.06) is fine but exp(-800/0.06) is not.
        let cost = CostMatrix::new(Tensor::filled(&[2, 2], 800.0)).unwrap();
        let plan = sinkhorn(&cost, &Marginals::uniform(2, 2), &tight(0.06)).unwrap();
        assert_eq!(plan.domain, Domain::Log);
    }

    #[test]
    fn invalid_options() {
        let cost = CostMatrix::new(Tensor::zeros(&[2, 2])).unwrap();
        let marg = Marginals::uniform(2, 2);
        for opts in [
            SinkhornOptions {
                gamma: 0.0,
                ..tight(1.0)
            },
            SinkhornOptions { tol: 0.0, ..tight(1.0) },
            SinkhornOptions {
                max_iter: 0,
                ..tight(1.0)
            },
        ] {
            assert!(matches!(sinkhorn(&cost, &marg, &opts), Err(Error::InvalidArgument(_))));
        }
        assert!(sinkhorn(&cost, &Marginals::uniform(3, 2), &tight(1.0)).is_err());
    }

    #[test]
    fn non_convergence_is_flagged_not_failed() {
        let cost = CostMatrix::new(Tensor::from_rows(&[[0.0, 1.0, 0.3], [1.0, 0.0, 0.2]]).unwrap()).unwrap();
        let opts = SinkhornOptions {
            gamma: 0.01,
            max_iter: 1,
            tol: 1e-12,
        };
        let plan = sinkhorn_log(&cost, &Marginals::uniform(2, 3), &opts).unwrap();
        assert_eq!(plan.iterations_used, 1);
        assert!(plan.marginal_violation > 1e-12);
        assert!(!plan.converged(opts.tol));
        // Warm-up stages at 0.64, 0.32, ..., 0.02 plus the final stage, one iteration each.
        let annealed = sinkhorn(&cost, &Marginals::uniform(2, 3), &opts).unwrap();
        assert_eq!(annealed.iterations_used, 7);
        assert!(!annealed.converged(opts.tol));
    }

    #[test]
    fn annealed_and_plain_log_domains_agree() {
        let cost =
            CostMatrix::new(Tensor::from_rows(&[[0.2, 1.4, 0.9], [1.1, 0.3, 1.7], [0.5, 0.8, 0.1]]).unwrap()).unwrap();
        let marg = Marginals::uniform(3, 3);
        let opts = SinkhornOptions {
            gamma: 0.2,
            max_iter: 100_000,
            tol: 1e-14,
        };
        let a = sinkhorn_log(&cost, &marg, &opts).unwrap();
        let b = sinkhorn_log_annealed(&cost, &marg, &opts).unwrap();
        for (x, y) in a.plan.data().iter().zip(b.plan.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        assert!(a.converged(opts.tol) && b.converged(opts.tol));
    }

    #[test]
    fn annealing_stays_above_the_assignment_optimum() {
        // Without warm starts this instance still leaves ~1e-5 of misplaced
        // mass after 10⁴ iterations, enough to undercut the optimum.
        let cost = CostMatrix::new(
            Tensor::from_rows(&[
                [1.7684459192863446, 1.364730016566085, 1.0881608667176066],
                [0.6414028777081475, 1.280394713286017, 0.601633681876093],
                [0.7353954901185495, 0.19021093436833802, 1.6799992589883945],
            ])
            .unwrap(),
        )
        .unwrap();
        let marg = Marginals::uniform(3, 3);
        let (best, _) = super::super::exact_assignment_oracle(&cost).unwrap();
        let plain = sinkhorn_log(&cost, &marg, &tight(0.01)).unwrap();
        assert!(transport_cost(&plain, &cost).unwrap() < best - 1e-9);
        let annealed = sinkhorn(&cost, &marg, &tight(0.01)).unwrap();
        let got = transport_cost(&annealed, &cost).unwrap();
        assert!(got >= best - 1e-12 && got - best < 5e-2, "{got} vs {best}");
    }

    #[test]
    fn transport_cost_examples() {
        let c0 = CostMatrix::new(Tensor::zeros(&[2, 2])).unwrap();
        let uniform = TransportPlan {
            plan: Tensor::filled(&[2, 2], 0.25),
            gamma: 1.0,
            iterations_used: 0,
            marginal_violation: 0.0,
            domain: Domain::Exact,
        };
        assert_eq!(transport_cost(&uniform, &c0).unwrap(), 0.0);
        let cc = CostMatrix::new(Tensor::filled(&[2, 2], 0.7)).unwrap();
        assert!((transport_cost(&uniform, &cc).unwrap() - 0.7).abs() < 1e-15);
        let anti = CostMatrix::new(Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap()).unwrap();
        let ident = TransportPlan {
            plan: Tensor::from_rows(&[[0.5, 0.0], [0.0, 0.5]]).unwrap(),
            ..uniform.clone()
        };
        assert_eq!(transport_cost(&ident, &anti).unwrap(), 0.0);
        let wrong = CostMatrix::new(Tensor::zeros(&[3, 2])).unwrap();
        assert!(transport_cost(&ident, &wrong).is_err());
    }
}
