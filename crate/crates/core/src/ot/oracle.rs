use super::CostMatrix;
use crate::error::{Error, Result};

pub const ORACLE_MAX_SIZE: usize = 8;

/// Brute-force minimum of `(1/M) Σ_m C[m, σ(m)]` over all permutations `σ`.
///
/// Permutations are visited in lexicographic order and only strict
/// improvements replace the incumbent, so ties resolve to the
/// lexicographically smallest permutation.
pub fn exact_assignment_oracle(cost: &CostMatrix) -> Result<(f64, Vec<usize>)> {
    let m = cost.rows();
    if m != cost.cols() {
        return Err(Error::Unsupported(format!(
            "assignment oracle needs a square cost matrix, got {m}x{}",
            cost.cols()
        )));
    }
    if m > ORACLE_MAX_SIZE {
        return Err(Error::Unsupported(format!(
            "assignment oracle enumerates permutations only up to size {ORACLE_MAX_SIZE}, got {m}"
        )));
    }
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best_sum = f64::INFINITY;
    let mut best = perm.clone();
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
        if total < best_sum {
            best_sum = total;
            best.clone_from(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok((best_sum / m as f64, best))
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
