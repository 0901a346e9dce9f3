use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Tensor};

/// Transport costs between `M` visual and `N` textual attribute features.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    c: Tensor,
}

impl CostMatrix {
    pub fn new(c: Tensor) -> Result<Self> {
        if c.shape().len() != 2 || c.rows() == 0 || c.cols() == 0 {
            return Err(Error::invalid(format!(
                "cost matrix must be a non-empty matrix, got shape {:?}",
                c.shape()
            )));
        }
        if !c.is_finite() {
            return Err(Error::invalid("cost matrix has non-finite entries"));
        }
        Ok(CostMatrix { c })
    }

    /// `C = 1 − S` for a cosine-similarity matrix `S`.
    pub fn from_similarity(s: &Tensor) -> Result<Self> {
        CostMatrix::new(s.as_matrix().map(|v| 1.0 - v))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.c
    }

    pub fn rows(&self) -> usize {
        self.c.rows()
    }

    pub fn cols(&self) -> usize {
        self.c.cols()
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.c.get(m, n)
    }
}

/// Source (`mu`, length M) and target (`nu`, length N) probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
}

impl Marginals {
    pub fn new(mu: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        for (name, v) in [("mu", &mu), ("nu", &nu)] {
            if v.is_empty() {
                return Err(Error::invalid(format!("{name} is empty")));
            }
            if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::invalid(format!("{name} has negative or non-finite entries")));
            }
            let total: f64 = v.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("{name} sums to {total}, expected 1")));
            }
        }
        Ok(Marginals { mu, nu })
    }

    pub fn uniform(m: usize, n: usize) -> Self {
        Marginals {
            mu: vec![1.0 / m as f64; m],
            nu: vec![1.0 / n as f64; n],
        }
    }
}

/// Unit-normalizes every row of a feature matrix.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        rows.push(l2_normalize(&Tensor::vector(x.row(r).to_vec()))?.into_data());
    }
    Tensor::from_rows(&rows)
}

/// Cosine similarities between the rows of `f` (M×d) and `g` (N×d).
pub fn cosine_similarity_matrix(f: &Tensor, g: &Tensor) -> Result<Tensor> {
    if f.cols() != g.cols() {
        return Err(Error::invalid(format!(
            "feature widths disagree: {} vs {}",
            f.cols(),
            g.cols()
        )));
    }
    let f = normalize_rows(f)?;
    let g = normalize_rows(g)?;
    f.matmul(&g.transpose())
}

/// `C[m,n] = 1 − cos(f_m, g_n)`, so every entry lies in `[0, 2]`.
pub fn build_cost_matrix(f: &Tensor, g: &Tensor) -> Result<CostMatrix> {
    let s = cosine_similarity_matrix(f, g)?;
    // Rounding can push 1 - cos a hair outside [0, 2].
    CostMatrix::new(s.map(|v| (1.0 - v).clamp(0.0, 2.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_cost_zero() {
        let f = Tensor::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]).unwrap();
        let c = build_cost_matrix(&f, &f).unwrap();
        assert!(c.tensor().data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn orthogonal_and_antipodal() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let g = Tensor::from_rows(&[[0.0, 3.0], [-1.0, 0.0]]).unwrap();
        let c = build_cost_matrix(&f, &g).unwrap();
        assert_eq!(c.get(0, 0), 1.0);
        assert_eq!(c.get(1, 1), 1.0);
        assert_eq!(c.get(0, 1), 2.0);
        assert_eq!(c.get(1, 0), 0.0);
    }

    #[test]
    fn degenerate_row_rejected() {
        let f = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        let g = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(build_cost_matrix(&f, &g), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn marginals_validate() {
        assert!(Marginals::new(vec![0.5, 0.5], vec![1.0]).is_ok());
        assert!(Marginals::new(vec![0.5, 0.6], vec![1.0]).is_err());
        assert!(Marginals::new(vec![-0.5, 1.5], vec![1.0]).is_err());
    }
}
