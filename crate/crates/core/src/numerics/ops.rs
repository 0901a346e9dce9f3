//! Value-level primitives. The differentiable counterparts live on [`Graph`](super::Graph).

use super::Tensor;
use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate by [`l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;

/// Row-wise `softmax(logits / temperature)` with max-subtraction.
pub fn softmax_rows(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !logits.is_finite() {
        return Err(Error::invalid("softmax logits must be finite"));
    }
    let cols = logits.cols();
    let mut out = logits.as_matrix();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        softmax_in_place(row, temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let norm = v.norm();
    if !(norm > EPS_NORM) {
        return Err(Error::DegenerateVector { norm, eps: EPS_NORM });
    }
    Ok(v.map(|x| x / norm))
}

/// `softmax(Q Kᵀ / √d_K) V` for a single head.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dk = q.cols();
    if k.cols() != dk {
        return Err(Error::invalid(format!(
            "query width {dk} does not match key width {}",
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::invalid(format!("{} keys but {} values", k.rows(), v.rows())));
    }
    if k.rows() == 0 {
        return Err(Error::invalid("attention needs at least one key"));
    }
    let scores = q.matmul(&k.transpose())?;
    let weights = softmax_rows(&scores, (dk as f64).sqrt())?;
    weights.matmul(v)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_rows() {
        let p = softmax_rows(&Tensor::from_rows(&[[0.0, 0.0]]).unwrap(), 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax_rows(&Tensor::from_rows(&[[2.5, 2.5, 2.5]]).unwrap(), 0.3).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let p = softmax_rows(&Tensor::from_rows(&[[1000.0, 0.0]]).unwrap(), 1.0).unwrap();
        assert!(p.is_finite());
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(p.get(0, 1) < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(softmax_rows(&x, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax_rows(&x, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-15 && (n.data()[1] - 0.8).abs() < 1e-15);
        let u = Tensor::vector(vec![0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&u).unwrap(), u);
        assert!(matches!(
            l2_normalize(&Tensor::vector(vec![0.0, 0.0])),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn attention_single_key_passes_value_through() {
        let q = Tensor::from_rows(&[[0.3, -1.0], [5.0, 2.0]]).unwrap();
        let k = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[[7.0, 8.0, 9.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(out.row(0), &[7.0, 8.0, 9.0]);
        assert_eq!(out.row(1), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn attention_zero_values_give_zero() {
        let q = Tensor::from_rows(&[[0.3, -1.0]]).unwrap();
        let k = Tensor::from_rows(&[[1.0, 1.0], [2.0, 0.0]]).unwrap();
        let v = Tensor::zeros(&[2, 4]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_orthogonal_queries_mix_uniformly() {
        // Q Kᵀ ≡ 0 when queries and keys live in orthogonal subspaces.
        let q = Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0]]).unwrap();
        let v = Tensor::from_rows(&[[3.0], [6.0], [9.0]]).unwrap();
        let weights = softmax_rows(&q.matmul(&k.transpose()).unwrap(), 2.0).unwrap();
        for &w in weights.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-6);
        }
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!((out.get(0, 0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn attention_shape_mismatch() {
        let q = Tensor::zeros(&[1, 2]);
        let k = Tensor::zeros(&[2, 3]);
        let v = Tensor::zeros(&[2, 1]);
        assert!(matches!(
            scaled_dot_attention(&q, &k, &v),
            Err(Error::InvalidArgument(_))
        ));
    }
}
