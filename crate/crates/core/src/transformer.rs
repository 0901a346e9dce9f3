//! Pre-norm transformer block shared by the text and vision encoders.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockShape {
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl BlockShape {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid(format!(
                "{what}: width, heads and mlp_ratio must be positive"
            )));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "{what}: width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

pub(crate) fn init_block(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    shape: BlockShape,
    std: f64,
) -> Result<()> {
    let w = shape.width;
    let hidden = w * shape.mlp_ratio;
    for ln in ["ln1", "ln2"] {
        store.insert(&format!("{prefix}.{ln}.gain"), Tensor::filled(&[1, w], 1.0))?;
        store.insert(&format!("{prefix}.{ln}.bias"), Tensor::zeros(&[1, w]))?;
    }
    for proj in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.attn.{proj}"), rng.normal_tensor(&[w, w], std))?;
    }
    store.insert(&format!("{prefix}.mlp.w1"), rng.normal_tensor(&[w, hidden], std))?;
    store.insert(&format!("{prefix}.mlp.b1"), Tensor::zeros(&[1, hidden]))?;
    store.insert(&format!("{prefix}.mlp.w2"), rng.normal_tensor(&[hidden, w], std))?;
    store.insert(&format!("{prefix}.mlp.b2"), Tensor::zeros(&[1, w]))?;
    Ok(())
}

/// Bidirectional multi-head self-attention over the rows of `x` (already normalized).
fn self_attention(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let wq = g.param(store, &format!("{prefix}.attn.wq"))?;
    let wk = g.param(store, &format!("{prefix}.attn.wk"))?;
    let wv = g.param(store, &format!("{prefix}.attn.wv"))?;
    let wo = g.param(store, &format!("{prefix}.attn.wo"))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let width = g.value(q).cols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        outs.push(g.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.matmul(joined, wo)
}

/// `x + Attn(LN(x))` followed by `x + MLP(LN(x))`.
pub(crate) fn block_forward(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let gain1 = g.param(store, &format!("{prefix}.ln1.gain"))?;
    let bias1 = g.param(store, &format!("{prefix}.ln1.bias"))?;
    let h = g.layer_norm_rows(x, gain1, bias1)?;
    let attn = self_attention(g, store, prefix, h, heads)?;
    let x = g.add(x, attn)?;

    let gain2 = g.param(store, &format!("{prefix}.ln2.gain"))?;
    let bias2 = g.param(store, &format!("{prefix}.ln2.bias"))?;
    let h = g.layer_norm_rows(x, gain2, bias2)?;
    let w1 = g.param(store, &format!("{prefix}.mlp.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.mlp.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.mlp.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.mlp.b2"))?;
    let hidden = g.matmul(h, w1)?;
    let hidden = g.add_row_broadcast(hidden, b1)?;
    let hidden = g.gelu(hidden);
    let out = g.matmul(hidden, w2)?;
    let out = g.add_row_broadcast(out, b2)?;
    g.add(x, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(shape: BlockShape) -> ParamStore {
        let mut store = ParamStore::new();
        init_block(&mut store, &mut Rng::new(1), "b", shape, 0.3).unwrap();
        store
    }

    const SHAPE: BlockShape = BlockShape {
        width: 6,
        heads: 2,
        mlp_ratio: 2,
    };

    #[test]
    fn shape_validation() {
        assert!(SHAPE.validate("t").is_ok());
        assert!(BlockShape { heads: 4, ..SHAPE }.validate("t").is_err());
        assert!(BlockShape { mlp_ratio: 0, ..SHAPE }.validate("t").is_err());
    }

    #[test]
    fn block_parameters() {
        let store = setup(SHAPE);
        assert_eq!(store.len(), 12);
        assert_eq!(store.value("b.mlp.w1").unwrap().shape(), &[6, 12]);
        assert_eq!(store.value("b.ln2.gain").unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let mut store = setup(SHAPE);
        for name in ["b.attn.wo", "b.mlp.w2"] {
            store.value_mut(name).unwrap().data_mut().fill(0.0);
        }
        let x = Rng::new(2).normal_tensor(&[4, 6], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = block_forward(&mut g, &store, "b", xv, 2).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn rows_are_permutation_equivariant() {
        let store = setup(SHAPE);
        let x = Rng::new(3).normal_tensor(&[5, 6], 1.0);
        let order = [3, 0, 4, 1, 2];
        let permuted = Tensor::from_rows(&order.iter().map(|&r| x.row(r)).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(x), g.constant(permuted));
        let ya = block_forward(&mut g, &store, "b", a, 2).unwrap();
        let yb = block_forward(&mut g, &store, "b", b, 2).unwrap();
        for (k, &r) in order.iter().enumerate() {
            for (p, q) in g.value(ya).row(r).iter().zip(g.value(yb).row(k)) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
