//! Toy vision transformer carrying `[CLS | visual prompts | patches]`.
//!
//! Images arrive as pre-embedded patch tokens. Learned positional
//! embeddings (optional) are added to the patches only. After layer
//! `avae_layer` an optional hook may replace the prompt states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};
use crate::transformer::{block_forward, init_block, BlockShape};

pub const PROMPTS_PARAM: &str = "vis.prompts";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of visual attribute prompts `M`.
    pub n_prompts: usize,
    /// Patch tokens per image.
    pub tokens: usize,
    /// 1-based layer after which the enhancer runs.
    pub avae_layer: usize,
    /// Joint embedding dimension `d`.
    pub embed_dim: usize,
    pub pos_embedding: bool,
    pub separate_prompt_projection: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            layers: 6,
            width: 32,
            heads: 4,
            mlp_ratio: 4,
            n_prompts: 4,
            tokens: 16,
            avae_layer: 4,
            embed_dim: 32,
            pos_embedding: true,
            separate_prompt_projection: false,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        BlockShape {
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
        .validate("vision encoder")?;
        if self.layers == 0 || self.n_prompts == 0 || self.tokens == 0 || self.embed_dim == 0 {
            return Err(Error::invalid(
                "vision encoder: layers, n_prompts, tokens and embed_dim must be positive",
            ));
        }
        if self.avae_layer == 0 || self.avae_layer > self.layers {
            return Err(Error::invalid(format!(
                "avae_layer {} outside 1..={}",
                self.avae_layer, self.layers
            )));
        }
        Ok(())
    }

    pub fn sequence_len(&self) -> usize {
        1 + self.n_prompts + self.tokens
    }
}

/// Graph handles produced by [`VisionEncoder::encode_image`].
#[derive(Debug, Clone, Copy)]
pub struct ImageEncoding {
    /// Global feature, `1 × d`, unit norm.
    pub f: Var,
    /// Final prompt features, `M × d`, unit rows.
    pub prompts: Var,
    /// CLS state after layer `avae_layer`, before any enhancement, `1 × d_v`.
    pub cls_mid: Var,
}

/// Hook run after layer `avae_layer`: receives the prompt states `U_l` and
/// `s_l` and returns the replacement prompt states.
pub type PromptHook<'a> = dyn FnMut(&mut Graph, Var, Var) -> Result<Var> + 'a;

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub cfg: VitConfig,
}

impl VisionEncoder {
    pub fn new(cfg: VitConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(VisionEncoder { cfg })
    }

    fn block_prefix(j: usize) -> String {
        format!("vis.blocks.{j}")
    }

    fn shape(&self) -> BlockShape {
        BlockShape {
            width: self.cfg.width,
            heads: self.cfg.heads,
            mlp_ratio: self.cfg.mlp_ratio,
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng, std: f64) -> Result<()> {
        let c = &self.cfg;
        store.insert("vis.cls", rng.normal_tensor(&[1, c.width], std))?;
        store.insert(PROMPTS_PARAM, rng.normal_tensor(&[c.n_prompts, c.width], std))?;
        if c.pos_embedding {
            store.insert("vis.pos_embedding", rng.normal_tensor(&[c.tokens, c.width], std))?;
        }
        for j in 0..c.layers {
            init_block(store, rng, &Self::block_prefix(j), self.shape(), std)?;
        }
        store.insert("vis.ln_post.gain", Tensor::filled(&[1, c.width], 1.0))?;
        store.insert("vis.ln_post.bias", Tensor::zeros(&[1, c.width]))?;
        store.insert("vis.proj", rng.normal_tensor(&[c.width, c.embed_dim], std))?;
        if c.separate_prompt_projection {
            store.insert("vis.prompt_proj", rng.normal_tensor(&[c.width, c.embed_dim], std))?;
        }
        Ok(())
    }

    /// One transformer layer (0-based `j`) over `[s; U; E]`, split back by position.
    pub fn vit_layer_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        j: usize,
        s: Var,
        u: Var,
        e: Var,
    ) -> Result<(Var, Var, Var)> {
        if j >= self.cfg.layers {
            return Err(Error::invalid(format!("layer {j} out of range")));
        }
        for (what, v) in [("cls", s), ("prompts", u), ("patches", e)] {
            if g.value(v).cols() != self.cfg.width {
                return Err(Error::invalid(format!(
                    "{what} width {} does not match encoder width {}",
                    g.value(v).cols(),
                    self.cfg.width
                )));
            }
        }
        let m = g.value(u).rows();
        let t = g.value(e).rows();
        let x = g.concat_rows(&[s, u, e])?;
        let y = block_forward(g, store, &Self::block_prefix(j), x, self.cfg.heads)?;
        Ok((
            g.slice_rows(y, 0, 1)?,
            g.slice_rows(y, 1, m)?,
            g.slice_rows(y, 1 + m, t)?,
        ))
    }

    /// `1 × d` unit-norm projection of a CLS state.
    pub fn project_cls(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<Var> {
        self.project(g, store, s, "vis.proj")
    }

    fn project(&self, g: &mut Graph, store: &ParamStore, x: Var, proj: &str) -> Result<Var> {
        let gain = g.param(store, "vis.ln_post.gain")?;
        let bias = g.param(store, "vis.ln_post.bias")?;
        let h = g.layer_norm_rows(x, gain, bias)?;
        let w = g.param(store, proj)?;
        let out = g.matmul(h, w)?;
        g.l2_normalize_rows(out)
    }

    pub fn encode_image(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: &Tensor,
        hook: Option<&mut PromptHook<'_>>,
    ) -> Result<ImageEncoding> {
        let c = &self.cfg;
        if patches.rows() != c.tokens || patches.cols() != c.width {
            return Err(Error::invalid(format!(
                "image of shape {:?} does not match {} tokens of width {}",
                patches.shape(),
                c.tokens,
                c.width
            )));
        }
        let mut e = g.constant(patches.as_matrix());
        if c.pos_embedding {
            let pos = g.param(store, "vis.pos_embedding")?;
            e = g.add(e, pos)?;
        }
        let mut s = g.param(store, "vis.cls")?;
        let mut u = g.param(store, PROMPTS_PARAM)?;
        let mut hook = hook;
        let mut cls_mid = None;
        for j in 0..c.layers {
            (s, u, e) = self.vit_layer_forward(g, store, j, s, u, e)?;
            if j + 1 == c.avae_layer {
                cls_mid = Some(s);
                if let Some(h) = hook.as_deref_mut() {
                    u = h(g, u, s)?;
                }
            }
        }
        let f = self.project(g, store, s, "vis.proj")?;
        let proj = if c.separate_prompt_projection {
            "vis.prompt_proj"
        } else {
            "vis.proj"
        };
        let prompts = self.project(g, store, u, proj)?;
        Ok(ImageEncoding {
            f,
            prompts,
            cls_mid: cls_mid.expect("avae_layer validated to lie in 1..=layers"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(cfg: VitConfig, seed: u64) -> (VisionEncoder, ParamStore, Tensor) {
        let enc = VisionEncoder::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        enc.init_params(&mut store, &mut rng, 0.02).unwrap();
        let img = rng.normal_tensor(&[cfg.tokens, cfg.width], 1.0);
        (enc, store, img)
    }

    #[test]
    fn config_validation() {
        let bad = VitConfig {
            avae_layer: 7,
            ..VitConfig::default()
        };
        assert!(VisionEncoder::new(bad).is_err());
        let bad = VitConfig {
            heads: 5,
            ..VitConfig::default()
        };
        assert!(VisionEncoder::new(bad).is_err());
    }

    #[test]
    fn layer_shape_law_and_positions() {
        let (enc, store, img) = setup(VitConfig::default(), 1);
        let mut g = Graph::new();
        let s = g.param(&store, "vis.cls").unwrap();
        let u = g.param(&store, PROMPTS_PARAM).unwrap();
        let e = g.constant(img);
        let (s2, u2, e2) = enc.vit_layer_forward(&mut g, &store, 0, s, u, e).unwrap();
        assert_eq!(g.value(s2).shape(), &[1, 32]);
        assert_eq!(g.value(u2).shape(), &[4, 32]);
        assert_eq!(g.value(e2).shape(), &[16, 32]);
        let total = g.value(s2).rows() + g.value(u2).rows() + g.value(e2).rows();
        assert_eq!(total, enc.cfg.sequence_len());
    }

    #[test]
    fn layer_width_mismatch() {
        let (enc, store, _) = setup(VitConfig::default(), 1);
        let mut g = Graph::new();
        let s = g.param(&store, "vis.cls").unwrap();
        let u = g.param(&store, PROMPTS_PARAM).unwrap();
        let e = g.constant(Tensor::zeros(&[16, 8]));
        assert!(enc.vit_layer_forward(&mut g, &store, 0, s, u, e).is_err());
    }

    #[test]
    fn zeroed_output_projections_make_identity() {
        let (enc, mut store, img) = setup(VitConfig::default(), 2);
        for name in ["vis.blocks.0.attn.wo", "vis.blocks.0.mlp.w2"] {
            let v = store.value_mut(name).unwrap();
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let s = g.param(&store, "vis.cls").unwrap();
        let u = g.param(&store, PROMPTS_PARAM).unwrap();
        let e = g.constant(img);
        let (s2, u2, e2) = enc.vit_layer_forward(&mut g, &store, 0, s, u, e).unwrap();
        assert_eq!(g.value(s2), g.value(s));
        assert_eq!(g.value(u2), g.value(u));
        assert_eq!(g.value(e2), g.value(e));
    }

    #[test]
    fn outputs_are_unit() {
        let (enc, store, img) = setup(VitConfig::default(), 3);
        let mut g = Graph::new();
        let out = enc.encode_image(&mut g, &store, &img, None).unwrap();
        assert!((g.value(out.f).norm() - 1.0).abs() < 1e-9);
        let p = g.value(out.prompts);
        assert_eq!(p.shape(), &[4, 32]);
        for r in 0..4 {
            let n: f64 = p.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(g.value(out.cls_mid).shape(), &[1, 32]);
    }

    #[test]
    fn identity_hook_is_bitwise_equal() {
        let (enc, store, img) = setup(VitConfig::default(), 4);
        let mut g = Graph::new();
        let a = enc.encode_image(&mut g, &store, &img, None).unwrap();
        let mut id = |_: &mut Graph, u: Var, _: Var| Ok(u);
        let b = enc.encode_image(&mut g, &store, &img, Some(&mut id)).unwrap();
        assert_eq!(g.value(a.f), g.value(b.f));
        assert_eq!(g.value(a.prompts), g.value(b.prompts));
    }

    #[test]
    fn hook_runs_once_after_configured_layer() {
        let cfg = VitConfig {
            layers: 12,
            avae_layer: 7,
            ..VitConfig::default()
        };
        let (enc, store, img) = setup(cfg, 5);
        let mut g = Graph::new();
        let mut calls = Vec::new();
        let mut hook = |g: &mut Graph, u: Var, s: Var| {
            calls.push((g.value(u).clone(), g.value(s).clone()));
            Ok(u)
        };
        let out = enc.encode_image(&mut g, &store, &img, Some(&mut hook)).unwrap();
        assert_eq!(calls.len(), 1);

        // Reference: run seven layers by hand.
        let mut s = g.param(&store, "vis.cls").unwrap();
        let mut u = g.param(&store, PROMPTS_PARAM).unwrap();
        let e0 = g.constant(img.clone());
        let pos = g.param(&store, "vis.pos_embedding").unwrap();
        let mut e = g.add(e0, pos).unwrap();
        for j in 0..7 {
            (s, u, e) = enc.vit_layer_forward(&mut g, &store, j, s, u, e).unwrap();
        }
        assert_eq!(&calls[0].0, g.value(u));
        assert_eq!(&calls[0].1, g.value(s));
        assert_eq!(g.value(out.cls_mid), g.value(s));
    }

    #[test]
    fn hook_output_changes_result() {
        let (enc, store, img) = setup(VitConfig::default(), 6);
        let mut g = Graph::new();
        let a = enc.encode_image(&mut g, &store, &img, None).unwrap();
        let mut shift = |g: &mut Graph, u: Var, _: Var| {
            let c = g.constant(Tensor::filled(&[4, 32], 0.5));
            g.add(u, c)
        };
        let b = enc.encode_image(&mut g, &store, &img, Some(&mut shift)).unwrap();
        assert_ne!(g.value(a.prompts), g.value(b.prompts));
    }

    #[test]
    fn patch_permutation_invariance_without_positions() {
        let cfg = VitConfig {
            pos_embedding: false,
            ..VitConfig::default()
        };
        let (enc, store, img) = setup(cfg, 7);
        let mut rng = Rng::new(70);
        let mut order: Vec<usize> = (0..16).collect();
        rng.shuffle(&mut order);
        let rows: Vec<Vec<f64>> = order.iter().map(|&r| img.row(r).to_vec()).collect();
        let permuted = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let a = enc.encode_image(&mut g, &store, &img, None).unwrap();
        let b = enc.encode_image(&mut g, &store, &permuted, None).unwrap();
        for (x, y) in g.value(a.f).data().iter().zip(g.value(b.f).data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn separate_projection_adds_param() {
        let cfg = VitConfig {
            separate_prompt_projection: true,
            ..VitConfig::default()
        };
        let (enc, store, img) = setup(cfg, 8);
        assert!(store.contains("vis.prompt_proj"));
        let mut g = Graph::new();
        let out = enc.encode_image(&mut g, &store, &img, None).unwrap();
        assert_eq!(g.value(out.prompts).shape(), &[4, 32]);
    }
}
