//! Adaptive visual attribute enhancement.
//!
//! The mid-network CLS state picks the `λ` most similar classes; their
//! textual attribute prompts `G′` then refine the visual prompts through one
//! residual cross-attention layer:
//! `Ũ = U + softmax(U W_Q (G′ W_K)ᵀ / √d_K) G′ W_V`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Rng, Var};
use crate::text::PromptSetVars;
use crate::vision::VisionEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvaeConfig {
    /// Number of candidate classes `λ`.
    pub lambda: usize,
    /// Key/query width `d_K`.
    pub d_k: usize,
}

impl Default for AvaeConfig {
    fn default() -> Self {
        AvaeConfig { lambda: 10, d_k: 32 }
    }
}

/// Widths an enhancer needs to size its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnhancerDims {
    pub d_v: usize,
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub class_ids: Vec<usize>,
    /// `(λ'·N) × d`, rows ordered by candidate rank then attribute index.
    pub g_prime: Var,
}

/// Class ids sorted by descending dot product with `query`, ties to the lower id.
pub fn rank_classes(query: &[f64], class_embeddings: &[&[f64]]) -> Vec<usize> {
    let scores: Vec<f64> = class_embeddings
        .iter()
        .map(|e| e.iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    ids
}

/// Stacks the prompt rows of `class_ids` (in that order) into one matrix.
pub fn gather_prompts(g: &mut Graph, sets: &[PromptSetVars], class_ids: &[usize]) -> Result<Var> {
    if class_ids.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    let rows = class_ids
        .iter()
        .map(|&c| {
            sets.get(c)
                .map(|s| s.rows)
                .ok_or_else(|| Error::invalid(format!("candidate class {c} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat_rows(&rows)
    }
}

/// Top-`min(λ, C)` classes for `cls_mid`. The ranking reads values only, so
/// no gradient passes through the choice itself; `G′` stays on the graph.
pub fn select_candidates(
    g: &mut Graph,
    store: &ParamStore,
    vision: &VisionEncoder,
    cls_mid: Var,
    sets: &[PromptSetVars],
    lambda: usize,
) -> Result<CandidateSet> {
    if lambda == 0 {
        return Err(Error::invalid("lambda must be at least 1"));
    }
    if sets.is_empty() {
        return Err(Error::invalid("no prompt sets to select candidates from"));
    }
    let query = vision.project_cls(g, store, cls_mid)?;
    let query = g.value(query).data().to_vec();
    let embeddings: Vec<&[f64]> = sets.iter().map(|s| g.value(s.class_embedding).data()).collect();
    let mut class_ids = rank_classes(&query, &embeddings);
    class_ids.truncate(lambda);
    let g_prime = gather_prompts(g, sets, &class_ids)?;
    Ok(CandidateSet { class_ids, g_prime })
}

pub fn init_avae_params(store: &mut ParamStore, rng: &mut Rng, dims: EnhancerDims, d_k: usize, std: f64) -> Result<()> {
    if d_k == 0 {
        return Err(Error::invalid("d_k must be positive"));
    }
    store.insert("avae.wq", rng.normal_tensor(&[dims.d_v, d_k], std))?;
    store.insert("avae.wk", rng.normal_tensor(&[dims.d, d_k], std))?;
    store.insert("avae.wv", rng.normal_tensor(&[dims.d, dims.d_v], std))?;
    Ok(())
}

/// Row-stochastic `M × (λ'N)` cross-attention weights.
pub fn attention_weights(g: &mut Graph, store: &ParamStore, u: Var, g_prime: Var) -> Result<Var> {
    if g.value(g_prime).rows() == 0 {
        return Err(Error::invalid("empty candidate set"));
    }
    let wq = g.param(store, "avae.wq")?;
    let wk = g.param(store, "avae.wk")?;
    let q = g.matmul(u, wq)?;
    let k = g.matmul(g_prime, wk)?;
    let d_k = g.value(k).cols();
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d_k as f64).sqrt());
    Ok(g.softmax_rows(logits))
}

/// `U + A (G′ W_V)`.
pub fn enhance(g: &mut Graph, store: &ParamStore, u: Var, g_prime: Var) -> Result<Var> {
    let weights = attention_weights(g, store, u, g_prime)?;
    let wv = g.param(store, "avae.wv")?;
    let values = g.matmul(g_prime, wv)?;
    let mixed = g.matmul(weights, values)?;
    g.add(u, mixed)
}

/// Everything an enhancer may look at when refining prompt states.
pub struct EnhanceRequest<'a> {
    pub store: &'a ParamStore,
    pub vision: &'a VisionEncoder,
    pub sets: &'a [PromptSetVars],
    /// `U_l`, `M × d_v`.
    pub prompts: Var,
    /// `s_l`, `1 × d_v`.
    pub cls_mid: Var,
    /// Skip ranking and use these classes instead.
    pub forced_candidates: Option<&'a [usize]>,
}

#[derive(Debug, Clone)]
pub struct Enhanced {
    pub prompts: Var,
    pub candidates: Vec<usize>,
}

pub trait PromptEnhancer: Send + Sync {
    fn name(&self) -> &'static str;

    fn init_params(&self, store: &mut ParamStore, rng: &mut Rng, dims: EnhancerDims, std: f64) -> Result<()>;

    fn enhance(&self, g: &mut Graph, req: &EnhanceRequest<'_>) -> Result<Enhanced>;
}

#[derive(Debug, Clone, Copy)]
pub struct Avae {
    pub cfg: AvaeConfig,
}

impl PromptEnhancer for Avae {
    fn name(&self) -> &'static str {
        "avae"
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut Rng, dims: EnhancerDims, std: f64) -> Result<()> {
        init_avae_params(store, rng, dims, self.cfg.d_k, std)
    }

    fn enhance(&self, g: &mut Graph, req: &EnhanceRequest<'_>) -> Result<Enhanced> {
        let cands = match req.forced_candidates {
            Some(ids) => CandidateSet {
                class_ids: ids.to_vec(),
                g_prime: gather_prompts(g, req.sets, ids)?,
            },
            None => select_candidates(g, req.store, req.vision, req.cls_mid, req.sets, self.cfg.lambda)?,
        };
        let prompts = enhance(g, req.store, req.prompts, cands.g_prime)?;
        Ok(Enhanced {
            prompts,
            candidates: cands.class_ids,
        })
    }
}

/// Leaves the prompts untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEnhancer;

impl PromptEnhancer for IdentityEnhancer {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn init_params(&self, _: &mut ParamStore, _: &mut Rng, _: EnhancerDims, _: f64) -> Result<()> {
        Ok(())
    }

    fn enhance(&self, _: &mut Graph, req: &EnhanceRequest<'_>) -> Result<Enhanced> {
        Ok(Enhanced {
            prompts: req.prompts,
            candidates: Vec::new(),
        })
    }
}

type EnhancerFactory = fn(&AvaeConfig) -> Arc<dyn PromptEnhancer>;

/// Enhancers by name. `"none"` is not registered: it means running without a hook.
pub struct EnhancerRegistry {
    factories: BTreeMap<&'static str, EnhancerFactory>,
}

impl Default for EnhancerRegistry {
    fn default() -> Self {
        let mut factories: BTreeMap<&'static str, EnhancerFactory> = BTreeMap::new();
        factories.insert("avae", |cfg| Arc::new(Avae { cfg: *cfg }));
        factories.insert("identity", |_| Arc::new(IdentityEnhancer));
        EnhancerRegistry { factories }
    }
}

impl EnhancerRegistry {
    pub fn register(&mut self, name: &'static str, factory: EnhancerFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    /// `Ok(None)` for `"none"`.
    pub fn build(&self, name: &str, cfg: &AvaeConfig) -> Result<Option<Arc<dyn PromptEnhancer>>> {
        if name == "none" {
            return Ok(None);
        }
        let f = self.factories.get(name).ok_or_else(|| {
            Error::invalid(format!(
                "unknown enhancer '{name}' (known: none, {})",
                self.names().join(", ")
            ))
        })?;
        Ok(Some(f(cfg)))
    }
}
