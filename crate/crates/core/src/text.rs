//! Toy text encoder producing per-class textual attribute prompt sets.
//!
//! A prompt for class `k` and attribute `n` is laid out as
//! `[context vectors | class-name tokens | attribute tokens]`. The context
//! vectors are learnable and shared by every prompt of every class. The
//! encoder embeds tokens (hash buckets), adds learned positions, runs a few
//! pre-norm transformer blocks, pools the final position, projects to the
//! joint space, and unit-normalizes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};
use crate::transformer::{block_forward, init_block, BlockShape};

/// Question used to elicit attribute descriptions from a language model when
/// preparing `attributes.json`. Nothing in this crate sends it anywhere.
pub const ATTRIBUTE_QUERY_TEMPLATE: &str = "What are useful visual features for distinguishing a [CLASS] in an image?";

pub const CONTEXT_PARAM: &str = "text.ctx";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("vocabulary size must be positive"));
        }
        Ok(Vocabulary { size })
    }

    /// Lowercases, splits on anything that is not alphanumeric, and hashes
    /// each word (FNV-1a, 64-bit) into one of `size` buckets.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| (fnv1a(&w.to_lowercase()) % self.size as u64) as usize)
            .collect()
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAttributes {
    pub name: String,
    pub attributes: Vec<String>,
}

/// Contents of `attributes.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeFile {
    #[serde(default = "format_v1")]
    pub format_version: u32,
    pub classes: Vec<ClassAttributes>,
}

fn format_v1() -> u32 {
    1
}

impl AttributeFile {
    pub fn new(classes: Vec<ClassAttributes>) -> Self {
        AttributeFile {
            format_version: 1,
            classes,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: AttributeFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if file.format_version != 1 {
            return Err(Error::InvalidManifest(format!(
                "{}: format_version {} is not supported",
                path.display(),
                file.format_version
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn attributes_of(&self, class: &str) -> Option<&[String]> {
        self.classes
            .iter()
            .find(|c| c.name == class)
            .map(|c| c.attributes.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextualAttributePrompt {
    pub class_id: usize,
    pub attribute_index: usize,
    /// Class-name tokens followed by attribute tokens, truncated so that the
    /// context slots plus these tokens fit in `max_len`.
    pub token_ids: Vec<usize>,
}

impl TextualAttributePrompt {
    pub fn sequence_len(&self, n_ctx: usize) -> usize {
        n_ctx + self.token_ids.len()
    }
}

/// All prompts for an ordered list of classes, `N` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub class_names: Vec<String>,
    pub n_attributes: usize,
    pub prompts: Vec<TextualAttributePrompt>,
}

impl PromptBank {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_prompts(&self, class_id: usize) -> &[TextualAttributePrompt] {
        let n = self.n_attributes;
        &self.prompts[class_id * n..(class_id + 1) * n]
    }

    /// The bank restricted to `classes` (ids into this bank), in that order.
    pub fn subset(&self, classes: &[usize]) -> PromptBank {
        let mut prompts = Vec::with_capacity(classes.len() * self.n_attributes);
        for (new_id, &c) in classes.iter().enumerate() {
            prompts.extend(self.class_prompts(c).iter().cloned().map(|mut p| {
                p.class_id = new_id;
                p
            }));
        }
        PromptBank {
            class_names: classes.iter().map(|&c| self.class_names[c].clone()).collect(),
            n_attributes: self.n_attributes,
            prompts,
        }
    }
}

/// Builds `C·N` prompts, taking the first `n` attribute strings of each class.
pub fn build_prompts(
    class_names: &[String],
    attributes: &AttributeFile,
    n: usize,
    vocab: &Vocabulary,
    n_ctx: usize,
    max_len: usize,
) -> Result<PromptBank> {
    if n == 0 {
        return Err(Error::invalid("number of textual attribute prompts must be positive"));
    }
    if n_ctx >= max_len {
        return Err(Error::invalid(format!(
            "{n_ctx} context slots leave no room in max_len {max_len}"
        )));
    }
    let budget = max_len - n_ctx;
    let mut prompts = Vec::with_capacity(class_names.len() * n);
    for (class_id, name) in class_names.iter().enumerate() {
        let attrs = attributes.attributes_of(name).unwrap_or(&[]);
        if attrs.len() < n {
            return Err(Error::InsufficientAttributes {
                class: name.clone(),
                have: attrs.len(),
                need: n,
            });
        }
        let class_tokens = vocab.tokenize(name);
        for (attribute_index, attr) in attrs.iter().take(n).enumerate() {
            let attr_tokens = vocab.tokenize(attr);
            if attr_tokens.is_empty() {
                return Err(Error::invalid(format!(
                    "attribute {attribute_index} of class '{name}' has no tokens"
                )));
            }
            let mut token_ids = class_tokens.clone();
            token_ids.extend(attr_tokens);
            token_ids.truncate(budget);
            prompts.push(TextualAttributePrompt {
                class_id,
                attribute_index,
                token_ids,
            });
        }
    }
    Ok(PromptBank {
        class_names: class_names.to_vec(),
        n_attributes: n,
        prompts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub n_ctx: usize,
    /// Joint embedding dimension `d`.
    pub embed_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab_size: 1024,
            width: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            max_len: 16,
            n_ctx: 4,
            embed_dim: 32,
        }
    }
}

/// Graph handles for one class's encoded prompt set.
#[derive(Debug, Clone, Copy)]
pub struct PromptSetVars {
    pub class_id: usize,
    /// `N × d`, unit rows.
    pub rows: Var,
    /// `1 × d`, normalized mean of the rows.
    pub class_embedding: Var,
}

/// Value snapshot of [`PromptSetVars`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPromptSet {
    pub class_id: usize,
    pub g: Tensor,
    pub class_embedding: Tensor,
}

impl PromptSetVars {
    pub fn values(&self, graph: &Graph) -> EncodedPromptSet {
        EncodedPromptSet {
            class_id: self.class_id,
            g: graph.value(self.rows).clone(),
            class_embedding: graph.value(self.class_embedding).clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub cfg: TextConfig,
    pub vocab: Vocabulary,
}

impl TextEncoder {
    pub fn new(cfg: TextConfig) -> Result<Self> {
        BlockShape {
            width: cfg.width,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
        }
        .validate("text encoder")?;
        if cfg.embed_dim == 0 || cfg.max_len == 0 {
            return Err(Error::invalid("text encoder: embed_dim and max_len must be positive"));
        }
        Ok(TextEncoder {
            vocab: Vocabulary::new(cfg.vocab_size)?,
            cfg,
        })
    }

    fn block_prefix(j: usize) -> String {
        format!("text.blocks.{j}")
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng, std: f64) -> Result<()> {
        let c = &self.cfg;
        store.insert("text.token_embedding", rng.normal_tensor(&[c.vocab_size, c.width], std))?;
        store.insert("text.pos_embedding", rng.normal_tensor(&[c.max_len, c.width], std))?;
        store.insert(CONTEXT_PARAM, rng.normal_tensor(&[c.n_ctx.max(1), c.width], std))?;
        let shape = BlockShape {
            width: c.width,
            heads: c.heads,
            mlp_ratio: c.mlp_ratio,
        };
        for j in 0..c.layers {
            init_block(store, rng, &Self::block_prefix(j), shape, std)?;
        }
        store.insert("text.ln_final.gain", Tensor::filled(&[1, c.width], 1.0))?;
        store.insert("text.ln_final.bias", Tensor::zeros(&[1, c.width]))?;
        store.insert("text.proj", rng.normal_tensor(&[c.width, c.embed_dim], std))?;
        Ok(())
    }

    /// Unit-norm `1 × d` embedding of one prompt.
    pub fn encode_prompt(&self, g: &mut Graph, store: &ParamStore, prompt: &TextualAttributePrompt) -> Result<Var> {
        let c = &self.cfg;
        let len = prompt.sequence_len(c.n_ctx);
        if len > c.max_len {
            return Err(Error::invalid(format!(
                "prompt of length {len} exceeds max_len {}",
                c.max_len
            )));
        }
        let table = g.param(store, "text.token_embedding")?;
        let tokens = g.gather_rows(table, &prompt.token_ids)?;
        let mut x = if c.n_ctx > 0 {
            let ctx = g.param(store, CONTEXT_PARAM)?;
            g.concat_rows(&[ctx, tokens])?
        } else {
            tokens
        };
        let pos = g.param(store, "text.pos_embedding")?;
        let pos = g.slice_rows(pos, 0, len)?;
        x = g.add(x, pos)?;
        for j in 0..c.layers {
            x = block_forward(g, store, &Self::block_prefix(j), x, c.heads)?;
        }
        let last = g.slice_rows(x, len - 1, 1)?;
        let gain = g.param(store, "text.ln_final.gain")?;
        let bias = g.param(store, "text.ln_final.bias")?;
        let last = g.layer_norm_rows(last, gain, bias)?;
        let proj = g.param(store, "text.proj")?;
        let out = g.matmul(last, proj)?;
        g.l2_normalize_rows(out)
    }

    /// One [`PromptSetVars`] per class of `bank`, in class order.
    pub fn encode_all(&self, g: &mut Graph, store: &ParamStore, bank: &PromptBank) -> Result<Vec<PromptSetVars>> {
        let mut sets = Vec::with_capacity(bank.num_classes());
        for class_id in 0..bank.num_classes() {
            let rows = bank
                .class_prompts(class_id)
                .iter()
                .map(|p| self.encode_prompt(g, store, p))
                .collect::<Result<Vec<_>>>()?;
            // A single row is already unit length and is its own mean.
            let (rows, class_embedding) = if rows.len() == 1 {
                (rows[0], rows[0])
            } else {
                let rows = g.concat_rows(&rows)?;
                let mean = g.mean_rows(rows);
                (rows, g.l2_normalize_rows(mean)?)
            };
            sets.push(PromptSetVars {
                class_id,
                rows,
                class_embedding,
            });
        }
        Ok(sets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs() -> AttributeFile {
        AttributeFile::new(vec![
            ClassAttributes {
                name: "lily".into(),
                attributes: vec![
                    "white petals".into(),
                    "long stem".into(),
                    "six tepals".into(),
                    "bulb".into(),
                    "extra".into(),
                ],
            },
            ClassAttributes {
                name: "toad lily".into(),
                attributes: vec![
                    "spotted petals".into(),
                    "arching stem".into(),
                    "purple".into(),
                    "shade".into(),
                ],
            },
        ])
    }

    fn names() -> Vec<String> {
        vec!["lily".into(), "toad lily".into()]
    }

    #[test]
    fn tokenize_rules() {
        let v = Vocabulary::new(1024).unwrap();
        assert!(v.tokenize("").is_empty());
        assert!(v.tokenize("  \t ").is_empty());
        assert_eq!(v.tokenize("White Petals"), v.tokenize("white petals"));
        assert_eq!(v.tokenize("white, petals!"), v.tokenize("white petals"));
        assert_eq!(v.tokenize("a b c").len(), 3);
        assert!(v.tokenize("white petals").iter().all(|&t| t < 1024));
    }

    #[test]
    fn tokenize_is_stable_across_runs() {
        // Frozen ids guard against accidental changes to the hashing scheme.
        let v = Vocabulary::new(1024).unwrap();
        let ids = v.tokenize("white petals");
        assert_eq!(
            ids,
            vec![(fnv1a("white") % 1024) as usize, (fnv1a("petals") % 1024) as usize]
        );
        assert_eq!(fnv1a(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn build_prompts_counts_and_layout() {
        let v = Vocabulary::new(1024).unwrap();
        let bank = build_prompts(&names(), &attrs(), 4, &v, 4, 16).unwrap();
        assert_eq!(bank.prompts.len(), 8);
        let p = &bank.prompts[5];
        assert_eq!((p.class_id, p.attribute_index), (1, 1));
        let mut expected = v.tokenize("toad lily");
        expected.extend(v.tokenize("arching stem"));
        assert_eq!(p.token_ids, expected);
        // Extra attributes beyond N are ignored.
        assert_eq!(bank.class_prompts(0).len(), 4);
    }

    #[test]
    fn build_prompts_single() {
        let v = Vocabulary::new(64).unwrap();
        let bank = build_prompts(&names()[..1], &attrs(), 1, &v, 4, 16).unwrap();
        assert_eq!(bank.prompts.len(), 1);
    }

    #[test]
    fn build_prompts_truncates() {
        let v = Vocabulary::new(64).unwrap();
        let bank = build_prompts(&names(), &attrs(), 2, &v, 4, 6).unwrap();
        assert!(bank.prompts.iter().all(|p| p.sequence_len(4) <= 6));
    }

    #[test]
    fn missing_class_is_insufficient() {
        let v = Vocabulary::new(64).unwrap();
        let err = build_prompts(&["rose".to_string()], &attrs(), 4, &v, 4, 16).unwrap_err();
        assert!(matches!(err, Error::InsufficientAttributes { ref class, have: 0, need: 4 } if class == "rose"));
        let err = build_prompts(&names(), &attrs(), 5, &v, 4, 16).unwrap_err();
        assert!(matches!(err, Error::InsufficientAttributes { ref class, .. } if class == "toad lily"));
    }

    fn encoder() -> (TextEncoder, ParamStore) {
        let enc = TextEncoder::new(TextConfig::default()).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut Rng::new(0), 0.02).unwrap();
        (enc, store)
    }

    #[test]
    fn encoded_prompts_are_unit_and_distinct() {
        let (enc, store) = encoder();
        let bank = build_prompts(&names(), &attrs(), 4, &enc.vocab, 4, 16).unwrap();
        let mut g = Graph::new();
        let a = enc.encode_prompt(&mut g, &store, &bank.prompts[0]).unwrap();
        let b = enc.encode_prompt(&mut g, &store, &bank.prompts[1]).unwrap();
        assert!((g.value(a).norm() - 1.0).abs() < 1e-9);
        assert_ne!(g.value(a), g.value(b));
        let again = enc.encode_prompt(&mut g, &store, &bank.prompts[0]).unwrap();
        assert_eq!(g.value(a), g.value(again));
    }

    #[test]
    fn encode_all_sets() {
        let (enc, store) = encoder();
        let bank = build_prompts(&names(), &attrs(), 4, &enc.vocab, 4, 16).unwrap();
        let mut g = Graph::new();
        let sets = enc.encode_all(&mut g, &store, &bank).unwrap();
        assert_eq!(sets.len(), 2);
        for (i, s) in sets.iter().enumerate() {
            let v = s.values(&g);
            assert_eq!(v.class_id, i);
            assert_eq!(v.g.shape(), &[4, 32]);
            for r in 0..4 {
                let n: f64 = v.g.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
            assert!((v.class_embedding.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_attribute_class_embedding_is_the_row() {
        let (enc, store) = encoder();
        let bank = build_prompts(&names(), &attrs(), 1, &enc.vocab, 4, 16).unwrap();
        let mut g = Graph::new();
        let sets = enc.encode_all(&mut g, &store, &bank).unwrap();
        for s in sets {
            let v = s.values(&g);
            assert_eq!(v.g, v.class_embedding);
        }
    }

    #[test]
    fn identical_rows_give_that_row() {
        let same = AttributeFile::new(vec![ClassAttributes {
            name: "lily".into(),
            attributes: vec!["white".into(); 4],
        }]);
        let (enc, store) = encoder();
        let bank = build_prompts(&names()[..1], &same, 4, &enc.vocab, 4, 16).unwrap();
        let mut g = Graph::new();
        let v = enc.encode_all(&mut g, &store, &bank).unwrap()[0].values(&g);
        for (a, b) in v.g.row(0).iter().zip(v.class_embedding.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn class_permutation_permutes_sets() {
        let (enc, store) = encoder();
        let fwd = build_prompts(&names(), &attrs(), 4, &enc.vocab, 4, 16).unwrap();
        let rev_names: Vec<String> = names().into_iter().rev().collect();
        let rev = build_prompts(&rev_names, &attrs(), 4, &enc.vocab, 4, 16).unwrap();
        let mut g = Graph::new();
        let a = enc.encode_all(&mut g, &store, &fwd).unwrap();
        let b = enc.encode_all(&mut g, &store, &rev).unwrap();
        assert_eq!(a[0].values(&g).g, b[1].values(&g).g);
        assert_eq!(a[1].values(&g).g, b[0].values(&g).g);
    }

    #[test]
    fn attribute_file_round_trip_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attributes.json");
        attrs().save(&path).unwrap();
        assert_eq!(AttributeFile::load(&path).unwrap(), attrs());
        fs::write(&path, r#"{"classes": [{"name": "a", "attributes": ["x"]}]}"#).unwrap();
        assert_eq!(AttributeFile::load(&path).unwrap().format_version, 1);
        fs::write(&path, r#"{"format_version": 2, "classes": []}"#).unwrap();
        assert!(AttributeFile::load(&path).is_err());
    }
}
