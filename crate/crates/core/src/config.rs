//! Flat JSON run configuration with layered overrides.
//!
//! Resolution order is built-in defaults, then a config file, then
//! individual overrides. Unknown keys and invalid values are collected and
//! reported together.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::avae::AvaeConfig;
use crate::error::{Error, Result};
use crate::model::{HeadConfig, ModelConfig, TrainConfig};
use crate::numerics::Precision;
use crate::text::TextConfig;
use crate::vision::VitConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Textual attribute prompts per class.
    pub n_textual_prompts: usize,
    /// Learnable visual attribute prompts.
    pub n_visual_prompts: usize,
    /// Candidate classes consulted by the enhancer.
    pub lambda: usize,
    /// Weight of the attribute head in the combined score.
    pub beta: f64,
    pub tau: f64,
    pub gamma: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    pub unroll_sinkhorn: bool,
    pub solver: String,
    pub enhancer: String,
    /// Cross-attention key width; `null` uses `vit_width`.
    pub d_k: Option<usize>,

    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shots: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub precision: Precision,
    pub init_std: f64,
    pub eval_threads: usize,

    pub text_vocab_size: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_mlp_ratio: usize,
    pub text_max_len: usize,
    pub n_ctx: usize,

    pub vit_layers: usize,
    pub vit_width: usize,
    pub vit_heads: usize,
    pub vit_mlp_ratio: usize,
    pub tokens_per_image: usize,
    pub avae_layer: usize,
    pub embed_dim: usize,
    pub pos_embedding: bool,
    pub separate_prompt_projection: bool,

    pub data: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            n_textual_prompts: m.n_attributes,
            n_visual_prompts: m.vision.n_prompts,
            lambda: m.avae.lambda,
            beta: m.head.beta,
            tau: m.head.tau,
            gamma: m.head.gamma,
            sinkhorn_max_iter: m.head.sinkhorn_max_iter,
            sinkhorn_tol: m.head.sinkhorn_tol,
            unroll_sinkhorn: m.head.unroll_sinkhorn,
            solver: m.head.solver,
            enhancer: m.enhancer,
            d_k: None,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            shots: 16,
            seed: t.seed,
            freeze_backbone: t.freeze_backbone,
            precision: m.precision,
            init_std: m.init_std,
            eval_threads: 1,
            text_vocab_size: m.text.vocab_size,
            text_width: m.text.width,
            text_layers: m.text.layers,
            text_heads: m.text.heads,
            text_mlp_ratio: m.text.mlp_ratio,
            text_max_len: m.text.max_len,
            n_ctx: m.text.n_ctx,
            vit_layers: m.vision.layers,
            vit_width: m.vision.width,
            vit_heads: m.vision.heads,
            vit_mlp_ratio: m.vision.mlp_ratio,
            tokens_per_image: m.vision.tokens,
            avae_layer: m.vision.avae_layer,
            embed_dim: m.vision.embed_dim,
            pos_embedding: m.vision.pos_embedding,
            separate_prompt_projection: m.vision.separate_prompt_projection,
            data: None,
            attributes: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `layers` in order; every layer must be a JSON object.
    pub fn resolve(layers: &[Value]) -> Result<Self> {
        let mut merged = match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        let known: Vec<String> = merged.keys().cloned().collect();
        let mut problems = Vec::new();
        for layer in layers {
            let Value::Object(obj) = layer else {
                problems.push("configuration must be a JSON object".to_string());
                continue;
            };
            for (key, value) in obj {
                if !known.contains(key) {
                    problems.push(format!("unknown key '{key}'"));
                    continue;
                }
                if let Err(e) = check_field(&merged, key, value) {
                    problems.push(format!("{key}: {e}"));
                    continue;
                }
                merged.insert(key.clone(), value.clone());
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Value> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Parses `key=value`; the value is read as JSON when possible, otherwise as a string.
    pub fn parse_override(spec: &str) -> Result<(String, Value)> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(vec![format!("override '{spec}' is not of the form key=value")]))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok((key.trim().to_string(), value))
    }

    pub fn overrides(pairs: impl IntoIterator<Item = (String, Value)>) -> Value {
        Value::Object(pairs.into_iter().collect::<Map<_, _>>())
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Config(p)) = self.model_config().validate() {
            problems.extend(p);
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be non-negative, got {}", self.lr));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("shots", self.shots),
            ("eval_threads", self.eval_threads),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            text: TextConfig {
                vocab_size: self.text_vocab_size,
                width: self.text_width,
                layers: self.text_layers,
                heads: self.text_heads,
                mlp_ratio: self.text_mlp_ratio,
                max_len: self.text_max_len,
                n_ctx: self.n_ctx,
                embed_dim: self.embed_dim,
            },
            vision: VitConfig {
                layers: self.vit_layers,
                width: self.vit_width,
                heads: self.vit_heads,
                mlp_ratio: self.vit_mlp_ratio,
                n_prompts: self.n_visual_prompts,
                tokens: self.tokens_per_image,
                avae_layer: self.avae_layer,
                embed_dim: self.embed_dim,
                pos_embedding: self.pos_embedding,
                separate_prompt_projection: self.separate_prompt_projection,
            },
            avae: AvaeConfig {
                lambda: self.lambda,
                d_k: self.d_k.unwrap_or(self.vit_width),
            },
            n_attributes: self.n_textual_prompts,
            head: HeadConfig {
                tau: self.tau,
                beta: self.beta,
                gamma: self.gamma,
                sinkhorn_max_iter: self.sinkhorn_max_iter,
                sinkhorn_tol: self.sinkhorn_tol,
                unroll_sinkhorn: self.unroll_sinkhorn,
                solver: self.solver.clone(),
            },
            enhancer: self.enhancer.clone(),
            init_std: self.init_std,
            precision: self.precision,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            freeze_backbone: self.freeze_backbone,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("RunConfig always serializes")
    }

    pub fn require_path(&self, field: &str) -> Result<&Path> {
        let p = match field {
            "data" => &self.data,
            "attributes" => &self.attributes,
            "out" => &self.out,
            _ => &None,
        };
        p.as_deref()
            .ok_or_else(|| Error::Config(vec![format!("'{field}' is required for this command")]))
    }
}

// Type-checks one value by substituting it into an otherwise valid document.
fn check_field(base: &Map<String, Value>, key: &str, value: &Value) -> std::result::Result<(), String> {
    let mut probe = base.clone();
    probe.insert(key.to_string(), value.clone());
    serde_json::from_value::<RunConfig>(Value::Object(probe))
        .map(|_| ())
        .map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn printed_defaults_contain_key_settings() {
        let text = RunConfig::default().to_json_pretty();
        for needle in [
            "\"n_textual_prompts\": 4",
            "\"n_visual_prompts\": 4",
            "\"lambda\": 10",
            "\"beta\": 1.0",
            "\"lr\": 0.002",
            "\"epochs\": 20",
            "\"batch_size\": 16",
            "\"shots\": 16",
        ] {
            assert!(text.contains(needle), "missing {needle}");
        }
    }

    #[test]
    fn printed_config_round_trips() {
        let cfg = RunConfig::resolve(&[json!({"lambda": 3, "beta": 0.5})]).unwrap();
        let again = RunConfig::resolve(&[serde_json::from_str(&cfg.to_json_pretty()).unwrap()]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn later_layers_win() {
        let cfg = RunConfig::resolve(&[json!({"seed": 3, "epochs": 5}), json!({"seed": 9})]).unwrap();
        assert_eq!((cfg.seed, cfg.epochs), (9, 5));
    }

    #[test]
    fn every_problem_reported() {
        let err = RunConfig::resolve(&[json!({"lamda": 3, "beta": "high", "tau": -1.0, "bogus": 1})]).unwrap_err();
        match err {
            Error::Config(p) => {
                assert_eq!(p.len(), 3, "{p:?}");
                assert!(p.iter().any(|m| m.contains("lamda")));
                assert!(p.iter().any(|m| m.contains("bogus")));
                assert!(p.iter().any(|m| m.starts_with("beta")));
            }
            other => panic!("{other:?}"),
        }
        // Semantic problems are also collected together.
        let err = RunConfig::resolve(&[json!({"tau": 0.0, "batch_size": 0, "avae_layer": 9})]).unwrap_err();
        match err {
            Error::Config(p) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn override_parsing() {
        assert_eq!(
            RunConfig::parse_override("lr=0.01").unwrap(),
            ("lr".into(), json!(0.01))
        );
        assert_eq!(
            RunConfig::parse_override("solver=exact").unwrap(),
            ("solver".into(), json!("exact"))
        );
        assert!(RunConfig::parse_override("lr").is_err());
    }

    #[test]
    fn d_k_follows_width() {
        let cfg = RunConfig::resolve(&[json!({"vit_width": 16, "vit_heads": 2})]).unwrap();
        assert_eq!(cfg.model_config().avae.d_k, 16);
    }
}
