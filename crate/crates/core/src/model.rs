//! The full model: global and attribute heads, combined score, loss,
//! training loop, and evaluation.
//!
//! `P_g = softmax(cos(f, ḡ_i) / τ)` and `P_a = softmax(ψ(F, G_i) / τ)` are
//! combined as `P = P_g + β·P_a` without renormalization; the loss is the
//! mean of `−log P(y)`.

use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::avae::{AvaeConfig, EnhanceRequest, EnhancerDims, EnhancerRegistry, PromptEnhancer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{argmax, finite_diff_check_all, GradCheckReport, Graph, ParamStore, Precision, Rng, Tensor, Var};
use crate::ot::{
    marginal_violation, psi_unrolled, similarity, CostMatrix, Domain, Marginals, SinkhornOptions, SolverRegistry,
    TransportPlan, TransportSolver,
};
use crate::text::{AttributeFile, EncodedPromptSet, PromptBank, PromptSetVars, TextConfig, TextEncoder, CONTEXT_PARAM};
use crate::vision::{VisionEncoder, VitConfig, PROMPTS_PARAM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    /// Differentiate through the Sinkhorn iterations instead of treating the plan as a constant.
    pub unroll_sinkhorn: bool,
    pub solver: String,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            tau: 0.07,
            beta: 1.0,
            gamma: 0.1,
            sinkhorn_max_iter: 100,
            sinkhorn_tol: 1e-6,
            unroll_sinkhorn: false,
            solver: "sinkhorn".into(),
        }
    }
}

impl HeadConfig {
    pub fn sinkhorn_options(&self) -> SinkhornOptions {
        SinkhornOptions {
            gamma: self.gamma,
            max_iter: self.sinkhorn_max_iter,
            tol: self.sinkhorn_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text: TextConfig,
    pub vision: VitConfig,
    pub avae: AvaeConfig,
    /// Textual attribute prompts per class, `N`.
    pub n_attributes: usize,
    pub head: HeadConfig,
    /// `"avae"`, `"identity"` or `"none"`.
    pub enhancer: String,
    /// Standard deviation of every randomly initialized weight and prompt.
    pub init_std: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            text: TextConfig::default(),
            vision: VitConfig::default(),
            avae: AvaeConfig::default(),
            n_attributes: 4,
            head: HeadConfig::default(),
            enhancer: "avae".into(),
            init_std: 0.2,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    /// Small model used for gradient verification: 3 classes, two layers,
    /// four patches, two prompts of each kind, `λ = 3`.
    pub fn tiny_reference() -> Self {
        ModelConfig {
            text: TextConfig {
                vocab_size: 64,
                width: 8,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
                max_len: 8,
                n_ctx: 2,
                embed_dim: 8,
            },
            vision: VitConfig {
                layers: 2,
                width: 8,
                heads: 2,
                mlp_ratio: 2,
                n_prompts: 2,
                tokens: 4,
                avae_layer: 1,
                embed_dim: 8,
                pos_embedding: true,
                separate_prompt_projection: false,
            },
            avae: AvaeConfig { lambda: 3, d_k: 8 },
            n_attributes: 2,
            head: HeadConfig {
                tau: 0.5,
                sinkhorn_tol: 1e-9,
                sinkhorn_max_iter: 200,
                ..HeadConfig::default()
            },
            enhancer: "avae".into(),
            init_std: 0.3,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.head;
        let mut problems = Vec::new();
        if !(h.tau > 0.0 && h.tau.is_finite()) {
            problems.push(format!("tau must be positive, got {}", h.tau));
        }
        if !(h.beta >= 0.0 && h.beta.is_finite()) {
            problems.push(format!("beta must be non-negative, got {}", h.beta));
        }
        if let Err(e) = h.sinkhorn_options().validate() {
            problems.push(e.to_string());
        }
        if self.n_attributes == 0 {
            problems.push("n_textual_prompts must be at least 1".into());
        }
        if self.avae.lambda == 0 {
            problems.push("lambda must be at least 1".into());
        }
        if self.avae.d_k == 0 {
            problems.push("d_k must be at least 1".into());
        }
        if self.text.embed_dim != self.vision.embed_dim {
            problems.push(format!(
                "text embed_dim {} differs from vision embed_dim {}",
                self.text.embed_dim, self.vision.embed_dim
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            problems.push(format!("init_std must be positive, got {}", self.init_std));
        }
        if let Err(e) = self.vision.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = TextEncoder::new(self.text) {
            problems.push(e.to_string());
        }
        if let Err(e) = SolverRegistry::default().get(&h.solver) {
            problems.push(e.to_string());
        }
        if let Err(e) = EnhancerRegistry::default().build(&self.enhancer, &self.avae) {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Scores of one image over the classes of a prompt bank.
#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub p_global: Vec<f64>,
    pub p_attr: Vec<f64>,
    pub p: Vec<f64>,
    pub psi: Vec<f64>,
    pub predicted: usize,
    pub candidates: Vec<usize>,
    #[serde(skip)]
    pub plans: Vec<TransportPlan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceMode {
    #[default]
    Off,
    Record,
    Replay,
}

/// Per-image record of the non-differentiable choices of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ImageTrace {
    pub candidates: Option<Vec<usize>>,
    pub plans: Vec<Tensor>,
}

/// Records candidate sets and transport plans, or replays them so that a
/// perturbed forward pass makes the same discrete and detached choices.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub mode: TraceMode,
    pub images: Vec<ImageTrace>,
    cursor: usize,
}

impl ForwardTrace {
    pub fn recording() -> Self {
        ForwardTrace {
            mode: TraceMode::Record,
            ..ForwardTrace::default()
        }
    }

    /// Switches a recorded trace to replay from the first image.
    pub fn into_replay(mut self) -> Self {
        self.mode = TraceMode::Replay;
        self.cursor = 0;
        self
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    fn next_replay(&mut self) -> Result<ImageTrace> {
        let t = self
            .images
            .get(self.cursor)
            .cloned()
            .ok_or_else(|| Error::State("forward trace exhausted".into()))?;
        self.cursor += 1;
        Ok(t)
    }
}

struct ImageHeads {
    p_global: Var,
    p_attr: Var,
    p: Var,
    psi: Vec<f64>,
    plans: Vec<TransportPlan>,
    candidates: Vec<usize>,
}

pub struct MapModel {
    pub cfg: ModelConfig,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub params: ParamStore,
    enhancer: Option<Arc<dyn PromptEnhancer>>,
    solver: Arc<dyn TransportSolver>,
}

impl MapModel {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::from_params(cfg, ParamStore::new())?;
        let rng = Rng::new(seed);
        let std = model.cfg.init_std;
        model.text.init_params(&mut model.params, &mut rng.fork(1), std)?;
        model.vision.init_params(&mut model.params, &mut rng.fork(2), std)?;
        if let Some(e) = &model.enhancer {
            let dims = EnhancerDims {
                d_v: model.cfg.vision.width,
                d: model.cfg.vision.embed_dim,
            };
            e.init_params(&mut model.params, &mut rng.fork(3), dims, std)?;
        }
        Ok(model)
    }

    /// Wraps existing parameters, e.g. from a checkpoint.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let enhancer = EnhancerRegistry::default().build(&cfg.enhancer, &cfg.avae)?;
        let solver = SolverRegistry::default().get(&cfg.head.solver)?;
        Ok(MapModel {
            text: TextEncoder::new(cfg.text)?,
            vision: VisionEncoder::new(cfg.vision)?,
            enhancer,
            solver,
            params,
            cfg,
        })
    }

    pub fn enhancer_name(&self) -> &'static str {
        self.enhancer.as_ref().map_or("none", |e| e.name())
    }

    pub fn build_prompts(&self, class_names: &[String], attributes: &AttributeFile) -> Result<PromptBank> {
        crate::text::build_prompts(
            class_names,
            attributes,
            self.cfg.n_attributes,
            &self.text.vocab,
            self.cfg.text.n_ctx,
            self.cfg.text.max_len,
        )
    }

    pub fn graph(&self) -> Graph {
        Graph::with_precision(self.cfg.precision)
    }

    /// Restricts training to the context vectors, visual prompts and enhancer.
    pub fn freeze_backbone(&mut self) -> Result<()> {
        let names: Vec<String> = self.params.names().map(str::to_string).collect();
        for name in names {
            let keep = name == CONTEXT_PARAM || name == PROMPTS_PARAM || name.starts_with("avae.");
            self.params.set_trainable(&name, keep)?;
        }
        Ok(())
    }

    /// Encoded prompt sets as plain values.
    pub fn encode_text(&self, bank: &PromptBank) -> Result<Vec<EncodedPromptSet>> {
        let mut g = self.graph();
        let sets = self.text.encode_all(&mut g, &self.params, bank)?;
        Ok(sets.iter().map(|s| s.values(&g)).collect())
    }

    fn heads(
        &self,
        g: &mut Graph,
        sets: &[PromptSetVars],
        class_matrix: Var,
        patches: &Tensor,
        trace: &mut ForwardTrace,
    ) -> Result<ImageHeads> {
        let replay = match trace.mode {
            TraceMode::Replay => Some(trace.next_replay()?),
            _ => None,
        };
        let forced = replay.as_ref().and_then(|t| t.candidates.clone());
        let mut candidates = None;
        let enc = match &self.enhancer {
            Some(enhancer) => {
                let store = &self.params;
                let vision = &self.vision;
                let mut hook = |g: &mut Graph, u: Var, s: Var| {
                    let req = EnhanceRequest {
                        store,
                        vision,
                        sets,
                        prompts: u,
                        cls_mid: s,
                        forced_candidates: forced.as_deref(),
                    };
                    let out = enhancer.enhance(g, &req)?;
                    candidates = Some(out.candidates);
                    Ok(out.prompts)
                };
                self.vision.encode_image(g, store, patches, Some(&mut hook))?
            }
            None => self.vision.encode_image(g, &self.params, patches, None)?,
        };

        let h = &self.cfg.head;
        let inv_tau = 1.0 / h.tau;
        let class_t = g.transpose(class_matrix);
        let cos = g.matmul(enc.f, class_t)?;
        let logits = g.scale(cos, inv_tau);
        let p_global = g.softmax_rows(logits);

        let m = self.cfg.vision.n_prompts;
        let n = self.cfg.n_attributes;
        let marginals = Marginals::uniform(m, n);
        let mut psis = Vec::with_capacity(sets.len());
        let mut plans = Vec::with_capacity(sets.len());
        for (c, set) in sets.iter().enumerate() {
            let (psi, plan) = if h.unroll_sinkhorn {
                let (psi, t) = psi_unrolled(g, enc.prompts, set.rows, &marginals, h.gamma, h.sinkhorn_max_iter)?;
                let plan = TransportPlan {
                    marginal_violation: marginal_violation(&t, &marginals),
                    plan: t,
                    gamma: h.gamma,
                    iterations_used: h.sinkhorn_max_iter,
                    domain: Domain::Log,
                };
                (psi, plan)
            } else {
                let s = similarity(g, enc.prompts, set.rows)?;
                let plan = match &replay {
                    Some(r) => {
                        let t = r
                            .plans
                            .get(c)
                            .cloned()
                            .ok_or_else(|| Error::State(format!("no recorded plan for class {c}")))?;
                        TransportPlan {
                            marginal_violation: marginal_violation(&t, &marginals),
                            plan: t,
                            gamma: h.gamma,
                            iterations_used: 0,
                            domain: Domain::Log,
                        }
                    }
                    None => {
                        let cost = CostMatrix::from_similarity(g.value(s))?;
                        self.solver.solve(&cost, &marginals, &h.sinkhorn_options())?
                    }
                };
                let t = g.constant(plan.plan.clone());
                let weighted = g.mul(s, t)?;
                (g.sum_all(weighted), plan)
            };
            psis.push(psi);
            plans.push(plan);
        }
        let psi_values = psis.iter().map(|&v| g.scalar(v)).collect();
        let psi_row = if psis.len() == 1 {
            psis[0]
        } else {
            g.concat_cols(&psis)?
        };
        let logits = g.scale(psi_row, inv_tau);
        let p_attr = g.softmax_rows(logits);
        let weighted = g.scale(p_attr, h.beta);
        let p = g.add(p_global, weighted)?;

        let candidates = candidates.unwrap_or_default();
        if trace.mode == TraceMode::Record {
            trace.images.push(ImageTrace {
                candidates: self.enhancer.as_ref().map(|_| candidates.clone()),
                plans: plans.iter().map(|p| p.plan.clone()).collect(),
            });
        }
        Ok(ImageHeads {
            p_global,
            p_attr,
            p,
            psi: psi_values,
            plans,
            candidates,
        })
    }

    fn class_matrix(g: &mut Graph, sets: &[PromptSetVars]) -> Result<Var> {
        let rows: Vec<Var> = sets.iter().map(|s| s.class_embedding).collect();
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            g.concat_rows(&rows)
        }
    }

    /// Mean loss of a batch of `(patches, label)` pairs, with labels indexing
    /// the classes of `bank`. Returns the loss node and the per-sample losses
    /// and predictions.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        bank: &PromptBank,
        batch: &[(Tensor, usize)],
        trace: &mut ForwardTrace,
    ) -> Result<(Var, Vec<f64>, Vec<usize>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let c = bank.num_classes();
        if c < 2 {
            return Err(Error::invalid("at least two classes are needed"));
        }
        let sets = self.text.encode_all(g, &self.params, bank)?;
        let class_matrix = Self::class_matrix(g, &sets)?;
        let mut terms = Vec::with_capacity(batch.len());
        let mut losses = Vec::with_capacity(batch.len());
        let mut preds = Vec::with_capacity(batch.len());
        for (patches, label) in batch {
            if *label >= c {
                return Err(Error::invalid(format!("label {label} out of range for {c} classes")));
            }
            let heads = self.heads(g, &sets, class_matrix, patches, trace)?;
            let py = g.slice_cols(heads.p, *label, 1)?;
            let log_py = g.ln(py);
            losses.push(-g.scalar(log_py));
            preds.push(argmax(g.value(heads.p).data()));
            terms.push(log_py);
        }
        let all = if terms.len() == 1 {
            terms[0]
        } else {
            g.concat_cols(&terms)?
        };
        let total = g.sum_all(all);
        let loss = g.scale(total, -1.0 / batch.len() as f64);
        Ok((loss, losses, preds))
    }

    /// Scores one image against pre-encoded prompt sets.
    pub fn predict(&self, text: &[EncodedPromptSet], patches: &Tensor) -> Result<Prediction> {
        if text.len() < 2 {
            return Err(Error::invalid("at least two classes are needed"));
        }
        let mut g = self.graph();
        let sets: Vec<PromptSetVars> = text
            .iter()
            .map(|s| PromptSetVars {
                class_id: s.class_id,
                rows: g.constant(s.g.clone()),
                class_embedding: g.constant(s.class_embedding.clone()),
            })
            .collect();
        let class_matrix = Self::class_matrix(&mut g, &sets)?;
        let heads = self.heads(&mut g, &sets, class_matrix, patches, &mut ForwardTrace::default())?;
        let p = g.value(heads.p).data().to_vec();
        Ok(Prediction {
            p_global: g.value(heads.p_global).data().to_vec(),
            p_attr: g.value(heads.p_attr).data().to_vec(),
            predicted: argmax(&p),
            p,
            psi: heads.psi,
            candidates: heads.candidates,
            plans: heads.plans,
        })
    }
}

/// Mean of `−log(P_g + β·P_a)` at the true class, from plain probabilities.
pub fn classification_loss(predictions: &[Prediction], labels: &[usize], beta: f64) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid("need one label per prediction and at least one of each"));
    }
    let mut total = 0.0;
    for (p, &y) in predictions.iter().zip(labels) {
        if y >= p.p_global.len() {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        total -= combined_score(&p.p_global, &p.p_attr, beta)?[y].ln();
    }
    Ok(total / predictions.len() as f64)
}

/// `P_g + β·P_a`, not renormalized.
pub fn combined_score(p_global: &[f64], p_attr: &[f64], beta: f64) -> Result<Vec<f64>> {
    if p_global.len() != p_attr.len() {
        return Err(Error::invalid("head lengths differ"));
    }
    Ok(p_global.iter().zip(p_attr).map(|(g, a)| g + beta * a).collect())
}

pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    for (name, v) in [("base", base), ("novel", novel)] {
        if !(v > 0.0 && v <= 100.0) {
            return Err(Error::invalid(format!("{name} accuracy must lie in (0, 100], got {v}")));
        }
    }
    Ok(2.0 * base * novel / (base + novel))
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.002,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            freeze_backbone: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

/// Position of each dataset label within `classes`.
fn local_labels(data: &Dataset, indices: &[usize], classes: &[usize]) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            if i >= data.len() {
                return Err(Error::invalid(format!("sample index {i} out of range")));
            }
            let l = data.label(i);
            classes
                .iter()
                .position(|&c| c == l)
                .ok_or_else(|| Error::invalid(format!("sample {i} has label {l} outside the scored classes")))
        })
        .collect()
}

/// Minibatch SGD over `indices`. `bank` must hold the prompts of `classes`
/// in the same order. Per-sample losses are averaged in sample order to form
/// the epoch loss; train accuracy is measured on the fly.
pub fn train(
    model: &mut MapModel,
    bank: &PromptBank,
    data: &Dataset,
    indices: &[usize],
    classes: &[usize],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainReport> {
    if indices.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be non-negative, got {}",
            cfg.lr
        )));
    }
    let labels = local_labels(data, indices, classes)?;
    if cfg.freeze_backbone {
        model.freeze_backbone()?;
    }
    let mut rng = Rng::new(cfg.seed).fork(0x5348_5546);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..indices.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut losses = vec![0.0; indices.len()];
        let mut correct = vec![false; indices.len()];
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(Tensor, usize)> = chunk.iter().map(|&k| (data.image(indices[k]), labels[k])).collect();
            let mut g = model.graph();
            let (loss, per_sample, preds) = model.batch_loss(&mut g, bank, &batch, &mut ForwardTrace::default())?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                let ids: Vec<usize> = chunk.iter().map(|&k| indices[k]).collect();
                return Err(Error::NumericFailure(format!(
                    "loss is {value} at epoch {epoch}, batch {b} (samples {ids:?})"
                )));
            }
            g.backward(loss, &mut model.params)?;
            if cfg.lr > 0.0 {
                model.params.sgd_step(cfg.lr)?;
            } else {
                model.params.zero_grads();
            }
            for (j, &k) in chunk.iter().enumerate() {
                losses[k] = per_sample[j];
                correct[k] = preds[j] == labels[k];
            }
        }
        let record = EpochRecord {
            epoch,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            train_acc: correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64,
        };
        on_epoch(&record)?;
        report.epochs.push(record);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    /// Accuracy of `argmax P`.
    pub accuracy: f64,
    /// Accuracy of `argmax P_g` alone.
    pub global_accuracy: f64,
    /// Accuracy of `argmax P_a` alone.
    pub attribute_accuracy: f64,
    /// `None` for classes without samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Scores `indices` against the classes of `bank` (`classes[k]` is the
/// dataset label of bank class `k`). Work is split into `threads`
/// contiguous shards; the result does not depend on the split.
pub fn evaluate(
    model: &MapModel,
    bank: &PromptBank,
    data: &Dataset,
    indices: &[usize],
    classes: &[usize],
    threads: usize,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::invalid("empty evaluation split"));
    }
    let labels = local_labels(data, indices, classes)?;
    let text = model.encode_text(bank)?;
    let threads = threads.clamp(1, indices.len());
    let shard = indices.len().div_ceil(threads);
    let predictions: Vec<Prediction> = if threads == 1 {
        indices
            .iter()
            .map(|&i| model.predict(&text, &data.image(i)))
            .collect::<Result<_>>()?
    } else {
        let text = &text;
        let parts: Vec<Result<Vec<Prediction>>> = thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(shard)
                .map(|chunk| s.spawn(move || chunk.iter().map(|&i| model.predict(text, &data.image(i))).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::State("evaluation worker panicked".into())))
                })
                .collect()
        });
        let mut all = Vec::with_capacity(indices.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    Ok(summarize(&predictions, &labels, bank.num_classes()))
}

pub fn summarize(predictions: &[Prediction], labels: &[usize], num_classes: usize) -> EvalReport {
    let n = predictions.len();
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let (mut hits, mut global_hits, mut attr_hits) = (0usize, 0usize, 0usize);
    for (p, &y) in predictions.iter().zip(labels) {
        confusion[y][p.predicted] += 1;
        hits += (p.predicted == y) as usize;
        global_hits += (argmax(&p.p_global) == y) as usize;
        attr_hits += (argmax(&p.p_attr) == y) as usize;
    }
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[k] as f64 / total as f64)
        })
        .collect();
    EvalReport {
        count: n,
        accuracy: hits as f64 / n as f64,
        global_accuracy: global_hits as f64 / n as f64,
        attribute_accuracy: attr_hits as f64 / n as f64,
        per_class_accuracy,
        confusion,
    }
}

/// Finite-difference check of every parameter of a model built from `cfg`,
/// on one synthetic image per class. The detached plans and the candidate
/// sets are recorded once and replayed for every perturbed evaluation.
pub fn gradient_check(cfg: &ModelConfig, seed: u64, h: f64, tol_rel: f64) -> Result<Vec<GradCheckReport>> {
    if cfg.precision != Precision::F64 {
        return Err(Error::Unsupported("gradient checks require 64-bit precision".into()));
    }
    let model = MapModel::new(cfg.clone(), seed)?;
    let classes = cfg.avae.lambda.max(2);
    let spec = crate::data::SynthSpec {
        classes,
        base_classes: classes,
        attributes_per_class: cfg.n_attributes.min(cfg.vision.tokens),
        motif_dim: cfg.vision.width,
        tokens_per_image: cfg.vision.tokens,
        noise_std: 0.1,
        seed,
        samples_per_class: 2,
        train_per_class: 1,
    };
    let (data, _) = crate::data::synthesize(&spec)?;
    let attributes = AttributeFile::new(
        (0..classes)
            .map(|k| crate::text::ClassAttributes {
                name: crate::data::synth_class_name(k),
                attributes: (0..cfg.n_attributes)
                    .map(|a| crate::data::synth_attribute(k, a))
                    .collect(),
            })
            .collect(),
    );
    let bank = model.build_prompts(&data.manifest.class_names, &attributes)?;
    let batch: Vec<(Tensor, usize)> = (0..classes)
        .map(|k| (data.image(k * spec.samples_per_class), k))
        .collect();

    let mut trace = ForwardTrace::recording();
    let mut g = model.graph();
    model.batch_loss(&mut g, &bank, &batch, &mut trace)?;
    let trace = std::cell::RefCell::new(trace.into_replay());

    let loss_fn = |g: &mut Graph, store: &ParamStore| -> Result<Var> {
        let mut t = trace.borrow_mut();
        t.rewind();
        let probe = MapModel {
            cfg: model.cfg.clone(),
            text: model.text.clone(),
            vision: model.vision.clone(),
            params: store.clone(),
            enhancer: model.enhancer.clone(),
            solver: model.solver.clone(),
        };
        let (loss, _, _) = probe.batch_loss(g, &bank, &batch, &mut t)?;
        Ok(loss)
    };
    finite_diff_check_all(&model.params, loss_fn, h, tol_rel)
}
