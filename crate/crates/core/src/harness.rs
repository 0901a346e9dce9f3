//! End-to-end runs: k-shot training on base classes, evaluation, and the
//! artifacts written to the output directory.
//!
//! An output directory holds `config.json` (the resolved run config),
//! `metrics.jsonl` (one line per epoch, then one final line) and
//! `checkpoint/` (parameters). Accuracies are fractions in `[0, 1]`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{kshot_sample, load_dataset, ClassRole, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{evaluate, harmonic_mean, train, EpochRecord, EvalReport, MapModel};
use crate::numerics::ParamStore;
use crate::text::{AttributeFile, PromptBank};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub test_acc: f64,
    /// Test accuracy of the global head alone.
    pub global_acc: f64,
    /// Test accuracy of the attribute head alone.
    pub attribute_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub novel_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hm: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub epochs: Vec<EpochRecord>,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
    /// Detailed reports keyed by split name (`"test"`, `"base"`, `"novel"`).
    pub reports: Vec<(String, EvalReport)>,
}

struct Inputs {
    data: Dataset,
    attributes: AttributeFile,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let data = load_dataset(cfg.require_path("data")?)?;
    let attributes = AttributeFile::load(cfg.require_path("attributes")?)?;
    let m = &data.manifest;
    if m.tokens_per_image != cfg.tokens_per_image || m.patch_dim != cfg.vit_width {
        return Err(Error::Config(vec![format!(
            "dataset has {} tokens of width {}, config expects {} tokens of width {}",
            m.tokens_per_image, m.patch_dim, cfg.tokens_per_image, cfg.vit_width
        )]));
    }
    Ok(Inputs { data, attributes })
}

fn bank_for(model: &MapModel, inputs: &Inputs, classes: &[usize]) -> Result<PromptBank> {
    let names: Vec<String> = classes
        .iter()
        .map(|&c| inputs.data.manifest.class_names[c].clone())
        .collect();
    model.build_prompts(&names, &inputs.attributes)
}

fn write_json<T: Serialize>(out: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains on `shots` samples per base class and writes the run artifacts.
/// Returns the model and the base-class prompt bank for further evaluation.
fn train_base(
    cfg: &RunConfig,
    inputs: &Inputs,
    metrics: &mut BufWriter<File>,
    metrics_path: &Path,
) -> Result<(MapModel, Vec<EpochRecord>)> {
    let manifest = &inputs.data.manifest;
    let base = manifest.classes_with_role(ClassRole::Base);
    if base.len() < 2 {
        return Err(Error::InvalidManifest(format!(
            "training needs at least two base classes, found {}",
            base.len()
        )));
    }
    let mut model = MapModel::new(cfg.model_config(), cfg.seed)?;
    let bank = bank_for(&model, inputs, &base)?;
    let indices = kshot_sample(manifest, cfg.shots, cfg.seed)?;
    let report = train(
        &mut model,
        &bank,
        &inputs.data,
        &indices,
        &base,
        &cfg.train_config(),
        &mut |rec| write_json(metrics, metrics_path, rec),
    )?;
    Ok((model, report.epochs))
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.require_path("out")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_json_pretty()).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

fn open_metrics(out: &Path) -> Result<(BufWriter<File>, std::path::PathBuf)> {
    let path = out.join(METRICS_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((BufWriter::new(file), path))
}

fn eval_split(model: &MapModel, inputs: &Inputs, classes: &[usize], threads: usize) -> Result<EvalReport> {
    let bank = bank_for(model, inputs, classes)?;
    let idx = inputs.data.manifest.indices(Split::Test, classes);
    evaluate(model, &bank, &inputs.data, &idx, classes, threads)
}

fn finish(
    model: &MapModel,
    out: &Path,
    mut metrics: BufWriter<File>,
    metrics_path: &Path,
    final_metrics: &FinalMetrics,
) -> Result<()> {
    write_json(&mut metrics, metrics_path, final_metrics)?;
    metrics.flush().map_err(|e| Error::io(metrics_path, e))?;
    model.params.save(&out.join(CHECKPOINT_DIR))
}

/// k-shot training on base classes, then evaluation on the base-class test split.
pub fn run_train(cfg: &RunConfig) -> Result<RunOutcome> {
    let inputs = load_inputs(cfg)?;
    let out = prepare_out(cfg)?;
    let (mut metrics, metrics_path) = open_metrics(out)?;
    let (model, epochs) = train_base(cfg, &inputs, &mut metrics, &metrics_path)?;
    let base = inputs.data.manifest.classes_with_role(ClassRole::Base);
    let report = eval_split(&model, &inputs, &base, cfg.eval_threads)?;
    let final_metrics = FinalMetrics {
        test_acc: report.accuracy,
        global_acc: report.global_accuracy,
        attribute_acc: report.attribute_accuracy,
        base_acc: None,
        novel_acc: None,
        hm: None,
    };
    finish(&model, out, metrics, &metrics_path, &final_metrics)?;
    Ok(RunOutcome {
        epochs,
        final_metrics,
        reports: vec![("test".into(), report)],
    })
}

/// Harmonic mean that is zero when either accuracy is zero.
pub fn hm_or_zero(base: f64, novel: f64) -> Result<f64> {
    if base == 0.0 || novel == 0.0 {
        Ok(0.0)
    } else {
        harmonic_mean(base, novel)
    }
}

/// Trains on base classes only. Base test samples are then scored among the
/// base classes, novel test samples among the novel classes (seen through
/// their attribute prompts only), and all test samples among all classes.
pub fn run_base_to_novel(cfg: &RunConfig) -> Result<RunOutcome> {
    let inputs = load_inputs(cfg)?;
    let manifest = &inputs.data.manifest;
    let novel = manifest.classes_with_role(ClassRole::Novel);
    if novel.is_empty() {
        return Err(Error::InvalidManifest("the dataset declares no novel classes".into()));
    }
    let base = manifest.classes_with_role(ClassRole::Base);
    let all: Vec<usize> = (0..manifest.num_classes()).collect();
    // Fail on missing attributes before spending time on training.
    bank_for(
        &MapModel::from_params(cfg.model_config(), ParamStore::new())?,
        &inputs,
        &all,
    )?;

    let out = prepare_out(cfg)?;
    let (mut metrics, metrics_path) = open_metrics(out)?;
    let (model, epochs) = train_base(cfg, &inputs, &mut metrics, &metrics_path)?;
    let threads = cfg.eval_threads;
    let base_report = eval_split(&model, &inputs, &base, threads)?;
    let novel_report = if novel.len() >= 2 {
        eval_split(&model, &inputs, &novel, threads)?
    } else {
        // A single novel class is trivially predicted; score it among all classes instead.
        let bank = bank_for(&model, &inputs, &all)?;
        let idx = manifest.indices(Split::Test, &novel);
        evaluate(&model, &bank, &inputs.data, &idx, &all, threads)?
    };
    let all_report = eval_split(&model, &inputs, &all, threads)?;
    let final_metrics = FinalMetrics {
        test_acc: all_report.accuracy,
        global_acc: all_report.global_accuracy,
        attribute_acc: all_report.attribute_accuracy,
        base_acc: Some(base_report.accuracy),
        novel_acc: Some(novel_report.accuracy),
        hm: Some(hm_or_zero(base_report.accuracy, novel_report.accuracy)?),
    };
    finish(&model, out, metrics, &metrics_path, &final_metrics)?;
    Ok(RunOutcome {
        epochs,
        final_metrics,
        reports: vec![
            ("test".into(), all_report),
            ("base".into(), base_report),
            ("novel".into(), novel_report),
        ],
    })
}

/// The resolved config and trained model of a finished run.
pub fn load_run(dir: &Path) -> Result<(RunConfig, MapModel)> {
    let cfg = RunConfig::resolve(&[RunConfig::load(&dir.join(CONFIG_FILE))?])?;
    let params = ParamStore::load(&dir.join(CHECKPOINT_DIR))?;
    let model = MapModel::from_params(cfg.model_config(), params)?;
    Ok((cfg, model))
}

/// Evaluates a stored run on the test samples of `role` (`None` for all classes).
pub fn evaluate_run(dir: &Path, overrides: &RunConfig, role: Option<ClassRole>) -> Result<EvalReport> {
    let (_, model) = load_run(dir)?;
    let inputs = load_inputs(overrides)?;
    let manifest = &inputs.data.manifest;
    let classes = match role {
        Some(r) => manifest.classes_with_role(r),
        None => (0..manifest.num_classes()).collect(),
    };
    if classes.len() < 2 {
        return Err(Error::InvalidManifest(format!(
            "need at least two classes to evaluate, found {}",
            classes.len()
        )));
    }
    eval_split(&model, &inputs, &classes, overrides.eval_threads)
}
