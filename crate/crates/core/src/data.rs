//! Datasets of pre-embedded patch tokens, k-shot sampling, and a synthetic
//! attribute-grid generator.
//!
//! On disk a dataset is a directory holding `dataset.json` (the manifest)
//! and `patches.bin` (little-endian `f32`, `num_samples × tokens × patch_dim`,
//! row-major).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::text::{AttributeFile, ClassAttributes};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const PATCH_BLOB: &str = "patches.bin";
pub const ATTRIBUTES_FILE: &str = "attributes.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassRole {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_samples: usize,
    pub tokens_per_image: usize,
    pub patch_dim: usize,
    pub class_names: Vec<String>,
    pub labels: Vec<usize>,
    pub split_tags: Vec<Split>,
    pub base_novel: Vec<ClassRole>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidManifest(msg));
        if self.format_version != 1 {
            return bad(format!("format_version {} is not supported", self.format_version));
        }
        if self.tokens_per_image == 0 || self.patch_dim == 0 {
            return bad("tokens_per_image and patch_dim must be positive".into());
        }
        let c = self.num_classes();
        if c == 0 {
            return bad("no classes".into());
        }
        if self.labels.len() != self.num_samples || self.split_tags.len() != self.num_samples {
            return bad(format!(
                "{} labels and {} split tags for {} samples",
                self.labels.len(),
                self.split_tags.len(),
                self.num_samples
            ));
        }
        if self.base_novel.len() != c {
            return bad(format!("{} base/novel tags for {c} classes", self.base_novel.len()));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return bad(format!("sample {i} has label {l} but there are {c} classes"));
        }
        for (k, name) in self.class_names.iter().enumerate() {
            let has_test = (0..self.num_samples).any(|i| self.labels[i] == k && self.split_tags[i] == Split::Test);
            if !has_test {
                return bad(format!("class '{name}' has no test samples"));
            }
        }
        Ok(())
    }

    pub fn classes_with_role(&self, role: ClassRole) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&k| self.base_novel[k] == role)
            .collect()
    }

    /// Sample indices in `split` whose label is in `classes`, in index order.
    pub fn indices(&self, split: Split, classes: &[usize]) -> Vec<usize> {
        (0..self.num_samples)
            .filter(|&i| self.split_tags[i] == split && classes.contains(&self.labels[i]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    patches: Vec<f32>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, patches: Vec<f32>) -> Result<Self> {
        manifest.validate()?;
        let expected = manifest.num_samples * manifest.tokens_per_image * manifest.patch_dim;
        if patches.len() != expected {
            return Err(Error::CorruptDataset(format!(
                "expected {expected} patch values, got {}",
                patches.len()
            )));
        }
        Ok(Dataset { manifest, patches })
    }

    pub fn len(&self) -> usize {
        self.manifest.num_samples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> usize {
        self.manifest.labels[i]
    }

    /// `tokens × patch_dim` patch embeddings of sample `i`.
    pub fn image(&self, i: usize) -> Tensor {
        let (t, d) = (self.manifest.tokens_per_image, self.manifest.patch_dim);
        let chunk = &self.patches[i * t * d..(i + 1) * t * d];
        Tensor::matrix(t, d, chunk.iter().map(|&x| x as f64).collect()).expect("chunk length matches shape")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join(DATASET_MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&mpath, e))?;
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(PATCH_BLOB);
        let bytes: Vec<u8> = self.patches.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
    manifest.validate()?;
    let bpath = dir.join(PATCH_BLOB);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let expected = 4 * manifest.num_samples * manifest.tokens_per_image * manifest.patch_dim;
    if bytes.len() != expected {
        return Err(Error::CorruptDataset(format!(
            "{}: expected {expected} bytes, found {}",
            bpath.display(),
            bytes.len()
        )));
    }
    let patches = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Dataset::new(manifest, patches)
}

/// `k` distinct train-split indices from every base class, class by class.
pub fn kshot_sample(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("shots must be positive"));
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for class in manifest.classes_with_role(ClassRole::Base) {
        let pool = manifest.indices(Split::Train, &[class]);
        if pool.len() < k {
            return Err(Error::InsufficientSamples {
                class: manifest.class_names[class].clone(),
                have: pool.len(),
                need: k,
            });
        }
        out.extend(rng.choose_distinct(&pool, k));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    /// The first `base_classes` classes are base, the rest novel.
    pub base_classes: usize,
    pub attributes_per_class: usize,
    /// Patch width; equals the vision encoder width.
    pub motif_dim: usize,
    pub tokens_per_image: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub samples_per_class: usize,
    /// Leading samples of each class tagged train; the rest are test.
    pub train_per_class: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 6,
            base_classes: 4,
            attributes_per_class: 4,
            motif_dim: 32,
            tokens_per_image: 16,
            noise_std: 0.1,
            seed: 0,
            samples_per_class: 40,
            train_per_class: 20,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("classes", self.classes),
            ("attributes_per_class", self.attributes_per_class),
            ("motif_dim", self.motif_dim),
            ("tokens_per_image", self.tokens_per_image),
            ("samples_per_class", self.samples_per_class),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if self.base_classes > self.classes {
            problems.push(format!(
                "base_classes {} exceeds classes {}",
                self.base_classes, self.classes
            ));
        }
        if self.attributes_per_class > self.tokens_per_image {
            problems.push("attributes_per_class exceeds tokens_per_image".into());
        }
        if self.train_per_class >= self.samples_per_class {
            problems.push("train_per_class must leave at least one test sample per class".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            problems.push("noise_std must be a finite non-negative number".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

pub fn synth_class_name(c: usize) -> String {
    format!("class{c}")
}

pub fn synth_attribute(c: usize, a: usize) -> String {
    format!("has feature c{c}m{a}")
}

/// Classes `2p` and `2p + 1` share a theme vector; each class owns
/// `attributes_per_class` motif vectors (centered when there are two or more).
/// Every image places each of its class's motifs once, at distinct random
/// positions; every other patch is the theme. All patches get Gaussian noise.
/// Theme and motif coordinates lie on a 1/1024 grid, which keeps the motif
/// centering exact, so noiseless mean-patch features of theme partners agree
/// bit for bit.
pub fn synthesize(spec: &SynthSpec) -> Result<(Dataset, AttributeFile)> {
    spec.validate()?;
    let (c, a, d, t) = (
        spec.classes,
        spec.attributes_per_class,
        spec.motif_dim,
        spec.tokens_per_image,
    );
    let mut rng = Rng::new(spec.seed);
    let themes: Vec<Vec<f64>> = (0..c.div_ceil(2))
        .map(|_| (0..d).map(|_| quantize(rng.normal(1.0))).collect())
        .collect();
    let motifs: Vec<Vec<Vec<f64>>> = (0..c)
        .map(|_| {
            let mut m: Vec<Vec<f64>> = (0..a).map(|_| (0..d).map(|_| rng.normal(1.0)).collect()).collect();
            if a >= 2 {
                for j in 0..d {
                    let mean = m.iter().map(|v| v[j]).sum::<f64>() / a as f64;
                    m.iter_mut().for_each(|v| v[j] = quantize(v[j] - mean));
                    // Grid values sum exactly, so this makes the column sum exactly zero.
                    let residual: f64 = m.iter().map(|v| v[j]).sum();
                    m[a - 1][j] -= residual;
                }
            } else {
                m.iter_mut().flatten().for_each(|x| *x = quantize(*x));
            }
            m
        })
        .collect();

    let positions: Vec<usize> = (0..t).collect();
    let n = c * spec.samples_per_class;
    let mut patches = Vec::with_capacity(n * t * d);
    let mut labels = Vec::with_capacity(n);
    let mut split_tags = Vec::with_capacity(n);
    for class in 0..c {
        for s in 0..spec.samples_per_class {
            let slots = rng.choose_distinct(&positions, a);
            for p in 0..t {
                let base = match slots.iter().position(|&q| q == p) {
                    Some(m) => &motifs[class][m],
                    None => &themes[class / 2],
                };
                for &x in base {
                    let noise = if spec.noise_std > 0.0 {
                        rng.normal(spec.noise_std)
                    } else {
                        0.0
                    };
                    patches.push((x + noise) as f32);
                }
            }
            labels.push(class);
            split_tags.push(if s < spec.train_per_class {
                Split::Train
            } else {
                Split::Test
            });
        }
    }
    let manifest = DatasetManifest {
        format_version: 1,
        num_samples: n,
        tokens_per_image: t,
        patch_dim: d,
        class_names: (0..c).map(synth_class_name).collect(),
        labels,
        split_tags,
        base_novel: (0..c)
            .map(|k| {
                if k < spec.base_classes {
                    ClassRole::Base
                } else {
                    ClassRole::Novel
                }
            })
            .collect(),
    };
    let attributes = AttributeFile::new(
        (0..c)
            .map(|k| ClassAttributes {
                name: synth_class_name(k),
                attributes: (0..a).map(|m| synth_attribute(k, m)).collect(),
            })
            .collect(),
    );
    Ok((Dataset::new(manifest, patches)?, attributes))
}

const GRID: f64 = 1024.0;

/// Rounds to a multiple of 1/1024 so that noiseless patches are exact in `f32`.
fn quantize(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

/// Writes `dataset.json`, `patches.bin` and `attributes.json` into `dir`.
pub fn synth_generate(spec: &SynthSpec, dir: &Path) -> Result<(Dataset, AttributeFile)> {
    let (dataset, attributes) = synthesize(spec)?;
    dataset.save(dir)?;
    attributes.save(&dir.join(ATTRIBUTES_FILE))?;
    Ok((dataset, attributes))
}
