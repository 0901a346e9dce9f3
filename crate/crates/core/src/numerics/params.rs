use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_BLOB: &str = "params.bin";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: Tensor,
    grad: Tensor,
    trainable: bool,
}

/// Named learnable tensors with gradient slots, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn set_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))?;
        if grad.len() != e.value.len() {
            return Err(Error::invalid(format!(
                "gradient for '{name}' has {} values, parameter has {}",
                grad.len(),
                e.value.len()
            )));
        }
        e.grad.data_mut().copy_from_slice(grad.data());
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.trainable = trainable)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))
    }

    /// `value -= lr * grad` on trainable entries, then clears every gradient.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        self.apply_update(lr);
        Ok(())
    }

    pub(crate) fn apply_update(&mut self, lr: f64) {
        for e in self.entries.values_mut() {
            if e.trainable {
                for (w, g) in e.value.data_mut().iter_mut().zip(e.grad.data()) {
                    *w -= lr * g;
                }
            }
            e.grad.data_mut().fill(0.0);
        }
        self.step_count += 1;
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::with_capacity(self.num_scalars() * 8);
        let mut params = Vec::with_capacity(self.entries.len());
        for (name, e) in &self.entries {
            params.push(ManifestEntry {
                name: name.clone(),
                shape: e.value.shape().to_vec(),
                dtype: "f64".into(),
                offset: blob.len() as u64,
                trainable: e.trainable,
            });
            for v in e.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            step_count: self.step_count,
            params,
        };
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(CHECKPOINT_BLOB);
        fs::write(&path, blob).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidManifest(format!(
                "checkpoint format_version {} is not supported",
                manifest.format_version
            )));
        }
        let blob_path = dir.join(CHECKPOINT_BLOB);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut store = ParamStore::new();
        let mut expected_offset = 0u64;
        for p in manifest.params {
            if p.dtype != "f64" {
                return Err(Error::InvalidManifest(format!(
                    "parameter '{}' has unsupported dtype '{}'",
                    p.name, p.dtype
                )));
            }
            if p.offset != expected_offset {
                return Err(Error::InvalidManifest(format!(
                    "parameter '{}' at offset {} but expected {expected_offset}",
                    p.name, p.offset
                )));
            }
            let n: usize = p.shape.iter().product();
            let start = p.offset as usize;
            let end = start + n * 8;
            let bytes = blob.get(start..end).ok_or_else(|| {
                Error::CorruptDataset(format!(
                    "{} is too short for parameter '{}'",
                    blob_path.display(),
                    p.name
                ))
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(&p.name, Tensor::new(p.shape, data)?)?;
            store.set_trainable(&p.name, p.trainable)?;
            expected_offset = end as u64;
        }
        if expected_offset as usize != blob.len() {
            return Err(Error::CorruptDataset(format!(
                "{} has {} bytes, manifest describes {expected_offset}",
                blob_path.display(),
                blob.len()
            )));
        }
        store.step_count = manifest.step_count;
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    step_count: u64,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    #[serde(default = "yes")]
    trainable: bool,
}

fn yes() -> bool {
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0])).unwrap();
        s.set_grad("w", &Tensor::vector(vec![0.5])).unwrap();
        s.sgd_step(0.002).unwrap();
        assert!((s.value("w").unwrap().data()[0] - 0.999).abs() < 1e-15);
        assert_eq!(s.grad("w").unwrap().data(), &[0.0]);
        assert_eq!(s.step_count(), 1);

        s.sgd_step(0.002).unwrap();
        assert!((s.value("w").unwrap().data()[0] - 0.999).abs() < 1e-15);

        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0])).unwrap();
        for _ in 0..2 {
            s.set_grad("w", &Tensor::vector(vec![1.0])).unwrap();
            s.sgd_step(0.1).unwrap();
        }
        assert!((s.value("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_positive_lr() {
        let mut s = ParamStore::new();
        assert!(matches!(s.sgd_step(0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(s.sgd_step(-1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn frozen_entries_keep_values() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0])).unwrap();
        s.set_trainable("w", false).unwrap();
        s.set_grad("w", &Tensor::vector(vec![3.0])).unwrap();
        s.sgd_step(0.1).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[1.0]);
        assert_eq!(s.grad("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::vector(vec![1.0])).unwrap();
        assert!(s.insert("a", Tensor::vector(vec![2.0])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert(
            "b.weird",
            Tensor::new(vec![2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 3.0]).unwrap(),
        )
        .unwrap();
        s.insert("a", Tensor::vector(vec![std::f64::consts::PI])).unwrap();
        s.set_trainable("a", false).unwrap();
        s.apply_update(1.0);
        s.save(dir.path()).unwrap();
        let back = ParamStore::load(dir.path()).unwrap();
        assert_eq!(back.step_count(), 1);
        for name in s.names() {
            let a: Vec<u64> = s.value(name).unwrap().data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.value(name).unwrap().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(s.value(name).unwrap().shape(), back.value(name).unwrap().shape());
        }
        assert!(!back.is_trainable("a"));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.save(dir.path()).unwrap();
        let blob = dir.path().join(CHECKPOINT_BLOB);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..12]).unwrap();
        assert!(matches!(ParamStore::load(dir.path()), Err(Error::CorruptDataset(_))));
    }
}
