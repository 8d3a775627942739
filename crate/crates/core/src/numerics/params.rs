use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Array;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Array,
    pub trainable: bool,
}

/// Named parameter collection keyed by dot-separated path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

/// Per-path gradients; shapes match the corresponding parameters.
pub type Gradients = BTreeMap<String, Array>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Array, trainable: bool) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Contract(format!("duplicate parameter path `{path}`")));
        }
        self.entries.insert(path, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Array> {
        self.entries
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Array> {
        self.entries
            .get_mut(path)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn param(&self, path: &str) -> Option<&Param> {
        self.entries.get(path)
    }

    pub fn set_trainable(&mut self, path: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(path)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Entries whose path starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Adds every entry of `other`; paths must not collide.
    pub fn merge(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(k, v.value, v.trainable)?;
        }
        Ok(())
    }

    /// Writes `params.bin` (little-endian f64, path order) and
    /// `manifest.json` into `dir`, each through a temp file and rename.
    pub fn write_container(&self, dir: &Path, meta: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(self.scalar_count() * 8);
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (path, p) in &self.entries {
            tensors.push(TensorEntry {
                path: path.clone(),
                shape: p.value.shape().to_vec(),
                offset: bytes.len() as u64,
                dtype: "f64".into(),
                trainable: p.trainable,
            });
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest { tensors, meta };
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_atomic(&dir.join(PARAMS_FILE), &bytes)?;
        write_atomic(&dir.join(MANIFEST_FILE), &json)?;
        Ok(())
    }

    pub fn read_container(dir: &Path) -> Result<(ParamSet, serde_json::Value)> {
        let mpath = dir.join(MANIFEST_FILE);
        let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_slice(&raw)?;
        let bpath = dir.join(PARAMS_FILE);
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut set = ParamSet::new();
        for t in manifest.tensors {
            if t.dtype != "f64" {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has dtype {}, only f64 is supported",
                    t.path, t.dtype
                )));
            }
            let n: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let end = start + n * 8;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` extends past the end of {PARAMS_FILE}",
                    t.path
                )));
            }
            let data = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            set.insert(t.path, Array::new(&t.shape, data)?, t.trainable)?;
        }
        Ok((set, manifest.meta))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    path: String,
    shape: Vec<usize>,
    offset: u64,
    dtype: String,
    #[serde(default = "default_true")]
    trainable: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_path_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("a.w", Array::zeros(&[2]), true).unwrap();
        assert!(ps.insert("a.w", Array::zeros(&[2]), true).is_err());
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.insert("enc.w1", Array::from_fn(&[2, 3], |k| k as f64 * 0.1 - 0.2), true)
            .unwrap();
        ps.insert("fixed", Array::scalar(std::f64::consts::PI), false).unwrap();
        ps.write_container(dir.path(), serde_json::json!({"arch": {"e": 4}}))
            .unwrap();
        let (back, meta) = ParamSet::read_container(dir.path()).unwrap();
        assert_eq!(back, ps);
        assert_eq!(meta["arch"]["e"], 4);

        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        let t0 = &manifest["tensors"][0];
        assert_eq!(t0["path"], "enc.w1");
        assert_eq!(t0["shape"], serde_json::json!([2, 3]));
        assert_eq!(t0["offset"], 0);
        assert_eq!(t0["dtype"], "f64");
        assert_eq!(manifest["tensors"][1]["offset"], 48);
    }
}
