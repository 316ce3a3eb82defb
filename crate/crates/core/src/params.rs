//! Named parameter storage and the JSON checkpoint format.
//!
//! A checkpoint is a single JSON object:
//!
//! ```json
//! { "format": "gaze-checkpoint", "version": 1, "meta": { ... },
//!   "params": [ { "name": "direction.conv1.weight", "shape": [8, 3, 3, 3], "values": [ ... ] } ] }
//! ```
//!
//! `values` are row-major 64-bit floats. `meta` is free-form and carries whatever the
//! writer needs to rebuild the owning model.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "gaze-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Put every parameter on `tape`; only those accepted by `trainable` require a gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamId) -> bool) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone().with_requires_grad(trainable(ParamId(i)))))
            .collect()
    }

    /// Copy gradients from a finished tape onto the selected parameters.
    pub fn pull_grads(&mut self, tape: &Tape, bound: &[Var], ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            let grad = tape
                .grad(bound[id.0])
                .ok_or_else(|| Error::MissingGrad(self.names[id.0].clone()))?
                .to_vec();
            self.tensors[id.0].set_grad(grad)?;
        }
        Ok(())
    }

    /// Mutable references to the selected parameters, in the order given.
    pub fn select_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        let mut slots: Vec<Option<&mut Tensor>> = self.tensors.iter_mut().map(Some).collect();
        ids.iter()
            .map(|id| slots[id.0].take().expect("parameter selected twice"))
            .collect()
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            meta,
            params: self
                .iter()
                .map(|(_, name, t)| ParamRecord {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrite values from `ckpt`. Every parameter must be present with the same shape.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.params.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {}",
                ckpt.params.len(),
                self.len()
            )));
        }
        for rec in &ckpt.params {
            let id = self
                .find(&rec.name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{}`", rec.name)))?;
            let t = &mut self.tensors[id.0];
            if t.shape() != rec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, checkpoint says {:?}",
                    rec.name,
                    t.shape(),
                    rec.shape
                )));
            }
            t.values_mut().copy_from_slice(&rec.values);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    /// Parse and validate checkpoint bytes.
    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.params {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Format(format!("duplicate parameter `{}`", p.name)));
            }
            let n = p.shape.iter().try_fold(1usize, |acc, &d| {
                if d == 0 {
                    None
                } else {
                    acc.checked_mul(d)
                }
            });
            if p.shape.is_empty() || n != Some(p.values.len()) {
                return Err(Error::Format(format!(
                    "parameter `{}`: shape {:?} does not match {} values",
                    p.name,
                    p.shape,
                    p.values.len()
                )));
            }
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("parameter `{}` has non-finite values", p.name)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_slice(&bytes)
    }

    /// Write to `path` atomically: a temporary file in the same directory is renamed over it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        write_atomic(path, &bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(vec![2, 2], vec![0.1, -0.2, 1.0 / 3.0, 1e-300]).unwrap());
        s.add("a.bias", Tensor::new(vec![2], vec![std::f64::consts::PI, -0.0]).unwrap());
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        s.to_checkpoint(serde_json::json!({"k": 1})).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut other = store();
        other.get_mut(ParamId(0)).values_mut().fill(9.0);
        other.load_checkpoint(&loaded).unwrap();
        for ((_, _, a), (_, _, b)) in s.iter().zip(other.iter()) {
            let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(loaded.meta["k"], 1);
    }

    #[test]
    fn rejects_bad_checkpoints() {
        let good = store().to_checkpoint(serde_json::Value::Null);
        let mut bad = good.clone();
        bad.version = 2;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.params[0].shape = vec![3];
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.params[1].name = "a.weight".into();
        assert!(bad.validate().is_err());
        assert!(Checkpoint::from_slice(b"{\"params\": []}").is_err());

        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(vec![4]));
        other.add("a.bias", Tensor::zeros(vec![2]));
        assert!(other.load_checkpoint(&good).is_err());
    }

    #[test]
    fn select_mut_follows_requested_order() {
        let mut s = store();
        let sel = s.select_mut(&[ParamId(1), ParamId(0)]);
        assert_eq!(sel[0].shape(), &[2]);
        assert_eq!(sel[1].shape(), &[2, 2]);
    }
}
