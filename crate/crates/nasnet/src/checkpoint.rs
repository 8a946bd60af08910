//! Single-file checkpoints.
//!
//! Layout: the magic `SOARSCK1`, a little-endian `u64` header length, a JSON
//! header listing every tensor, then the raw little-endian payloads in header
//! order. Parameters are stored as f32, optimizer moments as f64.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SOARSCK1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    entries: Vec<Entry>,
    optimizers: Vec<OptimizerMeta>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerMeta {
    label: String,
    cfg: crate::optim::AdamConfig,
    kind: crate::optim::ParamKindTag,
    step: u64,
    slots: Vec<usize>,
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor<f32>>,
    pub optimizers: BTreeMap<String, Adam>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, meta: serde_json::Value) -> Self {
        Self {
            params: store.iter().map(|(_, p)| (p.name.clone(), p.value.cast())).collect(),
            optimizers: BTreeMap::new(),
            meta,
        }
    }

    pub fn with_optimizer(mut self, label: &str, opt: &Adam) -> Self {
        self.optimizers.insert(label.to_string(), opt.clone());
        self
    }

    /// Copies the stored tensors into `store`; names and shapes must match exactly.
    pub fn apply_to<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(NasError::Format(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
        for (id, name, shape) in ids {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| NasError::Format(format!("checkpoint is missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(NasError::Format(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {shape:?}",
                    t.shape()
                )));
            }
            store.get_mut(id).value = t.cast();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        for (name, t) in &self.params {
            entries.push(Entry { name: name.clone(), dtype: "f32".into(), shape: t.shape().to_vec() });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut optimizers = Vec::new();
        for (label, opt) in &self.optimizers {
            let slots: Vec<usize> = opt.first.keys().copied().collect();
            for (moment, map) in [("m", &opt.first), ("v", &opt.second)] {
                for slot in &slots {
                    let data = &map[slot];
                    entries.push(Entry {
                        name: format!("opt.{label}.{moment}.{slot}"),
                        dtype: "f64".into(),
                        shape: vec![data.len()],
                    });
                    for v in data {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            optimizers.push(OptimizerMeta { label: label.clone(), cfg: opt.cfg, kind: opt.kind, step: opt.step, slots });
        }
        let header = serde_json::to_vec(&Header { entries, optimizers, meta: self.meta.clone() })
            .map_err(|e| NasError::Format(e.to_string()))?;
        let mut f = std::fs::File::create(path).map_err(|e| NasError::io(path, e))?;
        let mut write = |b: &[u8]| f.write_all(b).map_err(|e| NasError::io(path, e));
        write(MAGIC)?;
        write(&(header.len() as u64).to_le_bytes())?;
        write(&header)?;
        write(&payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| NasError::io(path, e))?;
        let bad = |msg: &str| NasError::Format(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut pos = 16 + hlen;
        let mut params = BTreeMap::new();
        let mut raw64: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            match e.dtype.as_str() {
                "f32" => {
                    let chunk = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated payload"))?;
                    let data = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                    params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
                    pos += 4 * n;
                }
                "f64" => {
                    let chunk = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated payload"))?;
                    raw64.insert(
                        e.name.clone(),
                        chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
                    );
                    pos += 8 * n;
                }
                other => return Err(bad(&format!("unknown dtype {other}"))),
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        let mut optimizers = BTreeMap::new();
        for o in header.optimizers {
            let mut opt = Adam::new(o.cfg, o.kind);
            opt.step = o.step;
            for slot in o.slots {
                let m = raw64.remove(&format!("opt.{}.m.{slot}", o.label)).ok_or_else(|| bad("missing moment"))?;
                let v = raw64.remove(&format!("opt.{}.v.{slot}", o.label)).ok_or_else(|| bad("missing moment"))?;
                opt.first.insert(slot, m);
                opt.second.insert(slot, v);
            }
            optimizers.insert(o.label, opt);
        }
        Ok(Self { params, optimizers, meta: header.meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{AdamConfig, ParamKindTag};
    use crate::search::{train_step, Batch, Target};
    use crate::unet::{BlockNet, Network};

    fn trained() -> (BlockNet<f32>, Adam) {
        let mut net = BlockNet::<f32>::new(1, 2, 1, None, 4);
        let mut opt = Adam::new(AdamConfig::with_lr(1e-2), ParamKindTag::Weight);
        let b = Batch {
            input: Tensor::new(vec![1, 1, 2, 3, 3], (0..18).map(|i| i as f32 / 9.0).collect()).unwrap(),
            target: Target::Dense((0..18).map(|i| (i % 3) as f32).collect()),
        };
        for _ in 0..3 {
            train_step(&mut net, &b, &mut opt).unwrap();
        }
        (net, opt)
    }

    #[test]
    fn round_trip_is_exact() {
        let (net, opt) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        Checkpoint::from_store(net.store(), serde_json::json!({"epoch": 3}))
            .with_optimizer("weights", &opt)
            .save(&path)
            .unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta["epoch"], 3);
        assert_eq!(back.optimizers["weights"], opt);
        let mut fresh = BlockNet::<f32>::new(1, 2, 1, None, 99);
        back.apply_to(fresh.store_mut()).unwrap();
        for ((_, a), (_, b)) in net.store().iter().zip(fresh.store().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn mismatched_models_are_rejected() {
        let (net, _) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        Checkpoint::from_store(net.store(), serde_json::Value::Null).save(&path).unwrap();
        let mut other = BlockNet::<f32>::new(1, 3, 1, None, 0);
        assert!(Checkpoint::load(&path).unwrap().apply_to(other.store_mut()).is_err());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let (net, _) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        Checkpoint::from_store(net.store(), serde_json::Value::Null).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(NasError::Format(_))));
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(NasError::Format(_))));
    }
}
