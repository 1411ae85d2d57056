use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, StageConfig};
use crate::autograd::{AdamW, ParamStore, Tensor};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::masking::MaskingConfig;
use crate::model::MastModel;

const MAGIC: &[u8; 8] = b"MASTCKPT";
const VERSION: u32 = 1;
const MOMENT1: &str = "opt.m.";
const MOMENT2: &str = "opt.v.";

/// Which train/test split a model was trained under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitTag {
    pub protocol: String,
    /// Hex digest of the training trial list.
    pub fingerprint: String,
}

/// Plain-text record stored at the front of every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: u8,
    /// Completed epochs of `stage`.
    pub epoch: usize,
    /// Seed of the run; per-epoch generators are derived from it, so it and
    /// `epoch` together are the random state.
    pub seed: u64,
    pub opt_step: u64,
    pub model: ModelConfig,
    pub stage_config: StageConfig,
    pub masking: MaskingConfig,
    #[serde(default)]
    pub split: Option<SplitTag>,
    #[serde(default)]
    pub history: Vec<EpochMetrics>,
}

/// Parameters, optimiser moments and the header.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Named tensors in file order: parameters, then optimiser moments.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(header: CheckpointHeader, store: &ParamStore, opt: Option<&AdamW>) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.value(id).clone()))
            .collect();
        if let Some(opt) = opt {
            for (prefix, moments) in [(MOMENT1, &opt.m), (MOMENT2, &opt.v)] {
                for id in store.ids() {
                    if let Some(m) = moments.get(&id) {
                        let shape = store.value(id).shape().to_vec();
                        tensors.push((format!("{prefix}{}", store.name(id)), Tensor::new(shape, m.clone())));
                    }
                }
            }
        }
        Checkpoint { header, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the network and loads every parameter.
    pub fn restore(&self) -> Result<(MastModel, ParamStore)> {
        let (model, mut store) = MastModel::new(&self.header.model, 0)?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            store.set_value(id, t.clone());
        }
        Ok((model, store))
    }

    /// Restores optimiser moments saved for the parameters in `store`.
    pub fn restore_optimizer(&self, store: &ParamStore, opt: &mut AdamW) {
        opt.step = self.header.opt_step;
        for id in store.ids() {
            let name = store.name(id);
            if let Some(t) = self.tensor(&format!("{MOMENT1}{name}")) {
                opt.m.insert(id, t.data().to_vec());
            }
            if let Some(t) = self.tensor(&format!("{MOMENT2}{name}")) {
                opt.v.insert(id, t.data().to_vec());
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header)
            .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u64(&mut r)? as usize;
        let text = take(&mut r, len)?;
        let text = std::str::from_utf8(text).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header: CheckpointHeader =
            toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let n = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = take(&mut r, numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
