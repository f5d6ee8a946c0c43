//! Versioned binary checkpoint: magic, format version, a JSON header
//! describing every array, then the arrays as little-endian f64.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::RmsProp;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"OVDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: String,
    stage: String,
    epoch: usize,
    stage_epoch: usize,
    step: u64,
    optimizer_steps: u64,
    params: Vec<ArrayEntry>,
    /// Optimizer accumulators, keyed by parameter name.
    optimizer: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub stage: String,
    /// Completed epochs, counted across stages.
    pub epoch: usize,
    /// Completed epochs of `stage`.
    pub stage_epoch: usize,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer_state: Vec<(String, Tensor)>,
    pub optimizer_steps: u64,
}

impl Checkpoint {
    pub fn capture(
        config_hash: &str,
        stage: &str,
        (epoch, stage_epoch): (usize, usize),
        step: u64,
        params: &ParamStore,
        opt: &RmsProp,
    ) -> Self {
        let optimizer_state = opt
            .mean_square
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.as_ref().map(|t| (params.name(crate::params::ParamId(i)).to_string(), t.clone())))
            .collect();
        Checkpoint {
            config_hash: config_hash.to_string(),
            stage: stage.to_string(),
            epoch,
            stage_epoch,
            step,
            params: params.clone(),
            optimizer_state,
            optimizer_steps: opt.steps,
        }
    }

    /// Restores the optimizer accumulators into `opt`, aligned to `params`.
    pub fn restore_optimizer(&self, opt: &mut RmsProp) -> Result<()> {
        opt.mean_square = vec![None; self.params.len()];
        for (name, t) in &self.optimizer_state {
            let id = self.params.find(name).ok_or_else(|| Error::config(format!("optimizer state for unknown parameter {name}")))?;
            opt.mean_square[id.index()] = Some(t.clone());
        }
        opt.steps = self.optimizer_steps;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entry = |name: &str, t: &Tensor| ArrayEntry { name: name.to_string(), rows: t.rows(), cols: t.cols() };
        let header = Header {
            version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            stage: self.stage.clone(),
            epoch: self.epoch,
            stage_epoch: self.stage_epoch,
            step: self.step,
            optimizer_steps: self.optimizer_steps,
            params: self.params.iter().map(|(n, t)| entry(n, t)).collect(),
            optimizer: self.optimizer_state.iter().map(|(n, t)| entry(n, t)).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self.params.iter().map(|(_, t)| t).chain(self.optimizer_state.iter().map(|(_, t)| t));
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::config(format!("corrupt checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::config(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut cursor = &bytes[20 + hlen..];
        let mut read = |e: &ArrayEntry| -> Result<Tensor> {
            let n = e.rows * e.cols;
            let mut buf = vec![0u8; n * 8];
            cursor.read_exact(&mut buf).map_err(|_| bad("truncated data"))?;
            let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Tensor::from_vec(e.rows, e.cols, data))
        };
        let mut params = ParamStore::new();
        for e in &header.params {
            params.insert(e.name.clone(), read(e)?);
        }
        let mut optimizer_state = Vec::new();
        for e in &header.optimizer {
            optimizer_state.push((e.name.clone(), read(e)?));
        }
        Ok(Checkpoint {
            config_hash: header.config_hash,
            stage: header.stage,
            epoch: header.epoch,
            stage_epoch: header.stage_epoch,
            step: header.step,
            params,
            optimizer_state,
            optimizer_steps: header.optimizer_steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&self.to_bytes())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
