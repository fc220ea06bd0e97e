//! Binary checkpoint: magic, little-endian header length, JSON header, then
//! raw little-endian f64 payload in header order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::engine::TrainState;
use super::optim::OptimizerState;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::ssl::{MemoryQueue, MomentumEncoder};

const MAGIC: &[u8; 8] = b"CTRNCKP1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueueMeta {
    name: String,
    capacity: usize,
    dim: usize,
    filled: usize,
    write_ptr: usize,
    sources: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    step: usize,
    phase_index: usize,
    optimizer_iter: usize,
    key_momentum: Option<f64>,
    tensors: Vec<TensorMeta>,
    queues: Vec<QueueMeta>,
}

const PARAMS: &str = "params";
const VELOCITY: &str = "velocity";
const KEY: &str = "key";

pub fn save_checkpoint(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    let mut groups = vec![(PARAMS, &state.params), (VELOCITY, &state.optimizer.velocity)];
    if let Some(enc) = &state.encoder {
        groups.push((KEY, &enc.key));
    }
    let mut tensors = Vec::new();
    let mut payload: Vec<&[f64]> = Vec::new();
    for (group, store) in groups {
        for (name, t) in store.iter() {
            tensors.push(TensorMeta { group: group.into(), name: name.clone(), shape: t.shape().to_vec() });
            payload.push(t.data());
        }
    }
    let mut queues = Vec::new();
    for (name, q) in [("global", &state.queue), ("local", &state.local_queue)] {
        if let Some(q) = q {
            let (entries, sources) = q.raw_parts();
            queues.push(QueueMeta {
                name: name.into(),
                capacity: q.capacity(),
                dim: q.dim(),
                filled: q.len(),
                write_ptr: q.write_ptr(),
                sources: sources.to_vec(),
            });
            payload.push(entries);
        }
    }
    let header = Header {
        config: config.clone(),
        step: state.step,
        phase_index: state.phase_index,
        optimizer_iter: state.optimizer.iter,
        key_momentum: state.encoder.as_ref().map(|e| e.momentum),
        tensors,
        queues,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for block in payload {
        for v in block {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Payload<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Payload<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = n.checked_mul(8).and_then(|b| b.checked_add(self.pos)).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("payload is truncated".into()))?;
        let out = self.bytes[self.pos..end].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect();
        self.pos = end;
        Ok(out)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8")) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| Error::Checkpoint("header is truncated".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    let mut payload = Payload { bytes: &bytes[16 + len..], pos: 0 };

    let (mut params, mut velocity, mut key) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
    for meta in &header.tensors {
        let n = meta.shape.iter().product();
        let t = Tensor::new(&meta.shape, payload.take(n)?)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", meta.name)))?;
        let store = match meta.group.as_str() {
            PARAMS => &mut params,
            VELOCITY => &mut velocity,
            KEY => &mut key,
            g => return Err(Error::Checkpoint(format!("unknown tensor group `{g}`"))),
        };
        if store.contains(&meta.name) {
            return Err(Error::Checkpoint(format!("duplicate tensor {}/{}", meta.group, meta.name)));
        }
        store.insert(meta.name.clone(), t);
    }
    let mut queue = None;
    let mut local_queue = None;
    for q in header.queues {
        let entries = payload.take(q.capacity * q.dim)?;
        let built = MemoryQueue::from_raw_parts(q.capacity, q.dim, entries, q.sources, q.write_ptr, q.filled)?;
        match q.name.as_str() {
            "global" => queue = Some(built),
            "local" => local_queue = Some(built),
            n => return Err(Error::Checkpoint(format!("unknown queue `{n}`"))),
        }
    }
    if payload.pos != payload.bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    let encoder = match header.key_momentum {
        Some(momentum) => {
            for (name, t) in key.iter() {
                if params.get(name).map(|p| p.shape() != t.shape()).unwrap_or(true) {
                    return Err(Error::Checkpoint(format!("key parameter {name} has no matching query parameter")));
                }
            }
            Some(MomentumEncoder { key, momentum })
        }
        None if key.is_empty() => None,
        None => return Err(Error::Checkpoint("key parameters without a momentum value".into())),
    };
    let state = TrainState {
        params,
        optimizer: OptimizerState { velocity, iter: header.optimizer_iter },
        phase_index: header.phase_index,
        encoder,
        queue,
        local_queue,
        step: header.step,
    };
    Ok((header.config, state))
}
