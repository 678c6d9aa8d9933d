//! Checkpoint files.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header, then one
//! length-prefixed block of little-endian f64 values per tensor in header
//! order, then the SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterBank, BankRegistry};
use crate::error::{Error, Result};
use crate::methods::ParameterStore;
use crate::model::{HybridModel, ModelConfig};
use crate::tensor::rng::stream;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ADCLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub task_index: usize,
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrySummary {
    pub banks: usize,
    pub boundary_fingerprints: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub registry: RegistrySummary,
    pub fingerprints: BTreeMap<String, String>,
    pub provenance: Provenance,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(model: &HybridModel, store: &ParameterStore, provenance: Provenance) -> Result<Vec<u8>> {
    model.check_shared(&store.shared)?;
    let mut entries = Vec::new();
    let mut blocks: Vec<&Tensor> = Vec::new();
    for (name, t) in store.shared.names().iter().zip(store.shared.tensors()) {
        entries.push(TensorEntry {
            name: format!("shared.{name}"),
            shape: t.shape().to_vec(),
        });
        blocks.push(t);
    }
    for bank in store.banks.banks() {
        for (name, t) in bank.tensor_names().into_iter().zip(bank.tensors()) {
            entries.push(TensorEntry {
                name: format!("bank.{}.{name}", bank.task_id),
                shape: t.shape().to_vec(),
            });
            blocks.push(t);
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        registry: RegistrySummary {
            banks: store.banks.len(),
            boundary_fingerprints: store.banks.boundary_fingerprints().to_vec(),
        },
        fingerprints: store.fingerprints(),
        provenance,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in blocks {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        out.extend_from_slice(&t.le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Integrity(format!("checkpoint: {}", msg.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, HybridModel, ParameterStore)> {
    if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("file digest mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let hlen = r.u64("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", header.format_version)));
    }
    let model = HybridModel::new(header.model.clone())?;
    let mut tensors: BTreeMap<&str, Tensor> = BTreeMap::new();
    for e in &header.tensors {
        let n = r.u64(&e.name)? as usize;
        if n != e.shape.iter().product::<usize>() {
            return Err(corrupt(format!("{}: length {n} does not match shape {:?}", e.name, e.shape)));
        }
        let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("length overflow"))?, &e.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(format!("{}: {err}", e.name)))?;
        if tensors.insert(&e.name, t).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", e.name)));
        }
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after the last tensor"));
    }

    let mut shared = model.init_shared(&mut stream(0, "checkpoint", 0));
    let names = shared.names().to_vec();
    for (name, slot) in names.iter().zip(shared.tensors_mut()) {
        let t = tensors
            .remove(format!("shared.{name}").as_str())
            .ok_or_else(|| corrupt(format!("missing shared tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(corrupt(format!("{name}: shape {:?}, model expects {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
    }
    let mut banks = Vec::with_capacity(header.registry.banks);
    for task in 1..=header.registry.banks {
        let mut bank: AdapterBank = model.new_first_bank(&mut stream(0, "checkpoint", 1))?;
        bank.task_id = task;
        let names = bank.tensor_names();
        for (name, slot) in names.iter().zip(bank.tensors_mut()) {
            let key = format!("bank.{task}.{name}");
            let t = tensors
                .remove(key.as_str())
                .ok_or_else(|| corrupt(format!("missing tensor {key}")))?;
            if t.shape() != slot.shape() {
                return Err(corrupt(format!("{key}: bad shape {:?}", t.shape())));
            }
            *slot = t;
        }
        banks.push(bank);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    let store = ParameterStore {
        shared,
        banks: BankRegistry::from_parts(banks, header.registry.boundary_fingerprints.clone())?,
    };
    let actual = store.fingerprints();
    if actual != header.fingerprints {
        let bad: Vec<&String> = actual
            .iter()
            .filter(|(k, v)| header.fingerprints.get(*k) != Some(v))
            .map(|(k, _)| k)
            .collect();
        return Err(corrupt(format!("fingerprint mismatch for {bad:?}")));
    }
    Ok((header, model, store))
}

pub fn save(path: &Path, model: &HybridModel, store: &ParameterStore, provenance: Provenance) -> Result<()> {
    let bytes = encode(model, store, provenance)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, HybridModel, ParameterStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })
}
