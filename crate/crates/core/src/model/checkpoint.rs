//! Binary checkpoint: magic, version, a JSON header describing every
//! array, the little-endian array data, then a SHA-256 of all preceding
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, Model, ModelConfig, ModelError};
use crate::autodiff::{DType, ParamStore, Real, Tensor};
use crate::data::LabelSet;
use crate::encoding::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PICKKIE\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

/// A trained model together with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F: Real> {
    pub model: Model<F>,
    pub optimizer: Adam<F>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: DType,
    config: BTreeMap<String, String>,
    vocabulary: BTreeMap<String, usize>,
    entities: Vec<String>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data block.
    offset: usize,
}

const GROUPS: [&str; 3] = ["param", "adam.m", "adam.v"];

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn encode_checkpoint<F: Real>(ck: &Checkpoint<F>) -> Vec<u8> {
    let cfg = &ck.model.config;
    let config = super::CONFIG_KEYS
        .iter()
        .map(|k| (k.to_string(), cfg.get(k).expect("listed key")))
        .collect();
    let vocabulary = serde_json::from_str(&ck.model.vocab.to_json()).expect("vocabulary json");
    let params: Vec<(&str, &Tensor<F>)> = ck.model.params.iter().map(|(n, p)| (n, &p.value)).collect();
    let m: Vec<(&str, &Tensor<F>)> = ck.optimizer.m.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let v: Vec<(&str, &Tensor<F>)> = ck.optimizer.v.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    let mut offset = 0;
    for (group, list) in GROUPS.iter().zip([&params, &m, &v]) {
        for (name, t) in list.iter() {
            tensors.push(Entry {
                group: group.to_string(),
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
            for &x in t.data() {
                x.write_le(&mut data);
            }
        }
    }
    let header = Header {
        dtype: F::DTYPE,
        config,
        vocabulary,
        entities: ck.model.labels.entities().to_vec(),
        step: ck.optimizer.step,
        lr: ck.optimizer.lr,
        beta1: ck.optimizer.beta1,
        beta2: ck.optimizer.beta2,
        eps: ck.optimizer.eps,
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + data.len() + DIGEST);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Validates framing and checksum and returns the parsed header and data.
fn unframe(bytes: &[u8]) -> Result<(Header, &[u8]), ModelError> {
    if bytes.len() < PREAMBLE + DIGEST || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ModelError::Checksum);
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| PREAMBLE.checked_add(l))
        .filter(|&e| e <= body.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header =
        serde_json::from_slice(&body[PREAMBLE..header_end]).map_err(|e| bad(format!("header: {e}")))?;
    Ok((header, &body[header_end..]))
}

/// Element type recorded in an encoded checkpoint.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<DType, ModelError> {
    Ok(unframe(bytes)?.0.dtype)
}

pub fn decode_checkpoint<F: Real>(bytes: &[u8]) -> Result<Checkpoint<F>, ModelError> {
    let (header, data) = unframe(bytes)?;
    if header.dtype != F::DTYPE {
        return Err(bad(format!(
            "checkpoint holds {} data, requested {}",
            header.dtype.as_str(),
            F::DTYPE.as_str()
        )));
    }
    let mut config = ModelConfig::default();
    for (k, v) in &header.config {
        config.set(k, v)?;
    }
    config.validate()?;
    let vocab = Vocabulary::from_map(header.vocabulary)?;
    let labels = LabelSet::new(header.entities.iter().cloned());
    if labels.entities() != header.entities.as_slice() {
        return Err(bad("entity list is not sorted and unique"));
    }
    let width = F::DTYPE.size_of();
    if data.len() % width != 0 {
        return Err(bad("data block is not a whole number of elements"));
    }
    let total = data.len() / width;
    let mut params = ParamStore::new();
    let mut optimizer = Adam::new(header.lr);
    optimizer.beta1 = header.beta1;
    optimizer.beta2 = header.beta2;
    optimizer.eps = header.eps;
    optimizer.step = header.step;
    let mut expected_offset = 0usize;
    for e in header.tensors {
        let n = e
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad(format!("{}: shape overflows", e.name)))?;
        if e.offset != expected_offset || n > total - e.offset.min(total) {
            return Err(bad(format!("{}: data range out of bounds", e.name)));
        }
        expected_offset += n;
        let values: Vec<F> = data[e.offset * width..(e.offset + n) * width]
            .chunks_exact(width)
            .map(F::read_le)
            .collect();
        let t = Tensor::new(e.shape, values)?;
        match e.group.as_str() {
            "param" => params.insert(e.name, t),
            "adam.m" => {
                optimizer.m.insert(e.name, t);
            }
            "adam.v" => {
                optimizer.v.insert(e.name, t);
            }
            g => return Err(bad(format!("unknown tensor group {g:?}"))),
        }
    }
    if expected_offset != total {
        return Err(bad("trailing bytes after the last tensor"));
    }
    let model = Model {
        config,
        vocab,
        labels,
        params,
    };
    let reference = Model::<F>::new(model.config.clone(), model.vocab.clone(), model.labels.clone())?;
    for (name, p) in reference.params.iter() {
        match model.params.value(name) {
            Some(t) if t.shape() == p.value.shape() => {}
            Some(t) => return Err(bad(format!("{name}: shape {:?}, expected {:?}", t.shape(), p.value.shape()))),
            None => return Err(bad(format!("missing parameter {name}"))),
        }
    }
    if model.params.len() != reference.params.len() {
        return Err(bad("unexpected extra parameters"));
    }
    model.check_consistency()?;
    Ok(Checkpoint { model, optimizer })
}

pub fn save_checkpoint<F: Real>(ck: &Checkpoint<F>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| ModelError::io(path, e))
}

pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<F>, ModelError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| ModelError::io(path, e))?;
    decode_checkpoint(&bytes)
}
