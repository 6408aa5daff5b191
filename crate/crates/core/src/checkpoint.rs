//! Single-file checkpoints.
//!
//! Layout: 5-byte magic `SCTD1`, a little-endian u64 header length, a JSON
//! header (step, seed, schedule, configs, vocabulary, parameter table), then
//! raw little-endian blocks — parameters, both optimizer moments, and the
//! importance table — and finally a SHA-256 over header and payload. Any
//! bit flip fails the digest check before anything is interpreted, and a
//! save → load → save cycle reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocab;
use crate::model::{Model, ModelConfig};
use crate::optim::OptimizerConfig;
use crate::{Error, Result};

const MAGIC: &[u8; 5] = b"SCTD1";
const FORMAT_VERSION: u32 = 1;
const SHA_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Last completed optimizer step.
    pub t: u64,
    pub seed: u64,
    pub mode: String,
    pub fi: u64,
    pub lambda: f64,
    pub detach_teacher: bool,
    /// Fingerprint of the originating run config, checked on resume.
    pub config_sha256: String,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Token list in id order; makes the file self-contained for analysis.
    pub vocab: Vec<String>,
    /// (name, shape) per parameter, in block order.
    pub params: Vec<(String, Vec<usize>)>,
}

/// Everything a checkpoint stores, as plain blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub header: CheckpointHeader,
    pub params: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub importance_loss: Vec<f64>,
    pub importance_counts: Vec<u64>,
}

fn push_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn take_f64s(bytes: &[u8], pos: &mut usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let at = *pos + i * 8;
        out.push(f64::from_le_bytes(bytes[at..at + 8].try_into().expect("block bounds")));
    }
    *pos += n * 8;
    out
}

impl CheckpointData {
    fn block_lens(header: &CheckpointHeader) -> (Vec<usize>, usize) {
        let lens: Vec<usize> = header
            .params
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .collect();
        let total: usize = lens.iter().sum();
        (lens, total)
    }

    fn validate(&self) -> Result<()> {
        let (lens, _) = Self::block_lens(&self.header);
        for (blocks, what) in [(&self.params, "parameter"), (&self.m, "first-moment"),
                               (&self.v, "second-moment")] {
            if blocks.len() != lens.len() {
                return Err(Error::Contract(format!(
                    "{} {what} blocks for {} table entries",
                    blocks.len(),
                    lens.len()
                )));
            }
            for (i, b) in blocks.iter().enumerate() {
                if b.len() != lens[i] {
                    return Err(Error::Contract(format!(
                        "{what} block {i} holds {} values, table says {}",
                        b.len(),
                        lens[i]
                    )));
                }
            }
        }
        let v = self.header.vocab.len();
        if self.importance_loss.len() != v || self.importance_counts.len() != v {
            return Err(Error::Contract(format!(
                "importance table sized {}/{} against vocab {v}",
                self.importance_loss.len(),
                self.importance_counts.len()
            )));
        }
        Ok(())
    }
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<()> {
    data.validate()?;
    let header = serde_json::to_vec(&data.header)?;

    let (_, total) = CheckpointData::block_lens(&data.header);
    let v = data.header.vocab.len();
    let mut payload = Vec::with_capacity((3 * total + v) * 8 + v * 8);
    for block in data.params.iter().chain(&data.m).chain(&data.v) {
        push_f64s(&mut payload, block);
    }
    push_f64s(&mut payload, &data.importance_loss);
    for c in &data.importance_counts {
        payload.extend_from_slice(&c.to_le_bytes());
    }

    let mut hasher = Sha256::new();
    hasher.update(&header);
    hasher.update(&payload);
    let digest = hasher.finalize();

    let mut file = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len() + SHA_LEN);
    file.extend_from_slice(MAGIC);
    file.extend_from_slice(&(header.len() as u64).to_le_bytes());
    file.extend_from_slice(&header);
    file.extend_from_slice(&payload);
    file.extend_from_slice(&digest);

    // stage next to the target so the rename stays on one filesystem; a
    // crash mid-write leaves the old checkpoint intact
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &file)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path)?;
    let broken = |why: &str| Error::Integrity(format!("{}: {why}", path.display()));

    if bytes.len() < MAGIC.len() + 8 + SHA_LEN {
        return Err(broken("file too short to be a checkpoint"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        if &bytes[..4] == b"SCTD" {
            return Err(broken("unsupported checkpoint format version"));
        }
        return Err(broken("not a checkpoint file"));
    }
    let header_len =
        u64::from_le_bytes(bytes[5..13].try_into().expect("fixed slice")) as usize;
    let body_start = 13usize;
    if bytes.len() < body_start + header_len + SHA_LEN {
        return Err(broken("truncated header"));
    }
    let header_bytes = &bytes[body_start..body_start + header_len];
    let payload = &bytes[body_start + header_len..bytes.len() - SHA_LEN];
    let stored_sha = &bytes[bytes.len() - SHA_LEN..];

    let mut hasher = Sha256::new();
    hasher.update(header_bytes);
    hasher.update(payload);
    if hasher.finalize().as_slice() != stored_sha {
        return Err(broken("digest mismatch"));
    }

    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| broken(&format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(broken(&format!(
            "checkpoint version {} unsupported (this build reads {FORMAT_VERSION})",
            header.version
        )));
    }

    let (lens, total) = CheckpointData::block_lens(&header);
    let v = header.vocab.len();
    let want = (3 * total + v) * 8 + v * 8;
    if payload.len() != want {
        return Err(broken(&format!(
            "payload holds {} bytes, header implies {want}",
            payload.len()
        )));
    }

    let mut pos = 0usize;
    let mut read_blocks = || -> Vec<Vec<f64>> {
        lens.iter().map(|&n| take_f64s(payload, &mut pos, n)).collect()
    };
    let params = read_blocks();
    let m = read_blocks();
    let vmom = read_blocks();
    let importance_loss = take_f64s(payload, &mut pos, v);
    let mut importance_counts = Vec::with_capacity(v);
    for i in 0..v {
        let at = pos + i * 8;
        importance_counts
            .push(u64::from_le_bytes(payload[at..at + 8].try_into().expect("block bounds")));
    }

    Ok(CheckpointData { header, params, m, v: vmom, importance_loss, importance_counts })
}

/// Reconstructs the model and vocabulary a checkpoint describes. Parameter
/// names and shapes must match what this build of the model produces.
pub fn rebuild_model(data: &CheckpointData) -> Result<(Model, Vocab)> {
    let vocab = Vocab::from_token_list(data.header.vocab.clone())?;
    if data.header.model.vocab_size != vocab.size() {
        return Err(Error::Integrity(format!(
            "config says vocab_size {}, token list holds {}",
            data.header.model.vocab_size,
            vocab.size()
        )));
    }
    let model = Model::init(data.header.model.clone(), 0)?;
    let named = model.params.named();
    if named.len() != data.header.params.len() {
        return Err(Error::Integrity(format!(
            "checkpoint lists {} parameters, model has {}",
            data.header.params.len(),
            named.len()
        )));
    }
    for (i, (name, tensor, _)) in named.iter().enumerate() {
        let (ck_name, ck_shape) = &data.header.params[i];
        if ck_name != name || ck_shape.as_slice() != tensor.shape() {
            return Err(Error::Integrity(format!(
                "parameter {i} is {ck_name} {ck_shape:?} in the checkpoint, \
                 {name} {:?} in the model",
                tensor.shape()
            )));
        }
        tensor.set_data(&data.params[i])?;
    }
    Ok((model, vocab))
}
