//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, the JSON
//! header, raw little-endian payloads, then a SHA-256 digest of everything
//! before it. Parameter and momentum tensors are `f32`; pseudo-label maps
//! are raw bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Phase, RoundSummary, RunConfig, TrainState};
use crate::dataio::SegmentationMap;
use crate::ensemble::MetaWeights;
use crate::error::{Error, Result};
use crate::nets::{init_params, NetParams};
use crate::translate::AffineTranslator;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EUDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PseudoEntry {
    count: usize,
    height: usize,
    width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    phase: Phase,
    iteration: usize,
    metrics_lines: usize,
    translator: serde_json::Value,
    meta: Option<MetaWeights>,
    summaries: Vec<RoundSummary>,
    /// Batches are drawn from counters derived from `config.seed`, so this
    /// seed plus `phase`/`iteration` is the whole sampler state.
    sampler_seed: u64,
    tensors: Vec<TensorEntry>,
    pseudo: PseudoEntry,
}

fn tensor_entries(params: &NetParams<f32>, prefix: &str) -> Vec<(TensorEntry, Vec<f32>)> {
    let mut out = Vec::new();
    for (set_name, set) in params.sets() {
        for (l, layer) in set.layers.iter().enumerate() {
            for (kind, t) in [("weight", &layer.weight), ("bias", &layer.bias)] {
                out.push((
                    TensorEntry {
                        name: format!("{prefix}{set_name}.{l}.{kind}"),
                        len: t.len(),
                    },
                    t.clone(),
                ));
            }
        }
    }
    out
}

/// Header and payload bytes for `state`.
pub(crate) fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors = tensor_entries(&state.params, "");
    tensors.extend(tensor_entries(&state.velocity, "momentum."));
    let (height, width) = state.pseudo.first().map_or((0, 0), |m| (m.height, m.width));
    if state.pseudo.iter().any(|m| (m.height, m.width) != (height, width)) {
        return Err(Error::Checkpoint("pseudo-label maps differ in size".into()));
    }
    let header = Header {
        config: state.config.clone(),
        phase: state.phase,
        iteration: state.iteration,
        metrics_lines: state.metrics_lines,
        translator: serde_json::json!({ "kind": "affine", "params": state.translator }),
        meta: state.meta.clone(),
        summaries: state.summaries.clone(),
        sampler_seed: state.config.seed,
        tensors: tensors.iter().map(|(e, _)| e.clone()).collect(),
        pseudo: PseudoEntry {
            count: state.pseudo.len(),
            height,
            width,
        },
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(PREFIX_LEN + header.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in &tensors {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for m in &state.pseudo {
        buf.extend_from_slice(&m.data);
    }
    Ok(seal(buf))
}

/// Appends the digest.
pub(crate) fn seal(mut buf: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated payload while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < PREFIX_LEN + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch, file is corrupted".into()));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let mut r = Reader { bytes: body, pos: PREFIX_LEN };
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    header.config.validate()?;

    let k = header.config.net.num_classes;
    let template = init_params::<f32>(&header.config.net, 0)?.zeroed();
    let mut expected = tensor_entries(&template, "");
    expected.extend(tensor_entries(&template, "momentum."));
    if header.tensors.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "tensors: header lists {} tensors, the network config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (got, (want, _)) in header.tensors.iter().zip(&expected) {
        if got != want {
            return Err(Error::Checkpoint(format!(
                "tensor {} holds {} values but net config (num_classes = {k}) expects {} named {}",
                got.name, got.len, want.len, want.name
            )));
        }
    }
    if let Some(meta) = &header.meta {
        if meta.classes() != k {
            return Err(Error::Checkpoint(format!(
                "num_classes mismatch: meta weights cover {} classes, net config has {k}",
                meta.classes()
            )));
        }
    }

    let mut params = template.clone();
    let mut velocity = template;
    for target in [&mut params, &mut velocity] {
        for set in target.sets_mut() {
            for t in set.tensors_mut() {
                let raw = r.take(t.len() * 4, "tensor payload")?;
                for (v, b) in t.iter_mut().zip(raw.chunks_exact(4)) {
                    *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
                }
            }
        }
    }
    let p = &header.pseudo;
    let mut pseudo = Vec::with_capacity(p.count);
    for _ in 0..p.count {
        let data = r.take(p.height * p.width, "pseudo-labels")?.to_vec();
        pseudo.push(SegmentationMap::new(p.height, p.width, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after payload", body.len() - r.pos)));
    }
    Ok(TrainState {
        translator: AffineTranslator::from_json(&header.translator)?,
        config: header.config,
        params,
        velocity,
        meta: header.meta,
        phase: header.phase,
        iteration: header.iteration,
        pseudo,
        metrics_lines: header.metrics_lines,
        summaries: header.summaries,
    })
}
