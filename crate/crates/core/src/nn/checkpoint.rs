//! Binary checkpoints.
//!
//! Layout: `TFCK`, format version (u32 LE), model-spec digest (32 bytes),
//! JSON header length (u32 LE) and header, then little-endian `f32` blobs
//! (parameters, Adam first moments, Adam second moments, best-so-far
//! parameters if any), each in declared tensor order, and finally a SHA-256
//! of all preceding bytes.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{EpochRecord, TrainProgress};
use super::{ModelSpec, ModelState, NnError, Result};

const MAGIC: &[u8; 4] = b"TFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// u128 does not fit a JSON number portably.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<(String, Vec<usize>)>,
    step: u64,
    epoch: u32,
    seed: u64,
    version: u64,
    frozen: Vec<bool>,
    rng: RngState,
    history: Vec<EpochRecord>,
    best_val_loss: Option<f64>,
    best_epoch: Option<u32>,
    has_best: bool,
    bad_epochs: u32,
    stopped_early: bool,
    finished: bool,
}

fn corrupt(path: &Path, m: impl ToString) -> NnError {
    NnError::CorruptCheckpoint {
        path: path.display().to_string(),
        message: m.to_string(),
    }
}

fn io(path: &Path, e: std::io::Error) -> NnError {
    NnError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn put_tensors(out: &mut Vec<u8>, ts: &[Vec<f32>]) {
    for t in ts {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_checkpoint(state: &ModelState<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rng = &state.rng;
    let header = Header {
        spec: state.spec.clone(),
        tensors: state.spec.param_shapes(),
        step: state.step,
        epoch: state.epoch,
        seed: state.seed,
        version: state.version,
        frozen: state.frozen.clone(),
        rng: RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        },
        history: state.progress.history.clone(),
        best_val_loss: state.progress.best_val_loss,
        best_epoch: state.progress.best_epoch,
        has_best: state.progress.best_params.is_some(),
        bad_epochs: state.progress.bad_epochs,
        stopped_early: state.progress.stopped_early,
        finished: state.progress.finished,
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(path, e))?;
    let mut out = Vec::with_capacity(4 * 4 * state.param_count() + json.len() + 128);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.spec.digest());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    put_tensors(&mut out, &state.params);
    put_tensors(&mut out, &state.adam_m);
    put_tensors(&mut out, &state.adam_v);
    if let Some(best) = &state.progress.best_params {
        put_tensors(&mut out, best);
    }
    let sum: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&sum);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            io(path, e)
        })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(self.path, "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensors(&mut self, shapes: &[(String, Vec<usize>)]) -> Result<Vec<Vec<f32>>> {
        shapes
            .iter()
            .map(|(_, s)| {
                let n: usize = s.iter().product();
                let bytes = self.take(4 * n)?;
                Ok(bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect())
            })
            .collect()
    }
}

fn read_verified(path: &Path) -> Result<(Vec<u8>, Header, usize)> {
    let buf = std::fs::read(path).map_err(|e| io(path, e))?;
    if buf.len() < 4 + 4 + 32 + 4 + 32 || &buf[..4] != MAGIC {
        return Err(corrupt(path, "not a checkpoint"));
    }
    let (body, sum) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(corrupt(path, "checksum mismatch"));
    }
    let mut cur = Cursor { buf: body, pos: 4, path };
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::VersionMismatch {
            path: path.display().to_string(),
            expected: format!("format {CHECKPOINT_VERSION}"),
            found: format!("format {version}"),
        });
    }
    let digest = cur.take(32)?.to_vec();
    let hlen = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen)?).map_err(|e| corrupt(path, e))?;
    if header.spec.digest().as_slice() != digest.as_slice() || header.tensors != header.spec.param_shapes() {
        return Err(corrupt(path, "header does not match its spec digest"));
    }
    let pos = cur.pos;
    Ok((buf, header, pos))
}

/// Model spec stored in a checkpoint.
pub fn read_checkpoint_spec(path: impl AsRef<Path>) -> Result<ModelSpec> {
    Ok(read_verified(path.as_ref())?.1.spec)
}

/// Loads a checkpoint, refusing one written for a different model spec.
pub fn load_checkpoint(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<ModelState<f32>> {
    let path = path.as_ref();
    let (buf, h, pos) = read_verified(path)?;
    if h.spec.digest() != spec.digest() {
        return Err(NnError::VersionMismatch {
            path: path.display().to_string(),
            expected: spec.digest_hex(),
            found: h.spec.digest_hex(),
        });
    }
    let body = &buf[..buf.len() - 32];
    let mut cur = Cursor { buf: body, pos, path };
    let params = cur.tensors(&h.tensors)?;
    let adam_m = cur.tensors(&h.tensors)?;
    let adam_v = cur.tensors(&h.tensors)?;
    let best_params = if h.has_best { Some(cur.tensors(&h.tensors)?) } else { None };
    if cur.pos != body.len() {
        return Err(corrupt(path, "trailing bytes"));
    }
    if h.frozen.len() != h.spec.layer_count() {
        return Err(corrupt(path, "freeze mask length"));
    }
    let seed: [u8; 32] = hex::decode(&h.rng.seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| corrupt(path, "rng seed"))?;
    let word_pos: u128 = h.rng.word_pos.parse().map_err(|_| corrupt(path, "rng position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(h.rng.stream);
    rng.set_word_pos(word_pos);
    Ok(ModelState {
        spec: h.spec,
        params,
        adam_m,
        adam_v,
        step: h.step,
        frozen: h.frozen,
        epoch: h.epoch,
        seed: h.seed,
        rng,
        version: h.version,
        progress: TrainProgress {
            history: h.history,
            best_val_loss: h.best_val_loss,
            best_epoch: h.best_epoch,
            best_params,
            bad_epochs: h.bad_epochs,
            stopped_early: h.stopped_early,
            finished: h.finished,
        },
    })
}
