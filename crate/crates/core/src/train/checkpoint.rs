//! Binary checkpoints.
//!
//! Layout: the magic bytes `SEASSCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! every array as raw little-endian floats in manifest order. Offsets in the
//! manifest are relative to the first byte after the manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{OptimizerConfig, Schedule, TrainState};
use crate::io::write_atomic;
use crate::model::ModelConfig;
use crate::tensor::{Matrix, ParamGrads, ParamStore, Real, DTYPE};

pub const MAGIC: &[u8; 9] = b"SEASSCKPT";
pub const VERSION: u32 = 1;

const REAL_BYTES: usize = std::mem::size_of::<Real>();

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("array {name} has shape {got} in the checkpoint, expected {expected}")]
    ShapeMismatch { name: String, expected: String, got: String },
    #[error("checkpoint stores {found} values, this build uses {expected}")]
    Dtype { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    optimizer: OptimizerConfig,
    seed: u64,
    dtype: String,
    step: u64,
    alpha: f64,
    schedule: Schedule,
    arrays: Vec<ArrayEntry>,
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub params: ParamStore,
    pub state: TrainState,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam_m/";
const MOMENT2: &str = "adam_v/";

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut arrays = Vec::new();
    let mut data: Vec<u8> = Vec::with_capacity(3 * ckpt.params.numel() * REAL_BYTES);
    let groups: [(&str, Vec<&Matrix>); 3] = [
        (PARAM, ckpt.params.iter().map(|(_, _, m)| m).collect()),
        (MOMENT1, ckpt.state.m.iter().collect()),
        (MOMENT2, ckpt.state.v.iter().collect()),
    ];
    for (prefix, mats) in groups {
        for ((_, name, _), m) in ckpt.params.iter().zip(mats) {
            arrays.push(ArrayEntry {
                name: format!("{prefix}{name}"),
                rows: m.rows(),
                cols: m.cols(),
                offset: data.len(),
            });
            for x in m.data() {
                data.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        config: ckpt.config.clone(),
        optimizer: ckpt.optimizer.clone(),
        seed: ckpt.seed,
        dtype: DTYPE.to_string(),
        step: ckpt.state.step,
        alpha: ckpt.state.schedule.alpha,
        schedule: ckpt.state.schedule.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Corrupt(format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn read_array(data: &[u8], e: &ArrayEntry) -> Result<Matrix, CheckpointError> {
    let len = e.rows.checked_mul(e.cols).and_then(|n| n.checked_mul(REAL_BYTES));
    let end = len.and_then(|l| e.offset.checked_add(l));
    let Some(end) = end.filter(|end| *end <= data.len()) else {
        return Err(CheckpointError::Corrupt(format!("array {} runs past the end of the file", e.name)));
    };
    let values = data[e.offset..end]
        .chunks_exact(REAL_BYTES)
        .map(|c| Real::from_le_bytes(c.try_into().expect("chunk width")))
        .collect();
    Matrix::from_vec(e.rows, e.cols, values).map_err(|err| CheckpointError::Corrupt(err.to_string()))
}

/// Parses a checkpoint. With `expected`, every array shape is checked
/// against that configuration's layout.
pub fn from_bytes(mut bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    bytes = &bytes[MAGIC.len()..];
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mlen = u64::from_le_bytes(take(&mut bytes, 8, "manifest length")?.try_into().expect("8 bytes"));
    let mlen = usize::try_from(mlen).map_err(|_| CheckpointError::Corrupt("manifest length overflows".into()))?;
    let manifest: Manifest = serde_json::from_slice(take(&mut bytes, mlen, "manifest")?)
        .map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
    if manifest.dtype != DTYPE {
        return Err(CheckpointError::Dtype {
            found: manifest.dtype,
            expected: DTYPE.to_string(),
        });
    }
    let data = bytes;

    let layout = expected.unwrap_or(&manifest.config).layout();
    if manifest.arrays.len() != 3 * layout.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} arrays listed, expected {}",
            manifest.arrays.len(),
            3 * layout.len()
        )));
    }
    let mut params = ParamStore::new();
    let mut moments = [Vec::new(), Vec::new()];
    for (k, prefix) in [PARAM, MOMENT1, MOMENT2].into_iter().enumerate() {
        let entries = &manifest.arrays[k * layout.len()..(k + 1) * layout.len()];
        for ((name, rows, cols), e) in layout.iter().zip(entries) {
            let full = format!("{prefix}{name}");
            if e.name != full {
                return Err(CheckpointError::Corrupt(format!("expected array {full}, found {}", e.name)));
            }
            if (e.rows, e.cols) != (*rows, *cols) {
                return Err(CheckpointError::ShapeMismatch {
                    name: full,
                    expected: format!("{rows}x{cols}"),
                    got: format!("{}x{}", e.rows, e.cols),
                });
            }
            let m = read_array(data, e)?;
            if k == 0 {
                params.register(name.clone(), m);
            } else {
                moments[k - 1].push(m);
            }
        }
    }
    let [m, v] = moments;
    let wrap = |mats| ParamGrads::from_matrices(&params, mats).map_err(|e| CheckpointError::Corrupt(e.to_string()));
    let state = TrainState {
        step: manifest.step,
        m: wrap(m)?,
        v: wrap(v)?,
        schedule: Schedule {
            alpha: manifest.alpha,
            ..manifest.schedule
        },
    };
    Ok(Checkpoint {
        config: expected.cloned().unwrap_or(manifest.config),
        optimizer: manifest.optimizer,
        seed: manifest.seed,
        params,
        state,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &to_bytes(ckpt)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    load_checkpoint_as(path, None)
}

/// Loads a checkpoint, checking its arrays against `expected` when given.
pub fn load_checkpoint_as(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes, expected)
}
