//! Self-contained training checkpoints. Binary container: magic "ADNC",
//! u32 version, u64 header length, a UTF-8 JSON header (tensor table plus
//! all non-tensor state), then raw little-endian f32 payloads, each at a
//! 64-byte-aligned absolute offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::codec::{Codec, CodecSpec, LatentStats};
use crate::denoiser::{build_unet, UNetConfig, UNetParams};
use crate::error::{Error, Result};
use crate::trainer::optim::{OptimState, SchedulerState};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADNC";
pub const CHECKPOINT_VERSION: u32 = 1;
const ALIGN: usize = 64;

/// One row of the training-curve history; also the curves CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub lr: f64,
    /// SI-SDR loss weight applied this epoch: exactly 0.0 before the
    /// curriculum start epoch.
    pub sisdr_w: f64,
    pub train_total: f64,
    pub val_total: f64,
    pub l1: f64,
    pub mel: f64,
    pub sisdr_db: f64,
}

/// Everything a resumed run needs besides the tensor table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub codec_spec: CodecSpec,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub sample_rate: u32,
    pub chunk_len: usize,
    pub latent_stats: LatentStats,
    pub optim_t: u64,
    pub lr: f64,
    /// None until the scheduler has seen its first validation metric.
    pub sched_best: Option<f64>,
    pub sched_wait: usize,
    /// Completed epochs (1-based count).
    pub epoch: usize,
    /// Base seed; per-epoch shuffle RNG state derives from (seed, epoch).
    pub seed: u64,
    pub curves: Vec<CurveRow>,
    pub codec_checksum: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn codec(&self) -> Result<Codec> {
        let codec = Codec::from_named(&self.state.codec_spec, &mut |n| self.tensors.get(n).cloned())?;
        if codec.checksum() != self.state.codec_checksum {
            return Err(Error::CheckpointFormat(format!(
                "codec checksum {:016x} does not match recorded {:016x}",
                codec.checksum(),
                self.state.codec_checksum
            )));
        }
        Ok(codec)
    }

    pub fn unet_params(&self) -> Result<UNetParams> {
        let mut params = build_unet(self.state.unet, 0)?;
        let mut problem = None;
        params.for_each_mut(&mut |name, t| {
            if problem.is_some() {
                return;
            }
            match self.tensors.get(&name) {
                Some(src) if src.shape == t.shape => *t = src.clone(),
                Some(src) => {
                    problem = Some(format!("tensor {name} has shape {:?}, expected {:?}", src.shape, t.shape))
                }
                None => problem = Some(format!("missing tensor {name}")),
            }
        });
        match problem {
            Some(p) => Err(Error::CheckpointFormat(p)),
            None => Ok(params),
        }
    }

    pub fn optim_state(&self, params: &UNetParams) -> Result<OptimState<f32>> {
        let named = params.named_params();
        let shapes: Vec<Vec<usize>> = named.iter().map(|(_, t)| t.shape.clone()).collect();
        let mut optim = OptimState::new(&shapes, self.state.train.optim)?;
        for (i, (name, _)) in named.iter().enumerate() {
            for (prefix, dst) in [("optim.m", &mut optim.m[i]), ("optim.v", &mut optim.v[i])] {
                let key = format!("{prefix}.{name}");
                let src = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor {key}")))?;
                if src.shape != dst.shape {
                    return Err(Error::CheckpointFormat(format!(
                        "tensor {key} has shape {:?}, expected {:?}",
                        src.shape, dst.shape
                    )));
                }
                *dst = src.clone();
            }
        }
        optim.t = self.state.optim_t;
        optim.lr = self.state.lr;
        Ok(optim)
    }

    pub fn scheduler_state(&self) -> Result<SchedulerState> {
        let mut sched = SchedulerState::new(self.state.train.plateau)?;
        sched.best = self.state.sched_best.unwrap_or(f64::INFINITY);
        sched.epochs_since_improvement = self.state.sched_wait;
        Ok(sched)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, TensorEntry>,
    state: TrainState,
}

fn align_up(x: usize) -> usize {
    (x + ALIGN - 1) & !(ALIGN - 1)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let render = |offsets: &BTreeMap<String, (u64, u64)>| -> Result<String> {
        let tensors = ckpt
            .tensors
            .iter()
            .map(|(name, t)| {
                let (offset, length) = offsets[name];
                (name.clone(), TensorEntry { shape: t.shape.clone(), dtype: "f32".into(), offset, length })
            })
            .collect();
        Ok(serde_json::to_string(&Header { tensors, state: ckpt.state.clone() })?)
    };

    // Size the header with max-width placeholders, then fill in the real
    // offsets and pad the JSON with spaces back to the measured length.
    let mut offsets: BTreeMap<String, (u64, u64)> =
        ckpt.tensors.keys().map(|k| (k.clone(), (u64::MAX, u64::MAX))).collect();
    let header_len = render(&offsets)?.len();
    let payload_base = align_up(16 + header_len);
    let mut off = payload_base;
    for (name, t) in &ckpt.tensors {
        off = align_up(off);
        offsets.insert(name.clone(), (off as u64, (t.numel() * 4) as u64));
        off += t.numel() * 4;
    }
    let mut header = render(&offsets)?.into_bytes();
    debug_assert!(header.len() <= header_len);
    header.resize(header_len, b' ');

    let mut bytes = Vec::with_capacity(off);
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_len as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (name, t) in &ckpt.tensors {
        bytes.resize(offsets[name].0 as usize, 0);
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |m: String| Error::CheckpointFormat(format!("{}: {m}", path.display()));
    if bytes.len() < 16 {
        return Err(fail("file too short for container header".into()));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let Some(header_end) = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()) else {
        return Err(fail("truncated JSON header".into()));
    };
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| fail(format!("header parse: {e}")))?;

    let mut tensors = BTreeMap::new();
    for (name, entry) in header.tensors {
        if entry.dtype != "f32" {
            return Err(fail(format!("tensor {name} has unsupported dtype {}", entry.dtype)));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.length as usize != numel * 4 {
            return Err(fail(format!("tensor {name} length {} does not match shape {:?}", entry.length, entry.shape)));
        }
        let start = entry.offset as usize;
        let Some(end) = start.checked_add(entry.length as usize).filter(|&e| e <= bytes.len()) else {
            return Err(fail(format!("truncated payload for tensor {name}")));
        };
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(entry.shape, data));
    }
    Ok(Checkpoint { state: header.state, tensors })
}
