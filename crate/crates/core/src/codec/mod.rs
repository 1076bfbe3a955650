//! The frozen codec boundary: waveform -> latent -> waveform. Two
//! implementations share one interface — an exact frame-packing codec (for
//! oracle-grade end-to-end tests) and a small strided-conv autoencoder
//! (lossy, pretrained, then frozen). Decoding is differentiable with respect
//! to the latent even when parameters are frozen, because the training
//! objectives live in the waveform domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::losses;
use crate::real::{r, Real};
use crate::spectral::MelConfig;
use crate::trainer::{AdamWParams, OptimState};

/// Codec-encoded representation of one waveform: channels x frames.
#[derive(Debug, Clone)]
pub struct Latent {
    pub values: Tensor<f32>,
    pub hop: usize,
    pub original_len: usize,
}

impl Latent {
    pub fn channels(&self) -> usize {
        self.values.shape[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.shape.len() != 2 {
            return Err(Error::shape("latent", format!("expected [C,F], got {:?}", self.values.shape)));
        }
        if self.hop == 0 || self.original_len == 0 {
            return Err(Error::InvalidArg("latent hop and original_len must be positive".into()));
        }
        let want = self.original_len.div_ceil(self.hop);
        if self.frames() != want {
            return Err(Error::shape(
                "latent",
                format!("{} frames, expected ceil({}/{}) = {want}", self.frames(), self.original_len, self.hop),
            ));
        }
        if self.values.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "latent".into() });
        }
        Ok(())
    }
}

pub const LATENT_STD_FLOOR: f32 = 1e-5;

/// Per-channel affine statistics for latent normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub fn fit_latent_stats(latents: &[Latent]) -> Result<LatentStats> {
    let Some(first) = latents.first() else {
        return Err(Error::InvalidArg("fit_latent_stats needs at least one latent".into()));
    };
    let c = first.channels();
    let mut sum = vec![0.0f64; c];
    let mut sum_sq = vec![0.0f64; c];
    let mut count = 0usize;
    for lat in latents {
        if lat.channels() != c {
            return Err(Error::shape("fit_latent_stats", format!("{} channels vs {c}", lat.channels())));
        }
        let f = lat.frames();
        for ci in 0..c {
            for &v in &lat.values.data[ci * f..(ci + 1) * f] {
                sum[ci] += v as f64;
                sum_sq[ci] += v as f64 * v as f64;
            }
        }
        count += f;
    }
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ci in 0..c {
        let m = sum[ci] / count as f64;
        let var = (sum_sq[ci] / count as f64 - m * m).max(0.0);
        let s = var.sqrt() as f32;
        if s < LATENT_STD_FLOOR {
            log::warn!("latent channel {ci} has near-zero variance; std clamped to {LATENT_STD_FLOOR}");
        }
        mean.push(m as f32);
        std.push(s.max(LATENT_STD_FLOOR));
    }
    Ok(LatentStats { mean, std })
}

impl LatentStats {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::shape(
                "latent_stats",
                format!("stats for {} channels, latent has {channels}", self.mean.len()),
            ));
        }
        if self.std.iter().any(|&s| !(s >= LATENT_STD_FLOOR)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArg("latent stats must be finite with std >= 1e-5".into()));
        }
        Ok(())
    }

    pub fn normalize(&self, lat: &Latent) -> Result<Latent> {
        self.validate(lat.channels())?;
        self.affine(lat, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, lat: &Latent) -> Result<Latent> {
        self.validate(lat.channels())?;
        self.affine(lat, |v, m, s| v * s + m)
    }

    fn affine(&self, lat: &Latent, f: impl Fn(f32, f32, f32) -> f32) -> Result<Latent> {
        let frames = lat.frames();
        let mut out = lat.clone();
        for ci in 0..lat.channels() {
            for v in &mut out.values.data[ci * frames..(ci + 1) * frames] {
                *v = f(*v, self.mean[ci], self.std[ci]);
            }
        }
        Ok(out)
    }

    /// In-graph inverse of `normalize` on a [B,C,F] node: z*std + mean.
    pub fn denormalize_graph<F: Real>(&self, g: &mut Graph<F>, z: NodeId) -> Result<NodeId> {
        let scale = g.constant(Tensor::new(vec![self.std.len()], self.std.iter().map(|&v| r::<F>(v as f64)).collect()));
        let shift = g.constant(Tensor::new(vec![self.mean.len()], self.mean.iter().map(|&v| r::<F>(v as f64)).collect()));
        g.channel_affine(z, scale, shift)
    }

    pub fn normalize_graph<F: Real>(&self, g: &mut Graph<F>, z: NodeId) -> Result<NodeId> {
        let scale = g.constant(Tensor::new(
            vec![self.std.len()],
            self.std.iter().map(|&v| r::<F>(1.0 / v as f64)).collect(),
        ));
        let shift = g.constant(Tensor::new(
            vec![self.mean.len()],
            self.mean.iter().zip(&self.std).map(|(&m, &s)| r::<F>(-(m as f64) / s as f64)).collect(),
        ));
        g.channel_affine(z, scale, shift)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    IdentityFrame,
    ToyConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RvqSpec {
    pub stages: usize,
    pub codebook_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecSpec {
    pub kind: CodecKind,
    pub c_lat: usize,
    pub hop: usize,
    pub rvq: Option<RvqSpec>,
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
    pub stride: usize,
    pub pad: usize,
}

pub const TOY_CONV_CHANNELS: [usize; 4] = [1, 16, 32, 32];
pub const TOY_CONV_KERNEL: usize = 8;
pub const TOY_CONV_STRIDE: usize = 4;
pub const TOY_CONV_PAD: usize = 2;

/// Strided-conv autoencoder: 1 -> 16 -> 32 -> 32 channels, kernel 8, stride
/// 4 per layer (overall hop 64), SiLU between layers, linear final layers.
#[derive(Debug, Clone)]
pub struct ToyConvCodec {
    pub enc: Vec<ConvLayer>,
    pub dec: Vec<ConvLayer>,
    pub frozen: bool,
    pub rvq: Option<Rvq>,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

impl ToyConvCodec {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for i in 0..3 {
            let (ci, co) = (TOY_CONV_CHANNELS[i], TOY_CONV_CHANNELS[i + 1]);
            let bound = 1.0 / ((ci * TOY_CONV_KERNEL) as f32).sqrt();
            enc.push(ConvLayer {
                w: uniform_tensor(&mut rng, vec![co, ci, TOY_CONV_KERNEL], bound),
                b: uniform_tensor(&mut rng, vec![co], bound),
                stride: TOY_CONV_STRIDE,
                pad: TOY_CONV_PAD,
            });
        }
        for i in (0..3).rev() {
            let (ci, co) = (TOY_CONV_CHANNELS[i + 1], TOY_CONV_CHANNELS[i]);
            let bound = 1.0 / ((ci * TOY_CONV_KERNEL) as f32).sqrt();
            dec.push(ConvLayer {
                w: uniform_tensor(&mut rng, vec![ci, co, TOY_CONV_KERNEL], bound),
                b: uniform_tensor(&mut rng, vec![co], bound),
                stride: TOY_CONV_STRIDE,
                pad: TOY_CONV_PAD,
            });
        }
        ToyConvCodec { enc, dec, frozen: false, rvq: None }
    }

    pub fn hop() -> usize {
        TOY_CONV_STRIDE.pow(3)
    }
}

/// The pluggable codec. Encode/decode are pure; parameters are shared freely
/// across threads once frozen.
#[derive(Debug, Clone)]
pub enum Codec {
    IdentityFrame { hop: usize },
    ToyConv(Box<ToyConvCodec>),
}

impl Codec {
    pub fn identity(hop: usize) -> Result<Self> {
        if hop == 0 {
            return Err(Error::Config("identity codec hop must be >= 1".into()));
        }
        Ok(Codec::IdentityFrame { hop })
    }

    pub fn spec(&self) -> CodecSpec {
        match self {
            Codec::IdentityFrame { hop } => {
                CodecSpec { kind: CodecKind::IdentityFrame, c_lat: *hop, hop: *hop, rvq: None }
            }
            Codec::ToyConv(c) => CodecSpec {
                kind: CodecKind::ToyConv,
                c_lat: *TOY_CONV_CHANNELS.last().unwrap(),
                hop: ToyConvCodec::hop(),
                rvq: c.rvq.as_ref().map(|r| r.spec()),
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.spec().c_lat
    }

    pub fn hop(&self) -> usize {
        self.spec().hop
    }

    pub fn encode(&self, samples: &[f32]) -> Result<Latent> {
        if samples.is_empty() {
            return Err(Error::InputTooShort("encode on empty waveform".into()));
        }
        match self {
            Codec::IdentityFrame { hop } => {
                let frames = samples.len().div_ceil(*hop);
                let mut data = vec![0.0f32; hop * frames];
                for (ti, &v) in samples.iter().enumerate() {
                    data[(ti % hop) * frames + ti / hop] = v;
                }
                Ok(Latent {
                    values: Tensor::new(vec![*hop, frames], data),
                    hop: *hop,
                    original_len: samples.len(),
                })
            }
            Codec::ToyConv(_) => {
                let mut g = Graph::<f32>::new();
                let x = g.constant(Tensor::new(vec![1, 1, samples.len()], samples.to_vec()));
                let z = self.encode_graph(&mut g, x)?;
                let t = g.value(z);
                let (c, f) = (t.shape[1], t.shape[2]);
                Ok(Latent {
                    values: Tensor::new(vec![c, f], t.data.clone()),
                    hop: self.hop(),
                    original_len: samples.len(),
                })
            }
        }
    }

    pub fn decode(&self, lat: &Latent) -> Result<Vec<f32>> {
        lat.validate()?;
        match self {
            Codec::IdentityFrame { hop } => {
                if lat.hop != *hop || lat.channels() != *hop {
                    return Err(Error::shape("decode", format!("latent hop {} vs codec hop {hop}", lat.hop)));
                }
                let frames = lat.frames();
                let out = (0..lat.original_len)
                    .map(|ti| lat.values.data[(ti % hop) * frames + ti / hop])
                    .collect();
                Ok(out)
            }
            Codec::ToyConv(_) => {
                let mut g = Graph::<f32>::new();
                let (c, f) = (lat.channels(), lat.frames());
                let z = g.constant(Tensor::new(vec![1, c, f], lat.values.data.clone()));
                let y = self.decode_graph(&mut g, z, lat.original_len)?;
                Ok(g.value(y).data.clone())
            }
        }
    }

    /// Differentiable encoder over a [B,1,T] node; parameters enter the graph
    /// as constants (no gradient is ever produced for them here).
    pub fn encode_graph<F: Real>(&self, g: &mut Graph<F>, x: NodeId) -> Result<NodeId> {
        let t = match g.value(x).shape.as_slice() {
            [_, 1, t] => *t,
            s => return Err(Error::shape("encode_graph", format!("expected [B,1,T], got {s:?}"))),
        };
        match self {
            Codec::IdentityFrame { hop } => g.wave_to_frames(x, *hop),
            Codec::ToyConv(c) => {
                let hop = ToyConvCodec::hop();
                let pad = (hop - t % hop) % hop;
                let mut h = if pad > 0 { g.pad_time(x, 0, pad)? } else { x };
                for (i, layer) in c.enc.iter().enumerate() {
                    let w = g.constant(layer.w.map(|v| r::<F>(v as f64)));
                    let b = g.constant(layer.b.map(|v| r::<F>(v as f64)));
                    h = g.conv1d(h, w, Some(b), layer.stride, layer.pad)?;
                    if i + 1 < c.enc.len() {
                        h = g.silu(h);
                    }
                }
                Ok(h)
            }
        }
    }

    /// Differentiable decoder over a [B,C,F] node, cropped to `original_len`.
    /// Gradients flow into the latent; frozen parameters receive none.
    pub fn decode_graph<F: Real>(&self, g: &mut Graph<F>, z: NodeId, original_len: usize) -> Result<NodeId> {
        let (c, f) = match g.value(z).shape.as_slice() {
            [_, c, f] => (*c, *f),
            s => return Err(Error::shape("decode_graph", format!("expected [B,C,F], got {s:?}"))),
        };
        if c != self.channels() {
            return Err(Error::shape("decode_graph", format!("{c} latent channels, codec has {}", self.channels())));
        }
        if original_len == 0 || original_len.div_ceil(self.hop()) != f {
            return Err(Error::shape(
                "decode_graph",
                format!("original_len {original_len} inconsistent with {f} frames of hop {}", self.hop()),
            ));
        }
        match self {
            Codec::IdentityFrame { .. } => g.frames_to_wave(z, original_len),
            Codec::ToyConv(codec) => {
                let mut h = z;
                for (i, layer) in codec.dec.iter().enumerate() {
                    let w = g.constant(layer.w.map(|v| r::<F>(v as f64)));
                    let b = g.constant(layer.b.map(|v| r::<F>(v as f64)));
                    h = g.conv_transpose1d(h, w, Some(b), layer.stride, layer.pad)?;
                    if i + 1 < codec.dec.len() {
                        h = g.silu(h);
                    }
                }
                g.crop_time(h, 0, original_len)
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        match self {
            Codec::IdentityFrame { .. } => Vec::new(),
            Codec::ToyConv(c) => {
                let mut out = Vec::new();
                for (i, l) in c.enc.iter().enumerate() {
                    out.push((format!("codec.enc.{i}.w"), &l.w));
                    out.push((format!("codec.enc.{i}.b"), &l.b));
                }
                for (i, l) in c.dec.iter().enumerate() {
                    out.push((format!("codec.dec.{i}.w"), &l.w));
                    out.push((format!("codec.dec.{i}.b"), &l.b));
                }
                if let Some(rvq) = &c.rvq {
                    for (i, cb) in rvq.codebooks.iter().enumerate() {
                        out.push((format!("codec.rvq.{i}"), cb));
                    }
                }
                out
            }
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        match self {
            Codec::IdentityFrame { .. } => Vec::new(),
            Codec::ToyConv(c) => {
                let mut out = Vec::new();
                for (i, l) in c.enc.iter_mut().enumerate() {
                    out.push((format!("codec.enc.{i}.w"), &mut l.w));
                    out.push((format!("codec.enc.{i}.b"), &mut l.b));
                }
                for (i, l) in c.dec.iter_mut().enumerate() {
                    out.push((format!("codec.dec.{i}.w"), &mut l.w));
                    out.push((format!("codec.dec.{i}.b"), &mut l.b));
                }
                if let Some(rvq) = &mut c.rvq {
                    for (i, cb) in rvq.codebooks.iter_mut().enumerate() {
                        out.push((format!("codec.rvq.{i}"), cb));
                    }
                }
                out
            }
        }
    }

    /// Rebuild a frozen codec from its spec and a named-tensor lookup
    /// (checkpoint loading). Every parameter the spec implies must be
    /// present with the right shape.
    pub fn from_named(spec: &CodecSpec, get: &mut impl FnMut(&str) -> Option<Tensor<f32>>) -> Result<Codec> {
        let mut codec = match spec.kind {
            CodecKind::IdentityFrame => {
                if spec.c_lat != spec.hop {
                    return Err(Error::Config(format!(
                        "identity codec spec with c_lat {} != hop {}",
                        spec.c_lat, spec.hop
                    )));
                }
                return Codec::identity(spec.hop);
            }
            CodecKind::ToyConv => {
                let mut c = ToyConvCodec::new(0);
                c.frozen = true;
                if let Some(rq) = &spec.rvq {
                    if rq.stages == 0 || rq.codebook_size == 0 {
                        return Err(Error::Config("rvq spec with zero stages or entries".into()));
                    }
                    c.rvq = Some(Rvq {
                        codebooks: vec![Tensor::zeros(vec![rq.codebook_size, spec.c_lat]); rq.stages],
                    });
                }
                Codec::ToyConv(Box::new(c))
            }
        };
        for (name, t) in codec.named_params_mut() {
            let src = get(&name).ok_or_else(|| Error::CheckpointFormat(format!("missing tensor {name}")))?;
            if src.shape != t.shape {
                return Err(Error::CheckpointFormat(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape, t.shape
                )));
            }
            *t = src;
        }
        Ok(codec)
    }

    /// FNV-1a over every parameter byte, used to assert the freeze contract
    /// (identical before and after any denoiser training run).
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for (name, t) in self.named_params() {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in &t.data {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct Rvq {
    /// Each codebook is [codebook_size, c_lat]; entry 0 is pinned to the zero
    /// vector so a quantization stage can never increase the residual norm.
    pub codebooks: Vec<Tensor<f32>>,
}

impl Rvq {
    pub fn spec(&self) -> RvqSpec {
        RvqSpec {
            stages: self.codebooks.len(),
            codebook_size: self.codebooks.first().map_or(0, |c| c.shape[0]),
        }
    }

    pub fn validate(&self, c_lat: usize) -> Result<()> {
        if self.codebooks.is_empty() {
            return Err(Error::Config("rvq needs at least one codebook".into()));
        }
        for (i, cb) in self.codebooks.iter().enumerate() {
            if cb.shape.len() != 2 || cb.shape[1] != c_lat || cb.shape[0] == 0 {
                return Err(Error::shape("rvq", format!("codebook {i} shape {:?}, expected [K,{c_lat}]", cb.shape)));
            }
            if cb.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "rvq codebook".into() });
            }
        }
        Ok(())
    }

    /// Quantize every frame column of a latent; returns per-frame stage codes
    /// alongside the quantized latent.
    pub fn quantize_latent(&self, lat: &Latent) -> Result<(Vec<Vec<usize>>, Latent)> {
        self.validate(lat.channels())?;
        let (c, frames) = (lat.channels(), lat.frames());
        let mut out = lat.clone();
        let mut codes = Vec::with_capacity(frames);
        let mut col = vec![0.0f32; c];
        for f in 0..frames {
            for ci in 0..c {
                col[ci] = lat.values.data[ci * frames + f];
            }
            let (stage_codes, q) = rvq_quantize(&col, &self.codebooks)?;
            for ci in 0..c {
                out.values.data[ci * frames + f] = q[ci];
            }
            codes.push(stage_codes);
        }
        Ok((codes, out))
    }
}

/// Residual vector quantization of one frame vector: each stage picks the
/// nearest codebook entry (Euclidean, lowest index on ties) to the running
/// residual and subtracts it.
pub fn rvq_quantize(v: &[f32], codebooks: &[Tensor<f32>]) -> Result<(Vec<usize>, Vec<f32>)> {
    if codebooks.is_empty() {
        return Err(Error::Config("rvq_quantize with no codebooks".into()));
    }
    let mut residual: Vec<f32> = v.to_vec();
    let mut quantized = vec![0.0f32; v.len()];
    let mut codes = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        if cb.shape.len() != 2 || cb.shape[1] != v.len() {
            return Err(Error::shape("rvq_quantize", format!("codebook shape {:?} vs dim {}", cb.shape, v.len())));
        }
        let k = cb.shape[0];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for ki in 0..k {
            let row = &cb.data[ki * v.len()..(ki + 1) * v.len()];
            let d: f64 = residual.iter().zip(row).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = ki;
            }
        }
        let row = &cb.data[best * v.len()..(best + 1) * v.len()];
        for i in 0..v.len() {
            residual[i] -= row[i];
            quantized[i] += row[i];
        }
        codes.push(best);
    }
    Ok((codes, quantized))
}

/// Fit RVQ codebooks by per-stage Lloyd iterations on the running residuals.
/// Entry 0 of every codebook stays the zero vector.
pub fn fit_rvq(vectors: &[Vec<f32>], spec: RvqSpec, iters: usize, seed: u64) -> Result<Rvq> {
    if vectors.is_empty() {
        return Err(Error::InvalidArg("fit_rvq needs at least one vector".into()));
    }
    if spec.stages == 0 || spec.codebook_size < 2 {
        return Err(Error::Config("rvq needs stages >= 1 and codebook_size >= 2".into()));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("fit_rvq", "inconsistent vector dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residuals: Vec<Vec<f32>> = vectors.to_vec();
    let mut codebooks = Vec::with_capacity(spec.stages);
    for _ in 0..spec.stages {
        let k = spec.codebook_size;
        let mut cb = vec![0.0f32; k * dim];
        for ki in 1..k {
            let pick = &residuals[rng.random_range(0..residuals.len())];
            cb[ki * dim..(ki + 1) * dim].copy_from_slice(pick);
        }
        let tensor = |data: Vec<f32>| Tensor::new(vec![k, dim], data);
        let mut cb = tensor(cb);
        for _ in 0..iters {
            let mut sums = vec![0.0f64; k * dim];
            let mut counts = vec![0usize; k];
            for v in &residuals {
                let (codes, _) = rvq_quantize(v, std::slice::from_ref(&cb))?;
                let ki = codes[0];
                counts[ki] += 1;
                for (j, &x) in v.iter().enumerate() {
                    sums[ki * dim + j] += x as f64;
                }
            }
            for ki in 1..k {
                if counts[ki] > 0 {
                    for j in 0..dim {
                        cb.data[ki * dim + j] = (sums[ki * dim + j] / counts[ki] as f64) as f32;
                    }
                }
            }
        }
        for v in &mut residuals {
            let (_, q) = rvq_quantize(v, std::slice::from_ref(&cb))?;
            for (x, qx) in v.iter_mut().zip(&q) {
                *x -= qx;
            }
        }
        codebooks.push(cb);
    }
    Ok(Rvq { codebooks })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub w_mel: f64,
    pub mel: MelConfig,
    pub seed: u64,
}

impl Default for ToyCodecTrainConfig {
    fn default() -> Self {
        // Tuned on the synthetic tone corpus: the mel term must stay small
        // next to L1 (its linear-magnitude mean runs an order of magnitude
        // hotter) or reconstruction trades waveform fit for spectral fit.
        ToyCodecTrainConfig {
            epochs: 60,
            batch_size: 16,
            lr: 5e-3,
            w_mel: 0.02,
            mel: MelConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CodecFileTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CodecFileRepr {
    spec: CodecSpec,
    checksum: u64,
    params: std::collections::BTreeMap<String, CodecFileTensor>,
}

/// Persist a codec (spec, checksum, parameters) as a standalone JSON
/// artifact, written atomically. Non-finite parameters are refused so the
/// file always round-trips bit-exactly.
pub fn save_codec_file(path: &std::path::Path, codec: &Codec) -> Result<()> {
    let mut params = std::collections::BTreeMap::new();
    for (name, t) in codec.named_params() {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: format!("codec parameter {name}") });
        }
        params.insert(name, CodecFileTensor { shape: t.shape.clone(), data: t.data.clone() });
    }
    let repr = CodecFileRepr { spec: codec.spec(), checksum: codec.checksum(), params };
    let json = serde_json::to_string(&repr)
        .map_err(|e| Error::CheckpointFormat(format!("codec file encode: {e}")))?;
    let tmp = path.with_extension("codec.tmp");
    std::fs::write(&tmp, json.as_bytes()).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_codec_file(path: &std::path::Path) -> Result<Codec> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let repr: CodecFileRepr = serde_json::from_str(&text)
        .map_err(|e| Error::CheckpointFormat(format!("codec file {}: {e}", path.display())))?;
    let codec = Codec::from_named(&repr.spec, &mut |name| {
        repr.params.get(name).and_then(|t| {
            (t.shape.iter().product::<usize>() == t.data.len())
                .then(|| Tensor::new(t.shape.clone(), t.data.clone()))
        })
    })?;
    if codec.checksum() != repr.checksum {
        return Err(Error::CheckpointFormat(format!(
            "codec file {}: checksum {:016x} does not match recorded {:016x}",
            path.display(),
            codec.checksum(),
            repr.checksum
        )));
    }
    Ok(codec)
}

/// Mean reconstruction L1 of a codec over a set of equal-length chunks.
pub fn reconstruction_l1(codec: &Codec, chunks: &[Vec<f32>]) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for x in chunks {
        let y = codec.decode(&codec.encode(x)?)?;
        total += x.iter().zip(&y).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>();
        count += x.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Pretrain the strided-conv autoencoder on clean chunks with an L1 + mel
/// reconstruction objective, then freeze it. Requires >= 100 chunks, all of
/// one length.
pub fn pretrain_toy_codec(
    chunks: &[Vec<f32>],
    sample_rate: u32,
    cfg: &ToyCodecTrainConfig,
) -> Result<ToyConvCodec> {
    if chunks.len() < 100 {
        return Err(Error::Config(format!("toy codec pretraining needs >= 100 chunks, got {}", chunks.len())));
    }
    let t = chunks[0].len();
    if t == 0 || chunks.iter().any(|c| c.len() != t) {
        return Err(Error::InvalidArg("pretraining chunks must share one nonzero length".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    cfg.mel.stft.validate()?;

    let mut codec = ToyConvCodec::new(cfg.seed);
    let shapes: Vec<Vec<usize>> = codec
        .enc
        .iter()
        .chain(&codec.dec)
        .flat_map(|l| [l.w.shape.clone(), l.b.shape.clone()])
        .collect();
    let hp = AdamWParams { lr: cfg.lr, weight_decay: 0.0, ..Default::default() };
    let mut optim = OptimState::<f32>::new(&shapes, hp)?;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..chunks.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64 + 1));
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let mut data = Vec::with_capacity(b * t);
            for &i in batch {
                data.extend_from_slice(&chunks[i]);
            }
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::new(vec![b, 1, t], data));

            // Parameters enter this step's graph as differentiable leaves.
            let mut ids = Vec::with_capacity(shapes.len());
            for layer in codec.enc.iter().chain(&codec.dec) {
                ids.push(g.input(layer.w.clone(), true));
                ids.push(g.input(layer.b.clone(), true));
            }
            let hop = ToyConvCodec::hop();
            let pad = (hop - t % hop) % hop;
            let mut h = if pad > 0 { g.pad_time(x, 0, pad)? } else { x };
            for i in 0..3 {
                h = g.conv1d(h, ids[2 * i], Some(ids[2 * i + 1]), TOY_CONV_STRIDE, TOY_CONV_PAD)?;
                if i < 2 {
                    h = g.silu(h);
                }
            }
            for i in 0..3 {
                h = g.conv_transpose1d(h, ids[6 + 2 * i], Some(ids[6 + 2 * i + 1]), TOY_CONV_STRIDE, TOY_CONV_PAD)?;
                if i < 2 {
                    h = g.silu(h);
                }
            }
            let y_hat = g.crop_time(h, 0, t)?;
            let l1 = losses::l1_waveform(&mut g, y_hat, x)?;
            let mel = losses::mel_loss(&mut g, y_hat, x, &cfg.mel, sample_rate, false)?;
            let weighted = g.scale(mel, cfg.w_mel as f32);
            let loss = g.add(l1, weighted)?;
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::TrainingAborted(format!(
                    "toy codec pretraining diverged at epoch {epoch}: loss {loss_val}"
                )));
            }
            g.backward(loss)?;

            let grads: Vec<Option<Tensor<f32>>> = ids.iter().map(|&id| g.take_grad(id)).collect();
            let mut params: Vec<Tensor<f32>> = codec
                .enc
                .iter()
                .chain(&codec.dec)
                .flat_map(|l| [l.w.clone(), l.b.clone()])
                .collect();
            optim.step(&mut params, &grads)?;
            let mut it = params.into_iter();
            for layer in codec.enc.iter_mut().chain(codec.dec.iter_mut()) {
                layer.w = it.next().unwrap();
                layer.b = it.next().unwrap();
            }
        }
        log::debug!("toy codec pretraining epoch {epoch} done");
    }
    codec.frozen = true;
    Ok(codec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Vec<f32> {
        (0..n).map(|i| (i as f32 * 0.37).sin() * 0.5).collect()
    }

    #[test]
    fn identity_frame_shapes_match_hand_examples() {
        let codec = Codec::identity(64).unwrap();
        let lat = codec.encode(&ramp(88_200)).unwrap();
        assert_eq!(lat.frames(), 1_379);
        assert_eq!(lat.channels(), 64);
        assert_eq!(codec.encode(&ramp(64)).unwrap().frames(), 1);
        lat.validate().unwrap();
        assert!(codec.encode(&[]).is_err());
    }

    #[test]
    fn identity_frame_is_bitwise_lossless() {
        let codec = Codec::identity(50).unwrap();
        for n in [1usize, 49, 50, 51, 4_096, 8_000] {
            let x = ramp(n);
            let back = codec.decode(&codec.encode(&x).unwrap()).unwrap();
            assert_eq!(back, x, "length {n}");
        }
    }

    #[test]
    fn identity_graph_path_matches_direct_path() {
        let codec = Codec::identity(16);
        let codec = codec.unwrap();
        let x = ramp(100);
        let lat = codec.encode(&x).unwrap();

        let mut g = Graph::<f32>::new();
        let xn = g.input(Tensor::new(vec![1, 1, 100], x.clone()), true);
        let z = codec.encode_graph(&mut g, xn).unwrap();
        assert_eq!(g.value(z).data, lat.values.data);
        let y = codec.decode_graph(&mut g, z, 100).unwrap();
        assert_eq!(g.value(y).data, x);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn decode_restores_the_original_length(len in 1usize..10_000, toy in proptest::bool::ANY) {
            let codec = if toy {
                Codec::ToyConv(Box::new(ToyConvCodec::new(7)))
            } else {
                Codec::identity(64).unwrap()
            };
            let x = ramp(len);
            let lat = codec.encode(&x).unwrap();
            prop_assert_eq!(lat.frames(), len.div_ceil(codec.hop()));
            let y = codec.decode(&lat).unwrap();
            prop_assert_eq!(y.len(), len);
        }
    }

    #[test]
    fn latent_stats_normalize_and_clamp() {
        let codec = Codec::identity(4).unwrap();
        let latents: Vec<Latent> = (0..10)
            .map(|i| codec.encode(&ramp(64 + i * 4)).unwrap())
            .collect();
        let stats = fit_latent_stats(&latents).unwrap();

        // Normalized corpus has per-channel mean ~0 and std ~1.
        let normed: Vec<Latent> = latents.iter().map(|l| stats.normalize(l).unwrap()).collect();
        let renorm = fit_latent_stats(&normed).unwrap();
        for c in 0..4 {
            assert!(renorm.mean[c].abs() < 1e-4, "channel {c} mean {}", renorm.mean[c]);
            assert!((renorm.std[c] - 1.0).abs() < 1e-3, "channel {c} std {}", renorm.std[c]);
        }

        // Round trip.
        let back = stats.denormalize(&normed[0]).unwrap();
        for (a, b) in back.values.data.iter().zip(&latents[0].values.data) {
            assert!((a - b).abs() < 1e-6);
        }

        // Constant channel: clamped std, zero-centered output, no NaN.
        let flat = Latent {
            values: Tensor::new(vec![2, 3], vec![0.5, 0.5, 0.5, 1.0, 2.0, 3.0]),
            hop: 2,
            original_len: 6,
        };
        let s = fit_latent_stats(std::slice::from_ref(&flat)).unwrap();
        assert_eq!(s.std[0], LATENT_STD_FLOOR);
        let n = s.normalize(&flat).unwrap();
        assert!(n.values.data.iter().all(|v| v.is_finite()));
        assert_eq!(&n.values.data[0..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn denormalize_graph_matches_plain_denormalize() {
        let stats = LatentStats { mean: vec![0.5, -1.0], std: vec![2.0, 0.25] };
        let lat = Latent {
            values: Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            hop: 2,
            original_len: 6,
        };
        let plain = stats.denormalize(&lat).unwrap();
        let mut g = Graph::<f32>::new();
        let z = g.input(Tensor::new(vec![1, 2, 3], lat.values.data.clone()), true);
        let out = stats.denormalize_graph(&mut g, z).unwrap();
        assert_eq!(g.value(out).data, plain.values.data);
    }

    #[test]
    fn rvq_exact_match_and_monotone_residual() {
        // Input present verbatim in the stage-1 codebook: zero residual.
        let cb = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, -2.0, 3.0, 4.0]);
        let (codes, q) = rvq_quantize(&[1.0, -2.0], std::slice::from_ref(&cb)).unwrap();
        assert_eq!(codes, vec![1]);
        assert_eq!(q, vec![1.0, -2.0]);

        // Fitted codebooks: residual norm non-increasing across stages.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vectors: Vec<Vec<f32>> = (0..200)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let rvq = fit_rvq(&vectors, RvqSpec { stages: 3, codebook_size: 8 }, 6, 5).unwrap();
        for v in vectors.iter().take(50) {
            let mut residual = v.clone();
            let mut prev = residual.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
            for cb in &rvq.codebooks {
                let (_, q) = rvq_quantize(&residual, std::slice::from_ref(cb)).unwrap();
                for (r, qx) in residual.iter_mut().zip(&q) {
                    *r -= qx;
                }
                let norm = residual.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
                assert!(norm <= prev + 1e-9, "residual grew: {norm} > {prev}");
                prev = norm;
            }
        }
    }

    #[test]
    fn rvq_two_stage_matches_brute_force_oracle() {
        let cbs = vec![
            Tensor::new(vec![4, 2], vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0, -2.0, -2.0]),
            Tensor::new(vec![3, 2], vec![0.0, 0.0, 0.5, -0.5, -0.5, 0.5]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..64 {
            let v = [rng.random_range(-3.0f32..3.0), rng.random_range(-3.0f32..3.0)];
            let (codes, q) = rvq_quantize(&v, &cbs).unwrap();

            // Oracle: exhaustive nearest neighbor, stage by stage.
            let mut resid = [v[0] as f64, v[1] as f64];
            let mut want = Vec::new();
            for cb in &cbs {
                let mut best = (0usize, f64::INFINITY);
                for ki in 0..cb.shape[0] {
                    let row = &cb.data[ki * 2..ki * 2 + 2];
                    let d = (resid[0] - row[0] as f64).powi(2) + (resid[1] - row[1] as f64).powi(2);
                    if d < best.1 {
                        best = (ki, d);
                    }
                }
                let row = &cb.data[best.0 * 2..best.0 * 2 + 2];
                resid[0] -= row[0] as f64;
                resid[1] -= row[1] as f64;
                want.push(best.0);
            }
            assert_eq!(codes, want, "input {v:?}");
            assert!(q.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn quantize_latent_round_trips_shape() {
        let codec = Codec::identity(6).unwrap();
        let lat = codec.encode(&ramp(600)).unwrap();
        let cols: Vec<Vec<f32>> = (0..lat.frames())
            .map(|f| (0..6).map(|c| lat.values.data[c * lat.frames() + f]).collect())
            .collect();
        let rvq = fit_rvq(&cols, RvqSpec { stages: 2, codebook_size: 16 }, 5, 3).unwrap();
        let (codes, q) = rvq.quantize_latent(&lat).unwrap();
        assert_eq!(codes.len(), lat.frames());
        assert!(codes.iter().all(|c| c.len() == 2));
        assert_eq!(q.values.shape, lat.values.shape);
        // Quantization must help on the data it was fitted to.
        let err: f64 = q
            .values
            .data
            .iter()
            .zip(&lat.values.data)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        let base: f64 = lat.values.data.iter().map(|&v| (v as f64).powi(2)).sum();
        assert!(err < base, "quantized error {err} vs raw energy {base}");
    }

    #[test]
    fn pretraining_strictly_improves_reconstruction() {
        let sr = 8000;
        let chunks: Vec<Vec<f32>> = (0..100)
            .map(|i| {
                crate::audio::synth_tone_mix(i as u64, 512.0 / sr as f64, sr)
                    .unwrap()
                    .samples
            })
            .collect();
        let cfg = ToyCodecTrainConfig {
            epochs: 12,
            batch_size: 16,
            lr: 3e-3,
            w_mel: 0.05,
            mel: MelConfig {
                stft: crate::spectral::StftConfig { n_fft: 128, hop: 64 },
                n_mels: 8,
                fmin: 0.0,
                fmax: None,
            },
            seed: 4,
        };
        let before = reconstruction_l1(&Codec::ToyConv(Box::new(ToyConvCodec::new(cfg.seed))), &chunks).unwrap();
        let trained = pretrain_toy_codec(&chunks, sr, &cfg).unwrap();
        assert!(trained.frozen);
        let after = reconstruction_l1(&Codec::ToyConv(Box::new(trained)), &chunks).unwrap();
        assert!(after < before, "L1 did not improve: {after} vs {before}");

        assert!(matches!(
            pretrain_toy_codec(&chunks[..99], sr, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn codec_file_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut toy = ToyConvCodec::new(11);
        toy.frozen = true;
        let c_lat = TOY_CONV_CHANNELS[3];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vectors: Vec<Vec<f32>> =
            (0..64).map(|_| (0..c_lat).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        toy.rvq = Some(fit_rvq(&vectors, RvqSpec { stages: 2, codebook_size: 8 }, 4, 3).unwrap());
        let codec = Codec::ToyConv(Box::new(toy));
        let path = dir.path().join("toy.codec.json");
        save_codec_file(&path, &codec).unwrap();
        let loaded = load_codec_file(&path).unwrap();
        assert_eq!(codec.checksum(), loaded.checksum());
        let a = codec.named_params();
        let b = loaded.named_params();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape, tb.shape);
            assert!(ta.data.iter().zip(&tb.data).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
        }

        let ident = Codec::identity(24).unwrap();
        let ipath = dir.path().join("ident.codec.json");
        save_codec_file(&ipath, &ident).unwrap();
        let ident2 = load_codec_file(&ipath).unwrap();
        assert_eq!(ident2.spec().hop, 24);
        assert!(matches!(ident2, Codec::IdentityFrame { .. }));

        std::fs::write(&ipath, b"{ not json").unwrap();
        assert!(matches!(load_codec_file(&ipath), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn checksum_tracks_parameter_bytes() {
        let a = Codec::ToyConv(Box::new(ToyConvCodec::new(1)));
        let b = Codec::ToyConv(Box::new(ToyConvCodec::new(1)));
        assert_eq!(a.checksum(), b.checksum());
        let mut c = match b {
            Codec::ToyConv(c) => *c,
            _ => unreachable!(),
        };
        c.enc[0].w.data[0] += 1e-3;
        assert_ne!(a.checksum(), Codec::ToyConv(Box::new(c)).checksum());
        assert_eq!(Codec::identity(8).unwrap().checksum(), Codec::identity(16).unwrap().checksum());
    }
}
