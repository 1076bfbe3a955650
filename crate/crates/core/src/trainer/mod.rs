//! Training loop for the latent denoiser: AdamW over the U-Net with the
//! codec frozen, per-epoch validation driving a reduce-on-plateau schedule,
//! per-epoch checkpoints, and chunked whole-file inference.

pub mod checkpoint;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CurveRow, TrainState};
pub use optim::{AdamWParams, OptimState, PlateauParams, SchedulerState};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample, write_wav, WavSampleFormat, Waveform};
use crate::autodiff::{Graph, Tensor};
use crate::codec::{fit_latent_stats, Codec, LatentStats};
use crate::degrade::{read_manifest, Split};
use crate::denoiser::{build_unet, unet_forward, UNetBound, UNetConfig, UNetParams};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, CurriculumSchedule, LossWeights};
use crate::spectral::MelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWParams,
    pub plateau: PlateauParams,
    pub weights: LossWeights,
    pub curriculum: CurriculumSchedule,
    pub mel: MelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            optim: AdamWParams::default(),
            plateau: PlateauParams::default(),
            weights: LossWeights::default(),
            curriculum: CurriculumSchedule::default(),
            mel: MelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.optim.validate()?;
        self.plateau.validate()?;
        self.weights.validate()?;
        self.mel.stft.validate()
    }
}

/// Shuffle RNG for one epoch; depends only on (seed, epoch) so a resumed
/// run replays the exact same batch order. splitmix64 finalizer.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Sample {
    clean: Vec<f32>,
    noisy: Vec<f32>,
}

/// Pre-loaded train and validation chunks (the test split is left for the
/// evaluation tooling). All chunks share one length and sample rate.
pub struct LoadedDataset {
    train: Vec<Sample>,
    val: Vec<Sample>,
    pub sample_rate: u32,
    pub chunk_len: usize,
}

impl LoadedDataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let entries = read_manifest(manifest_path)?;
        let Some(first) = entries.first() else {
            return Err(Error::Config(format!("empty manifest {}", manifest_path.display())));
        };
        let (sample_rate, chunk_len) = (first.sample_rate, first.chunk_len);
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut train = Vec::new();
        let mut val = Vec::new();
        for e in &entries {
            if e.sample_rate != sample_rate || e.chunk_len != chunk_len {
                return Err(Error::Config(format!("manifest row {} mixes sample rates or chunk lengths", e.id)));
            }
            let bucket = match e.split {
                Split::Train => &mut train,
                Split::Val => &mut val,
                Split::Test => continue,
            };
            let mut sides = [Vec::new(), Vec::new()];
            for (i, rel) in [&e.clean, &e.noisy].into_iter().enumerate() {
                let wave = read_wav(root.join(rel))?;
                if wave.sample_rate != sample_rate || wave.samples.len() != chunk_len {
                    return Err(Error::Config(format!(
                        "chunk {rel}: {} samples at {} Hz, manifest says {chunk_len} at {sample_rate}",
                        wave.samples.len(),
                        wave.sample_rate
                    )));
                }
                sides[i] = wave.samples;
            }
            let [clean, noisy] = sides;
            bucket.push(Sample { clean, noisy });
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("manifest needs non-empty train and val splits".into()));
        }
        Ok(LoadedDataset { train, val, sample_rate, chunk_len })
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn val_len(&self) -> usize {
        self.val.len()
    }
}

pub struct TrainSetup {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub codec: Codec,
    pub unet: UNetConfig,
    pub config: TrainConfig,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub curves: Vec<CurveRow>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

struct LiveState {
    codec: Codec,
    codec_checksum: u64,
    unet: UNetParams,
    optim: OptimState<f32>,
    sched: SchedulerState,
    stats: LatentStats,
    cfg: TrainConfig,
    sample_rate: u32,
    chunk_len: usize,
    epoch: usize,
    curves: Vec<CurveRow>,
}

pub fn train(setup: &TrainSetup) -> Result<TrainOutcome> {
    setup.config.validate()?;
    setup.unet.validate()?;
    if setup.codec.channels() != setup.unet.in_channels {
        return Err(Error::Config(format!(
            "codec emits {} latent channels, unet expects {}",
            setup.codec.channels(),
            setup.unet.in_channels
        )));
    }
    let data = LoadedDataset::load(&setup.manifest)?;
    let latents = data
        .train
        .iter()
        .map(|s| setup.codec.encode(&s.noisy))
        .collect::<Result<Vec<_>>>()?;
    let stats = fit_latent_stats(&latents)?;
    let unet = build_unet(setup.unet, setup.config.seed)?;
    let shapes: Vec<Vec<usize>> = unet.named_params().iter().map(|(_, t)| t.shape.clone()).collect();
    let optim = OptimState::new(&shapes, setup.config.optim)?;
    let sched = SchedulerState::new(setup.config.plateau)?;
    let live = LiveState {
        codec_checksum: setup.codec.checksum(),
        codec: setup.codec.clone(),
        unet,
        optim,
        sched,
        stats,
        cfg: setup.config.clone(),
        sample_rate: data.sample_rate,
        chunk_len: data.chunk_len,
        epoch: 0,
        curves: Vec::new(),
    };
    run_epochs(live, &data, &setup.out_dir)
}

/// Continue a checkpointed run. `target_epochs` overrides the stored epoch
/// budget (to extend a finished run); `None` keeps it.
pub fn resume_training(
    ckpt_path: &Path,
    manifest_path: &Path,
    out_dir: &Path,
    target_epochs: Option<usize>,
) -> Result<TrainOutcome> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = LoadedDataset::load(manifest_path)?;
    if data.sample_rate != ckpt.state.sample_rate || data.chunk_len != ckpt.state.chunk_len {
        return Err(Error::Config(format!(
            "checkpoint trained on {} Hz chunks of {}, manifest has {} Hz chunks of {}",
            ckpt.state.sample_rate, ckpt.state.chunk_len, data.sample_rate, data.chunk_len
        )));
    }
    let codec = ckpt.codec()?;
    let unet = ckpt.unet_params()?;
    let optim = ckpt.optim_state(&unet)?;
    let sched = ckpt.scheduler_state()?;
    let mut cfg = ckpt.state.train.clone();
    if let Some(target) = target_epochs {
        cfg.epochs = target;
    }
    cfg.validate()?;
    let live = LiveState {
        codec_checksum: ckpt.state.codec_checksum,
        codec,
        unet,
        optim,
        sched,
        stats: ckpt.state.latent_stats.clone(),
        cfg,
        sample_rate: ckpt.state.sample_rate,
        chunk_len: ckpt.state.chunk_len,
        epoch: ckpt.state.epoch,
        curves: ckpt.state.curves.clone(),
    };
    run_epochs(live, &data, out_dir)
}

fn snapshot(live: &LiveState) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    for (name, t) in live.codec.named_params() {
        tensors.insert(name, t.clone());
    }
    let named = live.unet.named_params();
    for (name, t) in &named {
        tensors.insert(name.clone(), (*t).clone());
    }
    for (i, (name, _)) in named.iter().enumerate() {
        tensors.insert(format!("optim.m.{name}"), live.optim.m[i].clone());
        tensors.insert(format!("optim.v.{name}"), live.optim.v[i].clone());
    }
    let state = TrainState {
        codec_spec: live.codec.spec(),
        unet: live.unet.config,
        train: live.cfg.clone(),
        sample_rate: live.sample_rate,
        chunk_len: live.chunk_len,
        latent_stats: live.stats.clone(),
        optim_t: live.optim.t,
        lr: live.optim.lr,
        sched_best: live.sched.best.is_finite().then_some(live.sched.best),
        sched_wait: live.sched.epochs_since_improvement,
        epoch: live.epoch,
        seed: live.cfg.seed,
        curves: live.curves.clone(),
        codec_checksum: live.codec_checksum,
    };
    Checkpoint { state, tensors }
}

fn stack(samples: &[Sample], idx: &[usize], noisy: bool, chunk_len: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(idx.len() * chunk_len);
    for &i in idx {
        data.extend_from_slice(if noisy { &samples[i].noisy } else { &samples[i].clean });
    }
    Tensor::new(vec![idx.len(), 1, chunk_len], data)
}

#[derive(Debug, Clone, Copy)]
struct BatchValues {
    total: f64,
    l1: f64,
    mel: f64,
    sisdr_db: f64,
}

fn run_batch(
    live: &mut LiveState,
    samples: &[Sample],
    idx: &[usize],
    epoch: usize,
    update: bool,
) -> Result<BatchValues> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(stack(samples, idx, true, live.chunk_len));
    let y = g.constant(stack(samples, idx, false, live.chunk_len));
    let z = live.codec.encode_graph(&mut g, x)?;
    let zn = live.stats.normalize_graph(&mut g, z)?;
    let bound: UNetBound = live.unet.bind(&mut g, update);
    let y_lat = unet_forward(&mut g, zn, &live.unet, &bound)?;
    let zd = live.stats.denormalize_graph(&mut g, y_lat)?;
    let y_hat = live.codec.decode_graph(&mut g, zd, live.chunk_len)?;
    let bk = combined_loss(
        &mut g,
        y_hat,
        y,
        &live.cfg.weights,
        epoch,
        &live.cfg.curriculum,
        &live.cfg.mel,
        live.sample_rate,
    )?;
    let values = BatchValues {
        total: g.value(bk.total).item() as f64,
        l1: g.value(bk.l1).item() as f64,
        mel: g.value(bk.mel).item() as f64,
        sisdr_db: g.value(bk.sisdr_db).item() as f64,
    };
    if !values.total.is_finite() {
        return Err(Error::NonFinite { op: "training loss".into() });
    }
    if update {
        g.backward(bk.total)?;
        let grads: Vec<Option<Tensor<f32>>> = bound.flat.iter().map(|&id| g.take_grad(id)).collect();
        drop(g);
        let mut named = live.unet.named_params_mut();
        let mut refs: Vec<&mut Tensor<f32>> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        live.optim.step_refs(&mut refs, &grads)?;
    }
    Ok(values)
}

fn evaluate(live: &mut LiveState, data: &LoadedDataset, epoch: usize) -> Result<BatchValues> {
    // Full post-curriculum weighting keeps the metric comparable across
    // epochs regardless of when the SI-SDR term switches on.
    let full_epoch = epoch.max(live.cfg.curriculum.sisdr_start_epoch);
    let idxs: Vec<usize> = (0..data.val.len()).collect();
    let mut sums = BatchValues { total: 0.0, l1: 0.0, mel: 0.0, sisdr_db: 0.0 };
    let mut seen = 0usize;
    for batch in idxs.chunks(live.cfg.batch_size) {
        let v = run_batch(live, &data.val, batch, full_epoch, false)?;
        let w = batch.len() as f64;
        sums.total += v.total * w;
        sums.l1 += v.l1 * w;
        sums.mel += v.mel * w;
        sums.sisdr_db += v.sisdr_db * w;
        seen += batch.len();
    }
    let w = seen as f64;
    Ok(BatchValues { total: sums.total / w, l1: sums.l1 / w, mel: sums.mel / w, sisdr_db: sums.sisdr_db / w })
}

fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut s = String::from("epoch,lr,sisdr_w,train_total,val_total,l1,mel,sisdr_db\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.sisdr_w, r.train_total, r.val_total, r.l1, r.mel, r.sisdr_db
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

fn run_epochs(mut live: LiveState, data: &LoadedDataset, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    if live.codec.checksum() != live.codec_checksum {
        return Err(Error::Config("codec does not match its recorded checksum".into()));
    }
    let mut best = live.curves.iter().map(|r| r.val_total).fold(f64::INFINITY, f64::min);
    let start = live.epoch + 1;
    for epoch in start..=live.cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(live.cfg.seed, epoch));
        order.shuffle(&mut rng);

        let mut train_sum = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in order.chunks(live.cfg.batch_size).enumerate() {
            match run_batch(&mut live, &data.train, batch, epoch, true) {
                Ok(v) => {
                    train_sum += v.total * batch.len() as f64;
                    seen += batch.len();
                }
                Err(e @ Error::NonFinite { .. }) => {
                    let diag = out_dir.join("abort.ckpt");
                    let saved = save_checkpoint(&diag, &snapshot(&live));
                    let note = match saved {
                        Ok(()) => format!("diagnostic checkpoint at {}", diag.display()),
                        Err(se) => format!("diagnostic checkpoint failed: {se}"),
                    };
                    return Err(Error::TrainingAborted(format!(
                        "non-finite loss at epoch {epoch}, batch {bi} ({e}); {note}"
                    )));
                }
                Err(e) => return Err(e),
            }
        }
        let train_total = train_sum / seen.max(1) as f64;

        let val = evaluate(&mut live, data, epoch)?;
        let lr_used = live.optim.lr;
        live.optim.lr = live.sched.plateau_step(live.optim.lr, val.total)?;
        live.curves.push(CurveRow {
            epoch,
            lr: lr_used,
            sisdr_w: live.cfg.curriculum.sisdr_weight(epoch, &live.cfg.weights),
            train_total,
            val_total: val.total,
            l1: val.l1,
            mel: val.mel,
            sisdr_db: val.sisdr_db,
        });
        live.epoch = epoch;

        write_curves(&out_dir.join("curves.csv"), &live.curves)?;
        let snap = snapshot(&live);
        save_checkpoint(out_dir.join(format!("epoch_{epoch:03}.ckpt")), &snap)?;
        if val.total < best {
            best = val.total;
            save_checkpoint(out_dir.join("best.ckpt"), &snap)?;
        }
        log::info!(
            "epoch {epoch}: train {train_total:.6} val {:.6} (si-sdr {:+.2} dB) lr {lr_used:.3e}",
            val.total,
            val.sisdr_db
        );
    }
    if live.codec.checksum() != live.codec_checksum {
        return Err(Error::TrainingAborted("frozen codec parameters changed during training".into()));
    }

    let (mut best_epoch, mut best_val) = (0usize, f64::INFINITY);
    for r in &live.curves {
        if r.val_total < best_val {
            best_val = r.val_total;
            best_epoch = r.epoch;
        }
    }
    Ok(TrainOutcome {
        best_epoch,
        best_val,
        best_path: out_dir.join("best.ckpt"),
        last_path: out_dir.join(format!("epoch_{:03}.ckpt", live.epoch)),
        curves: live.curves,
    })
}

/// Inference state reconstructed once from a checkpoint and reusable (and
/// shareable across threads) for any number of files.
pub struct DenoisePipeline {
    codec: Codec,
    unet: UNetParams,
    stats: LatentStats,
    pub sample_rate: u32,
    pub chunk_len: usize,
}

impl DenoisePipeline {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let codec = ckpt.codec()?;
        let unet = ckpt.unet_params()?;
        let stats = ckpt.state.latent_stats.clone();
        stats.validate(codec.channels())?;
        Ok(DenoisePipeline {
            codec,
            unet,
            stats,
            sample_rate: ckpt.state.sample_rate,
            chunk_len: ckpt.state.chunk_len,
        })
    }

    /// Chunk to the training length (zero-padding the tail), run each chunk
    /// through the latent pipeline, concatenate, trim to the input length.
    pub fn run(&self, input: &Waveform) -> Result<Waveform> {
        if input.samples.is_empty() {
            return Err(Error::InvalidArg("cannot denoise an empty waveform".into()));
        }
        let wave = if input.sample_rate != self.sample_rate {
            resample(input, self.sample_rate)?
        } else {
            input.clone()
        };
        let chunk_len = self.chunk_len;
        let n = wave.samples.len();
        let mut out = Vec::with_capacity(n.div_ceil(chunk_len) * chunk_len);
        for startpos in (0..n).step_by(chunk_len) {
            let end = (startpos + chunk_len).min(n);
            let mut chunk = wave.samples[startpos..end].to_vec();
            chunk.resize(chunk_len, 0.0);
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::new(vec![1, 1, chunk_len], chunk));
            let z = self.codec.encode_graph(&mut g, x)?;
            let zn = self.stats.normalize_graph(&mut g, z)?;
            let bound = self.unet.bind(&mut g, false);
            let y_lat = unet_forward(&mut g, zn, &self.unet, &bound)?;
            let zd = self.stats.denormalize_graph(&mut g, y_lat)?;
            let y_hat = self.codec.decode_graph(&mut g, zd, chunk_len)?;
            out.extend_from_slice(&g.value(y_hat).data);
        }
        out.truncate(n);
        Ok(Waveform::new(out, self.sample_rate))
    }
}

pub fn denoise_wave(ckpt: &Checkpoint, input: &Waveform) -> Result<Waveform> {
    DenoisePipeline::from_checkpoint(ckpt)?.run(input)
}

pub fn denoise_file(ckpt_path: &Path, input: &Path, output: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let wave = read_wav(input)?;
    let den = denoise_wave(&ckpt, &wave)?;
    write_wav(output, &den, WavSampleFormat::Float32)
}
