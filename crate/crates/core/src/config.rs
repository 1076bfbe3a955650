//! Declarative run configuration: one TOML file covering dataset synthesis,
//! codec, denoiser, loss, trainer, and evaluation. Every key is optional
//! and falls back to the defaults in [`CONFIG_TEMPLATE`]; unknown keys are
//! rejected with the offending key name. Command-line flags override file
//! values, and the fully resolved config is echoed to the run log so a run
//! is reproducible from its log alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecKind, RvqSpec, ToyCodecTrainConfig, ToyConvCodec, TOY_CONV_CHANNELS};
use crate::degrade::DatasetConfig;
use crate::denoiser::UNetConfig;
use crate::error::{Error, Result};
use crate::losses::{CurriculumSchedule, LossWeights};
use crate::spectral::MelConfig;
use crate::trainer::{AdamWParams, PlateauParams, TrainConfig};

/// A complete, commented config file; doubles as the schema reference.
pub const CONFIG_TEMPLATE: &str = r#"# Every key is optional; omitted keys take the defaults shown here (except
# where noted). Unknown keys are rejected. Paths are resolved relative to
# the working directory.

# Only synth-data reads [dataset]; omit the section elsewhere. source_dir
# has no default.
[dataset]
source_dir = "clean/"              # source WAVs, searched recursively
noise_dirs = []                    # noise WAV dirs; empty -> white noise
rir_dirs = []                      # RIR WAV dirs; empty -> synthetic RIRs
sample_rate = 44100                # all audio is resampled to this rate
chunk_len = 88200                  # samples per chunk (2 s at 44.1 kHz); must be a multiple of the codec hop
# chunk_hop = 88200                # hop between chunk starts; default chunk_len
variants = 1                       # degraded variants per clean chunk
seed = 0
split_fractions = [0.8, 0.1, 0.1]  # train/val/test, split by source file

[codec]
kind = "identity_frame"            # "identity_frame" (exact) or "toy_conv" (lossy, pretrained)
hop = 50                           # identity frame size; latent channels == hop (default 32). toy_conv hop is fixed at 64
# rvq = { stages = 9, codebook_size = 1024 }  # optional residual quantizer, toy_conv only

[codec.pretrain]                   # pretrain-codec settings, toy_conv only
epochs = 60
batch_size = 16
lr = 5e-3
w_mel = 0.02
seed = 0

[codec.pretrain.mel]
n_mels = 80
fmin = 0.0
# fmax = 22050.0                   # omitted -> Nyquist

[codec.pretrain.mel.stft]
n_fft = 1024
hop = 256

[unet]
in_channels = 50                   # must equal the codec's latent channel count (default 32)
base_channels = 64
levels = 5
max_channels = 512
res_blocks_per_level = 2
norm_groups = 8

[loss.weights]
w_l1 = 1.0
w_mel = 1.0
w_sisdr = 0.01
mel_l2 = false                     # false -> L1 on mel magnitudes, true -> L2

[loss.curriculum]
sisdr_start_epoch = 5              # SI-SDR weight is 0 before this epoch

[loss.mel]
n_mels = 80
fmin = 0.0

[loss.mel.stft]
n_fft = 1024
hop = 256

[trainer]
epochs = 30
batch_size = 16
seed = 0

[trainer.optim]                    # AdamW with decoupled weight decay
lr = 1e-4
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
weight_decay = 0.01

[trainer.plateau]                  # halve the lr when validation stalls
factor = 0.5
patience = 3
min_lr = 1e-6
threshold = 1e-4                   # relative improvement that resets patience

[eval]
n = 1000                           # test-split subset size
seed = 0
"#;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<DatasetConfig>,
    pub codec: CodecSection,
    pub unet: UNetConfig,
    pub loss: LossSection,
    pub trainer: TrainerSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub kind: CodecKind,
    /// Identity codec frame size (latent channels == hop). The conv codec
    /// ignores it; its hop is fixed by its strides.
    pub hop: usize,
    pub rvq: Option<RvqSpec>,
    pub pretrain: ToyCodecTrainConfig,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            kind: CodecKind::IdentityFrame,
            hop: 32,
            rvq: None,
            pretrain: ToyCodecTrainConfig::default(),
        }
    }
}

impl CodecSection {
    pub fn c_lat(&self) -> usize {
        match self.kind {
            CodecKind::IdentityFrame => self.hop,
            CodecKind::ToyConv => TOY_CONV_CHANNELS[3],
        }
    }

    pub fn hop(&self) -> usize {
        match self.kind {
            CodecKind::IdentityFrame => self.hop,
            CodecKind::ToyConv => ToyConvCodec::hop(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub weights: LossWeights,
    pub curriculum: CurriculumSchedule,
    pub mel: MelConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: AdamWParams,
    pub plateau: PlateauParams,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainerSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            optim: t.optim,
            plateau: t.plateau,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n: 1000, seed: 0 }
    }
}

impl RunConfig {
    /// Assemble the trainer's own config from the loss and trainer sections.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.trainer.epochs,
            batch_size: self.trainer.batch_size,
            optim: self.trainer.optim,
            plateau: self.trainer.plateau,
            weights: self.loss.weights,
            curriculum: self.loss.curriculum,
            mel: self.loss.mel,
            seed: self.trainer.seed,
        }
    }

    /// Cross-section consistency; per-module configs are checked again at
    /// their point of use.
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.train_config().validate()?;
        if self.codec.kind == CodecKind::IdentityFrame && self.codec.hop == 0 {
            return Err(Error::Config("codec.hop must be >= 1".into()));
        }
        if self.codec.kind == CodecKind::IdentityFrame && self.codec.rvq.is_some() {
            return Err(Error::Config("rvq applies only to the toy_conv codec".into()));
        }
        if self.codec.c_lat() != self.unet.in_channels {
            return Err(Error::Config(format!(
                "unet.in_channels {} must equal the codec's latent channel count {}",
                self.unet.in_channels,
                self.codec.c_lat()
            )));
        }
        if let Some(ds) = &self.dataset {
            if ds.chunk_len == 0 || ds.sample_rate == 0 {
                return Err(Error::Config("dataset.chunk_len and dataset.sample_rate must be >= 1".into()));
            }
            if ds.chunk_len % self.codec.hop() != 0 {
                return Err(Error::Config(format!(
                    "dataset.chunk_len {} is not a multiple of the codec hop {}",
                    ds.chunk_len,
                    self.codec.hop()
                )));
            }
        }
        if self.eval.n == 0 {
            return Err(Error::Config("eval.n must be >= 1".into()));
        }
        Ok(())
    }

    /// The fully resolved config as TOML, for the run log.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_run_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
