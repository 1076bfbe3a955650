use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use latden_core::audio::{read_wav, resample};
use latden_core::autodiff::gradcheck::{op_suite, CheckSettings};
use latden_core::codec::{
    fit_rvq, load_codec_file, pretrain_toy_codec, reconstruction_l1, save_codec_file, Codec,
    CodecKind, ToyConvCodec,
};
use latden_core::config::RunConfig;
use latden_core::degrade::{
    build_dataset, generate_tone_corpus, list_wav_files, read_manifest, DatasetConfig,
    ManifestEntry, Split,
};
use latden_core::denoiser::gradcheck_tiny_unet;
use latden_core::error::{Error, Result};
use latden_core::metrics::{render_csv, render_table};
use latden_core::trainer::{denoise_file, resume_training, TrainOutcome, TrainSetup};

fn log_resolved(cfg: &RunConfig) -> Result<()> {
    log::info!("resolved config:\n{}", cfg.resolved_toml()?);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Args)]
pub struct SynthDataArgs {
    /// Output dataset directory (WAVs plus manifest.jsonl).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Clean source WAV directory (overrides dataset.source_dir).
    #[arg(long, value_name = "DIR")]
    pub clean_dir: Option<PathBuf>,
    /// Synthesize N clean tone-mixture WAVs under <out>/source first and
    /// use them as the clean corpus.
    #[arg(long, value_name = "N")]
    pub synth_clean: Option<usize>,
    /// Override dataset.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override dataset.sample_rate.
    #[arg(long)]
    pub sample_rate: Option<u32>,
    /// Override dataset.chunk_len (samples per chunk).
    #[arg(long)]
    pub chunk_len: Option<usize>,
    /// Override dataset.variants (degraded variants per clean chunk).
    #[arg(long)]
    pub variants: Option<u32>,
    /// Noise WAV directory (repeatable; overrides dataset.noise_dirs).
    #[arg(long = "noise-dir", value_name = "DIR")]
    pub noise_dirs: Vec<PathBuf>,
    /// Room-impulse-response WAV directory (repeatable; overrides
    /// dataset.rir_dirs).
    #[arg(long = "rir-dir", value_name = "DIR")]
    pub rir_dirs: Vec<PathBuf>,
}

pub fn synth_data(mut cfg: RunConfig, args: SynthDataArgs) -> Result<()> {
    let mut ds = cfg.dataset.take().unwrap_or_else(|| DatasetConfig::with_source(PathBuf::new()));
    if let Some(d) = args.clean_dir {
        ds.source_dir = d;
    }
    if let Some(s) = args.seed {
        ds.seed = s;
    }
    if let Some(sr) = args.sample_rate {
        ds.sample_rate = sr;
    }
    if let Some(cl) = args.chunk_len {
        ds.chunk_len = cl;
    }
    if let Some(v) = args.variants {
        ds.variants = v;
    }
    if !args.noise_dirs.is_empty() {
        ds.noise_dirs = args.noise_dirs;
    }
    if !args.rir_dirs.is_empty() {
        ds.rir_dirs = args.rir_dirs;
    }
    if ds.sample_rate == 0 || ds.chunk_len == 0 {
        return Err(Error::Config("dataset.sample_rate and dataset.chunk_len must be >= 1".into()));
    }
    if let Some(n) = args.synth_clean {
        if n == 0 {
            return Err(Error::InvalidArg("--synth-clean must be >= 1".into()));
        }
        let src = args.out.join("source");
        let duration_s = ds.chunk_len as f64 / ds.sample_rate as f64;
        generate_tone_corpus(&src, n, duration_s, ds.sample_rate, ds.seed)?;
        log::info!("synthesized {n} clean tone files under {}", src.display());
        ds.source_dir = src;
    }
    if ds.source_dir.as_os_str().is_empty() {
        return Err(Error::Config(
            "no clean corpus: set dataset.source_dir, --clean-dir, or --synth-clean".into(),
        ));
    }
    cfg.dataset = Some(ds);
    log_resolved(&cfg)?;
    let ds = cfg.dataset.as_ref().unwrap();

    let entries = build_dataset(ds, &args.out)?;
    let mut by_split: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut by_kind: BTreeMap<String, usize> = BTreeMap::new();
    for e in &entries {
        *by_split.entry(split_name(e.split)).or_default() += 1;
        for d in &e.degradations {
            *by_kind.entry(kind_name(&d.kind)).or_default() += 1;
        }
    }
    println!("manifest {}", args.out.join("manifest.jsonl").display());
    println!("entries {}", entries.len());
    for (name, n) in &by_split {
        println!("split {name} {n}");
    }
    for (name, n) in &by_kind {
        println!("degradation {name} {n}");
    }
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn kind_name<T: serde::Serialize>(kind: &T) -> String {
    match serde_json::to_value(kind) {
        Ok(serde_json::Value::String(s)) => s,
        _ => "unknown".into(),
    }
}

#[derive(Args)]
pub struct PretrainCodecArgs {
    /// Clean WAV directory used as training material.
    #[arg(long, value_name = "DIR")]
    pub clean_dir: PathBuf,
    /// Output codec artifact (JSON).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Override codec.pretrain.epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override codec.pretrain.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resample training audio to this rate (default dataset.sample_rate,
    /// else 16000).
    #[arg(long)]
    pub sample_rate: Option<u32>,
    /// Training chunk length in samples; must be a multiple of the codec
    /// hop 64 (default dataset.chunk_len, else 4096).
    #[arg(long)]
    pub chunk_len: Option<usize>,
}

pub fn pretrain_codec(mut cfg: RunConfig, args: PretrainCodecArgs) -> Result<()> {
    cfg.codec.kind = CodecKind::ToyConv;
    if let Some(e) = args.epochs {
        cfg.codec.pretrain.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.codec.pretrain.seed = s;
    }
    let sr = args
        .sample_rate
        .or(cfg.dataset.as_ref().map(|d| d.sample_rate))
        .unwrap_or(16_000);
    let chunk_len = args
        .chunk_len
        .or(cfg.dataset.as_ref().map(|d| d.chunk_len))
        .unwrap_or(4096);
    let hop = ToyConvCodec::hop();
    if sr == 0 || chunk_len == 0 || chunk_len % hop != 0 {
        return Err(Error::Config(format!(
            "pretraining chunk length {chunk_len} must be a positive multiple of the codec hop {hop}"
        )));
    }
    log_resolved(&cfg)?;

    let chunks = gather_chunks(&args.clean_dir, sr, chunk_len)?;
    log::info!("pretraining on {} chunks of {chunk_len} samples at {sr} Hz", chunks.len());
    let fresh = Codec::ToyConv(Box::new(ToyConvCodec::new(cfg.codec.pretrain.seed)));
    let before = reconstruction_l1(&fresh, &chunks)?;
    let mut toy = pretrain_toy_codec(&chunks, sr, &cfg.codec.pretrain)?;
    if let Some(spec) = cfg.codec.rvq {
        let plain = Codec::ToyConv(Box::new(toy.clone()));
        let vectors = latent_frame_sample(&plain, &chunks, 8192)?;
        toy.rvq = Some(fit_rvq(&vectors, spec, 25, cfg.codec.pretrain.seed)?);
        log::info!("fitted rvq: {} stages of {} entries", spec.stages, spec.codebook_size);
    }
    let codec = Codec::ToyConv(Box::new(toy));
    let after = reconstruction_l1(&codec, &chunks)?;
    save_codec_file(&args.out, &codec)?;
    println!(
        "chunks {}  recon_l1 {before:.6} -> {after:.6}  artifact {}",
        chunks.len(),
        args.out.display()
    );
    Ok(())
}

fn gather_chunks(dir: &Path, sr: u32, chunk_len: usize) -> Result<Vec<Vec<f32>>> {
    let files = list_wav_files(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no .wav files under {}", dir.display())));
    }
    let mut chunks = Vec::new();
    for (path, _) in &files {
        let mut w = read_wav(path)?;
        if w.sample_rate != sr {
            w = resample(&w, sr)?;
        }
        for c in w.samples.chunks_exact(chunk_len) {
            chunks.push(c.to_vec());
        }
    }
    if chunks.is_empty() {
        return Err(Error::Config(format!(
            "no file under {} is at least {chunk_len} samples long",
            dir.display()
        )));
    }
    Ok(chunks)
}

fn latent_frame_sample(codec: &Codec, chunks: &[Vec<f32>], cap: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::new();
    for x in chunks {
        let lat = codec.encode(x)?;
        let (c, f) = (lat.channels(), lat.frames());
        for j in 0..f {
            if out.len() >= cap {
                return Ok(out);
            }
            out.push((0..c).map(|i| lat.values.data[i * f + j]).collect());
        }
    }
    Ok(out)
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset manifest (manifest.jsonl).
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and curves.csv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Pretrained codec artifact (required for the toy_conv codec).
    #[arg(long, value_name = "FILE")]
    pub codec: Option<PathBuf>,
    /// Resume from this checkpoint; config sections are taken from the
    /// checkpoint, not the file.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    /// Override trainer.epochs (with --resume: the new target epoch count).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override trainer.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn train(mut cfg: RunConfig, args: TrainArgs) -> Result<()> {
    if let Some(e) = args.epochs {
        cfg.trainer.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.trainer.seed = s;
    }
    if let Some(ckpt) = &args.resume {
        log::info!("resuming from {}", ckpt.display());
        let outcome = resume_training(ckpt, &args.manifest, &args.out, args.epochs)?;
        print_outcome(&outcome);
        return Ok(());
    }
    let codec = match &args.codec {
        Some(p) => load_codec_file(p)?,
        None => match cfg.codec.kind {
            CodecKind::IdentityFrame => Codec::identity(cfg.codec.hop)?,
            CodecKind::ToyConv => {
                return Err(Error::Config(
                    "the toy_conv codec must be pretrained; pass --codec <artifact>".into(),
                ))
            }
        },
    };
    if codec.channels() != cfg.unet.in_channels {
        return Err(Error::Config(format!(
            "codec emits {} latent channels, unet.in_channels is {}",
            codec.channels(),
            cfg.unet.in_channels
        )));
    }
    cfg.unet.validate()?;
    let config = cfg.train_config();
    config.validate()?;
    log_resolved(&cfg)?;
    let outcome = latden_core::trainer::train(&TrainSetup {
        manifest: args.manifest,
        out_dir: args.out,
        codec,
        unet: cfg.unet,
        config,
    })?;
    print_outcome(&outcome);
    Ok(())
}

fn print_outcome(o: &TrainOutcome) {
    println!(
        "best epoch {}  val_total {:.6}  best {}  last {}",
        o.best_epoch,
        o.best_val,
        o.best_path.display(),
        o.last_path.display()
    );
}

#[derive(Args)]
pub struct DenoiseArgs {
    /// Input WAV.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Output WAV (32-bit float, same duration as the input).
    #[arg(long = "out", value_name = "FILE")]
    pub output: PathBuf,
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
}

pub fn denoise(_cfg: RunConfig, args: DenoiseArgs) -> Result<()> {
    denoise_file(&args.checkpoint, &args.input, &args.output)?;
    println!("wrote {}", args.output.display());
    Ok(())
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Dataset manifest with a test split.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Test-subset size (overrides eval.n).
    #[arg(long)]
    pub n: Option<usize>,
    /// Subset seed (overrides eval.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write per-file scores as CSV.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    /// Also write the full report as JSON.
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
}

pub fn evaluate(mut cfg: RunConfig, args: EvaluateArgs) -> Result<()> {
    if let Some(n) = args.n {
        cfg.eval.n = n;
    }
    if let Some(s) = args.seed {
        cfg.eval.seed = s;
    }
    if cfg.eval.n == 0 {
        return Err(Error::Config("eval.n must be >= 1".into()));
    }
    log_resolved(&cfg)?;
    let report = latden_core::metrics::evaluate(&args.manifest, &args.checkpoint, cfg.eval.n, cfg.eval.seed)?;
    for e in &report.errors {
        log::warn!("skipped: {e}");
    }
    print!("{}", render_table(&report));
    if let Some(p) = &args.csv {
        write_text(p, &render_csv(&report))?;
    }
    if let Some(p) = &args.json {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Eval(format!("report encode: {e}")))?;
        write_text(p, &json)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub h: f64,
    /// Maximum relative error allowed.
    #[arg(long, default_value_t = 1e-4)]
    pub rtol: f64,
}

pub fn gradcheck(_cfg: RunConfig, args: GradcheckArgs) -> Result<()> {
    let settings = CheckSettings { h: args.h, rtol: args.rtol, ..CheckSettings::default() };
    let mut reports = op_suite(&settings)?;
    reports.push(gradcheck_tiny_unet(&settings)?);
    let mut failed = 0usize;
    for r in &reports {
        println!("{r}");
        if !r.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Eval(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

#[derive(serde::Serialize)]
struct ManifestSummary {
    entries: usize,
    splits: BTreeMap<String, usize>,
    degradations: BTreeMap<String, usize>,
    sample_rates: Vec<u32>,
    chunk_lens: Vec<usize>,
    snr_rows: usize,
    snr_mean_db: Option<f64>,
    snr_min_db: Option<f64>,
    snr_max_db: Option<f64>,
}

fn summarize(entries: &[ManifestEntry]) -> ManifestSummary {
    let mut splits: BTreeMap<String, usize> = BTreeMap::new();
    let mut degradations: BTreeMap<String, usize> = BTreeMap::new();
    let mut sample_rates = Vec::new();
    let mut chunk_lens = Vec::new();
    let mut snrs = Vec::new();
    for e in entries {
        *splits.entry(split_name(e.split).to_string()).or_default() += 1;
        for d in &e.degradations {
            *degradations.entry(kind_name(&d.kind)).or_default() += 1;
        }
        if !sample_rates.contains(&e.sample_rate) {
            sample_rates.push(e.sample_rate);
        }
        if !chunk_lens.contains(&e.chunk_len) {
            chunk_lens.push(e.chunk_len);
        }
        if let Some(s) = e.snr_db {
            snrs.push(s);
        }
    }
    sample_rates.sort_unstable();
    chunk_lens.sort_unstable();
    let (mut mean, mut min, mut max) = (None, None, None);
    if !snrs.is_empty() {
        mean = Some(snrs.iter().sum::<f64>() / snrs.len() as f64);
        min = snrs.iter().copied().reduce(f64::min);
        max = snrs.iter().copied().reduce(f64::max);
    }
    ManifestSummary {
        entries: entries.len(),
        splits,
        degradations,
        sample_rates,
        chunk_lens,
        snr_rows: snrs.len(),
        snr_mean_db: mean,
        snr_min_db: min,
        snr_max_db: max,
    }
}

#[derive(Args)]
pub struct InspectManifestArgs {
    /// Manifest path (manifest.jsonl).
    #[arg(value_name = "MANIFEST")]
    pub manifest: PathBuf,
    /// Emit the summary as JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

pub fn inspect_manifest(_cfg: RunConfig, args: InspectManifestArgs) -> Result<()> {
    let entries = read_manifest(&args.manifest)?;
    let s = summarize(&entries);
    if args.json {
        let json = serde_json::to_string_pretty(&s)
            .map_err(|e| Error::Eval(format!("summary encode: {e}")))?;
        println!("{json}");
        return Ok(());
    }
    println!("entries {}", s.entries);
    for (name, n) in &s.splits {
        println!("split {name} {n}");
    }
    for (name, n) in &s.degradations {
        println!("degradation {name} {n}");
    }
    println!(
        "sample_rates {:?}  chunk_lens {:?}",
        s.sample_rates, s.chunk_lens
    );
    if let (Some(mean), Some(min), Some(max)) = (s.snr_mean_db, s.snr_min_db, s.snr_max_db) {
        println!("snr_db rows {}  mean {mean:.2}  min {min:.2}  max {max:.2}", s.snr_rows);
    }
    Ok(())
}
