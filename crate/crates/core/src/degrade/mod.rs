//! Dataset degradation synthesis with reproducible provenance.
//!
//! Every degraded chunk derives its own RNG seed from (global seed, source
//! path, chunk offset, variant index), so datasets rebuild bit-identically
//! file by file and any single chunk can be replayed from its manifest row
//! alone. Manifest rows are sorted by id and serialized with a fixed field
//! order, making the manifest byte-stable across runs and machines.

pub mod ops;

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audio::{self, Waveform};
use crate::error::{Error, Result};
use crate::par;

pub use ops::{apply_band_masks, apply_reverb, apply_time_dips, mix_at_snr, nc_artifacts, synth_rir, white_noise, BandMask, TimeDip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    WhiteNoise,
    ExternalNoise,
    SynthReverb,
    RirReverb,
    NcArtifacts,
}

impl DegradationKind {
    /// Additive kinds mix noise at a target SNR; a chain holds at most one.
    pub fn is_additive(self) -> bool {
        matches!(self, DegradationKind::WhiteNoise | DegradationKind::ExternalNoise)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub kind: DegradationKind,
    pub params: serde_json::Value,
    pub source: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One dataset row. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clean: String,
    pub noisy: String,
    pub split: Split,
    pub degradations: Vec<DegradationRecord>,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub sample_rate: u32,
    pub chunk_len: usize,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    f.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut entries = Vec::new();
    for (ln, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::CheckpointFormat(format!("{}:{}: bad manifest row: {e}", path.display(), ln + 1))
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Per-chunk seed: FNV-1a over (global seed, source path, offset, variant).
pub fn chunk_seed(global_seed: u64, rel_source: &str, offset: usize, variant: u32) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
    };
    eat(&global_seed.to_le_bytes());
    eat(rel_source.as_bytes());
    eat(&[0xff]);
    eat(&(offset as u64).to_le_bytes());
    eat(&variant.to_le_bytes());
    h
}

/// File-level split assignment: shuffle once with the global seed, cut the
/// shuffled order contiguously by cumulative floor, and guarantee every split
/// holds at least one file.
pub fn split_files(n_files: usize, fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if n_files < 3 {
        return Err(Error::Config(format!(
            "need at least 3 source files to form train/val/test, got {n_files}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split fractions must be >= 0 and sum to 1, got {fractions:?}")));
    }
    let mut order: Vec<usize> = (0..n_files).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = n_files as f64;
    let mut c_train = (n * fractions[0]).floor() as usize;
    let mut c_val = (n * (fractions[0] + fractions[1])).floor() as usize - c_train;
    let mut c_test = n_files - c_train - c_val;
    if c_val == 0 {
        c_val = 1;
        c_train = c_train.saturating_sub(1);
    }
    if c_test == 0 {
        c_test = 1;
        c_train = c_train.saturating_sub(1);
    }
    if c_train == 0 || c_train + c_val + c_test != n_files {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} leave no training files for {n_files} sources"
        )));
    }
    let mut out = vec![Split::Train; n_files];
    for (pos, &file_idx) in order.iter().enumerate() {
        out[file_idx] = if pos < c_train {
            Split::Train
        } else if pos < c_train + c_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// A pool entry for external noise or measured impulse responses.
#[derive(Debug, Clone)]
pub struct NamedWave {
    pub name: String,
    pub wave: Waveform,
}

pub struct DegradeContext<'a> {
    pub sample_rate: u32,
    pub noise_pool: &'a [NamedWave],
    pub rir_pool: &'a [NamedWave],
}

#[derive(Debug, Clone)]
pub struct DegradeOutcome {
    pub noisy: Vec<f32>,
    pub records: Vec<DegradationRecord>,
    pub snr_db: Option<f64>,
}

/// Degrade one clean chunk. Draw order is fixed: (1) one-vs-two coin, (2)
/// kind indices, (3) per-kind parameters in application order, with the
/// single additive kind (if any) applied last. Replaying with the same seed
/// and pools reproduces the output bit for bit.
pub fn degrade_chunk(clean: &[f32], ctx: &DegradeContext, rng: &mut ChaCha8Rng) -> Result<DegradeOutcome> {
    if clean.is_empty() {
        return Err(Error::InputTooShort("degrade_chunk on empty chunk".into()));
    }
    use DegradationKind::*;
    let mut additive = vec![WhiteNoise];
    if !ctx.noise_pool.is_empty() {
        additive.push(ExternalNoise);
    }
    let mut non_additive = vec![SynthReverb];
    if !ctx.rir_pool.is_empty() {
        non_additive.push(RirReverb);
    }
    non_additive.push(NcArtifacts);
    let all: Vec<DegradationKind> = additive.iter().chain(&non_additive).copied().collect();

    let two = rng.random_bool(0.5);
    let first = all[rng.random_range(0..all.len())];
    let mut kinds = vec![first];
    if two {
        let second = if first.is_additive() {
            non_additive[rng.random_range(0..non_additive.len())]
        } else {
            let pool: Vec<DegradationKind> = all.iter().copied().filter(|&k| k != first).collect();
            pool[rng.random_range(0..pool.len())]
        };
        kinds.push(second);
    }
    // Additive mixing happens last so the target SNR refers to the final mix.
    kinds.sort_by_key(|k| k.is_additive());

    let mut x = clean.to_vec();
    let mut records = Vec::new();
    let mut snr_out = None;
    for kind in kinds {
        match kind {
            SynthReverb => {
                let rt60: f64 = rng.random_range(0.15..0.8);
                let predelay_ms: f64 = rng.random_range(0.0..20.0);
                let rir = synth_rir(rng, rt60, predelay_ms / 1000.0, ctx.sample_rate)?;
                x = apply_reverb(&x, &rir)?;
                records.push(DegradationRecord {
                    kind,
                    params: json!({ "rt60_s": rt60, "predelay_ms": predelay_ms }),
                    source: None,
                });
            }
            RirReverb => {
                let idx = rng.random_range(0..ctx.rir_pool.len());
                x = apply_reverb(&x, &ctx.rir_pool[idx].wave.samples)?;
                records.push(DegradationRecord {
                    kind,
                    params: json!({}),
                    source: Some(ctx.rir_pool[idx].name.clone()),
                });
            }
            NcArtifacts => {
                let (out, dips, masks) = nc_artifacts(&x, ctx.sample_rate, rng)?;
                x = out;
                records.push(DegradationRecord {
                    kind,
                    params: json!({ "segments": dips.len(), "bands": masks.len() }),
                    source: None,
                });
            }
            WhiteNoise => {
                let snr: f64 = rng.random_range(0.0..15.0);
                let noise = white_noise(rng, x.len());
                let (mixed, _) = mix_at_snr(&x, &noise, snr)?;
                x = mixed;
                snr_out = Some(snr);
                records.push(DegradationRecord { kind, params: json!({}), source: None });
            }
            ExternalNoise => {
                let snr: f64 = rng.random_range(0.0..15.0);
                let idx = rng.random_range(0..ctx.noise_pool.len());
                let src = &ctx.noise_pool[idx].wave.samples;
                let offset = rng.random_range(0..src.len());
                let noise: Vec<f32> = (0..x.len()).map(|i| src[(offset + i) % src.len()]).collect();
                let (mixed, _) = mix_at_snr(&x, &noise, snr)?;
                x = mixed;
                snr_out = Some(snr);
                records.push(DegradationRecord {
                    kind,
                    params: json!({ "offset": offset }),
                    source: Some(ctx.noise_pool[idx].name.clone()),
                });
            }
        }
    }
    Ok(DegradeOutcome { noisy: x, records, snr_db: snr_out })
}

/// Recurse a directory for .wav files, sorted by relative path.
pub fn list_wav_files(dir: &Path) -> Result<Vec<(PathBuf, String)>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).follow_links(true).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            Error::io(dir.display().to_string(), std::io::Error::other(e.to_string()))
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let p = entry.path();
        if p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("wav")) == Some(true) {
            let rel = p
                .strip_prefix(dir)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/");
            out.push((p.to_path_buf(), rel));
        }
    }
    out.sort_by(|a, b| a.1.cmp(&b.1));
    Ok(out)
}

fn load_pool(dirs: &[PathBuf], sample_rate: u32) -> Result<Vec<NamedWave>> {
    let mut pool = Vec::new();
    for dir in dirs {
        for (path, rel) in list_wav_files(dir)? {
            let wave = audio::read_wav(&path)?;
            let wave = audio::resample(&wave, sample_rate)?;
            if wave.is_empty() {
                continue;
            }
            pool.push(NamedWave { name: rel, wave });
        }
    }
    Ok(pool)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source_dir: PathBuf,
    #[serde(default)]
    pub noise_dirs: Vec<PathBuf>,
    #[serde(default)]
    pub rir_dirs: Vec<PathBuf>,
    pub sample_rate: u32,
    pub chunk_len: usize,
    /// Hop between chunk starts; defaults to `chunk_len` (no overlap).
    #[serde(default)]
    pub chunk_hop: Option<usize>,
    /// Degraded variants generated per clean chunk.
    #[serde(default = "default_variants")]
    pub variants: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_split_fractions")]
    pub split_fractions: [f64; 3],
}

fn default_variants() -> u32 {
    1
}

fn default_split_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl DatasetConfig {
    /// A config with every optional field at its documented default (2 s
    /// chunks at 44.1 kHz, white noise, synthetic RIRs, 80/10/10 split).
    pub fn with_source(source_dir: PathBuf) -> Self {
        DatasetConfig {
            source_dir,
            noise_dirs: Vec::new(),
            rir_dirs: Vec::new(),
            sample_rate: 44_100,
            chunk_len: 88_200,
            chunk_hop: None,
            variants: default_variants(),
            seed: 0,
            split_fractions: default_split_fractions(),
        }
    }
}

fn sanitize_id(rel: &str) -> String {
    let stem = rel.strip_suffix(".wav").or_else(|| rel.strip_suffix(".WAV")).unwrap_or(rel);
    stem.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '-' })
        .collect()
}

/// Build the paired clean/noisy dataset under `out_dir` and return the
/// manifest rows (already written to `out_dir/manifest.jsonl`, sorted by id).
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    if cfg.chunk_len == 0 {
        return Err(Error::Config("chunk_len must be positive".into()));
    }
    if cfg.variants == 0 {
        return Err(Error::Config("variants must be >= 1".into()));
    }
    let hop = cfg.chunk_hop.unwrap_or(cfg.chunk_len);
    if hop == 0 {
        return Err(Error::Config("chunk_hop must be positive".into()));
    }
    let sources = list_wav_files(&cfg.source_dir)?;
    if sources.is_empty() {
        return Err(Error::Config(format!("no .wav files under {}", cfg.source_dir.display())));
    }
    let splits = split_files(sources.len(), cfg.split_fractions, cfg.seed)?;
    let noise_pool = load_pool(&cfg.noise_dirs, cfg.sample_rate)?;
    let rir_pool = load_pool(&cfg.rir_dirs, cfg.sample_rate)?;

    std::fs::create_dir_all(out_dir.join("clean")).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    std::fs::create_dir_all(out_dir.join("noisy")).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    struct Job {
        rel: String,
        id: String,
        offset: usize,
        variant: u32,
        split: Split,
        samples: Vec<f32>,
    }
    let mut jobs: Vec<Job> = Vec::new();
    let mut ids = HashSet::new();
    for (fi, (path, rel)) in sources.iter().enumerate() {
        let wave = audio::read_wav(path)?;
        let wave = audio::resample(&wave, cfg.sample_rate)?;
        let chunks = audio::chunk(&wave, cfg.chunk_len, hop, rel)?;
        for ch in chunks {
            for v in 0..cfg.variants {
                let id = format!("{}_{:09}_{:02}", sanitize_id(rel), ch.offset_samples, v);
                if !ids.insert(id.clone()) {
                    return Err(Error::Config(format!(
                        "chunk id collision on {id}; source names only differ in sanitized characters"
                    )));
                }
                jobs.push(Job {
                    rel: rel.clone(),
                    id,
                    offset: ch.offset_samples,
                    variant: v,
                    split: splits[fi],
                    samples: ch.wave.samples.clone(),
                });
            }
        }
    }
    if jobs.is_empty() {
        return Err(Error::Config(format!(
            "no chunks: every source is shorter than chunk_len {} at {} Hz",
            cfg.chunk_len, cfg.sample_rate
        )));
    }

    let ctx = DegradeContext {
        sample_rate: cfg.sample_rate,
        noise_pool: &noise_pool,
        rir_pool: &rir_pool,
    };
    let results: Vec<Result<ManifestEntry>> = par::map_collect(&jobs, |job| {
        let seed = chunk_seed(cfg.seed, &job.rel, job.offset, job.variant);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outcome = degrade_chunk(&job.samples, &ctx, &mut rng)?;
        let clean_rel = format!("clean/{}.wav", job.id);
        let noisy_rel = format!("noisy/{}.wav", job.id);
        audio::write_wav(
            &out_dir.join(&clean_rel),
            &Waveform::new(job.samples.clone(), cfg.sample_rate),
            audio::WavSampleFormat::Float32,
        )?;
        audio::write_wav(
            &out_dir.join(&noisy_rel),
            &Waveform::new(outcome.noisy, cfg.sample_rate),
            audio::WavSampleFormat::Float32,
        )?;
        Ok(ManifestEntry {
            id: job.id.clone(),
            clean: clean_rel,
            noisy: noisy_rel,
            split: job.split,
            degradations: outcome.records,
            snr_db: outcome.snr_db,
            seed,
            sample_rate: cfg.sample_rate,
            chunk_len: cfg.chunk_len,
        })
    });
    let mut entries = Vec::with_capacity(results.len());
    for r in results {
        entries.push(r?);
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    write_manifest(&out_dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

/// Write `n` synthetic harmonic-mixture tones as float32 WAVs (a source
/// corpus for self-contained experiments).
pub fn generate_tone_corpus(
    dir: &Path,
    n: usize,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let tone_seed = chunk_seed(seed, &format!("tone-{i}"), 0, 0);
        let wave = audio::synth_tone_mix(tone_seed, duration_s, sample_rate)?;
        let path = dir.join(format!("{i:05}.wav"));
        audio::write_wav(&path, &wave, audio::WavSampleFormat::Float32)?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_and_determinism() {
        let s = split_files(10, [0.8, 0.1, 0.1], 1).unwrap();
        let count = |sp: Split| s.iter().filter(|&&x| x == sp).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (8, 1, 1));

        let s3 = split_files(3, [0.8, 0.1, 0.1], 9).unwrap();
        let c3 = |sp: Split| s3.iter().filter(|&&x| x == sp).count();
        assert_eq!((c3(Split::Train), c3(Split::Val), c3(Split::Test)), (1, 1, 1));

        assert!(split_files(2, [0.8, 0.1, 0.1], 0).is_err());
        assert!(split_files(10, [0.5, 0.2, 0.2], 0).is_err());

        assert_eq!(split_files(20, [0.8, 0.1, 0.1], 7).unwrap(), split_files(20, [0.8, 0.1, 0.1], 7).unwrap());
        assert_ne!(split_files(50, [0.8, 0.1, 0.1], 7).unwrap(), split_files(50, [0.8, 0.1, 0.1], 8).unwrap());
    }

    #[test]
    fn chunk_seed_separates_inputs() {
        let base = chunk_seed(1, "a/b.wav", 0, 0);
        assert_eq!(base, chunk_seed(1, "a/b.wav", 0, 0));
        let variants = [
            chunk_seed(2, "a/b.wav", 0, 0),
            chunk_seed(1, "a/c.wav", 0, 0),
            chunk_seed(1, "a/b.wav", 8000, 0),
            chunk_seed(1, "a/b.wav", 0, 1),
        ];
        for v in variants {
            assert_ne!(base, v);
        }
    }

    fn tone(seed: u64, len: usize) -> Vec<f32> {
        crate::audio::synth_tone_mix(seed, len as f64 / 16_000.0, 16_000).unwrap().samples
    }

    #[test]
    fn degrade_chunk_is_replayable_and_structured() {
        let clean = tone(5, 16_000);
        let ctx = DegradeContext { sample_rate: 16_000, noise_pool: &[], rir_pool: &[] };
        for seed in 0..20u64 {
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let a = degrade_chunk(&clean, &ctx, &mut r1).unwrap();
            let b = degrade_chunk(&clean, &ctx, &mut r2).unwrap();
            assert_eq!(a.noisy, b.noisy, "seed {seed}");
            assert_ne!(a.noisy, clean, "seed {seed}: degradation must change the signal");
            assert!((1..=2).contains(&a.records.len()));
            let additive = a.records.iter().filter(|r| r.kind.is_additive()).count();
            assert!(additive <= 1, "seed {seed}: {additive} additive kinds");
            assert_eq!(a.snr_db.is_some(), additive == 1, "seed {seed}");
            if let Some(snr) = a.snr_db {
                assert!((0.0..15.0).contains(&snr));
            }
        }
    }

    #[test]
    fn degrade_chunk_uses_pools_when_present() {
        let clean = tone(6, 8_000);
        let noise = NamedWave {
            name: "hiss.wav".into(),
            wave: Waveform::new(tone(7, 12_000), 16_000),
        };
        let mut rir_rng = ChaCha8Rng::seed_from_u64(1);
        let rir = NamedWave {
            name: "room.wav".into(),
            wave: Waveform::new(synth_rir(&mut rir_rng, 0.3, 0.002, 16_000).unwrap(), 16_000),
        };
        let ctx = DegradeContext {
            sample_rate: 16_000,
            noise_pool: std::slice::from_ref(&noise),
            rir_pool: std::slice::from_ref(&rir),
        };
        let mut seen: HashSet<DegradationKind> = HashSet::new();
        for seed in 0..80u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = degrade_chunk(&clean, &ctx, &mut rng).unwrap();
            for r in &out.records {
                seen.insert(r.kind);
                match r.kind {
                    DegradationKind::ExternalNoise => assert_eq!(r.source.as_deref(), Some("hiss.wav")),
                    DegradationKind::RirReverb => assert_eq!(r.source.as_deref(), Some("room.wav")),
                    _ => assert!(r.source.is_none()),
                }
            }
        }
        for kind in [
            DegradationKind::WhiteNoise,
            DegradationKind::ExternalNoise,
            DegradationKind::SynthReverb,
            DegradationKind::RirReverb,
            DegradationKind::NcArtifacts,
        ] {
            assert!(seen.contains(&kind), "{kind:?} never drawn over 80 seeds");
        }
    }

    #[test]
    fn manifest_round_trip_preserves_rows() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![ManifestEntry {
            id: "x_000000000_00".into(),
            clean: "clean/x_000000000_00.wav".into(),
            noisy: "noisy/x_000000000_00.wav".into(),
            split: Split::Train,
            degradations: vec![DegradationRecord {
                kind: DegradationKind::WhiteNoise,
                params: json!({}),
                source: None,
            }],
            snr_db: Some(7.25),
            seed: 42,
            sample_rate: 16_000,
            chunk_len: 8000,
        }];
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].id, entries[0].id);
        assert_eq!(back[0].snr_db, entries[0].snr_db);
        assert_eq!(back[0].split, Split::Train);
        assert_eq!(back[0].degradations[0].kind, DegradationKind::WhiteNoise);
    }

    #[test]
    fn dataset_builds_are_byte_identical_and_replayable() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        generate_tone_corpus(&src, 4, 0.6, 16_000, 11).unwrap();
        let cfg = DatasetConfig {
            source_dir: src,
            noise_dirs: vec![],
            rir_dirs: vec![],
            sample_rate: 16_000,
            chunk_len: 8_000,
            chunk_hop: None,
            variants: 2,
            seed: 123,
            split_fractions: [0.8, 0.1, 0.1],
        };
        let out1 = dir.path().join("d1");
        let out2 = dir.path().join("d2");
        let e1 = build_dataset(&cfg, &out1).unwrap();
        let e2 = build_dataset(&cfg, &out2).unwrap();
        assert_eq!(e1.len(), 4 * 2);

        let m1 = std::fs::read(out1.join("manifest.jsonl")).unwrap();
        let m2 = std::fs::read(out2.join("manifest.jsonl")).unwrap();
        assert_eq!(m1, m2, "manifests differ between identical builds");

        // Rows are sorted by id and point at real files.
        for w in e1.windows(2) {
            assert!(w[0].id < w[1].id);
        }
        for e in &e1 {
            assert!(out1.join(&e.clean).is_file());
            assert!(out1.join(&e.noisy).is_file());
        }
        let b1 = std::fs::read(out1.join(&e1[0].noisy)).unwrap();
        let b2 = std::fs::read(out2.join(&e2[0].noisy)).unwrap();
        assert_eq!(b1, b2, "noisy audio differs between identical builds");

        // Replay a row from its recorded seed alone.
        let ctx = DegradeContext { sample_rate: 16_000, noise_pool: &[], rir_pool: &[] };
        for e in e1.iter().take(3) {
            let clean = crate::audio::read_wav(&out1.join(&e.clean)).unwrap();
            let stored = crate::audio::read_wav(&out1.join(&e.noisy)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
            let replay = degrade_chunk(&clean.samples, &ctx, &mut rng).unwrap();
            assert_eq!(replay.noisy, stored.samples, "replay mismatch for {}", e.id);
        }

        // Same-file chunks share a split.
        use std::collections::HashMap;
        let mut per_file: HashMap<&str, Split> = HashMap::new();
        for e in &e1 {
            let file_part = e.id.rsplitn(3, '_').nth(2).unwrap();
            if let Some(prev) = per_file.insert(file_part, e.split) {
                assert_eq!(prev, e.split, "splits differ within {}", file_part);
            }
        }
    }
}
