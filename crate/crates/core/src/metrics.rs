//! Objective evaluation: global SNR, SI-SDR, STOI, and a manifest-driven
//! evaluation runner over a uniform test subset.
//!
//! PESQ (ITU-T P.862) is deliberately not implemented; reports carry SI-SDR
//! in that column and label the substitution.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample, Waveform};
use crate::degrade::{read_manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::losses::si_sdr_db;
use crate::par;
use crate::spectral::{hann_window, third_octave_bands};
use crate::trainer::{load_checkpoint, DenoisePipeline};

pub const METRIC_CLAMP_DB: f64 = 60.0;
const SNR_EPS: f64 = 1e-8;

pub const STOI_RATE: u32 = 10_000;
pub const STOI_FRAME: usize = 256;
pub const STOI_HOP: usize = 128;
pub const STOI_FFT: usize = 512;
pub const STOI_BANDS: usize = 15;
pub const STOI_CENTER0_HZ: f64 = 150.0;
pub const STOI_SEGMENT: usize = 30;
pub const STOI_SILENCE_DB: f64 = 40.0;

/// Ratio of clean power to residual power, in dB, clamped to keep means
/// finite when the residual vanishes.
pub fn snr_db(clean: &[f32], test: &[f32]) -> Result<f64> {
    if clean.len() != test.len() {
        return Err(Error::shape("snr_db", format!("clean {} vs test {}", clean.len(), test.len())));
    }
    if clean.is_empty() {
        return Err(Error::InputTooShort("snr_db on empty signals".into()));
    }
    let p_clean: f64 = clean.iter().map(|&v| v as f64 * v as f64).sum();
    if p_clean <= 0.0 {
        return Err(Error::DegenerateInput("snr_db needs nonzero clean power".into()));
    }
    let p_noise: f64 = clean
        .iter()
        .zip(test)
        .map(|(&c, &t)| {
            let d = t as f64 - c as f64;
            d * d
        })
        .sum();
    let db = 10.0 * ((p_clean + SNR_EPS) / (p_noise + SNR_EPS)).log10();
    Ok(db.clamp(-METRIC_CLAMP_DB, METRIC_CLAMP_DB))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn centered_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        dot += dx * dy;
        na += dx * dx;
        nb += dy * dy;
    }
    let denom = (na * nb).sqrt();
    if denom <= 1e-300 {
        0.0
    } else {
        dot / denom
    }
}

/// Short-time objective intelligibility. Both signals are resampled to
/// 10 kHz; frames 40 dB below the loudest clean frame are discarded from
/// both; one-third-octave envelopes over 30-frame segments are compared by
/// mean-removed correlation after clean-energy normalization and a -15 dB
/// SDR clip. Scores land near [0, 1] but are not clamped.
pub fn stoi(clean: &[f32], test: &[f32], sample_rate: u32) -> Result<f64> {
    if clean.len() != test.len() {
        return Err(Error::shape("stoi", format!("clean {} vs test {}", clean.len(), test.len())));
    }
    if sample_rate == 0 {
        return Err(Error::InvalidArg("stoi needs a positive sample rate".into()));
    }
    let (x, y): (Vec<f32>, Vec<f32>) = if sample_rate == STOI_RATE {
        (clean.to_vec(), test.to_vec())
    } else {
        (
            resample(&Waveform::new(clean.to_vec(), sample_rate), STOI_RATE)?.samples,
            resample(&Waveform::new(test.to_vec(), sample_rate), STOI_RATE)?.samples,
        )
    };
    if x.len() < STOI_FRAME + (STOI_SEGMENT - 1) * STOI_HOP {
        return Err(Error::InputTooShort(format!(
            "stoi needs at least {} samples at {STOI_RATE} Hz, got {}",
            STOI_FRAME + (STOI_SEGMENT - 1) * STOI_HOP,
            x.len()
        )));
    }

    let win = hann_window(STOI_FRAME);
    let n_frames = (x.len() - STOI_FRAME) / STOI_HOP + 1;
    let windowed = |s: &[f32], f: usize| -> Vec<f64> {
        (0..STOI_FRAME).map(|i| s[f * STOI_HOP + i] as f64 * win[i]).collect()
    };

    // Silent-frame mask from the clean signal, applied to both.
    let energies_db: Vec<f64> = (0..n_frames).map(|f| 20.0 * (l2(&windowed(&x, f)) + 1e-300).log10()).collect();
    let loudest = energies_db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> =
        (0..n_frames).filter(|&f| energies_db[f] > loudest - STOI_SILENCE_DB).collect();
    if kept.len() < STOI_SEGMENT {
        return Err(Error::InputTooShort(format!(
            "stoi has {} frames after silent-frame removal, needs {STOI_SEGMENT}",
            kept.len()
        )));
    }

    let bands = third_octave_bands(STOI_RATE, STOI_FFT, STOI_BANDS, STOI_CENTER0_HZ)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(STOI_FFT);
    let envelope = |s: &[f32]| -> Vec<Vec<f64>> {
        let mut env = vec![Vec::with_capacity(kept.len()); STOI_BANDS];
        let mut buf = vec![Complex::new(0.0, 0.0); STOI_FFT];
        for &f in &kept {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, v) in windowed(s, f).into_iter().enumerate() {
                buf[i] = Complex::new(v, 0.0);
            }
            fft.process(&mut buf);
            for (j, members) in bands.iter().enumerate() {
                let e: f64 = members.iter().map(|&k| buf[k].norm_sqr()).sum();
                env[j].push(e.sqrt());
            }
        }
        env
    };
    let env_x = envelope(&x);
    let env_y = envelope(&y);

    let clip = 1.0 + 10f64.powf(15.0 / 20.0);
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..STOI_BANDS {
        for m in 0..=kept.len() - STOI_SEGMENT {
            let xs = &env_x[j][m..m + STOI_SEGMENT];
            let ys = &env_y[j][m..m + STOI_SEGMENT];
            let alpha = l2(xs) / (l2(ys) + 1e-300);
            let yc: Vec<f64> = xs.iter().zip(ys).map(|(&xv, &yv)| (yv * alpha).min(xv * clip)).collect();
            sum += centered_correlation(xs, &yc);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub snr_db: f64,
    pub si_sdr_db: f64,
    pub stoi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMetrics {
    pub id: String,
    pub noisy: Scores,
    pub denoised: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Sorted by id; one row per successfully scored test file.
    pub rows: Vec<FileMetrics>,
    pub noisy_mean: Scores,
    pub denoised_mean: Scores,
    pub n_files: usize,
    pub n_requested: usize,
    pub subset_seed: u64,
    /// Per-row failures (missing files, too-short signals); the rows are
    /// excluded from the means.
    pub errors: Vec<String>,
}

fn score_pair(clean: &Waveform, test: &[f32]) -> Result<Scores> {
    Ok(Scores {
        snr_db: snr_db(&clean.samples, test)?,
        si_sdr_db: si_sdr_db(test, &clean.samples)?,
        stoi: stoi(&clean.samples, test, clean.sample_rate)?,
    })
}

fn score_entry(root: &Path, entry: &ManifestEntry, pipe: &DenoisePipeline) -> Result<FileMetrics> {
    let clean = read_wav(root.join(&entry.clean))?;
    let noisy = read_wav(root.join(&entry.noisy))?;
    if clean.samples.len() != noisy.samples.len() || clean.sample_rate != noisy.sample_rate {
        return Err(Error::shape(
            "evaluate",
            format!("clean/noisy mismatch for {}: {} vs {} samples", entry.id, clean.samples.len(), noisy.samples.len()),
        ));
    }
    let mut den = pipe.run(&noisy)?;
    if den.sample_rate != clean.sample_rate {
        den = resample(&den, clean.sample_rate)?;
    }
    den.samples.resize(clean.samples.len(), 0.0);
    Ok(FileMetrics {
        id: entry.id.clone(),
        noisy: score_pair(&clean, &noisy.samples)?,
        denoised: score_pair(&clean, &den.samples)?,
    })
}

fn mean_scores(rows: &[FileMetrics], denoised: bool) -> Scores {
    let n = rows.len() as f64;
    let mut acc = Scores { snr_db: 0.0, si_sdr_db: 0.0, stoi: 0.0 };
    for r in rows {
        let s = if denoised { &r.denoised } else { &r.noisy };
        acc.snr_db += s.snr_db;
        acc.si_sdr_db += s.si_sdr_db;
        acc.stoi += s.stoi;
    }
    Scores { snr_db: acc.snr_db / n, si_sdr_db: acc.si_sdr_db / n, stoi: acc.stoi / n }
}

/// Score a uniform random subset (without replacement) of the manifest's
/// test split, each file under both conditions. Deterministic in
/// (manifest, checkpoint, n, seed).
pub fn evaluate(manifest_path: &Path, ckpt_path: &Path, n: usize, seed: u64) -> Result<MetricReport> {
    if n == 0 {
        return Err(Error::InvalidArg("evaluation subset size must be >= 1".into()));
    }
    let entries = read_manifest(manifest_path)?;
    let test: Vec<ManifestEntry> = entries.into_iter().filter(|e| e.split == Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Config(format!("manifest {} has no test split", manifest_path.display())));
    }
    let ckpt = load_checkpoint(ckpt_path)?;
    let pipe = DenoisePipeline::from_checkpoint(&ckpt)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));

    let take = n.min(test.len());
    let mut idx: Vec<usize> = (0..test.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..take {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let chosen: Vec<usize> = idx[..take].to_vec();

    let scored: Vec<std::result::Result<FileMetrics, String>> = par::map_collect(&chosen, |&i| {
        score_entry(root, &test[i], &pipe).map_err(|e| format!("{}: {e}", test[i].id))
    });
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for r in scored {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => errors.push(e),
        }
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    errors.sort();
    if rows.is_empty() {
        return Err(Error::Eval(format!("no file could be scored; first error: {}", errors[0])));
    }
    Ok(MetricReport {
        noisy_mean: mean_scores(&rows, false),
        denoised_mean: mean_scores(&rows, true),
        n_files: rows.len(),
        n_requested: n,
        subset_seed: seed,
        errors,
        rows,
    })
}

/// Aligned two-condition summary table. The first metric column carries
/// SI-SDR and says so: PESQ is not implemented here.
pub fn render_table(r: &MetricReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<14} {:>14} {:>8} {:>10}\n", "condition", "si_sdr_db [*]", "stoi", "snr_db"));
    for (name, m) in [("noisy input", &r.noisy_mean), ("denoised", &r.denoised_mean)] {
        s.push_str(&format!(
            "{:<14} {:>14.2} {:>8.3} {:>10.2}\n",
            name, m.si_sdr_db, m.stoi, m.snr_db
        ));
    }
    s.push_str(&format!(
        "[*] SI-SDR reported in place of PESQ. {} of {} requested files scored (seed {})",
        r.n_files, r.n_requested, r.subset_seed
    ));
    if !r.errors.is_empty() {
        s.push_str(&format!("; {} errored", r.errors.len()));
    }
    s.push('\n');
    s
}

pub fn render_csv(r: &MetricReport) -> String {
    let mut s = String::from("id,condition,snr_db,si_sdr_db,stoi\n");
    for row in &r.rows {
        for (cond, m) in [("noisy", &row.noisy), ("denoised", &row.denoised)] {
            s.push_str(&format!("{},{cond},{},{},{}\n", row.id, m.snr_db, m.si_sdr_db, m.stoi));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_wav, WavSampleFormat};
    use crate::codec::{Codec, LatentStats};
    use crate::degrade::ops::{mix_at_snr, white_noise};
    use crate::degrade::write_manifest;
    use crate::denoiser::{build_unet, UNetConfig};
    use crate::trainer::{save_checkpoint, Checkpoint, TrainConfig, TrainState};
    use std::collections::BTreeMap;

    fn am_tone(len: usize, sr: u32) -> Vec<f32> {
        (0..len)
            .map(|i| {
                let t = i as f64 / sr as f64;
                let carrier = (std::f64::consts::TAU * 987.0 * t).sin();
                let m = 1.0 + 0.8 * (std::f64::consts::TAU * 4.0 * t).sin();
                (0.4 * m * carrier) as f32
            })
            .collect()
    }

    #[test]
    fn snr_hand_values_and_clamps() {
        assert_eq!(snr_db(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(snr_db(&[0.3, -0.2, 0.9], &[0.3, -0.2, 0.9]).unwrap(), 60.0);
        assert!(matches!(snr_db(&[1.0], &[1.0, 2.0]), Err(Error::Shape { .. })));
        assert!(matches!(snr_db(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateInput(_))));
        assert!(matches!(snr_db(&[], &[]), Err(Error::InputTooShort(_))));
    }

    #[test]
    fn snr_inverts_mix_at_snr() {
        let clean = am_tone(8000, 8000);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = white_noise(&mut rng, clean.len());
        for target in [0.0, 5.5, 12.0] {
            let (mix, _) = mix_at_snr(&clean, &noise, target).unwrap();
            let got = snr_db(&clean, &mix).unwrap();
            assert!((got - target).abs() < 1e-6, "target {target}, got {got}");
        }
    }

    #[test]
    fn snr_and_si_sdr_are_invariant_under_joint_time_reversal() {
        let clean = am_tone(4000, 8000);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = white_noise(&mut rng, clean.len());
        let (mix, _) = mix_at_snr(&clean, &noise, 6.0).unwrap();
        let rc: Vec<f32> = clean.iter().rev().copied().collect();
        let rm: Vec<f32> = mix.iter().rev().copied().collect();
        let snr_f = snr_db(&clean, &mix).unwrap();
        let snr_r = snr_db(&rc, &rm).unwrap();
        assert!((snr_f - snr_r).abs() < 1e-9, "{snr_f} vs {snr_r}");
        let si_f = si_sdr_db(&mix, &clean).unwrap();
        let si_r = si_sdr_db(&rm, &rc).unwrap();
        assert!((si_f - si_r).abs() < 1e-9, "{si_f} vs {si_r}");
    }

    #[test]
    fn stoi_self_score_is_high_and_sign_flip_never_helps() {
        for sr in [10_000u32, 16_000] {
            let y = am_tone((sr as usize * 6) / 10, sr);
            let own = stoi(&y, &y, sr).unwrap();
            assert!(own >= 0.99, "self stoi at {sr} Hz: {own}");
            let neg: Vec<f32> = y.iter().map(|v| -v).collect();
            let flipped = stoi(&y, &neg, sr).unwrap();
            assert!(flipped <= own + 1e-9, "flip {flipped} vs self {own}");
        }
        let short = am_tone(2000, 10_000);
        assert!(matches!(stoi(&short, &short, 10_000), Err(Error::InputTooShort(_))));
    }

    #[test]
    fn stoi_degrades_monotonically_as_snr_drops() {
        let clean = am_tone(10_000, 10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = white_noise(&mut rng, clean.len());
        let mut scores = Vec::new();
        for snr in [20.0, 10.0, 0.0, -10.0] {
            let (mix, _) = mix_at_snr(&clean, &noise, snr).unwrap();
            scores.push(stoi(&clean, &mix, 10_000).unwrap());
        }
        for w in scores.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "stoi rose as snr dropped: {scores:?}");
        }
        assert!(
            scores[0] - scores[3] > 0.05,
            "sweep should show a clear drop: {scores:?}"
        );
    }

    fn identity_checkpoint(dir: &Path, sr: u32, chunk_len: usize) -> std::path::PathBuf {
        let codec = Codec::identity(8).unwrap();
        let cfg = UNetConfig {
            in_channels: 8,
            base_channels: 8,
            levels: 2,
            max_channels: 32,
            res_blocks_per_level: 2,
            norm_groups: 4,
        };
        let mut params = build_unet(cfg, 2).unwrap();
        params.make_identity().unwrap();
        let mut tensors = BTreeMap::new();
        for (name, t) in params.named_params() {
            tensors.insert(name, t.clone());
        }
        let ckpt = Checkpoint {
            state: TrainState {
                codec_spec: codec.spec(),
                unet: cfg,
                train: TrainConfig::default(),
                sample_rate: sr,
                chunk_len,
                latent_stats: LatentStats { mean: vec![0.0; 8], std: vec![1.0; 8] },
                optim_t: 0,
                lr: 1e-4,
                sched_best: None,
                sched_wait: 0,
                epoch: 0,
                seed: 0,
                curves: Vec::new(),
                codec_checksum: codec.checksum(),
            },
            tensors,
        };
        let path = dir.join("identity.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        path
    }

    #[test]
    fn evaluate_scores_a_deterministic_subset() {
        let dir = tempfile::tempdir().unwrap();
        let sr = 8000u32;
        let chunk = 4800usize;
        std::fs::create_dir_all(dir.path().join("clean")).unwrap();
        std::fs::create_dir_all(dir.path().join("noisy")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut entries = Vec::new();
        for i in 0..6 {
            let id = format!("t_{i:02}");
            let clean = am_tone(chunk, sr);
            let noise = white_noise(&mut rng, chunk);
            let (noisy, _) = mix_at_snr(&clean, &noise, 10.0).unwrap();
            let (c, n) = (format!("clean/{id}.wav"), format!("noisy/{id}.wav"));
            write_wav(dir.path().join(&c), &Waveform::new(clean, sr), WavSampleFormat::Float32).unwrap();
            write_wav(dir.path().join(&n), &Waveform::new(noisy, sr), WavSampleFormat::Float32).unwrap();
            entries.push(ManifestEntry {
                id,
                clean: c,
                noisy: n,
                split: Split::Test,
                degradations: Vec::new(),
                snr_db: Some(10.0),
                seed: i,
                sample_rate: sr,
                chunk_len: chunk,
            });
        }
        let manifest = dir.path().join("manifest.jsonl");
        write_manifest(&manifest, &entries).unwrap();
        let ckpt = identity_checkpoint(dir.path(), sr, chunk);

        let full = evaluate(&manifest, &ckpt, 1000, 42).unwrap();
        assert_eq!(full.n_files, 6);
        assert_eq!(full.rows.len(), 6);
        let ids: Vec<&str> = full.rows.iter().map(|r| r.id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert!((full.noisy_mean.snr_db - 10.0).abs() < 0.1, "{}", full.noisy_mean.snr_db);
        // Identity checkpoint: denoised scores equal noisy scores.
        for row in &full.rows {
            assert_eq!(row.noisy, row.denoised, "{}", row.id);
        }

        let sub_a = evaluate(&manifest, &ckpt, 3, 7).unwrap();
        let sub_b = evaluate(&manifest, &ckpt, 3, 7).unwrap();
        assert_eq!(sub_a.rows.len(), 3);
        assert_eq!(sub_a, sub_b);
        let other = evaluate(&manifest, &ckpt, 3, 8).unwrap();
        assert_eq!(other.rows.len(), 3);

        // A missing file is reported, not fatal.
        std::fs::remove_file(dir.path().join(&entries[0].noisy)).unwrap();
        let partial = evaluate(&manifest, &ckpt, 1000, 42).unwrap();
        assert_eq!(partial.n_files, 5);
        assert_eq!(partial.errors.len(), 1);
        assert!(partial.errors[0].contains("t_00"), "{:?}", partial.errors);

        let table = render_table(&full);
        assert!(table.contains("SI-SDR reported in place of PESQ"));
        assert!(table.contains("noisy input"));
        let csv = render_csv(&full);
        assert_eq!(csv.lines().count(), 1 + 12);
    }
}
