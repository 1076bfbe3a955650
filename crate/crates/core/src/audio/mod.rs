//! Waveform representation, chunking, and synthetic test-signal generation.

mod resample;
mod wav;

pub use resample::{resample, resample_with, ResampleParams};
pub use wav::{read_wav, write_wav, WavSampleFormat};

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mono audio signal. Samples are dimensionless amplitudes, nominally in
/// [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
    }

    /// Mean of squared samples, accumulated in f64.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        sum / self.samples.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidArg("sample_rate must be > 0".into()));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                op: "waveform".into(),
            });
        }
        Ok(())
    }
}

/// Fixed-length window cut from a source waveform.
#[derive(Debug, Clone)]
pub struct AudioChunk {
    pub wave: Waveform,
    pub source_file: String,
    pub offset_samples: usize,
}

/// Split a waveform into fixed-length chunks. The trailing remainder
/// shorter than `chunk_len` is discarded.
pub fn chunk(wave: &Waveform, chunk_len: usize, hop: usize, source: &str) -> Result<Vec<AudioChunk>> {
    if chunk_len == 0 || hop == 0 {
        return Err(Error::InvalidArg("chunk_len and hop must be > 0".into()));
    }
    let mut out = Vec::new();
    let n = wave.len();
    if n < chunk_len {
        return Ok(out);
    }
    let count = (n - chunk_len) / hop + 1;
    out.reserve(count);
    for i in 0..count {
        let off = i * hop;
        out.push(AudioChunk {
            wave: Waveform::new(wave.samples[off..off + chunk_len].to_vec(), wave.sample_rate),
            source_file: source.to_string(),
            offset_samples: off,
        });
    }
    Ok(out)
}

/// Deterministic harmonic tone mix: 3-6 harmonics of a random fundamental in
/// [110, 880] Hz, each with a slow (2-8 Hz) sinusoidal amplitude envelope.
/// Harmonics above 0.45 * sample_rate are skipped to avoid aliasing. The
/// result is peak-normalized to 0.7.
pub fn synth_tone_mix(seed: u64, duration_s: f64, sample_rate: u32) -> Result<Waveform> {
    if duration_s <= 0.0 {
        return Err(Error::InvalidArg("duration_s must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * sample_rate as f64).round() as usize;
    let f0: f64 = rng.random_range(110.0..=880.0);
    let n_harm: usize = rng.random_range(3..=6);

    struct Partial {
        freq: f64,
        amp: f64,
        phase: f64,
        am_rate: f64,
        am_depth: f64,
        am_phase: f64,
    }
    let mut partials = Vec::with_capacity(n_harm);
    for k in 1..=n_harm {
        // Draw everything even for skipped harmonics so the RNG stream does
        // not depend on the sample rate.
        let amp: f64 = if k == 1 {
            1.0
        } else {
            rng.random_range(0.2..=0.9) / (k as f64).sqrt()
        };
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let am_rate: f64 = rng.random_range(2.0..=8.0);
        let am_depth: f64 = rng.random_range(0.2..=0.6);
        let am_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let freq = f0 * k as f64;
        if freq < 0.45 * sample_rate as f64 {
            partials.push(Partial {
                freq,
                amp,
                phase,
                am_rate,
                am_depth,
                am_phase,
            });
        }
    }

    let dt = 1.0 / sample_rate as f64;
    let mut samples = vec![0.0f64; n];
    for p in &partials {
        let w = std::f64::consts::TAU * p.freq;
        let wa = std::f64::consts::TAU * p.am_rate;
        for (i, s) in samples.iter_mut().enumerate() {
            let t = i as f64 * dt;
            let env = 1.0 - p.am_depth + p.am_depth * 0.5 * (1.0 + (wa * t + p.am_phase).sin());
            *s += p.amp * env * (w * t + p.phase).sin();
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    let scale = if peak > 0.0 { 0.7 / peak } else { 0.0 };
    let out: Vec<f32> = samples.iter().map(|&s| (s * scale) as f32).collect();
    Ok(Waveform::new(out, sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Plain DFT magnitude at integer bins; independent of the rustfft path.
    fn naive_dft_mag(x: &[f32], window: bool) -> Vec<f64> {
        let n = x.len();
        let bins = n / 2 + 1;
        let mut mags = Vec::with_capacity(bins);
        for k in 0..bins {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (i, &s) in x.iter().enumerate() {
                let w = if window {
                    0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / (n as f64 - 1.0)).cos())
                } else {
                    1.0
                };
                let th = std::f64::consts::TAU * k as f64 * i as f64 / n as f64;
                re += w * s as f64 * th.cos();
                im -= w * s as f64 * th.sin();
            }
            mags.push((re * re + im * im).sqrt());
        }
        mags
    }

    #[test]
    fn chunk_counts() {
        let w = Waveform::zeros(220_500, 44_100);
        let chunks = chunk(&w, 88_200, 88_200, "src").unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].offset_samples, 0);
        assert_eq!(chunks[1].offset_samples, 88_200);

        let w = Waveform::zeros(88_200, 44_100);
        assert_eq!(chunk(&w, 88_200, 88_200, "src").unwrap().len(), 1);

        let w = Waveform::zeros(88_199, 44_100);
        assert_eq!(chunk(&w, 88_200, 88_200, "src").unwrap().len(), 0);
    }

    #[test]
    fn chunk_count_formula_property() {
        let chunk_len = 100;
        for hop in [37, 50, 100, 150] {
            for len in [0, 1, 99, 100, 101, 137, 250, 999, 1000] {
                let w = Waveform::zeros(len, 8000);
                let got = chunk(&w, chunk_len, hop, "s").unwrap().len();
                let want = if len >= chunk_len {
                    (len - chunk_len) / hop + 1
                } else {
                    0
                };
                assert_eq!(got, want, "len={len} hop={hop}");
            }
        }
    }

    #[test]
    fn tone_mix_deterministic_and_normalized() {
        let a = synth_tone_mix(7, 0.5, 16_000).unwrap();
        let b = synth_tone_mix(7, 0.5, 16_000).unwrap();
        assert_eq!(a.samples, b.samples);
        assert!((a.peak() - 0.7).abs() < 1e-6, "peak = {}", a.peak());
        let c = synth_tone_mix(8, 0.5, 16_000).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn tone_mix_energy_at_harmonics_only() {
        for seed in [1u64, 2, 3, 12, 99] {
            let sr = 44_100;
            let w = synth_tone_mix(seed, 0.5, sr).unwrap();
            let n = 8192;
            let mags = naive_dft_mag(&w.samples[..n], true);
            let bin_hz = sr as f64 / n as f64;

            // Detect f0: peak bin in [100, 900] Hz, refined by parabolic
            // interpolation on log magnitude.
            let lo = (100.0 / bin_hz).ceil() as usize;
            let hi = (900.0 / bin_hz).floor() as usize;
            let mut peak_bin = lo;
            for k in lo..=hi {
                if mags[k] > mags[peak_bin] {
                    peak_bin = k;
                }
            }
            let (ym, y0, yp) = (
                mags[peak_bin - 1].max(1e-30).ln(),
                mags[peak_bin].max(1e-30).ln(),
                mags[peak_bin + 1].max(1e-30).ln(),
            );
            let delta = 0.5 * (ym - yp) / (ym - 2.0 * y0 + yp);
            let f0_hat = (peak_bin as f64 + delta) * bin_hz;
            assert!((100.0..950.0).contains(&f0_hat), "f0_hat = {f0_hat}");

            let peak = mags.iter().cloned().fold(0.0f64, f64::max);
            let floor = {
                let mut sorted: Vec<f64> = mags.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                sorted[sorted.len() / 2].max(1e-12)
            };

            // (a) tones stand far out of the broadband floor;
            assert!(
                floor <= peak * 10f64.powf(-60.0 / 20.0),
                "seed {seed}: floor {floor} vs peak {peak}"
            );

            // (b) the fundamental is within 20 dB of the strongest bin;
            let kf = (f0_hat / bin_hz).round() as usize;
            let local = mags[kf - 1].max(mags[kf]).max(mags[kf + 1]);
            assert!(
                local >= peak * 10f64.powf(-20.0 / 20.0),
                "seed {seed}: fundamental {local} vs peak {peak}"
            );

            // (c) every bin within 40 dB of the peak lies near a harmonic of
            // f0 (Hann mainlobe plus AM sidebands span a few bins).
            let thresh = peak * 10f64.powf(-40.0 / 20.0);
            let margin = 8.0;
            for (k, &m) in mags.iter().enumerate() {
                if m >= thresh {
                    let harm = (k as f64 * bin_hz / f0_hat).round().max(1.0);
                    let dist = (k as f64 - harm * f0_hat / bin_hz).abs();
                    assert!(
                        dist <= margin,
                        "seed {seed}: bin {k} ({} Hz) is {dist:.1} bins from harmonic {harm}",
                        k as f64 * bin_hz
                    );
                }
            }
        }
    }
}
