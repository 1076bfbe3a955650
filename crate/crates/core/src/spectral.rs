//! Spectral analysis helpers: STFT/iSTFT, mel filterbanks, third-octave bands.
//!
//! Everything here computes in f64 regardless of the caller's sample type;
//! these paths feed metrics and dataset synthesis where drift across platforms
//! would break manifest reproducibility.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { n_fft: 1024, hop: 256 }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return Err(Error::Config(format!(
                "n_fft must be even and >= 2, got {}",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "hop must be in 1..={}, got {}",
                self.n_fft, self.hop
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for a centered transform of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        1 + len / self.hop
    }
}

/// Symmetric Hann window: w[i] = 0.5 (1 - cos(2 pi i / (n-1))).
pub fn hann_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / (n as f64 - 1.0)).cos()))
        .collect()
}

/// Index into a signal of length `n` for position `i` under reflection
/// padding that bounces at the end samples without repeating them.
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Centered onesided STFT; returns `frame_count` rows of `n_fft/2 + 1` bins.
pub fn stft(x: &[f32], cfg: &StftConfig) -> Result<Vec<Vec<Complex<f64>>>> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::InputTooShort("stft needs at least one sample".into()));
    }
    let n_fft = cfg.n_fft;
    let half = n_fft / 2;
    let window = hann_window(n_fft);
    let n_frames = cfg.frame_count(x.len());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n = x.len();

    let frames = crate::par::map_range(n_frames, |f| {
        let start = f as isize * cfg.hop as isize - half as isize;
        let mut buf: Vec<Complex<f64>> = (0..n_fft)
            .map(|i| {
                let src = reflect_index(start + i as isize, n);
                Complex::new(window[i] * x[src] as f64, 0.0)
            })
            .collect();
        fft.process(&mut buf);
        buf.truncate(cfg.bins());
        buf
    });
    Ok(frames)
}

/// Inverse of [`stft`]: weighted overlap-add with per-sample window-energy
/// normalization, trimmed to `out_len` samples.
pub fn istft(frames: &[Vec<Complex<f64>>], cfg: &StftConfig, out_len: usize) -> Result<Vec<f32>> {
    cfg.validate()?;
    let n_fft = cfg.n_fft;
    let half = n_fft / 2;
    let bins = cfg.bins();
    for (i, fr) in frames.iter().enumerate() {
        if fr.len() != bins {
            return Err(Error::shape(
                "istft",
                format!("frame {i} has {} bins, expected {bins}", fr.len()),
            ));
        }
    }
    let window = hann_window(n_fft);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);

    let padded_len = out_len + n_fft; // covers start offset -half .. out_len + half
    let mut acc = vec![0.0f64; padded_len];
    let mut wsq = vec![0.0f64; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for (f, frame) in frames.iter().enumerate() {
        buf[..bins].copy_from_slice(frame);
        for k in bins..n_fft {
            buf[k] = frame[n_fft - k].conj();
        }
        ifft.process(&mut buf);
        let start = f * cfg.hop; // position -half + start in signal coords
        for i in 0..n_fft {
            let t = start + i;
            if t < padded_len {
                let v = buf[i].re / n_fft as f64;
                acc[t] += v * window[i];
                wsq[t] += window[i] * window[i];
            }
        }
    }
    let out = (0..out_len)
        .map(|t| {
            let p = t + half;
            if wsq[p] > 1e-10 {
                (acc[p] / wsq[p]) as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(out)
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper edge; `None` means Nyquist.
    pub fmax: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            stft: StftConfig::default(),
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
        }
    }
}

/// Triangular HTK mel filterbank, row-major `n_mels x (n_fft/2 + 1)`.
/// Every filter must cover at least one bin.
pub fn mel_filterbank<F: Real>(cfg: &MelConfig, sample_rate: u32) -> Result<Vec<F>> {
    cfg.stft.validate()?;
    let nyquist = sample_rate as f64 / 2.0;
    let fmax = cfg.fmax.unwrap_or(nyquist);
    if cfg.n_mels == 0 || cfg.fmin < 0.0 || fmax <= cfg.fmin || fmax > nyquist + 1e-9 {
        return Err(Error::Config(format!(
            "bad mel range: n_mels={} fmin={} fmax={fmax} nyquist={nyquist}",
            cfg.n_mels, cfg.fmin
        )));
    }
    let bins = cfg.stft.bins();
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();

    let mut fb = vec![F::zero(); cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (f_lo, f_c, f_hi) = (pts[m], pts[m + 1], pts[m + 2]);
        let mut nonzero = false;
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / cfg.stft.n_fft as f64;
            let up = (f - f_lo) / (f_c - f_lo).max(1e-12);
            let down = (f_hi - f) / (f_hi - f_c).max(1e-12);
            let w = up.min(down).max(0.0);
            if w > 0.0 {
                fb[m * bins + k] = crate::real::r(w);
                nonzero = true;
            }
        }
        if !nonzero {
            return Err(Error::Config(format!(
                "mel filter {m} covers no FFT bin (center {:.1} Hz); lower n_mels or raise n_fft",
                f_c
            )));
        }
    }
    Ok(fb)
}

/// Reference mel spectrogram on linear STFT magnitudes, frames x n_mels.
pub fn mel_spectrogram(x: &[f32], cfg: &MelConfig, sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    let fb: Vec<f64> = mel_filterbank(cfg, sample_rate)?;
    let bins = cfg.stft.bins();
    let frames = stft(x, &cfg.stft)?;
    Ok(frames
        .iter()
        .map(|fr| {
            (0..cfg.n_mels)
                .map(|m| {
                    (0..bins)
                        .map(|k| fb[m * bins + k] * fr[k].norm())
                        .sum::<f64>()
                })
                .collect()
        })
        .collect())
}

/// One-third-octave band bin indices. Band `j` is centered at
/// `center0 * 2^(j/3)` with edges a sixth of an octave out; bands are
/// contiguous and disjoint. Errors if any band covers no bin or runs past
/// Nyquist.
pub fn third_octave_bands(
    sample_rate: u32,
    n_fft: usize,
    n_bands: usize,
    center0_hz: f64,
) -> Result<Vec<Vec<usize>>> {
    let bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut bands = Vec::with_capacity(n_bands);
    for j in 0..n_bands {
        let center = center0_hz * 2f64.powf(j as f64 / 3.0);
        let lo = center * 2f64.powf(-1.0 / 6.0);
        let hi = center * 2f64.powf(1.0 / 6.0);
        if hi > sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "third-octave band {j} (top edge {hi:.0} Hz) exceeds Nyquist"
            )));
        }
        let members: Vec<usize> = (0..bins)
            .filter(|&k| {
                let f = k as f64 * bin_hz;
                f >= lo && f < hi
            })
            .collect();
        if members.is_empty() {
            return Err(Error::Config(format!(
                "third-octave band {j} around {center:.0} Hz covers no FFT bin"
            )));
        }
        bands.push(members);
    }
    Ok(bands)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(buf: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let n = buf.len();
        (0..n)
            .map(|k| {
                let mut acc = Complex::new(0.0, 0.0);
                for (i, &v) in buf.iter().enumerate() {
                    let th = -std::f64::consts::TAU * k as f64 * i as f64 / n as f64;
                    acc += v * Complex::new(th.cos(), th.sin());
                }
                acc
            })
            .collect()
    }

    fn rand_signal(seed: u64, n: usize) -> Vec<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn first_frame_matches_naive_windowed_dft() {
        let cfg = StftConfig { n_fft: 32, hop: 8 };
        let x = rand_signal(3, 100);
        let frames = stft(&x, &cfg).unwrap();

        let window = hann_window(32);
        let padded: Vec<Complex<f64>> = (0..32)
            .map(|i| {
                let src = reflect_index(i as isize - 16, x.len());
                Complex::new(window[i] * x[src] as f64, 0.0)
            })
            .collect();
        let want = naive_dft(&padded);
        for k in 0..cfg.bins() {
            let d = (frames[0][k] - want[k]).norm();
            assert!(d < 1e-9, "bin {k}: {} vs {}", frames[0][k], want[k]);
        }
    }

    #[test]
    fn parseval_holds_per_frame() {
        // Energy of the windowed frame equals sum |X_k|^2 / N over the full
        // spectrum (onesided bins doubled except DC and Nyquist).
        let cfg = StftConfig { n_fft: 64, hop: 16 };
        let x = rand_signal(11, 300);
        let frames = stft(&x, &cfg).unwrap();
        let window = hann_window(64);
        for (f, frame) in frames.iter().enumerate() {
            let start = f as isize * 16 - 32;
            let time_energy: f64 = (0..64)
                .map(|i| {
                    let s = window[i] * x[reflect_index(start + i as isize, x.len())] as f64;
                    s * s
                })
                .sum();
            let mut freq_energy = frame[0].norm_sqr() + frame[32].norm_sqr();
            for k in 1..32 {
                freq_energy += 2.0 * frame[k].norm_sqr();
            }
            freq_energy /= 64.0;
            assert!(
                (time_energy - freq_energy).abs() <= 1e-9 * time_energy.max(1.0),
                "frame {f}: {time_energy} vs {freq_energy}"
            );
        }
    }

    #[test]
    fn frame_count_exhaustive() {
        let cfg = StftConfig { n_fft: 16, hop: 4 };
        for len in 1..64 {
            let x = rand_signal(len as u64, len);
            let frames = stft(&x, &cfg).unwrap();
            assert_eq!(frames.len(), 1 + len / 4, "len={len}");
            assert_eq!(frames.len(), cfg.frame_count(len));
        }
    }

    #[test]
    fn istft_inverts_stft() {
        let cfg = StftConfig { n_fft: 64, hop: 16 };
        for (seed, len) in [(1u64, 1usize), (2, 2), (3, 5), (4, 100), (5, 1000), (6, 1024)] {
            let x = rand_signal(seed, len);
            let frames = stft(&x, &cfg).unwrap();
            let y = istft(&frames, &cfg, len).unwrap();
            assert_eq!(y.len(), len);
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..len {
                num += ((y[i] - x[i]) as f64).powi(2);
                den += (x[i] as f64).powi(2);
            }
            let rel = (num / den.max(1e-12)).sqrt();
            assert!(rel < 1e-6, "len={len}: rel={rel}");
        }
    }

    #[test]
    fn reflect_bounces_without_edge_repeat() {
        // n = 5: positions -3..8 map to 3 2 1 0 1 2 3 4 3 2 1 0.
        let want = [3usize, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1, 0];
        for (off, &w) in (-3isize..9).zip(want.iter()) {
            assert_eq!(reflect_index(off, 5), w, "offset {off}");
        }
        assert_eq!(reflect_index(-7, 3), 3 - 2); // long bounce stays in range
        assert_eq!(reflect_index(100, 1), 0);
    }

    #[test]
    fn mel_scale_known_point() {
        assert!((hz_to_mel(1000.0) - 999.9855).abs() < 1e-3);
        assert_eq!(hz_to_mel(0.0), 0.0);
        for f in [10.0, 440.0, 1000.0, 7999.0] {
            let back = mel_to_hz(hz_to_mel(f));
            assert!((back - f).abs() < 1e-9 * f);
        }
    }

    #[test]
    fn filterbank_shape_and_coverage() {
        let cfg = MelConfig {
            stft: StftConfig { n_fft: 1024, hop: 256 },
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
        };
        let fb: Vec<f64> = mel_filterbank(&cfg, 44_100).unwrap();
        let bins = cfg.stft.bins();
        assert_eq!(fb.len(), 80 * bins);
        for m in 0..80 {
            let row = &fb[m * bins..(m + 1) * bins];
            let peak = row.iter().cloned().fold(0.0f64, f64::max);
            assert!(peak > 0.0 && peak <= 1.0 + 1e-12, "row {m} peak {peak}");
        }
    }

    #[test]
    fn filterbank_rejects_empty_rows() {
        // 33 bins cannot host 40 distinct triangles.
        let cfg = MelConfig {
            stft: StftConfig { n_fft: 64, hop: 16 },
            n_mels: 40,
            fmin: 0.0,
            fmax: None,
        };
        let err = mel_filterbank::<f64>(&cfg, 16_000).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn mel_spectrogram_is_one_homogeneous() {
        let cfg = MelConfig {
            stft: StftConfig { n_fft: 128, hop: 32 },
            n_mels: 12,
            fmin: 0.0,
            fmax: None,
        };
        let x = rand_signal(21, 500);
        let x2: Vec<f32> = x.iter().map(|&s| 2.0 * s).collect();
        let a = mel_spectrogram(&x, &cfg, 16_000).unwrap();
        let b = mel_spectrogram(&x2, &cfg, 16_000).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (&va, &vb) in ra.iter().zip(rb) {
                assert!((vb - 2.0 * va).abs() <= 1e-9 * va.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn third_octave_bands_at_stoi_rates() {
        let bands = third_octave_bands(10_000, 512, 15, 150.0).unwrap();
        assert_eq!(bands.len(), 15);
        // Hand-checked lowest band: edges 133.7..168.4 Hz at 19.53 Hz/bin
        // hold bins 7 and 8 only.
        assert_eq!(bands[0], vec![7, 8]);
        // Contiguous and disjoint.
        let mut seen = std::collections::HashSet::new();
        for b in &bands {
            assert!(!b.is_empty());
            for &k in b {
                assert!(seen.insert(k), "bin {k} in two bands");
            }
            let (lo, hi) = (b[0], b[b.len() - 1]);
            assert_eq!(b.len(), hi - lo + 1, "band has holes");
        }
        // 16th band would pass Nyquist.
        assert!(third_octave_bands(10_000, 512, 16, 150.0).is_err());
    }
}
