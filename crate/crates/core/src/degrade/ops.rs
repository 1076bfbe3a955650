//! Degradation primitives. All gain/energy math runs in f64 with a single
//! rounding to f32 at the end so measured SNRs land within micro-dB of the
//! requested value.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::spectral::{istft, stft, StftConfig};

/// Unit-variance Gaussian noise.
pub fn white_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            v as f32
        })
        .collect()
}

/// Mix `noise` into `clean` so the clean-to-added-noise power ratio is
/// `snr_db`. Returns the mix and the applied noise gain. A silent clean
/// signal yields gain 0 (the mix equals the input); silent noise cannot be
/// scaled to any target and is an error.
pub fn mix_at_snr(clean: &[f32], noise: &[f32], snr_db: f64) -> Result<(Vec<f32>, f64)> {
    if clean.len() != noise.len() {
        return Err(Error::InvalidArg(format!(
            "mix_at_snr length mismatch: clean {} vs noise {}",
            clean.len(),
            noise.len()
        )));
    }
    if clean.is_empty() {
        return Err(Error::InputTooShort("mix_at_snr on empty signal".into()));
    }
    let n = clean.len() as f64;
    let p_clean: f64 = clean.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n;
    let p_noise: f64 = noise.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n;
    if !(p_noise > 0.0) || !p_noise.is_finite() || !p_clean.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "mix_at_snr needs finite powers and non-silent noise (clean {p_clean}, noise {p_noise})"
        )));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mixed = clean
        .iter()
        .zip(noise)
        .map(|(&c, &w)| (c as f64 + gain * w as f64) as f32)
        .collect();
    Ok((mixed, gain))
}

/// Synthetic room impulse response: a unit direct path at n = 0 followed
/// (after the predelay) by exponentially decaying Gaussian noise reaching
/// -60 dB at `rt60_s`. Length is 1.5 * rt60.
pub fn synth_rir(rng: &mut ChaCha8Rng, rt60_s: f64, predelay_s: f64, sample_rate: u32) -> Result<Vec<f32>> {
    if !(rt60_s > 0.0) || predelay_s < 0.0 {
        return Err(Error::InvalidArg(format!(
            "synth_rir needs rt60 > 0 and predelay >= 0 (got {rt60_s}, {predelay_s})"
        )));
    }
    let sr = sample_rate as f64;
    let len = ((1.5 * rt60_s * sr).ceil() as usize).max(2);
    let tail_start = ((predelay_s * sr).round() as usize).max(1);
    let sigma = 0.05;
    // exp(-6.908 n / (rt60 sr)) is -60 dB of amplitude at n = rt60 sr.
    let decay = -3.0 * std::f64::consts::LN_10 / (rt60_s * sr);
    let mut h = vec![0.0f32; len];
    h[0] = 1.0;
    for (n, slot) in h.iter_mut().enumerate().skip(tail_start) {
        let g: f64 = rng.sample(StandardNormal);
        *slot = (sigma * g * (decay * n as f64).exp()) as f32;
    }
    Ok(h)
}

/// Convolve with an impulse response via FFT, truncated to the input length.
/// If the result clips (peak above 0.999) the whole signal is rescaled.
pub fn apply_reverb(x: &[f32], rir: &[f32]) -> Result<Vec<f32>> {
    if x.is_empty() || rir.is_empty() {
        return Err(Error::InputTooShort("apply_reverb on empty input".into()));
    }
    let full = x.len() + rir.len() - 1;
    let size = full.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(size);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(size);

    let mut xa: Vec<Complex<f64>> = x
        .iter()
        .map(|&v| Complex::new(v as f64, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut ha: Vec<Complex<f64>> = rir
        .iter()
        .map(|&v| Complex::new(v as f64, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    fft.process(&mut xa);
    fft.process(&mut ha);
    for (a, b) in xa.iter_mut().zip(&ha) {
        *a *= b;
    }
    ifft.process(&mut xa);
    let scale = 1.0 / size as f64;
    let mut out: Vec<f64> = xa[..x.len()].iter().map(|c| c.re * scale).collect();
    let peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.999 {
        let k = 0.999 / peak;
        for v in &mut out {
            *v *= k;
        }
    }
    Ok(out.iter().map(|&v| v as f32).collect())
}

/// One attenuated time segment with raised-cosine edges.
#[derive(Debug, Clone, Copy)]
pub struct TimeDip {
    pub start: usize,
    pub len: usize,
    pub gain: f32,
    /// Crossfade length at each edge, in samples.
    pub fade: usize,
}

/// Multiply the signal by a dip profile per segment: unity outside, `gain`
/// inside, raised-cosine ramps over `fade` samples at both edges.
pub fn apply_time_dips(x: &[f32], dips: &[TimeDip]) -> Vec<f32> {
    let mut out: Vec<f32> = x.to_vec();
    for d in dips {
        let len = d.len.min(x.len().saturating_sub(d.start));
        if len == 0 {
            continue;
        }
        let fade = d.fade.min(len / 2);
        let g = d.gain as f64;
        for j in 0..len {
            let w = if j < fade {
                let u = (j + 1) as f64 / (fade + 1) as f64;
                g + (1.0 - g) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
            } else if j >= len - fade {
                let u = (len - j) as f64 / (fade + 1) as f64;
                g + (1.0 - g) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
            } else {
                g
            };
            out[d.start + j] = (out[d.start + j] as f64 * w) as f32;
        }
    }
    out
}

/// One attenuated frequency band.
#[derive(Debug, Clone, Copy)]
pub struct BandMask {
    pub lo_hz: f64,
    pub hi_hz: f64,
    pub atten_db: f64,
}

/// Scale STFT magnitudes (1024/256, Hann) inside each band, keep phase, and
/// resynthesize by weighted overlap-add with per-sample window-energy
/// normalization.
pub fn apply_band_masks(x: &[f32], sample_rate: u32, masks: &[BandMask]) -> Result<Vec<f32>> {
    let cfg = StftConfig { n_fft: 1024, hop: 256 };
    let mut frames = stft(x, &cfg)?;
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    for m in masks {
        let k = 10f64.powf(-m.atten_db / 20.0);
        for frame in &mut frames {
            for (bin, c) in frame.iter_mut().enumerate() {
                let f = bin as f64 * bin_hz;
                if f >= m.lo_hz && f < m.hi_hz {
                    *c *= k;
                }
            }
        }
    }
    istft(&frames, &cfg, x.len())
}

/// Draw parameters for codec-style dropouts (time dips) and band losses,
/// apply both stages, and report the drawn structures for the manifest.
pub fn nc_artifacts(
    x: &[f32],
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, Vec<TimeDip>, Vec<BandMask>)> {
    if x.is_empty() {
        return Err(Error::InputTooShort("nc_artifacts on empty signal".into()));
    }
    let sr = sample_rate as f64;
    let n_dips: usize = rng.random_range(1..=4);
    let mut dips = Vec::with_capacity(n_dips);
    for _ in 0..n_dips {
        let len_ms: f64 = rng.random_range(50.0..400.0);
        let gain: f32 = rng.random_range(0.1..0.7);
        let len = ((len_ms / 1000.0 * sr).round() as usize).clamp(1, x.len());
        let start = if x.len() > len { rng.random_range(0..=x.len() - len) } else { 0 };
        dips.push(TimeDip { start, len, gain, fade: (0.010 * sr).round() as usize });
    }
    let dipped = apply_time_dips(x, &dips);

    let nyq = sr / 2.0;
    let hi_limit = (0.9 * nyq).min(16_000.0);
    let lo_limit = 200f64.min(hi_limit / 2.0);
    let n_bands: usize = rng.random_range(1..=3);
    let mut masks = Vec::with_capacity(n_bands);
    for _ in 0..n_bands {
        let center = lo_limit * (hi_limit / lo_limit).powf(rng.random::<f64>());
        let width_oct: f64 = rng.random_range(1.0 / 3.0..1.0);
        let atten_db: f64 = rng.random_range(20.0..40.0);
        masks.push(BandMask {
            lo_hz: (center * 2f64.powf(-width_oct / 2.0)).max(0.0),
            hi_hz: (center * 2f64.powf(width_oct / 2.0)).min(nyq),
            atten_db,
        });
    }
    let out = apply_band_masks(&dipped, sample_rate, &masks)?;
    Ok((out, dips, masks))
}
