//! Windowed-sinc sample-rate conversion (Kaiser window, polyphase phases).

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct ResampleParams {
    /// Kernel half-width in source samples.
    pub taps_per_side: usize,
    pub kaiser_beta: f64,
}

impl Default for ResampleParams {
    fn default() -> Self {
        ResampleParams {
            taps_per_side: 64,
            kaiser_beta: 8.6,
        }
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_sq = x * x / 4.0;
    for k in 1..64 {
        term *= half_sq / ((k * k) as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(t: f64) -> f64 {
    if t.abs() < 1e-12 {
        1.0
    } else {
        let p = std::f64::consts::PI * t;
        p.sin() / p
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Kernel taps for one fractional phase. `t` runs over `k - frac` for
/// `k in 1-taps ..= taps`; normalized so interior DC gain is exactly 1.
fn phase_kernel(frac: f64, cutoff: f64, p: &ResampleParams) -> Vec<f64> {
    let taps = p.taps_per_side as i64;
    let i0_beta = bessel_i0(p.kaiser_beta);
    let mut kernel = Vec::with_capacity((2 * taps) as usize);
    let mut sum = 0.0;
    for k in (1 - taps)..=taps {
        let t = k as f64 - frac;
        let x = t / taps as f64;
        let h = if x.abs() <= 1.0 {
            cutoff * sinc(cutoff * t) * bessel_i0(p.kaiser_beta * (1.0 - x * x).max(0.0).sqrt())
                / i0_beta
        } else {
            0.0
        };
        kernel.push(h);
        sum += h;
    }
    if sum.abs() > 1e-12 {
        for h in &mut kernel {
            *h /= sum;
        }
    }
    kernel
}

pub fn resample(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    resample_with(wave, target_rate, &ResampleParams::default())
}

pub fn resample_with(
    wave: &Waveform,
    target_rate: u32,
    params: &ResampleParams,
) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidArg("target_rate must be > 0".into()));
    }
    if target_rate == wave.sample_rate {
        return Ok(wave.clone());
    }
    let src = wave.sample_rate as u64;
    let dst = target_rate as u64;
    let g = gcd(src, dst);
    let up = (dst / g) as usize; // number of distinct fractional phases
    let down = src / g;

    let out_len = ((wave.len() as f64) * dst as f64 / src as f64).round() as usize;
    let cutoff = (dst as f64 / src as f64).min(1.0);
    let taps = params.taps_per_side as i64;

    // Output sample j sits at source position j*down/up. With `up` reduced
    // phases the fractional parts repeat with period `up`; precompute one
    // kernel per phase unless the phase count is unreasonably large.
    let table: Option<Vec<Vec<f64>>> = if up <= 8192 {
        Some(
            (0..up)
                .map(|r| phase_kernel(r as f64 / up as f64, cutoff, params))
                .collect(),
        )
    } else {
        None
    };

    let x = &wave.samples;
    let n = x.len() as i64;
    let out: Vec<f32> = crate::par::map_range(out_len, |j| {
        let num = j as u64 * down;
        let i0 = (num / up as u64) as i64;
        let r = (num % up as u64) as usize;
        let owned;
        let kernel: &[f64] = match &table {
            Some(t) => &t[r],
            None => {
                owned = phase_kernel(r as f64 / up as f64, cutoff, params);
                &owned
            }
        };
        let mut acc = 0.0f64;
        for (ki, &h) in kernel.iter().enumerate() {
            let idx = i0 + (1 - taps) + ki as i64;
            if idx >= 0 && idx < n {
                acc += h * x[idx as usize] as f64;
            }
        }
        acc as f32
    });

    Ok(Waveform::new(out, target_rate))
}
