//! RIFF/WAV reading and writing.
//!
//! Reads PCM-16/24/32 and IEEE float32, mono or multichannel (downmixed by
//! channel mean). Writes mono float32 (lossless) or PCM-16.

use std::io::Write;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavSampleFormat {
    Float32,
    Pcm16,
}

const FMT_PCM: u16 = 1;
const FMT_IEEE_FLOAT: u16 = 3;
const FMT_EXTENSIBLE: u16 = 0xFFFE;

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::WavFormat {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn unsupported(path: &Path, reason: impl Into<String>) -> Error {
    Error::WavUnsupported {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fmt_err(path, "missing RIFF/WAVE header"));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(&bytes, pos + 4) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(fmt_err(path, "chunk overruns file"));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fmt_err(path, "fmt chunk too small"));
                }
                let mut format = u16_at(body, 0);
                let channels = u16_at(body, 2);
                let sample_rate = u32_at(body, 4);
                let bits = u16_at(body, 14);
                if format == FMT_EXTENSIBLE {
                    if size < 40 {
                        return Err(fmt_err(path, "extensible fmt chunk too small"));
                    }
                    // First two bytes of the SubFormat GUID carry the code.
                    format = u16_at(body, 24);
                }
                fmt = Some(FmtChunk {
                    format,
                    channels,
                    sample_rate,
                    bits,
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_start + size + (size & 1); // chunks are word-aligned
    }

    let fmt = fmt.ok_or_else(|| fmt_err(path, "no fmt chunk"))?;
    let data = data.ok_or_else(|| fmt_err(path, "no data chunk"))?;
    if fmt.channels == 0 {
        return Err(fmt_err(path, "zero channels"));
    }
    if fmt.sample_rate == 0 {
        return Err(fmt_err(path, "zero sample rate"));
    }

    let bytes_per_sample = match (fmt.format, fmt.bits) {
        (FMT_PCM, 16) => 2,
        (FMT_PCM, 24) => 3,
        (FMT_PCM, 32) => 4,
        (FMT_IEEE_FLOAT, 32) => 4,
        (f, b) => {
            return Err(unsupported(path, format!("format {f} with {b} bits")));
        }
    };

    let frame_bytes = bytes_per_sample * fmt.channels as usize;
    let n_frames = data.len() / frame_bytes;
    let ch = fmt.channels as usize;
    let mut samples = Vec::with_capacity(n_frames);
    for fr in 0..n_frames {
        let mut acc = 0.0f64;
        for c in 0..ch {
            let off = fr * frame_bytes + c * bytes_per_sample;
            let v = match (fmt.format, fmt.bits) {
                (FMT_PCM, 16) => {
                    i16::from_le_bytes([data[off], data[off + 1]]) as f64 / 32768.0
                }
                (FMT_PCM, 24) => {
                    let raw = (data[off] as i32)
                        | ((data[off + 1] as i32) << 8)
                        | ((data[off + 2] as i8 as i32) << 16);
                    raw as f64 / 8_388_608.0
                }
                (FMT_PCM, 32) => {
                    i32::from_le_bytes([data[off], data[off + 1], data[off + 2], data[off + 3]])
                        as f64
                        / 2_147_483_648.0
                }
                (FMT_IEEE_FLOAT, 32) => f32::from_le_bytes([
                    data[off],
                    data[off + 1],
                    data[off + 2],
                    data[off + 3],
                ]) as f64,
                _ => unreachable!(),
            };
            acc += v;
        }
        samples.push((acc / ch as f64) as f32);
    }
    // Mono float32 reads must be bit-exact: bypass the f64 downmix path.
    if ch == 1 && fmt.format == FMT_IEEE_FLOAT {
        for (fr, s) in samples.iter_mut().enumerate() {
            let off = fr * 4;
            *s = f32::from_le_bytes([data[off], data[off + 1], data[off + 2], data[off + 3]]);
        }
    }
    Ok(Waveform::new(samples, fmt.sample_rate))
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform, format: WavSampleFormat) -> Result<()> {
    let path = path.as_ref();
    wave.validate()?;

    let (fmt_code, bits): (u16, u16) = match format {
        WavSampleFormat::Float32 => (FMT_IEEE_FLOAT, 32),
        WavSampleFormat::Pcm16 => (FMT_PCM, 16),
    };
    let bytes_per_sample = (bits / 8) as usize;
    let data_len = wave.len() * bytes_per_sample;
    let has_fact = fmt_code == FMT_IEEE_FLOAT;
    let riff_len = 4 + (8 + 16) + if has_fact { 8 + 4 } else { 0 } + 8 + data_len;

    let mut out: Vec<u8> = Vec::with_capacity(riff_len + 8);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(riff_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");

    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&fmt_code.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    let byte_rate = wave.sample_rate * bytes_per_sample as u32;
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&(bytes_per_sample as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());

    if has_fact {
        out.extend_from_slice(b"fact");
        out.extend_from_slice(&4u32.to_le_bytes());
        out.extend_from_slice(&(wave.len() as u32).to_le_bytes());
    }

    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    match format {
        WavSampleFormat::Float32 => {
            for &s in &wave.samples {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        WavSampleFormat::Pcm16 => {
            for &s in &wave.samples {
                out.extend_from_slice(&pcm16_from_f32(s).to_le_bytes());
            }
        }
    }

    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Clamp to [-1, 1) then round half away from zero.
fn pcm16_from_f32(s: f32) -> i16 {
    let v = (s as f64 * 32768.0).round();
    v.clamp(-32768.0, 32767.0) as i16
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::synth_tone_mix;

    #[test]
    fn pcm16_mapping() {
        assert_eq!(pcm16_from_f32(0.5), 16384);
        assert_eq!(pcm16_from_f32(1.5), 32767);
        assert_eq!(pcm16_from_f32(-1.0), -32768);
        assert_eq!(pcm16_from_f32(-1.5), -32768);
        assert_eq!(pcm16_from_f32(0.0), 0);
    }

    #[test]
    fn pcm16_read_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        let w = Waveform::new(vec![0.5, -1.0, 0.25], 44_100);
        write_wav(&p, &w, WavSampleFormat::Pcm16).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.sample_rate, 44_100);
        assert_eq!(r.samples[0], 16384.0 / 32768.0);
        assert_eq!(r.samples[1], -1.0);
        assert_eq!(r.samples[2], 8192.0 / 32768.0);
    }

    #[test]
    fn float32_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tone.wav");
        let w = synth_tone_mix(42, 0.1, 44_100).unwrap();
        write_wav(&p, &w, WavSampleFormat::Float32).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.sample_rate, w.sample_rate);
        assert_eq!(r.samples.len(), w.samples.len());
        for (a, b) in r.samples.iter().zip(&w.samples) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn malformed_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.wav");
        std::fs::write(&p, b"not a wav file at all").unwrap();
        match read_wav(&p) {
            Err(Error::WavFormat { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn stereo_downmix_by_mean() {
        // Hand-assembled stereo PCM-16 file: frames (L, R) = (16384, 0),
        // (-32768, 32767). Mean: 0.25, ~0.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let mut b: Vec<u8> = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36u32 + 8).to_le_bytes());
        b.extend_from_slice(b"WAVE");
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(&8000u32.to_le_bytes());
        b.extend_from_slice(&32000u32.to_le_bytes());
        b.extend_from_slice(&4u16.to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&8u32.to_le_bytes());
        for v in [16384i16, 0, -32768, 32767] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&p, &b).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.samples.len(), 2);
        assert!((r.samples[0] - 0.25).abs() < 1e-7);
        assert!((r.samples[1] - (-1.0 / 65536.0)).abs() < 1e-7);
    }

    #[test]
    fn unsupported_codec_rejected() {
        // 8-bit PCM is not supported.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u8.wav");
        let mut b: Vec<u8> = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36u32 + 2).to_le_bytes());
        b.extend_from_slice(b"WAVE");
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&8000u32.to_le_bytes());
        b.extend_from_slice(&8000u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&8u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&[128u8, 255u8]);
        std::fs::write(&p, &b).unwrap();
        match read_wav(&p) {
            Err(Error::WavUnsupported { .. }) => {}
            other => panic!("expected unsupported error, got {other:?}"),
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn float32_round_trip_property(samples in proptest::collection::vec(-1.0f32..1.0, 1..512)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("prop.wav");
            let w = Waveform::new(samples, 22_050);
            write_wav(&p, &w, WavSampleFormat::Float32).unwrap();
            let r = read_wav(&p).unwrap();
            proptest::prop_assert_eq!(r.samples, w.samples);
        }
    }
}
