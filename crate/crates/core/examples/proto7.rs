use std::time::Instant;

use latden_core::codec::{pretrain_toy_codec, reconstruction_l1, Codec, ToyCodecTrainConfig, ToyConvCodec};
use latden_core::losses::si_sdr_db;

fn main() {
    let t0 = Instant::now();
    let sr = 8000u32;
    let chunk = 512usize;
    let chunks: Vec<Vec<f32>> = (0..300)
        .map(|i| latden_core::audio::synth_tone_mix(i as u64, chunk as f64 / sr as f64, sr).unwrap().samples)
        .collect();
    let held: Vec<Vec<f32>> = (1000..1050)
        .map(|i| latden_core::audio::synth_tone_mix(i as u64, chunk as f64 / sr as f64, sr).unwrap().samples)
        .collect();

    let mut cfg = ToyCodecTrainConfig::default();
    let args: Vec<String> = std::env::args().collect();
    if let Some(e) = args.get(1).and_then(|s| s.parse().ok()) {
        cfg.epochs = e;
    }
    if let Some(l) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.lr = l;
    }
    println!("cfg: epochs {} lr {} w_mel {} batch {}", cfg.epochs, cfg.lr, cfg.w_mel, cfg.batch_size);
    let before = reconstruction_l1(&Codec::ToyConv(Box::new(ToyConvCodec::new(cfg.seed))), &chunks).unwrap();
    let trained = pretrain_toy_codec(&chunks, sr, &cfg).unwrap();
    let codec = Codec::ToyConv(Box::new(trained));
    let after = reconstruction_l1(&codec, &chunks).unwrap();
    println!("train L1: {before:.5} -> {after:.5} in {:.1}s", t0.elapsed().as_secs_f64());

    let mut dbs = Vec::new();
    for x in &held {
        let y = codec.decode(&codec.encode(x).unwrap()).unwrap();
        dbs.push(si_sdr_db(&y[..x.len()], x).unwrap());
    }
    let mean = dbs.iter().sum::<f64>() / dbs.len() as f64;
    let min = dbs.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("held-out round-trip si-sdr: mean {mean:.2} dB min {min:.2} dB, total {:.1}s", t0.elapsed().as_secs_f64());
}
