use std::path::PathBuf;
use std::time::Instant;

use latden_core::codec::Codec;
use latden_core::degrade::{build_dataset, generate_tone_corpus, DatasetConfig};
use latden_core::denoiser::UNetConfig;
use latden_core::metrics;
use latden_core::trainer::{train, TrainConfig, TrainSetup};

fn main() {
    let t0 = Instant::now();
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let base: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let levels: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    let w_sisdr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let w_mel: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let variants: u32 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(4);
    let chunk: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(3200);
    let hop: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(50);
    let sr = 8000u32;

    let root = PathBuf::from("target/proto6");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let src = root.join("source");
    generate_tone_corpus(&src, 300, chunk as f64 / sr as f64, sr, 1).unwrap();
    let mut dcfg = DatasetConfig::with_source(src);
    dcfg.sample_rate = sr;
    dcfg.chunk_len = chunk;
    dcfg.variants = variants;
    dcfg.seed = 1;
    let data_dir = root.join("data");
    let entries = build_dataset(&dcfg, &data_dir).unwrap();
    println!("dataset: {} entries in {:.1}s", entries.len(), t0.elapsed().as_secs_f64());

    let unet = UNetConfig {
        in_channels: hop,
        base_channels: base,
        levels,
        max_channels: 512,
        res_blocks_per_level: 2,
        norm_groups: 8,
    };
    let mut tcfg = TrainConfig::default();
    tcfg.epochs = epochs;
    tcfg.seed = 0;
    tcfg.weights.w_sisdr = w_sisdr;
    tcfg.weights.w_mel = w_mel;
    let setup = TrainSetup {
        manifest: data_dir.join("manifest.jsonl"),
        out_dir: root.join("run"),
        codec: Codec::identity(hop).unwrap(),
        unet,
        config: tcfg,
    };
    let t1 = Instant::now();
    let outcome = train(&setup).unwrap();
    let train_s = t1.elapsed().as_secs_f64();
    println!(
        "train: {} epochs in {:.1}s ({:.1}s/epoch), best epoch {} val {:.5}",
        epochs,
        train_s,
        train_s / epochs as f64,
        outcome.best_epoch,
        outcome.best_val
    );
    for row in &outcome.curves {
        println!(
            "  epoch {:>2} lr {:.2e} sisdr_w {:.2} train {:.5} val {:.5} l1 {:.5} mel {:.5} sisdr {:.2} dB",
            row.epoch, row.lr, row.sisdr_w, row.train_total, row.val_total, row.l1, row.mel, row.sisdr_db
        );
    }

    let t2 = Instant::now();
    let report = metrics::evaluate(&setup.manifest, &outcome.best_path, 1000, 0).unwrap();
    println!(
        "eval: {} files in {:.1}s\n{}",
        report.n_files,
        t2.elapsed().as_secs_f64(),
        metrics::render_table(&report)
    );
    println!(
        "si-sdr gain: {:.2} dB (noisy {:.2} -> denoised {:.2}), total {:.1}s",
        report.denoised_mean.si_sdr_db - report.noisy_mean.si_sdr_db,
        report.noisy_mean.si_sdr_db,
        report.denoised_mean.si_sdr_db,
        t0.elapsed().as_secs_f64()
    );
}
