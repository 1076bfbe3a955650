use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use latden_core::degrade::ops::{mix_at_snr, white_noise};
use latden_core::metrics::snr_db;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut max_err = 0.0f64;
    for i in 0..1000 {
        let len = rng.random_range(2000..6000);
        let clean = latden_core::audio::synth_tone_mix(i as u64, len as f64 / 16000.0, 16000).unwrap().samples;
        let noise = white_noise(&mut rng, clean.len());
        let target: f64 = rng.random_range(0.0..15.0);
        let (mix, _gain) = mix_at_snr(&clean, &noise, target).unwrap();
        let measured = snr_db(&clean, &mix).unwrap();
        let err = (measured - target).abs();
        if err > max_err {
            max_err = err;
            println!("i {i} len {} target {target:.6} measured {measured:.6} err {err:.3e}", clean.len());
        }
    }
    println!("max |measured - target| over 1000 triples: {max_err:.3e} dB");
}
