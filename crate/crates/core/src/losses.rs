//! Waveform-domain training objectives: L1, mel-spectrogram distance, and
//! negative SI-SDR, combined under an epoch curriculum that holds the SI-SDR
//! term out of the total until a configured epoch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::real::{r, Real};
use crate::spectral::{mel_filterbank, MelConfig};

pub const SI_SDR_EPS: f64 = 1e-8;
pub const SI_SDR_CLAMP_DB: f64 = 60.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_mel: f64,
    pub w_sisdr: f64,
    /// Swap the mel term's entrywise L1 for L2.
    pub mel_l2: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_l1: 1.0, w_mel: 1.0, w_sisdr: 0.01, mel_l2: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_l1, self.w_mel, self.w_sisdr];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {ws:?}")));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSchedule {
    pub sisdr_start_epoch: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule { sisdr_start_epoch: 5 }
    }
}

impl CurriculumSchedule {
    /// The SI-SDR weight applied at `epoch`: exactly 0.0 before the start
    /// epoch, `w_sisdr` from it on.
    pub fn sisdr_weight(&self, epoch: usize, weights: &LossWeights) -> f64 {
        if epoch >= self.sisdr_start_epoch {
            weights.w_sisdr
        } else {
            0.0
        }
    }
}

/// Mean absolute error between two waveform batches of identical shape.
pub fn l1_waveform<F: Real>(g: &mut Graph<F>, y_hat: NodeId, y: NodeId) -> Result<NodeId> {
    let d = g.sub(y_hat, y)?;
    Ok(g.mean_abs(d))
}

/// Mean entrywise distance between mel spectrograms of [B,1,T] batches.
pub fn mel_loss<F: Real>(
    g: &mut Graph<F>,
    y_hat: NodeId,
    y: NodeId,
    mel: &MelConfig,
    sample_rate: u32,
    l2: bool,
) -> Result<NodeId> {
    let fbank = mel_filterbank::<F>(mel, sample_rate)?;
    let bins = mel.stft.bins();
    let mat = Tensor::new(vec![mel.n_mels, bins], fbank);
    let ma = g.stft_mag(y_hat, mel.stft.n_fft, mel.stft.hop)?;
    let mb = g.stft_mag(y, mel.stft.n_fft, mel.stft.hop)?;
    let ma = g.matmul_const(ma, mat.clone())?;
    let mb = g.matmul_const(mb, mat)?;
    let d = g.sub(ma, mb)?;
    if l2 {
        let n = g.value(d).numel() as f64;
        let ss = g.sum_sq(d);
        Ok(g.scale(ss, r::<F>(1.0 / n)))
    } else {
        Ok(g.mean_abs(d))
    }
}

/// Scale-invariant SDR in dB for a single pair, double precision. The target
/// projection absorbs any global scale on the estimate; a zero projection or
/// zero error saturates to the clamp bound; the result is clamped to +-60 dB.
pub fn si_sdr_db(y_hat: &[f32], y: &[f32]) -> Result<f64> {
    let a: Vec<f64> = y_hat.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    si_sdr_db_f64(&a, &b)
}

pub fn si_sdr_db_f64(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    if y_hat.len() != y.len() {
        return Err(Error::InvalidArg(format!("si_sdr_db length mismatch: {} vs {}", y_hat.len(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::InputTooShort("si_sdr_db on empty signals".into()));
    }
    let mut dot = 0.0f64;
    let mut ss_y = 0.0f64;
    for (&a, &b) in y_hat.iter().zip(y) {
        dot += a * b;
        ss_y += b * b;
    }
    if ss_y <= 0.0 {
        return Err(Error::DegenerateInput("si_sdr_db reference signal is silent".into()));
    }
    // No epsilons here, unlike the graph version: the scalar metric must be
    // exactly scale-invariant and hit 0 dB on equal-power cases; the edge
    // cases a guard would mask are handled explicitly instead.
    let alpha = dot / ss_y;
    let mut p_s = 0.0f64;
    let mut p_e = 0.0f64;
    for (&a, &b) in y_hat.iter().zip(y) {
        let s = alpha * b;
        let e = a - s;
        p_s += s * s;
        p_e += e * e;
    }
    let db = if p_s <= 0.0 {
        -SI_SDR_CLAMP_DB
    } else if p_e <= 0.0 {
        SI_SDR_CLAMP_DB
    } else {
        10.0 * (p_s / p_e).log10()
    };
    Ok(db.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

/// Batch-mean SI-SDR in dB as a differentiable graph node. Inputs are any
/// matching [B,...] shapes; each batch item is reduced independently and the
/// clamped per-item dB values are averaged.
pub fn si_sdr_db_graph<F: Real>(g: &mut Graph<F>, y_hat: NodeId, y: NodeId) -> Result<NodeId> {
    let eps = r::<F>(SI_SDR_EPS);
    let ss_y = g.batch_sum_sq(y)?;
    if g.value(ss_y).data.iter().any(|&v| v <= F::zero()) {
        return Err(Error::DegenerateInput("si_sdr reference contains a silent batch item".into()));
    }
    let dot = g.batch_dot(y_hat, y)?;
    let denom = g.add_scalar(ss_y, eps);
    let alpha = g.div(dot, denom)?;
    let s_target = g.mul_batch(y, alpha)?;
    let e_noise = g.sub(y_hat, s_target)?;
    let p_s = g.batch_sum_sq(s_target)?;
    let p_e = g.batch_sum_sq(e_noise)?;
    let num = g.add_scalar(p_s, eps);
    let den = g.add_scalar(p_e, eps);
    let ratio = g.div(num, den)?;
    let lg = g.log10(ratio);
    let db = g.scale(lg, r::<F>(10.0));
    let clamped = g.clamp(db, r::<F>(-SI_SDR_CLAMP_DB), r::<F>(SI_SDR_CLAMP_DB));
    Ok(g.mean_all(clamped))
}

/// Negative batch-mean SI-SDR (the minimized form).
pub fn si_sdr_loss<F: Real>(g: &mut Graph<F>, y_hat: NodeId, y: NodeId) -> Result<NodeId> {
    let db = si_sdr_db_graph(g, y_hat, y)?;
    Ok(g.scale(db, r::<F>(-1.0)))
}

/// Node handles for the combined objective. `sisdr_db` is always built for
/// reporting; it only feeds `total` when the curriculum has reached
/// `sisdr_start_epoch` and its weight is nonzero.
pub struct LossBreakdown {
    pub total: NodeId,
    pub l1: NodeId,
    pub mel: NodeId,
    pub sisdr_db: NodeId,
    pub sisdr_active: bool,
}

pub fn combined_loss<F: Real>(
    g: &mut Graph<F>,
    y_hat: NodeId,
    y: NodeId,
    weights: &LossWeights,
    epoch: usize,
    schedule: &CurriculumSchedule,
    mel: &MelConfig,
    sample_rate: u32,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let l1 = l1_waveform(g, y_hat, y)?;
    let mel_term = mel_loss(g, y_hat, y, mel, sample_rate, weights.mel_l2)?;
    let sisdr_db = si_sdr_db_graph(g, y_hat, y)?;
    let w_sisdr = schedule.sisdr_weight(epoch, weights);
    let sisdr_active = w_sisdr > 0.0;

    let mut total = g.scale(l1, r::<F>(weights.w_l1));
    if weights.w_mel > 0.0 {
        let m = g.scale(mel_term, r::<F>(weights.w_mel));
        total = g.add(total, m)?;
    }
    if sisdr_active {
        let s = g.scale(sisdr_db, r::<F>(-w_sisdr));
        total = g.add(total, s)?;
    }
    Ok(LossBreakdown { total, l1, mel: mel_term, sisdr_db, sisdr_active })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_grads, rand_tensor, CheckSettings};
    use crate::spectral::StftConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave_node(g: &mut Graph<f64>, data: &[f64], needs: bool) -> NodeId {
        g.input(Tensor::new(vec![1, 1, data.len()], data.to_vec()), needs)
    }

    #[test]
    fn l1_hand_values() {
        let mut g = Graph::<f64>::new();
        let y = wave_node(&mut g, &[1.0, -1.0], false);
        let yh = wave_node(&mut g, &[0.0, 0.0], true);
        let l = l1_waveform(&mut g, yh, y).unwrap();
        assert_eq!(g.value(l).item(), 1.0);

        let mut g = Graph::<f64>::new();
        let y = wave_node(&mut g, &[0.3, -0.2, 0.9], false);
        let same = wave_node(&mut g, &[0.3, -0.2, 0.9], true);
        let l = l1_waveform(&mut g, same, y).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let mut g = Graph::<f64>::new();
        let y = wave_node(&mut g, &[0.3, -0.2, 0.9], false);
        let off = wave_node(&mut g, &[0.4, -0.1, 1.0], true);
        let l = l1_waveform(&mut g, off, y).unwrap();
        assert!((g.value(l).item() - 0.1).abs() < 1e-12);
    }

    fn small_mel(n_fft: usize, hop: usize, n_mels: usize) -> MelConfig {
        MelConfig { stft: StftConfig { n_fft, hop }, n_mels, fmin: 0.0, fmax: None }
    }

    #[test]
    fn mel_loss_zero_iff_equal_and_one_homogeneous() {
        let sr = 8000;
        let cfg = small_mel(128, 32, 12);
        let wave: Vec<f64> = (0..512)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin() * 0.5)
            .collect();

        let mut g = Graph::<f64>::new();
        let y = wave_node(&mut g, &wave, false);
        let same = wave_node(&mut g, &wave, true);
        let l = mel_loss(&mut g, same, y, &cfg, sr, false).unwrap();
        assert!(g.value(l).item() < 1e-14);

        // mel is linear in magnitude, so |Mel(2y) - Mel(y)| = Mel(y).
        let doubled: Vec<f64> = wave.iter().map(|v| v * 2.0).collect();
        let mut g = Graph::<f64>::new();
        let y = wave_node(&mut g, &wave, false);
        let yh = wave_node(&mut g, &doubled, true);
        let l = mel_loss(&mut g, yh, y, &cfg, sr, false).unwrap();

        let f32_wave: Vec<f32> = wave.iter().map(|&v| v as f32).collect();
        let mel_ref = crate::spectral::mel_spectrogram(&f32_wave, &cfg, sr).unwrap();
        let total: f64 = mel_ref.iter().flatten().sum();
        let count: usize = mel_ref.iter().map(|r| r.len()).sum();
        let expected = total / count as f64;
        let got = g.value(l).item();
        assert!(
            (got - expected).abs() <= 1e-7 * expected.max(1e-3),
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn mel_loss_gradient_matches_finite_differences() {
        let cfg = small_mel(128, 32, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let y = rand_tensor(&mut rng, &[1, 1, 512], -0.8, 0.8);
        let yh = rand_tensor(&mut rng, &[1, 1, 512], -0.8, 0.8);
        let report = check_grads(
            "mel_loss_composite",
            &[yh, y],
            &|g, ids| mel_loss(g, ids[0], ids[1], &cfg, 8000, false),
            &CheckSettings { max_coords: 300, ..CheckSettings::default() },
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn si_sdr_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let y = rand_tensor(&mut rng, &[2, 1, 64], -1.0, 1.0);
        let yh = rand_tensor(&mut rng, &[2, 1, 64], -1.0, 1.0);
        let report = check_grads(
            "si_sdr_composite",
            &[yh, y],
            &|g, ids| si_sdr_loss(g, ids[0], ids[1]),
            &CheckSettings::default(),
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn si_sdr_hand_values() {
        // Projection keeps only the aligned component: signal and error power
        // are both exactly 1, so the ratio is exactly 0 dB.
        let db = si_sdr_db(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(db, 0.0, "got {db}");

        let y = [0.4f32, -0.3, 0.8, 0.1];
        assert_eq!(si_sdr_db(&y, &y).unwrap(), SI_SDR_CLAMP_DB);
        let scaled: Vec<f32> = y.iter().map(|v| v * 3.5).collect();
        assert_eq!(si_sdr_db(&scaled, &y).unwrap(), SI_SDR_CLAMP_DB);

        assert!(matches!(
            si_sdr_db(&y, &[0.0, 0.0, 0.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn graph_si_sdr_matches_plain_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let t = 200;
            let y: Vec<f32> = (0..t).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let yh: Vec<f32> = y.iter().map(|v| v + rng.random_range(-0.3f32..0.3)).collect();
            let plain = si_sdr_db(&yh, &y).unwrap();
            let mut g = Graph::<f64>::new();
            let yn = wave_node(&mut g, &y.iter().map(|&v| v as f64).collect::<Vec<_>>(), false);
            let yhn = wave_node(&mut g, &yh.iter().map(|&v| v as f64).collect::<Vec<_>>(), true);
            let node = si_sdr_db_graph(&mut g, yhn, yn).unwrap();
            assert!((g.value(node).item() - plain).abs() < 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn si_sdr_is_scale_invariant(seed in 0u64..5000) {
            // The scalar metric has no eps terms, so the only invariance error
            // is f64 rounding of the scaled inputs; 1e-9 is generous.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = 1024;
            let y: Vec<f64> = (0..t)
                .map(|_| rng.random_range(5.0f64..15.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let yh: Vec<f64> = y
                .iter()
                .map(|&v| 0.8 * v + rng.random_range(2.0f64..6.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let base = si_sdr_db_f64(&yh, &y).unwrap();
            for alpha in [0.1f64, 1.0, 10.0] {
                let scaled: Vec<f64> = yh.iter().map(|v| v * alpha).collect();
                let db = si_sdr_db_f64(&scaled, &y).unwrap();
                prop_assert!((db - base).abs() <= 1e-9 * base.abs().max(1.0),
                    "alpha {alpha}: {db} vs {base}");
            }
            for beta in [0.5f64, 2.0, 4.0] {
                let yref: Vec<f64> = y.iter().map(|v| v * beta).collect();
                let db = si_sdr_db_f64(&yh, &yref).unwrap();
                prop_assert!((db - base).abs() <= 1e-9 * base.abs().max(1.0),
                    "beta {beta}: {db} vs {base}");
            }
        }
    }

    #[test]
    fn combined_loss_curriculum_gates_si_sdr() {
        let sr = 8000;
        let cfg = small_mel(128, 32, 12);
        let weights = LossWeights::default();
        let sched = CurriculumSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<f64> = (0..512).map(|_| rng.random_range(-0.8..0.8)).collect();
        let yh: Vec<f64> = y.iter().map(|v| v * 0.7 + 0.05).collect();

        let eval = |epoch: usize| {
            let mut g = Graph::<f64>::new();
            let yn = wave_node(&mut g, &y, false);
            let yhn = wave_node(&mut g, &yh, true);
            let b = combined_loss(&mut g, yhn, yn, &weights, epoch, &sched, &cfg, sr).unwrap();
            (
                g.value(b.total).item(),
                g.value(b.l1).item(),
                g.value(b.mel).item(),
                g.value(b.sisdr_db).item(),
                b.sisdr_active,
            )
        };

        let (t0, l1_0, mel_0, sdb_0, active_0) = eval(0);
        let (t4, _, _, _, active_4) = eval(4);
        let (t5, l1_5, mel_5, sdb_5, active_5) = eval(5);
        assert!(!active_0 && !active_4 && active_5);
        // Off-curriculum total is exactly the weighted L1 + mel.
        assert!((t0 - (l1_0 + mel_0)).abs() < 1e-12);
        assert_eq!(t0, t4);
        // The breakdown reports SI-SDR even while it is gated out.
        assert!(sdb_0.is_finite() && (sdb_0 - sdb_5).abs() < 1e-12);
        assert!((t5 - (l1_5 + mel_5 - 0.01 * sdb_5)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_weights_reduce_to_single_term() {
        let sr = 8000;
        let cfg = small_mel(128, 32, 12);
        let weights = LossWeights { w_l1: 1.0, w_mel: 0.0, w_sisdr: 0.0, mel_l2: false };
        let mut g = Graph::<f64>::new();
        let y = wave_node(&mut g, &vec![0.25; 512], false);
        let yh = wave_node(&mut g, &vec![-0.25; 512], true);
        let b = combined_loss(&mut g, yh, y, &weights, 10, &CurriculumSchedule::default(), &cfg, sr).unwrap();
        assert_eq!(g.value(b.total).item(), g.value(b.l1).item());
        assert_eq!(g.value(b.total).item(), 0.5);

        assert!(LossWeights { w_l1: 0.0, w_mel: 0.0, w_sisdr: 0.0, mel_l2: false }.validate().is_err());
        assert!(LossWeights { w_l1: -1.0, ..Default::default() }.validate().is_err());
    }
}
