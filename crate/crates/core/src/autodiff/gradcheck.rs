//! Finite-difference validation of the backward pass.
//!
//! Every check rebuilds the graph from scratch per probe and compares the
//! analytic gradient against a central difference in f64. Relative error uses
//! the larger of the two magnitudes as denominator; differences below an
//! absolute floor count as zero so exactly-zero gradients (clamped regions,
//! padding) do not divide by noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct CheckSettings {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the max relative error.
    pub rtol: f64,
    /// Absolute differences at or below this count as exact.
    pub atol: f64,
    /// Cap on probed coordinates; larger inputs are strided.
    pub max_coords: usize,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings { h: 1e-4, rtol: 1e-4, atol: 1e-9, max_coords: 2000 }
    }
}

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub max_rel: f64,
    pub checked_coords: usize,
    pub pass: bool,
}

impl std::fmt::Display for OpReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<22} {}  max rel err {:.3e} over {} coords",
            self.name,
            if self.pass { "ok  " } else { "FAIL" },
            self.max_rel,
            self.checked_coords
        )
    }
}

/// Builder for the function under test: receives the graph and one node per
/// input tensor, returns the output node (any shape; non-scalar outputs are
/// contracted with a fixed random projection).
pub type BuildFn<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'a;

fn projection_for(name: &str, shape: &[usize]) -> Tensor<f64> {
    let mut h = 0xcbf29ce484222325u64;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) { mag } else { -mag }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn check_grads(
    name: &str,
    inputs: &[Tensor<f64>],
    build: &BuildFn,
    settings: &CheckSettings,
) -> Result<OpReport> {
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, &ids)?;
    let proj = if g.value(out).is_scalar() {
        None
    } else {
        Some(projection_for(name, &g.value(out).shape))
    };
    let loss = match &proj {
        Some(p) => {
            let c = g.constant(p.clone());
            g.dot(out, c)?
        }
        None => out,
    };
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape.clone())))
        .collect();

    let eval = |mod_inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = mod_inputs.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = build(&mut g, &ids)?;
        Ok(match &proj {
            Some(p) => g.value(out).data.iter().zip(&p.data).map(|(&a, &b)| a * b).sum(),
            None => g.value(out).item(),
        })
    };

    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let stride = total.div_ceil(settings.max_coords).max(1);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut flat = 0usize;
    for ti in 0..inputs.len() {
        for ci in 0..inputs[ti].numel() {
            if flat % stride == 0 {
                let orig = work[ti].data[ci];
                work[ti].data[ci] = orig + settings.h;
                let lp = eval(&work)?;
                work[ti].data[ci] = orig - settings.h;
                let lm = eval(&work)?;
                work[ti].data[ci] = orig;
                let numeric = (lp - lm) / (2.0 * settings.h);
                let ana = analytic[ti].data[ci];
                let diff = (ana - numeric).abs();
                let rel = if diff <= settings.atol {
                    0.0
                } else {
                    diff / ana.abs().max(numeric.abs()).max(1e-12)
                };
                if rel > max_rel {
                    max_rel = rel;
                }
                checked += 1;
            }
            flat += 1;
        }
    }
    Ok(OpReport {
        name: name.to_string(),
        max_rel,
        checked_coords: checked,
        pass: max_rel < settings.rtol,
    })
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Random values with magnitude at least `min_abs` (keeps probes away from
/// kinks of |x| and clamp edges).
pub fn rand_tensor_away_from_zero(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    min_abs: f64,
    max_abs: f64,
) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(min_abs..max_abs);
            if rng.random_bool(0.5) { mag } else { -mag }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Finite-difference every primitive op at small shapes. Shared by the unit
/// tests, the CLI `gradcheck` command, and the acceptance suite.
pub fn op_suite(settings: &CheckSettings) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9d5e);
    let mut reports = Vec::new();
    macro_rules! check {
        ($name:expr, $inputs:expr, $build:expr) => {
            reports.push(check_grads($name, &$inputs, &$build, settings)?);
        };
    }

    let x = rand_tensor(&mut rng, &[2, 3, 8], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    check!("conv1d", [x, w, b], |g: &mut Graph<f64>, ids: &[NodeId]| {
        g.conv1d(ids[0], ids[1], Some(ids[2]), 2, 1)
    });

    let x = rand_tensor(&mut rng, &[1, 2, 7], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 4], -1.0, 1.0);
    check!("conv1d_nobias", [x, w], |g: &mut Graph<f64>, ids: &[NodeId]| {
        g.conv1d(ids[0], ids[1], None, 1, 0)
    });

    let x = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2], -0.5, 0.5);
    check!("conv_transpose1d", [x, w, b], |g: &mut Graph<f64>, ids: &[NodeId]| {
        g.conv_transpose1d(ids[0], ids[1], Some(ids[2]), 2, 1)
    });

    let x = rand_tensor(&mut rng, &[2, 4, 5], -1.0, 1.0);
    let gamma = rand_tensor_away_from_zero(&mut rng, &[4], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    check!("group_norm", [x, gamma, beta], |g: &mut Graph<f64>, ids: &[NodeId]| {
        g.group_norm(ids[0], ids[1], ids[2], 2, 1e-5)
    });

    let x = rand_tensor(&mut rng, &[2, 3, 4], -3.0, 3.0);
    check!("silu", [x], |g: &mut Graph<f64>, ids: &[NodeId]| Ok(g.silu(ids[0])));

    let a = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    check!("add", [a.clone(), b.clone()], |g: &mut Graph<f64>, ids: &[NodeId]| g.add(ids[0], ids[1]));
    check!("sub", [a.clone(), b.clone()], |g: &mut Graph<f64>, ids: &[NodeId]| g.sub(ids[0], ids[1]));
    check!("mul", [a.clone(), b], |g: &mut Graph<f64>, ids: &[NodeId]| g.mul(ids[0], ids[1]));
    let denom = rand_tensor_away_from_zero(&mut rng, &[2, 3], 0.5, 2.0);
    check!("div", [a, denom], |g: &mut Graph<f64>, ids: &[NodeId]| g.div(ids[0], ids[1]));

    let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    check!("scale", [x.clone()], |g: &mut Graph<f64>, ids: &[NodeId]| Ok(g.scale(ids[0], 1.7)));
    check!("add_scalar", [x], |g: &mut Graph<f64>, ids: &[NodeId]| Ok(g.add_scalar(ids[0], -0.3)));

    let a = rand_tensor(&mut rng, &[1, 2, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[1, 3, 4], -1.0, 1.0);
    check!("concat_channels", [a, b], |g: &mut Graph<f64>, ids: &[NodeId]| {
        g.concat_channels(ids[0], ids[1])
    });

    let x = rand_tensor(&mut rng, &[2, 2, 5], -1.0, 1.0);
    check!("pad_time", [x.clone()], |g: &mut Graph<f64>, ids: &[NodeId]| g.pad_time(ids[0], 2, 3));
    check!("crop_time", [x], |g: &mut Graph<f64>, ids: &[NodeId]| g.crop_time(ids[0], 1, 3));

    let x = rand_tensor(&mut rng, &[2, 1, 10], -1.0, 1.0);
    check!("wave_to_frames", [x], |g: &mut Graph<f64>, ids: &[NodeId]| g.wave_to_frames(ids[0], 4));
    let x = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
    check!("frames_to_wave", [x], |g: &mut Graph<f64>, ids: &[NodeId]| g.frames_to_wave(ids[0], 10));

    let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let sc = rand_tensor_away_from_zero(&mut rng, &[3], 0.5, 1.5);
    let sh = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    check!("channel_affine", [x, sc, sh], |g: &mut Graph<f64>, ids: &[NodeId]| {
        g.channel_affine(ids[0], ids[1], ids[2])
    });

    let x = rand_tensor_away_from_zero(&mut rng, &[3, 5], 0.1, 1.0);
    check!("mean_abs", [x], |g: &mut Graph<f64>, ids: &[NodeId]| Ok(g.mean_abs(ids[0])));
    let x = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    check!("mean_all", [x.clone()], |g: &mut Graph<f64>, ids: &[NodeId]| Ok(g.mean_all(ids[0])));
    check!("sum_sq", [x], |g: &mut Graph<f64>, ids: &[NodeId]| Ok(g.sum_sq(ids[0])));

    let a = rand_tensor(&mut rng, &[7], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[7], -1.0, 1.0);
    check!("dot", [a, b], |g: &mut Graph<f64>, ids: &[NodeId]| g.dot(ids[0], ids[1]));

    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    check!("batch_dot", [a.clone(), b], |g: &mut Graph<f64>, ids: &[NodeId]| g.batch_dot(ids[0], ids[1]));
    check!("batch_sum_sq", [a.clone()], |g: &mut Graph<f64>, ids: &[NodeId]| g.batch_sum_sq(ids[0]));
    let s = rand_tensor_away_from_zero(&mut rng, &[3], 0.5, 1.5);
    check!("mul_batch", [a, s], |g: &mut Graph<f64>, ids: &[NodeId]| g.mul_batch(ids[0], ids[1]));

    let x = rand_tensor(&mut rng, &[3, 4], 0.5, 3.0);
    check!("log10", [x], |g: &mut Graph<f64>, ids: &[NodeId]| Ok(g.log10(ids[0])));

    // Keep clamp probes well away from the boundaries so the central
    // difference never straddles a kink.
    let mut x = rand_tensor(&mut rng, &[3, 6], -2.0, 2.0);
    for v in &mut x.data {
        for edge in [-0.8f64, 0.8] {
            if (*v - edge).abs() < 0.05 {
                *v += 0.1;
            }
        }
    }
    check!("clamp", [x], |g: &mut Graph<f64>, ids: &[NodeId]| Ok(g.clamp(ids[0], -0.8, 0.8)));

    let x = rand_tensor(&mut rng, &[2, 1, 40], -1.0, 1.0);
    check!("stft_mag", [x], |g: &mut Graph<f64>, ids: &[NodeId]| g.stft_mag(ids[0], 16, 4));

    let x = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
    let mat = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    check!("matmul_const", [x], move |g: &mut Graph<f64>, ids: &[NodeId]| {
        g.matmul_const(ids[0], mat.clone())
    });

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn op_suite_passes() {
        let settings = CheckSettings::default();
        let reports = op_suite(&settings).unwrap();
        assert!(reports.len() >= 20);
        for r in &reports {
            assert!(r.pass, "{r}");
            assert!(r.checked_coords > 0, "{r}");
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        // The builder lies: the analytic pass sees f(x) = mean_abs(x), the
        // probe passes see mean_abs(1.01 x). The checker must flag it.
        let calls = Cell::new(0usize);
        let build = move |g: &mut Graph<f64>, ids: &[NodeId]| {
            let n = calls.get();
            calls.set(n + 1);
            let x = if n == 0 { ids[0] } else { g.scale(ids[0], 1.01) };
            Ok(g.mean_abs(x))
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor_away_from_zero(&mut rng, &[4, 4], 0.2, 1.0);
        let report = check_grads("corrupted", &[x], &build, &CheckSettings::default()).unwrap();
        assert!(!report.pass, "checker accepted a wrong gradient: {report}");
        assert!(report.max_rel > 5e-3, "{report}");
    }

    #[test]
    fn strides_cap_probed_coordinates() {
        let settings = CheckSettings { max_coords: 10, ..CheckSettings::default() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[100], -1.0, 1.0);
        let report = check_grads(
            "mean_all_strided",
            &[x],
            &|g: &mut Graph<f64>, ids: &[NodeId]| Ok(g.mean_all(ids[0])),
            &settings,
        )
        .unwrap();
        assert!(report.checked_coords <= 10);
        assert!(report.pass, "{report}");
    }
}
