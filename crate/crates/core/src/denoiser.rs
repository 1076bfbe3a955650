//! Latent-domain denoising U-Net over (B, C, F) tensors: five strided
//! down/up levels with pre-activation residual blocks (GroupNorm, SiLU,
//! conv K3) and concatenated skip connections. Sequence length is preserved
//! for every F by internal padding to a multiple of 2^levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::real::{r, Real};

pub const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub max_channels: usize,
    pub res_blocks_per_level: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 32,
            base_channels: 64,
            levels: 5,
            max_channels: 512,
            res_blocks_per_level: 2,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    /// Channel count at level `l`: base doubled per level, capped.
    pub fn ch(&self, l: usize) -> usize {
        (self.base_channels << l).min(self.max_channels)
    }

    /// Encoder feature channels per level, e.g. [64,128,256,512,512].
    pub fn channel_trace(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.ch(l)).collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.ch(self.levels)
    }

    pub fn time_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.levels == 0 {
            return Err(Error::Config("unet channels and levels must be >= 1".into()));
        }
        if self.res_blocks_per_level == 0 {
            return Err(Error::Config("unet needs at least one residual block per level".into()));
        }
        if self.max_channels < self.base_channels {
            return Err(Error::Config("max_channels must be >= base_channels".into()));
        }
        for l in 0..=self.levels {
            if self.ch(l) % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "norm_groups {} does not divide level-{l} channels {}",
                    self.norm_groups,
                    self.ch(l)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ResBlockParams {
    pub gn1_g: Tensor<f32>,
    pub gn1_b: Tensor<f32>,
    pub conv1_w: Tensor<f32>,
    pub conv1_b: Tensor<f32>,
    pub gn2_g: Tensor<f32>,
    pub gn2_b: Tensor<f32>,
    pub conv2_w: Tensor<f32>,
    pub conv2_b: Tensor<f32>,
    /// 1x1 projection, present iff input and output channels differ.
    pub skip: Option<(Tensor<f32>, Tensor<f32>)>,
}

#[derive(Debug, Clone)]
pub struct EncLevelParams {
    pub res: Vec<ResBlockParams>,
    pub down_w: Tensor<f32>,
    pub down_b: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct DecLevelParams {
    pub up_w: Tensor<f32>,
    pub up_b: Tensor<f32>,
    pub res: Vec<ResBlockParams>,
}

/// All U-Net weights. The canonical traversal order (stem_in, encoder levels
/// outside-in, bottleneck, decoder levels inside-out, stem_out; within a
/// block gn1, conv1, gn2, conv2, skip) defines parameter naming, binding,
/// and checkpoint layout.
#[derive(Debug, Clone)]
pub struct UNetParams {
    pub config: UNetConfig,
    pub stem_in_w: Tensor<f32>,
    pub stem_in_b: Tensor<f32>,
    pub enc: Vec<EncLevelParams>,
    pub mid: Vec<ResBlockParams>,
    pub dec: Vec<DecLevelParams>,
    pub stem_out_w: Tensor<f32>,
    pub stem_out_b: Tensor<f32>,
}

fn kaiming_conv(rng: &mut ChaCha8Rng, co: usize, ci: usize, k: usize) -> Tensor<f32> {
    let bound = (6.0 / (ci * k) as f32).sqrt();
    let n = co * ci * k;
    Tensor::new(vec![co, ci, k], (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

fn res_block_params(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> ResBlockParams {
    ResBlockParams {
        gn1_g: Tensor::new(vec![c_in], vec![1.0; c_in]),
        gn1_b: Tensor::zeros(vec![c_in]),
        conv1_w: kaiming_conv(rng, c_out, c_in, 3),
        conv1_b: Tensor::zeros(vec![c_out]),
        gn2_g: Tensor::new(vec![c_out], vec![1.0; c_out]),
        gn2_b: Tensor::zeros(vec![c_out]),
        conv2_w: kaiming_conv(rng, c_out, c_out, 3),
        conv2_b: Tensor::zeros(vec![c_out]),
        skip: (c_in != c_out).then(|| (kaiming_conv(rng, c_out, c_in, 1), Tensor::zeros(vec![c_out]))),
    }
}

/// Deterministic initialization: Kaiming-uniform (fan-in) conv weights, zero
/// biases, GroupNorm gamma 1 and beta 0.
pub fn build_unet(config: UNetConfig, seed: u64) -> Result<UNetParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem_in_w = kaiming_conv(&mut rng, config.ch(0), config.in_channels, 3);
    let stem_in_b = Tensor::zeros(vec![config.ch(0)]);

    let mut enc = Vec::with_capacity(config.levels);
    for l in 0..config.levels {
        let c = config.ch(l);
        let res = (0..config.res_blocks_per_level).map(|_| res_block_params(&mut rng, c, c)).collect();
        enc.push(EncLevelParams {
            res,
            down_w: kaiming_conv(&mut rng, config.ch(l + 1), c, 4),
            down_b: Tensor::zeros(vec![config.ch(l + 1)]),
        });
    }

    let cb = config.bottleneck_channels();
    let mid = (0..config.res_blocks_per_level).map(|_| res_block_params(&mut rng, cb, cb)).collect();

    let mut dec = Vec::with_capacity(config.levels);
    for l in (0..config.levels).rev() {
        let c = config.ch(l);
        // Transposed conv weight layout is [C_in, C_out, K].
        let up_w = {
            let t = kaiming_conv(&mut rng, config.ch(l + 1), c, 4);
            Tensor::new(vec![config.ch(l + 1), c, 4], t.data)
        };
        let mut res = Vec::with_capacity(config.res_blocks_per_level);
        res.push(res_block_params(&mut rng, 2 * c, c));
        for _ in 1..config.res_blocks_per_level {
            res.push(res_block_params(&mut rng, c, c));
        }
        dec.push(DecLevelParams { up_w, up_b: Tensor::zeros(vec![c]), res });
    }

    let stem_out_w = kaiming_conv(&mut rng, config.in_channels, config.ch(0), 3);
    let stem_out_b = Tensor::zeros(vec![config.in_channels]);
    Ok(UNetParams { config, stem_in_w, stem_in_b, enc, mid, dec, stem_out_w, stem_out_b })
}

impl ResBlockParams {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<f32>)) {
        f(format!("{prefix}.gn1.g"), &self.gn1_g);
        f(format!("{prefix}.gn1.b"), &self.gn1_b);
        f(format!("{prefix}.conv1.w"), &self.conv1_w);
        f(format!("{prefix}.conv1.b"), &self.conv1_b);
        f(format!("{prefix}.gn2.g"), &self.gn2_g);
        f(format!("{prefix}.gn2.b"), &self.gn2_b);
        f(format!("{prefix}.conv2.w"), &self.conv2_w);
        f(format!("{prefix}.conv2.b"), &self.conv2_b);
        if let Some((w, b)) = &self.skip {
            f(format!("{prefix}.skip.w"), w);
            f(format!("{prefix}.skip.b"), b);
        }
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out = vec![
            (format!("{prefix}.gn1.g"), &mut self.gn1_g),
            (format!("{prefix}.gn1.b"), &mut self.gn1_b),
            (format!("{prefix}.conv1.w"), &mut self.conv1_w),
            (format!("{prefix}.conv1.b"), &mut self.conv1_b),
            (format!("{prefix}.gn2.g"), &mut self.gn2_g),
            (format!("{prefix}.gn2.b"), &mut self.gn2_b),
            (format!("{prefix}.conv2.w"), &mut self.conv2_w),
            (format!("{prefix}.conv2.b"), &mut self.conv2_b),
        ];
        if let Some((w, b)) = &mut self.skip {
            out.push((format!("{prefix}.skip.w"), w));
            out.push((format!("{prefix}.skip.b"), b));
        }
        out
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<f32>)) {
        f(format!("{prefix}.gn1.g"), &mut self.gn1_g);
        f(format!("{prefix}.gn1.b"), &mut self.gn1_b);
        f(format!("{prefix}.conv1.w"), &mut self.conv1_w);
        f(format!("{prefix}.conv1.b"), &mut self.conv1_b);
        f(format!("{prefix}.gn2.g"), &mut self.gn2_g);
        f(format!("{prefix}.gn2.b"), &mut self.gn2_b);
        f(format!("{prefix}.conv2.w"), &mut self.conv2_w);
        f(format!("{prefix}.conv2.b"), &mut self.conv2_b);
        if let Some((w, b)) = &mut self.skip {
            f(format!("{prefix}.skip.w"), w);
            f(format!("{prefix}.skip.b"), b);
        }
    }
}

impl UNetParams {
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<f32>)) {
        f("unet.stem_in.w".into(), &self.stem_in_w);
        f("unet.stem_in.b".into(), &self.stem_in_b);
        for (l, level) in self.enc.iter().enumerate() {
            for (i, blk) in level.res.iter().enumerate() {
                blk.for_each(&format!("unet.enc.{l}.res.{i}"), f);
            }
            f(format!("unet.enc.{l}.down.w"), &level.down_w);
            f(format!("unet.enc.{l}.down.b"), &level.down_b);
        }
        for (i, blk) in self.mid.iter().enumerate() {
            blk.for_each(&format!("unet.mid.{i}"), f);
        }
        for (d, level) in self.dec.iter().enumerate() {
            f(format!("unet.dec.{d}.up.w"), &level.up_w);
            f(format!("unet.dec.{d}.up.b"), &level.up_b);
            for (i, blk) in level.res.iter().enumerate() {
                blk.for_each(&format!("unet.dec.{d}.res.{i}"), f);
            }
        }
        f("unet.stem_out.w".into(), &self.stem_out_w);
        f("unet.stem_out.b".into(), &self.stem_out_b);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<f32>)) {
        f("unet.stem_in.w".into(), &mut self.stem_in_w);
        f("unet.stem_in.b".into(), &mut self.stem_in_b);
        for (l, level) in self.enc.iter_mut().enumerate() {
            for (i, blk) in level.res.iter_mut().enumerate() {
                blk.for_each_mut(&format!("unet.enc.{l}.res.{i}"), f);
            }
            f(format!("unet.enc.{l}.down.w"), &mut level.down_w);
            f(format!("unet.enc.{l}.down.b"), &mut level.down_b);
        }
        for (i, blk) in self.mid.iter_mut().enumerate() {
            blk.for_each_mut(&format!("unet.mid.{i}"), f);
        }
        for (d, level) in self.dec.iter_mut().enumerate() {
            f(format!("unet.dec.{d}.up.w"), &mut level.up_w);
            f(format!("unet.dec.{d}.up.b"), &mut level.up_b);
            for (i, blk) in level.res.iter_mut().enumerate() {
                blk.for_each_mut(&format!("unet.dec.{d}.res.{i}"), f);
            }
        }
        f("unet.stem_out.w".into(), &mut self.stem_out_w);
        f("unet.stem_out.b".into(), &mut self.stem_out_b);
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, t| out.push((name, t)));
        out
    }

    /// Escaping mutable views in canonical order (optimizer updates).
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out = Vec::new();
        out.push(("unet.stem_in.w".to_string(), &mut self.stem_in_w));
        out.push(("unet.stem_in.b".to_string(), &mut self.stem_in_b));
        for (l, level) in self.enc.iter_mut().enumerate() {
            for (i, blk) in level.res.iter_mut().enumerate() {
                out.extend(blk.params_mut(&format!("unet.enc.{l}.res.{i}")));
            }
            out.push((format!("unet.enc.{l}.down.w"), &mut level.down_w));
            out.push((format!("unet.enc.{l}.down.b"), &mut level.down_b));
        }
        for (i, blk) in self.mid.iter_mut().enumerate() {
            out.extend(blk.params_mut(&format!("unet.mid.{i}")));
        }
        for (d, level) in self.dec.iter_mut().enumerate() {
            out.push((format!("unet.dec.{d}.up.w"), &mut level.up_w));
            out.push((format!("unet.dec.{d}.up.b"), &mut level.up_b));
            for (i, blk) in level.res.iter_mut().enumerate() {
                out.extend(blk.params_mut(&format!("unet.dec.{d}.res.{i}")));
            }
        }
        out.push(("unet.stem_out.w".to_string(), &mut self.stem_out_w));
        out.push(("unet.stem_out.b".to_string(), &mut self.stem_out_b));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }

    /// Insert every parameter into a graph (canonical order) and return the
    /// leaf handles; `trainable` controls whether gradients are produced.
    pub fn bind<F: Real>(&self, g: &mut Graph<F>, trainable: bool) -> UNetBound {
        let mut flat = Vec::new();
        self.for_each(&mut |_, t| {
            flat.push(g.input(t.map(|v| r::<F>(v as f64)), trainable));
        });
        UNetBound { flat }
    }

    /// Mirror of `bind` for externally created leaves (finite differencing).
    pub fn bind_ids(&self, ids: &[NodeId]) -> Result<UNetBound> {
        if ids.len() != self.named_params().len() {
            return Err(Error::shape("bind_ids", format!("{} ids for {} tensors", ids.len(), self.named_params().len())));
        }
        Ok(UNetBound { flat: ids.to_vec() })
    }

    /// Rewrite the weights so the whole network computes the identity map:
    /// every residual block's final conv is zeroed (the block reduces to its
    /// skip path), each decoder level's first-block projection selects the
    /// encoder skip half of the concat, and the stems become center-tap
    /// channel embeddings. Requires in_channels <= base_channels.
    pub fn make_identity(&mut self) -> Result<()> {
        let c_in = self.config.in_channels;
        let base = self.config.ch(0);
        if c_in > base {
            return Err(Error::Config(format!("identity fixture needs in_channels {c_in} <= base {base}")));
        }
        let zero_block = |blk: &mut ResBlockParams| {
            blk.conv2_w = Tensor::zeros(blk.conv2_w.shape.clone());
            blk.conv2_b = Tensor::zeros(blk.conv2_b.shape.clone());
        };
        for level in &mut self.enc {
            for blk in &mut level.res {
                zero_block(blk);
            }
        }
        for blk in &mut self.mid {
            zero_block(blk);
        }
        for (d, level) in self.dec.iter_mut().enumerate() {
            let c = self.config.ch(self.config.levels - 1 - d);
            for blk in &mut level.res {
                zero_block(blk);
            }
            let (w, b) = level.res[0].skip.as_mut().ok_or_else(|| {
                Error::Config("decoder first block lost its projection".into())
            })?;
            *w = Tensor::zeros(vec![c, 2 * c, 1]);
            for o in 0..c {
                w.data[o * 2 * c + (c + o)] = 1.0;
            }
            *b = Tensor::zeros(vec![c]);
        }
        self.stem_in_w = Tensor::zeros(vec![base, c_in, 3]);
        for i in 0..c_in {
            self.stem_in_w.data[(i * c_in + i) * 3 + 1] = 1.0;
        }
        self.stem_in_b = Tensor::zeros(vec![base]);
        self.stem_out_w = Tensor::zeros(vec![c_in, base, 3]);
        for o in 0..c_in {
            self.stem_out_w.data[(o * base + o) * 3 + 1] = 1.0;
        }
        self.stem_out_b = Tensor::zeros(vec![c_in]);
        Ok(())
    }
}

pub struct UNetBound {
    pub flat: Vec<NodeId>,
}

struct Cursor<'a> {
    ids: &'a [NodeId],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> NodeId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }
}

/// What the encoder saw, for tests and diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardTrace {
    pub encoder_channels: Vec<usize>,
    pub encoder_lengths: Vec<usize>,
    pub bottleneck_channels: usize,
}

fn finite_or_err<F: Real>(g: &Graph<F>, id: NodeId, stage: &str) -> Result<()> {
    if g.value(id).data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: format!("unet {stage}") });
    }
    Ok(())
}

fn res_block<F: Real>(
    g: &mut Graph<F>,
    x: NodeId,
    cur: &mut Cursor<'_>,
    has_skip: bool,
    groups: usize,
) -> Result<NodeId> {
    let (g1g, g1b) = (cur.next(), cur.next());
    let (c1w, c1b) = (cur.next(), cur.next());
    let (g2g, g2b) = (cur.next(), cur.next());
    let (c2w, c2b) = (cur.next(), cur.next());
    let skip = if has_skip { Some((cur.next(), cur.next())) } else { None };

    let h = g.group_norm(x, g1g, g1b, groups, r::<F>(GN_EPS))?;
    let h = g.silu(h);
    let h = g.conv1d(h, c1w, Some(c1b), 1, 1)?;
    let h = g.group_norm(h, g2g, g2b, groups, r::<F>(GN_EPS))?;
    let h = g.silu(h);
    let h = g.conv1d(h, c2w, Some(c2b), 1, 1)?;
    let sk = match skip {
        Some((w, b)) => g.conv1d(x, w, Some(b), 1, 0)?,
        None => x,
    };
    g.add(h, sk)
}

/// Denoise a normalized latent batch: (B, C, F) -> (B, C, F). The clean
/// latent is predicted directly (no residual connection to the input).
pub fn unet_forward<F: Real>(
    g: &mut Graph<F>,
    x: NodeId,
    params: &UNetParams,
    bound: &UNetBound,
) -> Result<NodeId> {
    Ok(unet_forward_traced(g, x, params, bound)?.0)
}

pub fn unet_forward_traced<F: Real>(
    g: &mut Graph<F>,
    x: NodeId,
    params: &UNetParams,
    bound: &UNetBound,
) -> Result<(NodeId, ForwardTrace)> {
    let cfg = &params.config;
    cfg.validate()?;
    let (c, f) = match g.value(x).shape.as_slice() {
        [_, c, f] => (*c, *f),
        s => return Err(Error::shape("unet_forward", format!("expected [B,C,F], got {s:?}"))),
    };
    if c != cfg.in_channels {
        return Err(Error::shape("unet_forward", format!("{c} input channels, config has {}", cfg.in_channels)));
    }
    let mut cur = Cursor { ids: &bound.flat, pos: 0 };
    let blocks = cfg.res_blocks_per_level;

    let multiple = cfg.time_multiple();
    let pad = (multiple - f % multiple) % multiple;
    let mut h = if pad > 0 { g.pad_time(x, 0, pad)? } else { x };

    let (w, b) = (cur.next(), cur.next());
    h = g.conv1d(h, w, Some(b), 1, 1)?;
    finite_or_err(g, h, "stem_in")?;

    let mut skips = Vec::with_capacity(cfg.levels);
    let mut trace = ForwardTrace {
        encoder_channels: Vec::with_capacity(cfg.levels),
        encoder_lengths: Vec::with_capacity(cfg.levels),
        bottleneck_channels: cfg.bottleneck_channels(),
    };
    for l in 0..cfg.levels {
        for _ in 0..blocks {
            h = res_block(g, h, &mut cur, false, cfg.norm_groups)?;
        }
        finite_or_err(g, h, &format!("enc level {l}"))?;
        trace.encoder_channels.push(g.value(h).shape[1]);
        skips.push(h);
        let (w, b) = (cur.next(), cur.next());
        h = g.conv1d(h, w, Some(b), 2, 1)?;
        trace.encoder_lengths.push(g.value(h).shape[2]);
    }

    for i in 0..blocks {
        h = res_block(g, h, &mut cur, false, cfg.norm_groups)?;
        finite_or_err(g, h, &format!("mid block {i}"))?;
    }

    for d in 0..cfg.levels {
        let (w, b) = (cur.next(), cur.next());
        h = g.conv_transpose1d(h, w, Some(b), 2, 1)?;
        let skip = skips[cfg.levels - 1 - d];
        h = g.concat_channels(h, skip)?;
        h = res_block(g, h, &mut cur, true, cfg.norm_groups)?;
        for _ in 1..blocks {
            h = res_block(g, h, &mut cur, false, cfg.norm_groups)?;
        }
        finite_or_err(g, h, &format!("dec level {d}"))?;
    }

    let (w, b) = (cur.next(), cur.next());
    h = g.conv1d(h, w, Some(b), 1, 1)?;
    finite_or_err(g, h, "stem_out")?;
    debug_assert_eq!(cur.pos, bound.flat.len(), "forward consumed a different tensor count than bind produced");

    if pad > 0 {
        h = g.crop_time(h, 0, f)?;
    }
    Ok((h, trace))
}

/// End-to-end finite-difference check of a tiny network (base 4, levels 2,
/// 4 latent channels, 16 frames) against the analytic gradients, in double
/// precision. Shared by the unit tests, the CLI, and the acceptance suite.
pub fn gradcheck_tiny_unet(
    settings: &crate::autodiff::gradcheck::CheckSettings,
) -> Result<crate::autodiff::gradcheck::OpReport> {
    use crate::autodiff::gradcheck::{check_grads, rand_tensor};
    let cfg = UNetConfig {
        in_channels: 4,
        base_channels: 4,
        levels: 2,
        max_channels: 512,
        res_blocks_per_level: 2,
        norm_groups: 4,
    };
    let params = build_unet(cfg, 7)?;
    let mut inputs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    inputs.push(rand_tensor(&mut rng, &[1, 4, 16], -1.0, 1.0));
    for (_, t) in params.named_params() {
        inputs.push(t.map(|v| v as f64));
    }
    check_grads(
        "unet_tiny_end_to_end",
        &inputs,
        &|g, ids| {
            let bound = params.bind_ids(&ids[1..])?;
            let y = unet_forward(g, ids[0], &params, &bound)?;
            Ok(g.mean_abs(y))
        },
        settings,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::CheckSettings;

    fn tiny_config() -> UNetConfig {
        UNetConfig {
            in_channels: 4,
            base_channels: 4,
            levels: 2,
            max_channels: 512,
            res_blocks_per_level: 2,
            norm_groups: 4,
        }
    }

    #[test]
    fn default_channel_schedule_doubles_then_caps() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.channel_trace(), vec![64, 128, 256, 512, 512]);
        assert_eq!(cfg.bottleneck_channels(), 512);
        cfg.validate().unwrap();

        let bad = UNetConfig { norm_groups: 7, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn build_is_deterministic_and_count_matches_formula() {
        let cfg = tiny_config();
        let a = build_unet(cfg, 3).unwrap();
        let b = build_unet(cfg, 3).unwrap();
        let na = a.named_params();
        let nb = b.named_params();
        assert_eq!(na.len(), nb.len());
        for ((name_a, ta), (name_b, tb)) in na.iter().zip(&nb) {
            assert_eq!(name_a, name_b);
            assert_eq!(ta.data, tb.data, "{name_a}");
        }
        let c = build_unet(cfg, 4).unwrap();
        assert_ne!(a.stem_in_w.data, c.stem_in_w.data);

        // Independent closed-form count.
        let block = |ci: usize, co: usize| {
            let skip = if ci != co { co * ci + co } else { 0 };
            2 * ci + (co * ci * 3 + co) + 2 * co + (co * co * 3 + co) + skip
        };
        let ch = |l: usize| cfg.ch(l);
        let mut want = cfg.ch(0) * cfg.in_channels * 3 + cfg.ch(0);
        for l in 0..cfg.levels {
            want += 2 * block(ch(l), ch(l));
            want += ch(l + 1) * ch(l) * 4 + ch(l + 1);
        }
        want += 2 * block(cfg.bottleneck_channels(), cfg.bottleneck_channels());
        for l in (0..cfg.levels).rev() {
            want += ch(l + 1) * ch(l) * 4 + ch(l);
            want += block(2 * ch(l), ch(l)) + block(ch(l), ch(l));
        }
        want += cfg.in_channels * cfg.ch(0) * 3 + cfg.in_channels;
        assert_eq!(a.param_count(), want);

        // Unique names.
        let mut names: Vec<&String> = na.iter().map(|(n, _)| n).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), na.len());

        // The mutable accessor walks the same canonical order.
        let shared: Vec<String> = a.named_params().into_iter().map(|(n, _)| n).collect();
        let mut a2 = a.clone();
        let muts: Vec<String> = a2.named_params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(shared, muts);
    }

    fn forward_values(params: &UNetParams, shape: [usize; 3], data: Vec<f32>) -> (Vec<f32>, ForwardTrace) {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(shape.to_vec(), data), false);
        let bound = params.bind(&mut g, false);
        let (y, trace) = unet_forward_traced(&mut g, x, params, &bound).unwrap();
        (g.value(y).data.clone(), trace)
    }

    #[test]
    fn forward_preserves_shape_for_awkward_lengths() {
        let params = build_unet(tiny_config(), 1).unwrap();
        for f in [1usize, 3, 4, 7, 16, 33, 100] {
            let n = 2 * 4 * f;
            let data: Vec<f32> = (0..n).map(|i| ((i * 37 % 23) as f32 - 11.0) * 0.05).collect();
            let (out, _) = forward_values(&params, [2, 4, f], data);
            assert_eq!(out.len(), n, "F={f}");
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_is_deterministic_and_bounded_at_init() {
        let params = build_unet(tiny_config(), 9).unwrap();
        let data: Vec<f32> = (0..4 * 32).map(|i| ((i * 7919 % 1000) as f32 / 500.0) - 1.0).collect();
        let (a, _) = forward_values(&params, [1, 4, 32], data.clone());
        let (b, _) = forward_values(&params, [1, 4, 32], data);
        assert_eq!(a, b);
        let peak = a.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(peak < 1e3, "activation explosion: {peak}");
    }

    #[test]
    fn encoder_trace_halves_lengths_and_follows_channel_schedule() {
        let cfg = UNetConfig { in_channels: 4, base_channels: 8, levels: 5, norm_groups: 4, ..Default::default() };
        let params = build_unet(cfg, 2).unwrap();
        let f = 160;
        let data = vec![0.1f32; 4 * f];
        let (_, trace) = forward_values(&params, [1, 4, f], data);
        assert_eq!(trace.encoder_channels, cfg.channel_trace());
        assert_eq!(trace.encoder_lengths, vec![80, 40, 20, 10, 5]);
        assert_eq!(trace.bottleneck_channels, cfg.ch(5));
    }

    #[test]
    fn identity_fixture_reproduces_its_input() {
        let mut params = build_unet(tiny_config(), 5).unwrap();
        params.make_identity().unwrap();
        for f in [16usize, 7, 33] {
            let n = 4 * f;
            let data: Vec<f32> = (0..n).map(|i| ((i * 131 % 97) as f32 - 48.0) * 0.01).collect();
            let (out, _) = forward_values(&params, [1, 4, f], data.clone());
            for (a, b) in out.iter().zip(&data) {
                assert!((a - b).abs() < 1e-6, "F={f}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zeroed_final_convs_reduce_blocks_to_skip_path() {
        // With every block zeroed but real stems, the net is
        // stem_out(stem_in(x)): verify a block in isolation equals its input.
        let cfg = tiny_config();
        let mut params = build_unet(cfg, 8).unwrap();
        params.enc[0].res[0].conv2_w = Tensor::zeros(vec![4, 4, 3]);
        params.enc[0].res[0].conv2_b = Tensor::zeros(vec![4]);
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..4 * 8).map(|i| (i as f32 * 0.13).sin()).collect();
        let x = g.input(Tensor::new(vec![1, 4, 8], data.clone()), false);
        let bound = params.bind(&mut g, false);
        // Block tensors start right after the stem (2 tensors), no skip conv.
        let mut cur = Cursor { ids: &bound.flat[2..10], pos: 0 };
        let y = res_block(&mut g, x, &mut cur, false, cfg.norm_groups).unwrap();
        assert_eq!(g.value(y).data, data);
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_config() {
        let report =
            gradcheck_tiny_unet(&CheckSettings { max_coords: 1200, ..CheckSettings::default() })
                .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn shape_and_config_errors_are_reported() {
        let params = build_unet(tiny_config(), 1).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![1, 3, 16], vec![0.0; 48]), false);
        let bound = params.bind(&mut g, false);
        assert!(matches!(unet_forward(&mut g, x, &params, &bound), Err(Error::Shape { .. })));
    }
}
