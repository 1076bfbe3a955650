//! Reverse-mode automatic differentiation on an eager tape.
//!
//! A [`Graph`] is a flat arena of nodes; every op computes its value at
//! construction time and records what it needs for the backward pass.
//! [`Graph::backward`] walks the tape once in reverse, accumulating gradients
//! into every node that (transitively) depends on a differentiable input.
//! Gradients over fan-out sum; calling `backward` twice is an error, as the
//! tape is consumed conceptually (build a fresh graph per step).
//!
//! The scalar type is generic over [`Real`]: training runs in f32, gradient
//! checking in f64.

mod kernels;

pub mod gradcheck;

use crate::error::{Error, Result};
use crate::real::{r, Real};

/// Dense row-major tensor. Scalars have an empty shape and one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); n] }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map<G: Real>(&self, f: impl Fn(F) -> G) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<F: Real> {
    Leaf,
    Conv1d { x: NodeId, w: NodeId, bias: Option<NodeId>, stride: usize, pad: usize },
    ConvT1d { x: NodeId, w: NodeId, bias: Option<NodeId>, stride: usize, pad: usize },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, means: Vec<F>, invs: Vec<F> },
    Silu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: F },
    AddScalar { x: NodeId },
    ConcatChannels { a: NodeId, b: NodeId },
    PadTime { x: NodeId, left: usize },
    CropTime { x: NodeId, start: usize, len: usize },
    WaveToFrames { x: NodeId, hop: usize },
    FramesToWave { x: NodeId, out_len: usize },
    ChannelAffine { x: NodeId, scale: NodeId, shift: NodeId },
    MeanAbs { x: NodeId },
    MeanAll { x: NodeId },
    SumSq { x: NodeId },
    Dot { a: NodeId, b: NodeId },
    BatchDot { a: NodeId, b: NodeId },
    BatchSumSq { x: NodeId },
    MulBatch { x: NodeId, s: NodeId },
    Log10 { x: NodeId },
    Clamp { x: NodeId, lo: F, hi: F },
    StftMag { x: NodeId, n_fft: usize, hop: usize, saved: Vec<rustfft::num_complex::Complex<F>> },
    MatmulConst { x: NodeId, mat: Tensor<F> },
}

pub struct Graph<F: Real> {
    values: Vec<Tensor<F>>,
    grads: Vec<Option<Tensor<F>>>,
    ops: Vec<Op<F>>,
    needs: Vec<bool>,
    backward_done: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { values: Vec::new(), grads: Vec::new(), ops: Vec::new(), needs: Vec::new(), backward_done: false }
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    pub fn input(&mut self, t: Tensor<F>, needs_grad: bool) -> NodeId {
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads[id.0].take()
    }

    // Non-finite values are allowed to flow; consumers that promise clean
    // numeric errors (the denoiser, the trainer) check where they can name
    // the failing stage.
    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.needs.push(needs_grad);
        NodeId(self.values.len() - 1)
    }

    fn needs_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.needs[id.0])
    }

    fn want3(&self, op: &str, id: NodeId) -> Result<(usize, usize, usize)> {
        let s = &self.values[id.0].shape;
        if s.len() != 3 {
            return Err(Error::shape(op, format!("expected rank-3 tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    fn want_same(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.values[a.0].shape != self.values[b.0].shape {
            return Err(Error::shape(
                op,
                format!("shape mismatch {:?} vs {:?}", self.values[a.0].shape, self.values[b.0].shape),
            ));
        }
        Ok(())
    }

    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (_, ci, t) = self.want3("conv1d", x)?;
        let (co, wci, k) = self.want3("conv1d", w)?;
        if wci != ci {
            return Err(Error::shape("conv1d", format!("weight expects {wci} input channels, x has {ci}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv1d", "stride must be >= 1"));
        }
        if t + 2 * pad < k {
            return Err(Error::shape("conv1d", format!("time {t} + 2*pad {pad} shorter than kernel {k}")));
        }
        if let Some(b) = bias {
            if self.values[b.0].shape != [co] {
                return Err(Error::shape("conv1d", format!("bias shape {:?}, expected [{co}]", self.values[b.0].shape)));
            }
        }
        let out = kernels::conv1d_forward(
            &self.values[x.0],
            &self.values[w.0],
            bias.map(|b| &self.values[b.0]),
            stride,
            pad,
        );
        let mut ids = vec![x, w];
        ids.extend(bias);
        let ng = self.needs_any(&ids);
        Ok(self.push(out, Op::Conv1d { x, w, bias, stride, pad }, ng))
    }

    pub fn conv_transpose1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (_, ci, t) = self.want3("conv_transpose1d", x)?;
        let (wci, co, k) = self.want3("conv_transpose1d", w)?;
        if wci != ci {
            return Err(Error::shape("conv_transpose1d", format!("weight expects {wci} input channels, x has {ci}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv_transpose1d", "stride must be >= 1"));
        }
        if (t - 1) * stride + k <= 2 * pad {
            return Err(Error::shape("conv_transpose1d", "output length would be empty"));
        }
        if let Some(b) = bias {
            if self.values[b.0].shape != [co] {
                return Err(Error::shape("conv_transpose1d", format!("bias shape {:?}, expected [{co}]", self.values[b.0].shape)));
            }
        }
        let out = kernels::convt1d_forward(
            &self.values[x.0],
            &self.values[w.0],
            bias.map(|b| &self.values[b.0]),
            stride,
            pad,
        );
        let mut ids = vec![x, w];
        ids.extend(bias);
        let ng = self.needs_any(&ids);
        Ok(self.push(out, Op::ConvT1d { x, w, bias, stride, pad }, ng))
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: F,
    ) -> Result<NodeId> {
        let (_, c, _) = self.want3("group_norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", format!("{groups} groups do not divide {c} channels")));
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.values[id.0].shape != [c] {
                return Err(Error::shape("group_norm", format!("{name} shape {:?}, expected [{c}]", self.values[id.0].shape)));
            }
        }
        let (out, means, invs) =
            kernels::group_norm_forward(&self.values[x.0], &self.values[gamma.0], &self.values[beta.0], groups, eps);
        let ng = self.needs_any(&[x, gamma, beta]);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, means, invs }, ng))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.values[x.0].map(|v| v * sigmoid(v));
        let ng = self.needs[x.0];
        self.push(out, Op::Silu { x }, ng)
    }

    fn binary_elementwise(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<NodeId> {
        self.want_same(name, a, b)?;
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.values[a.0].shape.clone(), data);
        let ng = self.needs_any(&[a, b]);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let out = self.values[x.0].map(|v| v * c);
        let ng = self.needs[x.0];
        self.push(out, Op::Scale { x, c }, ng)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: F) -> NodeId {
        let out = self.values[x.0].map(|v| v + c);
        let ng = self.needs[x.0];
        self.push(out, Op::AddScalar { x }, ng)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, ca, ta) = self.want3("concat_channels", a)?;
        let (bb, cb, tb) = self.want3("concat_channels", b)?;
        if ba != bb || ta != tb {
            return Err(Error::shape("concat_channels", format!("batch/time mismatch [{ba},{ca},{ta}] vs [{bb},{cb},{tb}]")));
        }
        let mut data = Vec::with_capacity(ba * (ca + cb) * ta);
        for bi in 0..ba {
            data.extend_from_slice(&self.values[a.0].data[bi * ca * ta..(bi + 1) * ca * ta]);
            data.extend_from_slice(&self.values[b.0].data[bi * cb * ta..(bi + 1) * cb * ta]);
        }
        let out = Tensor::new(vec![ba, ca + cb, ta], data);
        let ng = self.needs_any(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels { a, b }, ng))
    }

    pub fn pad_time(&mut self, x: NodeId, left: usize, right: usize) -> Result<NodeId> {
        let (b, c, t) = self.want3("pad_time", x)?;
        let t_out = t + left + right;
        let mut data = vec![F::zero(); b * c * t_out];
        for row in 0..b * c {
            let src = &self.values[x.0].data[row * t..(row + 1) * t];
            data[row * t_out + left..row * t_out + left + t].copy_from_slice(src);
        }
        let out = Tensor::new(vec![b, c, t_out], data);
        let ng = self.needs[x.0];
        Ok(self.push(out, Op::PadTime { x, left }, ng))
    }

    pub fn crop_time(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (b, c, t) = self.want3("crop_time", x)?;
        if start + len > t {
            return Err(Error::shape("crop_time", format!("crop {start}+{len} exceeds time {t}")));
        }
        let mut data = Vec::with_capacity(b * c * len);
        for row in 0..b * c {
            data.extend_from_slice(&self.values[x.0].data[row * t + start..row * t + start + len]);
        }
        let out = Tensor::new(vec![b, c, len], data);
        let ng = self.needs[x.0];
        Ok(self.push(out, Op::CropTime { x, start, len }, ng))
    }

    /// [B,1,T] -> [B,hop,ceil(T/hop)]; the tail frame is zero-padded.
    pub fn wave_to_frames(&mut self, x: NodeId, hop: usize) -> Result<NodeId> {
        let (b, c, t) = self.want3("wave_to_frames", x)?;
        if c != 1 {
            return Err(Error::shape("wave_to_frames", format!("expected mono [B,1,T], got {c} channels")));
        }
        if hop == 0 || t == 0 {
            return Err(Error::shape("wave_to_frames", "hop and time must be positive"));
        }
        let frames = t.div_ceil(hop);
        let mut data = vec![F::zero(); b * hop * frames];
        for bi in 0..b {
            let src = &self.values[x.0].data[bi * t..(bi + 1) * t];
            for (ti, &v) in src.iter().enumerate() {
                let (f, h) = (ti / hop, ti % hop);
                data[(bi * hop + h) * frames + f] = v;
            }
        }
        let out = Tensor::new(vec![b, hop, frames], data);
        let ng = self.needs[x.0];
        Ok(self.push(out, Op::WaveToFrames { x, hop }, ng))
    }

    /// [B,hop,F] -> [B,1,out_len]; out_len must not exceed hop*F.
    pub fn frames_to_wave(&mut self, x: NodeId, out_len: usize) -> Result<NodeId> {
        let (b, hop, frames) = self.want3("frames_to_wave", x)?;
        if out_len == 0 || out_len > hop * frames {
            return Err(Error::shape("frames_to_wave", format!("out_len {out_len} not in 1..={}", hop * frames)));
        }
        let mut data = vec![F::zero(); b * out_len];
        for bi in 0..b {
            for (ti, slot) in data[bi * out_len..(bi + 1) * out_len].iter_mut().enumerate() {
                let (f, h) = (ti / hop, ti % hop);
                *slot = self.values[x.0].data[(bi * hop + h) * frames + f];
            }
        }
        let out = Tensor::new(vec![b, 1, out_len], data);
        let ng = self.needs[x.0];
        Ok(self.push(out, Op::FramesToWave { x, out_len }, ng))
    }

    /// y[b,c,t] = x[b,c,t] * scale[c] + shift[c].
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let (b, c, t) = self.want3("channel_affine", x)?;
        for (name, id) in [("scale", scale), ("shift", shift)] {
            if self.values[id.0].shape != [c] {
                return Err(Error::shape("channel_affine", format!("{name} shape {:?}, expected [{c}]", self.values[id.0].shape)));
            }
        }
        let mut data = Vec::with_capacity(b * c * t);
        for bi in 0..b {
            for ci in 0..c {
                let (sc, sh) = (self.values[scale.0].data[ci], self.values[shift.0].data[ci]);
                let row = &self.values[x.0].data[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                data.extend(row.iter().map(|&v| v * sc + sh));
            }
        }
        let out = Tensor::new(vec![b, c, t], data);
        let ng = self.needs_any(&[x, scale, shift]);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }, ng))
    }

    pub fn mean_abs(&mut self, x: NodeId) -> NodeId {
        let n = r::<F>(self.values[x.0].numel() as f64);
        let mut acc = F::zero();
        for &v in &self.values[x.0].data {
            acc = acc + v.abs();
        }
        let ng = self.needs[x.0];
        self.push(Tensor::scalar(acc / n), Op::MeanAbs { x }, ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = r::<F>(self.values[x.0].numel() as f64);
        let mut acc = F::zero();
        for &v in &self.values[x.0].data {
            acc = acc + v;
        }
        let ng = self.needs[x.0];
        self.push(Tensor::scalar(acc / n), Op::MeanAll { x }, ng)
    }

    pub fn sum_sq(&mut self, x: NodeId) -> NodeId {
        let mut acc = F::zero();
        for &v in &self.values[x.0].data {
            acc = acc + v * v;
        }
        let ng = self.needs[x.0];
        self.push(Tensor::scalar(acc), Op::SumSq { x }, ng)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same("dot", a, b)?;
        let mut acc = F::zero();
        for (&x, &y) in self.values[a.0].data.iter().zip(&self.values[b.0].data) {
            acc = acc + x * y;
        }
        let ng = self.needs_any(&[a, b]);
        Ok(self.push(Tensor::scalar(acc), Op::Dot { a, b }, ng))
    }

    fn batch_reduce(&self, id: NodeId) -> Result<(usize, usize)> {
        let s = &self.values[id.0].shape;
        if s.is_empty() {
            return Err(Error::shape("batch reduce", "needs a batch dimension"));
        }
        let b = s[0];
        let rest = self.values[id.0].numel() / b.max(1);
        Ok((b, rest))
    }

    /// Per-item dot product over all non-batch axes: [B,...] x [B,...] -> [B].
    pub fn batch_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same("batch_dot", a, b)?;
        let (bsz, rest) = self.batch_reduce(a)?;
        let data = (0..bsz)
            .map(|bi| {
                let mut acc = F::zero();
                for j in 0..rest {
                    acc = acc + self.values[a.0].data[bi * rest + j] * self.values[b.0].data[bi * rest + j];
                }
                acc
            })
            .collect();
        let ng = self.needs_any(&[a, b]);
        Ok(self.push(Tensor::new(vec![bsz], data), Op::BatchDot { a, b }, ng))
    }

    /// Per-item squared norm over all non-batch axes: [B,...] -> [B].
    pub fn batch_sum_sq(&mut self, x: NodeId) -> Result<NodeId> {
        let (bsz, rest) = self.batch_reduce(x)?;
        let data = (0..bsz)
            .map(|bi| {
                let mut acc = F::zero();
                for j in 0..rest {
                    let v = self.values[x.0].data[bi * rest + j];
                    acc = acc + v * v;
                }
                acc
            })
            .collect();
        let ng = self.needs[x.0];
        Ok(self.push(Tensor::new(vec![bsz], data), Op::BatchSumSq { x }, ng))
    }

    /// Broadcast multiply by a per-item scalar: [B,...] * [B] -> [B,...].
    pub fn mul_batch(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (bsz, rest) = self.batch_reduce(x)?;
        if self.values[s.0].shape != [bsz] {
            return Err(Error::shape("mul_batch", format!("scale shape {:?}, expected [{bsz}]", self.values[s.0].shape)));
        }
        let mut data = Vec::with_capacity(bsz * rest);
        for bi in 0..bsz {
            let sv = self.values[s.0].data[bi];
            data.extend(self.values[x.0].data[bi * rest..(bi + 1) * rest].iter().map(|&v| v * sv));
        }
        let out = Tensor::new(self.values[x.0].shape.clone(), data);
        let ng = self.needs_any(&[x, s]);
        Ok(self.push(out, Op::MulBatch { x, s }, ng))
    }

    pub fn log10(&mut self, x: NodeId) -> NodeId {
        let ten = r::<F>(10.0);
        let out = self.values[x.0].map(|v| v.log(ten));
        let ng = self.needs[x.0];
        self.push(out, Op::Log10 { x }, ng)
    }

    /// Values outside [lo, hi] are pinned and receive zero gradient.
    pub fn clamp(&mut self, x: NodeId, lo: F, hi: F) -> NodeId {
        let out = self.values[x.0].map(|v| if v < lo { lo } else if v > hi { hi } else { v });
        let ng = self.needs[x.0];
        self.push(out, Op::Clamp { x, lo, hi }, ng)
    }

    /// Onesided magnitude STFT of [B,1,T] -> [B, 1+T/hop, n_fft/2+1].
    pub fn stft_mag(&mut self, x: NodeId, n_fft: usize, hop: usize) -> Result<NodeId> {
        let (_, c, t) = self.want3("stft_mag", x)?;
        if c != 1 {
            return Err(Error::shape("stft_mag", format!("expected mono [B,1,T], got {c} channels")));
        }
        if n_fft < 2 || n_fft % 2 != 0 || hop == 0 || hop > n_fft || t == 0 {
            return Err(Error::shape("stft_mag", format!("bad stft geometry n_fft={n_fft} hop={hop} t={t}")));
        }
        let (out, saved) = kernels::stft_mag_forward(&self.values[x.0], n_fft, hop);
        let ng = self.needs[x.0];
        Ok(self.push(out, Op::StftMag { x, n_fft, hop, saved }, ng))
    }

    /// out[b,r,m] = sum_k x[b,r,k] mat[m,k]; the matrix is a fixed constant
    /// (no gradient flows into it).
    pub fn matmul_const(&mut self, x: NodeId, mat: Tensor<F>) -> Result<NodeId> {
        let (_, _, k) = self.want3("matmul_const", x)?;
        if mat.shape.len() != 2 || mat.shape[1] != k {
            return Err(Error::shape("matmul_const", format!("matrix shape {:?} does not contract with inner dim {k}", mat.shape)));
        }
        let out = kernels::matmul_const_forward(&self.values[x.0], &mat);
        let ng = self.needs[x.0];
        Ok(self.push(out, Op::MatmulConst { x, mat }, ng))
    }

    /// Run reverse-mode accumulation from a scalar loss. Consumes the tape:
    /// a second call on the same graph is a usage error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::AutodiffUsage("backward was already called on this graph; build a fresh graph per step".into()));
        }
        if !self.values[loss.0].is_scalar() {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", self.values[loss.0].shape)));
        }
        if !self.needs[loss.0] {
            return Err(Error::AutodiffUsage("loss does not depend on any differentiable input".into()));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..self.values.len()).rev() {
            if self.grads[i].is_none() || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let g = self.grads[i].clone().unwrap();
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<F>) {
        // Local aliases keep the borrow checker happy: values/ops are read,
        // grads is written.
        macro_rules! acc {
            ($id:expr, $delta:expr) => {{
                let id: NodeId = $id;
                if self.needs[id.0] {
                    let delta: Tensor<F> = $delta;
                    match &mut self.grads[id.0] {
                        Some(gacc) => {
                            for (a, d) in gacc.data.iter_mut().zip(delta.data) {
                                *a = *a + d;
                            }
                        }
                        slot => *slot = Some(delta),
                    }
                }
            }};
        }
        macro_rules! val {
            ($id:expr) => {
                &self.values[$id.0]
            };
        }

        // `ops[i]` is cloned field-by-field where cheap; heavyweight saved
        // state (stft spectra, norm stats) is borrowed via raw indices.
        match &self.ops[i] {
            Op::Leaf => {}
            &Op::Conv1d { x, w, bias, stride, pad } => {
                let (gx, gw, gb) = kernels::conv1d_backward(
                    val!(x), val!(w), g, stride, pad,
                    self.needs[x.0], self.needs[w.0], bias.map_or(false, |b| self.needs[b.0]),
                );
                if let Some(d) = gx { acc!(x, d); }
                if let Some(d) = gw { acc!(w, d); }
                if let (Some(d), Some(b)) = (gb, bias) { acc!(b, d); }
            }
            &Op::ConvT1d { x, w, bias, stride, pad } => {
                let (gx, gw, gb) = kernels::convt1d_backward(
                    val!(x), val!(w), g, stride, pad,
                    self.needs[x.0], self.needs[w.0], bias.map_or(false, |b| self.needs[b.0]),
                );
                if let Some(d) = gx { acc!(x, d); }
                if let Some(d) = gw { acc!(w, d); }
                if let (Some(d), Some(b)) = (gb, bias) { acc!(b, d); }
            }
            Op::GroupNorm { x, gamma, beta, groups, means, invs } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let (gx, gg, gb) = kernels::group_norm_backward(
                    val!(x), val!(gamma), means, invs, g, groups,
                    self.needs[x.0], self.needs[gamma.0], self.needs[beta.0],
                );
                if let Some(d) = gx { acc!(x, d); }
                if let Some(d) = gg { acc!(gamma, d); }
                if let Some(d) = gb { acc!(beta, d); }
            }
            &Op::Silu { x } => {
                let xv = val!(x);
                let data = xv.data.iter().zip(&g.data).map(|(&v, &gv)| {
                    let s = sigmoid(v);
                    gv * (s + v * s * (F::one() - s))
                }).collect();
                acc!(x, Tensor::new(xv.shape.clone(), data));
            }
            &Op::Add { a, b } => {
                acc!(a, g.clone());
                acc!(b, g.clone());
            }
            &Op::Sub { a, b } => {
                acc!(a, g.clone());
                acc!(b, g.map(|v| -v));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val!(a), val!(b));
                let da = Tensor::new(g.shape.clone(), g.data.iter().zip(&bv.data).map(|(&gv, &y)| gv * y).collect());
                let db = Tensor::new(g.shape.clone(), g.data.iter().zip(&av.data).map(|(&gv, &x)| gv * x).collect());
                acc!(a, da);
                acc!(b, db);
            }
            &Op::Div { a, b } => {
                let (av, bv) = (val!(a), val!(b));
                let da = Tensor::new(g.shape.clone(), g.data.iter().zip(&bv.data).map(|(&gv, &y)| gv / y).collect());
                let db = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(av.data.iter().zip(&bv.data)).map(|(&gv, (&x, &y))| -gv * x / (y * y)).collect(),
                );
                acc!(a, da);
                acc!(b, db);
            }
            &Op::Scale { x, c } => acc!(x, g.map(|v| v * c)),
            &Op::AddScalar { x } => acc!(x, g.clone()),
            &Op::ConcatChannels { a, b } => {
                let (sa, sb) = (val!(a).shape.clone(), val!(b).shape.clone());
                let (bsz, ca, t) = (sa[0], sa[1], sa[2]);
                let cb = sb[1];
                let mut da = Tensor::zeros(sa);
                let mut db = Tensor::zeros(sb);
                for bi in 0..bsz {
                    let base = bi * (ca + cb) * t;
                    da.data[bi * ca * t..(bi + 1) * ca * t].copy_from_slice(&g.data[base..base + ca * t]);
                    db.data[bi * cb * t..(bi + 1) * cb * t].copy_from_slice(&g.data[base + ca * t..base + (ca + cb) * t]);
                }
                acc!(a, da);
                acc!(b, db);
            }
            &Op::PadTime { x, left } => {
                let xs = val!(x).shape.clone();
                let (rows, t) = (xs[0] * xs[1], xs[2]);
                let t_out = g.shape[2];
                let mut d = Tensor::zeros(xs);
                for row in 0..rows {
                    d.data[row * t..(row + 1) * t].copy_from_slice(&g.data[row * t_out + left..row * t_out + left + t]);
                }
                acc!(x, d);
            }
            &Op::CropTime { x, start, len } => {
                let xs = val!(x).shape.clone();
                let (rows, t) = (xs[0] * xs[1], xs[2]);
                let mut d = Tensor::zeros(xs);
                for row in 0..rows {
                    d.data[row * t + start..row * t + start + len].copy_from_slice(&g.data[row * len..(row + 1) * len]);
                }
                acc!(x, d);
            }
            &Op::WaveToFrames { x, hop } => {
                let xs = val!(x).shape.clone();
                let (bsz, t) = (xs[0], xs[2]);
                let frames = g.shape[2];
                let mut d = Tensor::zeros(xs);
                for bi in 0..bsz {
                    for ti in 0..t {
                        let (f, h) = (ti / hop, ti % hop);
                        d.data[bi * t + ti] = g.data[(bi * hop + h) * frames + f];
                    }
                }
                acc!(x, d);
            }
            &Op::FramesToWave { x, out_len } => {
                let xs = val!(x).shape.clone();
                let (bsz, hop, frames) = (xs[0], xs[1], xs[2]);
                let mut d = Tensor::zeros(xs);
                for bi in 0..bsz {
                    for ti in 0..out_len {
                        let (f, h) = (ti / hop, ti % hop);
                        d.data[(bi * hop + h) * frames + f] = g.data[bi * out_len + ti];
                    }
                }
                acc!(x, d);
            }
            &Op::ChannelAffine { x, scale, shift } => {
                let xs = val!(x).shape.clone();
                let (bsz, c, t) = (xs[0], xs[1], xs[2]);
                if self.needs[x.0] {
                    let mut d = Tensor::zeros(xs.clone());
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let sv = val!(scale).data[ci];
                            let base = (bi * c + ci) * t;
                            for j in 0..t {
                                d.data[base + j] = g.data[base + j] * sv;
                            }
                        }
                    }
                    acc!(x, d);
                }
                if self.needs[scale.0] || self.needs[shift.0] {
                    let mut ds = Tensor::zeros(vec![c]);
                    let mut dh = Tensor::zeros(vec![c]);
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let base = (bi * c + ci) * t;
                            for j in 0..t {
                                ds.data[ci] = ds.data[ci] + g.data[base + j] * val!(x).data[base + j];
                                dh.data[ci] = dh.data[ci] + g.data[base + j];
                            }
                        }
                    }
                    acc!(scale, ds);
                    acc!(shift, dh);
                }
            }
            &Op::MeanAbs { x } => {
                let xv = val!(x);
                let s = g.item() / r::<F>(xv.numel() as f64);
                let data = xv.data.iter().map(|&v| {
                    if v > F::zero() { s } else if v < F::zero() { -s } else { F::zero() }
                }).collect();
                acc!(x, Tensor::new(xv.shape.clone(), data));
            }
            &Op::MeanAll { x } => {
                let xv = val!(x);
                let s = g.item() / r::<F>(xv.numel() as f64);
                acc!(x, Tensor::new(xv.shape.clone(), vec![s; xv.numel()]));
            }
            &Op::SumSq { x } => {
                let xv = val!(x);
                let two_g = g.item() * r::<F>(2.0);
                acc!(x, Tensor::new(xv.shape.clone(), xv.data.iter().map(|&v| two_g * v).collect()));
            }
            &Op::Dot { a, b } => {
                let gv = g.item();
                let da = val!(b).map(|v| v * gv);
                let db = val!(a).map(|v| v * gv);
                acc!(a, da);
                acc!(b, db);
            }
            &Op::BatchDot { a, b } => {
                let (bsz, rest) = (val!(a).shape[0], val!(a).numel() / val!(a).shape[0]);
                let mut da = Tensor::zeros(val!(a).shape.clone());
                let mut db = Tensor::zeros(val!(b).shape.clone());
                for bi in 0..bsz {
                    let gv = g.data[bi];
                    for j in 0..rest {
                        da.data[bi * rest + j] = gv * val!(b).data[bi * rest + j];
                        db.data[bi * rest + j] = gv * val!(a).data[bi * rest + j];
                    }
                }
                acc!(a, da);
                acc!(b, db);
            }
            &Op::BatchSumSq { x } => {
                let (bsz, rest) = (val!(x).shape[0], val!(x).numel() / val!(x).shape[0]);
                let mut d = Tensor::zeros(val!(x).shape.clone());
                for bi in 0..bsz {
                    let gv = g.data[bi] * r::<F>(2.0);
                    for j in 0..rest {
                        d.data[bi * rest + j] = gv * val!(x).data[bi * rest + j];
                    }
                }
                acc!(x, d);
            }
            &Op::MulBatch { x, s } => {
                let (bsz, rest) = (val!(x).shape[0], val!(x).numel() / val!(x).shape[0]);
                if self.needs[x.0] {
                    let mut d = Tensor::zeros(val!(x).shape.clone());
                    for bi in 0..bsz {
                        let sv = val!(s).data[bi];
                        for j in 0..rest {
                            d.data[bi * rest + j] = g.data[bi * rest + j] * sv;
                        }
                    }
                    acc!(x, d);
                }
                if self.needs[s.0] {
                    let mut d = Tensor::zeros(vec![bsz]);
                    for bi in 0..bsz {
                        let mut acc_s = F::zero();
                        for j in 0..rest {
                            acc_s = acc_s + g.data[bi * rest + j] * val!(x).data[bi * rest + j];
                        }
                        d.data[bi] = acc_s;
                    }
                    acc!(s, d);
                }
            }
            &Op::Log10 { x } => {
                let xv = val!(x);
                let ln10 = r::<F>(std::f64::consts::LN_10);
                let data = xv.data.iter().zip(&g.data).map(|(&v, &gv)| gv / (v * ln10)).collect();
                acc!(x, Tensor::new(xv.shape.clone(), data));
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = val!(x);
                let data = xv.data.iter().zip(&g.data).map(|(&v, &gv)| {
                    if v < lo || v > hi { F::zero() } else { gv }
                }).collect();
                acc!(x, Tensor::new(xv.shape.clone(), data));
            }
            Op::StftMag { x, n_fft, hop, .. } => {
                let (x, n_fft, hop) = (*x, *n_fft, *hop);
                // Move the saved spectra out to end the borrow on ops[i];
                // backward runs once, so they are not needed afterwards.
                let saved = std::mem::take(match &mut self.ops[i] {
                    Op::StftMag { saved, .. } => saved,
                    _ => unreachable!(),
                });
                let d = kernels::stft_mag_backward(&self.values[x.0], &saved, g, n_fft, hop);
                acc!(x, d);
            }
            Op::MatmulConst { x, mat } => {
                let x = *x;
                let d = kernels::matmul_const_backward(&self.values[x.0], mat, g);
                acc!(x, d);
            }
        }
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}
