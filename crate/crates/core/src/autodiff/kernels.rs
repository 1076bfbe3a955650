//! Compute kernels behind the heavier graph ops. Every kernel is written so
//! parallel and sequential execution give bitwise-identical results: work
//! items own disjoint output regions and inner reductions run in a fixed
//! order.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Tensor;
use crate::par;
use crate::real::{r, Real};
use crate::spectral::{hann_window, reflect_index};

/// y[b,o,t'] = bias_o + sum_{i,k} w[o,i,k] x[b,i,t's+k-p]; T' = (T+2p-K)/s + 1.
pub(super) fn conv1d_forward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    let (bsz, ci, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, _, k) = (w.shape[0], w.shape[1], w.shape[2]);
    let t_out = (t + 2 * pad - k) / stride + 1;
    let mut out = vec![F::zero(); bsz * co * t_out];
    par::for_each_chunk_mut(&mut out, t_out, |idx, row| {
        let (b, o) = (idx / co, idx % co);
        let b0 = bias.map_or(F::zero(), |bb| bb.data[o]);
        for (tp, slot) in row.iter_mut().enumerate() {
            let base = (tp * stride) as isize - pad as isize;
            let mut acc = b0;
            for i in 0..ci {
                let xrow = &x.data[(b * ci + i) * t..(b * ci + i + 1) * t];
                let wrow = &w.data[(o * ci + i) * k..(o * ci + i + 1) * k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    let ti = base + kk as isize;
                    if ti >= 0 && (ti as usize) < t {
                        acc = acc + wv * xrow[ti as usize];
                    }
                }
            }
            *slot = acc;
        }
    });
    Tensor::new(vec![bsz, co, t_out], out)
}

pub(super) fn conv1d_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    gout: &Tensor<F>,
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
    need_gb: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (bsz, ci, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, _, k) = (w.shape[0], w.shape[1], w.shape[2]);
    let t_out = gout.shape[2];

    let gx = need_gx.then(|| {
        let mut gx = vec![F::zero(); bsz * ci * t];
        par::for_each_chunk_mut(&mut gx, t, |idx, row| {
            let (b, i) = (idx / ci, idx % ci);
            for o in 0..co {
                let grow = &gout.data[(b * co + o) * t_out..(b * co + o + 1) * t_out];
                let wrow = &w.data[(o * ci + i) * k..(o * ci + i + 1) * k];
                for (tp, &g) in grow.iter().enumerate() {
                    let base = (tp * stride) as isize - pad as isize;
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let ti = base + kk as isize;
                        if ti >= 0 && (ti as usize) < t {
                            row[ti as usize] = row[ti as usize] + wv * g;
                        }
                    }
                }
            }
        });
        Tensor::new(x.shape.clone(), gx)
    });

    let gw = need_gw.then(|| {
        let mut gw = vec![F::zero(); co * ci * k];
        par::for_each_chunk_mut(&mut gw, k, |idx, row| {
            let (o, i) = (idx / ci, idx % ci);
            for b in 0..bsz {
                let grow = &gout.data[(b * co + o) * t_out..(b * co + o + 1) * t_out];
                let xrow = &x.data[(b * ci + i) * t..(b * ci + i + 1) * t];
                for (tp, &g) in grow.iter().enumerate() {
                    let base = (tp * stride) as isize - pad as isize;
                    for (kk, slot) in row.iter_mut().enumerate() {
                        let ti = base + kk as isize;
                        if ti >= 0 && (ti as usize) < t {
                            *slot = *slot + g * xrow[ti as usize];
                        }
                    }
                }
            }
        });
        Tensor::new(w.shape.clone(), gw)
    });

    let gb = need_gb.then(|| {
        let mut gb = vec![F::zero(); co];
        for b in 0..bsz {
            for (o, slot) in gb.iter_mut().enumerate() {
                let grow = &gout.data[(b * co + o) * t_out..(b * co + o + 1) * t_out];
                for &g in grow {
                    *slot = *slot + g;
                }
            }
        }
        Tensor::new(vec![co], gb)
    });

    (gx, gw, gb)
}

/// Transposed conv; weights are (C_in, C_out, K). Output length
/// (T-1)s - 2p + K. Adjoint of [`conv1d_forward`] under the inner product
/// when the same weight array is reused with its first two axes swapped in
/// meaning.
pub(super) fn convt1d_forward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    let (bsz, ci, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let (_, co, k) = (w.shape[0], w.shape[1], w.shape[2]);
    let t_out = (t - 1) * stride + k - 2 * pad;
    let mut out = vec![F::zero(); bsz * co * t_out];
    par::for_each_chunk_mut(&mut out, t_out, |idx, row| {
        let (b, o) = (idx / co, idx % co);
        if let Some(bb) = bias {
            for slot in row.iter_mut() {
                *slot = bb.data[o];
            }
        }
        for i in 0..ci {
            let xrow = &x.data[(b * ci + i) * t..(b * ci + i + 1) * t];
            let wrow = &w.data[(i * co + o) * k..(i * co + o + 1) * k];
            for (tp, &xv) in xrow.iter().enumerate() {
                let base = (tp * stride) as isize - pad as isize;
                for (kk, &wv) in wrow.iter().enumerate() {
                    let pos = base + kk as isize;
                    if pos >= 0 && (pos as usize) < t_out {
                        row[pos as usize] = row[pos as usize] + wv * xv;
                    }
                }
            }
        }
    });
    Tensor::new(vec![bsz, co, t_out], out)
}

pub(super) fn convt1d_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    gout: &Tensor<F>,
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
    need_gb: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (bsz, ci, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let (_, co, k) = (w.shape[0], w.shape[1], w.shape[2]);
    let t_out = gout.shape[2];

    let gx = need_gx.then(|| {
        let mut gx = vec![F::zero(); bsz * ci * t];
        par::for_each_chunk_mut(&mut gx, t, |idx, row| {
            let (b, i) = (idx / ci, idx % ci);
            for o in 0..co {
                let grow = &gout.data[(b * co + o) * t_out..(b * co + o + 1) * t_out];
                let wrow = &w.data[(i * co + o) * k..(i * co + o + 1) * k];
                for (tp, slot) in row.iter_mut().enumerate() {
                    let base = (tp * stride) as isize - pad as isize;
                    let mut acc = F::zero();
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let pos = base + kk as isize;
                        if pos >= 0 && (pos as usize) < t_out {
                            acc = acc + wv * grow[pos as usize];
                        }
                    }
                    *slot = *slot + acc;
                }
            }
        });
        Tensor::new(x.shape.clone(), gx)
    });

    let gw = need_gw.then(|| {
        let mut gw = vec![F::zero(); ci * co * k];
        par::for_each_chunk_mut(&mut gw, k, |idx, row| {
            let (i, o) = (idx / co, idx % co);
            for b in 0..bsz {
                let grow = &gout.data[(b * co + o) * t_out..(b * co + o + 1) * t_out];
                let xrow = &x.data[(b * ci + i) * t..(b * ci + i + 1) * t];
                for (tp, &xv) in xrow.iter().enumerate() {
                    let base = (tp * stride) as isize - pad as isize;
                    for (kk, slot) in row.iter_mut().enumerate() {
                        let pos = base + kk as isize;
                        if pos >= 0 && (pos as usize) < t_out {
                            *slot = *slot + xv * grow[pos as usize];
                        }
                    }
                }
            }
        });
        Tensor::new(w.shape.clone(), gw)
    });

    let gb = need_gb.then(|| {
        let mut gb = vec![F::zero(); co];
        for b in 0..bsz {
            for (o, slot) in gb.iter_mut().enumerate() {
                let grow = &gout.data[(b * co + o) * t_out..(b * co + o + 1) * t_out];
                for &g in grow {
                    *slot = *slot + g;
                }
            }
        }
        Tensor::new(vec![co], gb)
    });

    (gx, gw, gb)
}

/// Group statistics are biased (divide by N). Returns (y, mean, inv_std) with
/// one (mean, inv) pair per (batch, group).
pub(super) fn group_norm_forward<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    groups: usize,
    eps: F,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let (bsz, c, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let cpg = c / groups;
    let gsz = cpg * t;
    let stats: Vec<(F, F)> = par::map_range(bsz * groups, |idx| {
        let seg = &x.data[idx * gsz..(idx + 1) * gsz];
        let mut sum = F::zero();
        for &v in seg {
            sum = sum + v;
        }
        let mean = sum / r(gsz as f64);
        let mut var = F::zero();
        for &v in seg {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / r(gsz as f64);
        (mean, F::one() / (var + eps).sqrt())
    });
    let mut out = vec![F::zero(); bsz * c * t];
    par::for_each_chunk_mut(&mut out, gsz, |idx, chunk| {
        let g = idx % groups;
        let (mean, inv) = stats[idx];
        let seg = &x.data[idx * gsz..(idx + 1) * gsz];
        for (j, slot) in chunk.iter_mut().enumerate() {
            let ch = g * cpg + j / t;
            *slot = gamma.data[ch] * (seg[j] - mean) * inv + beta.data[ch];
        }
    });
    let (means, invs) = stats.into_iter().unzip();
    (Tensor::new(x.shape.clone(), out), means, invs)
}

pub(super) fn group_norm_backward<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    means: &[F],
    invs: &[F],
    gout: &Tensor<F>,
    groups: usize,
    need_gx: bool,
    need_gg: bool,
    need_gb: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (bsz, c, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let cpg = c / groups;
    let gsz = cpg * t;

    let gx = need_gx.then(|| {
        let mut gx = vec![F::zero(); bsz * c * t];
        par::for_each_chunk_mut(&mut gx, gsz, |idx, chunk| {
            let g = idx % groups;
            let (mean, inv) = (means[idx], invs[idx]);
            let xseg = &x.data[idx * gsz..(idx + 1) * gsz];
            let gseg = &gout.data[idx * gsz..(idx + 1) * gsz];
            let n = r::<F>(gsz as f64);
            let mut sum_h = F::zero();
            let mut sum_hx = F::zero();
            for j in 0..gsz {
                let ch = g * cpg + j / t;
                let h = gseg[j] * gamma.data[ch];
                let xh = (xseg[j] - mean) * inv;
                sum_h = sum_h + h;
                sum_hx = sum_hx + h * xh;
            }
            let mean_h = sum_h / n;
            let mean_hx = sum_hx / n;
            for (j, slot) in chunk.iter_mut().enumerate() {
                let ch = g * cpg + j / t;
                let h = gseg[j] * gamma.data[ch];
                let xh = (xseg[j] - mean) * inv;
                *slot = inv * (h - mean_h - xh * mean_hx);
            }
        });
        Tensor::new(x.shape.clone(), gx)
    });

    let per_channel = (need_gg || need_gb).then(|| {
        par::map_range(c, |ch| {
            let g = ch / cpg;
            let mut dg = F::zero();
            let mut db = F::zero();
            for b in 0..bsz {
                let idx = b * groups + g;
                let (mean, inv) = (means[idx], invs[idx]);
                let row = &x.data[(b * c + ch) * t..(b * c + ch + 1) * t];
                let grow = &gout.data[(b * c + ch) * t..(b * c + ch + 1) * t];
                for (j, &gv) in grow.iter().enumerate() {
                    dg = dg + gv * (row[j] - mean) * inv;
                    db = db + gv;
                }
            }
            (dg, db)
        })
    });
    let gg = match (&per_channel, need_gg) {
        (Some(pc), true) => Some(Tensor::new(
            vec![c],
            pc.iter().map(|&(dg, _)| dg).collect(),
        )),
        _ => None,
    };
    let gb = match (&per_channel, need_gb) {
        (Some(pc), true) => Some(Tensor::new(
            vec![c],
            pc.iter().map(|&(_, db)| db).collect(),
        )),
        _ => None,
    };
    (gx, gg, gb)
}

/// Centered onesided STFT magnitude of [B,1,T] input; output [B, frames,
/// bins] plus the complex spectra saved for the backward pass.
pub(super) fn stft_mag_forward<F: Real>(
    x: &Tensor<F>,
    n_fft: usize,
    hop: usize,
) -> (Tensor<F>, Vec<Complex<F>>) {
    let (bsz, _, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let bins = n_fft / 2 + 1;
    let half = n_fft / 2;
    let n_frames = 1 + t / hop;
    let window: Vec<F> = hann_window(n_fft).iter().map(|&w| r(w)).collect();
    let fft = FftPlanner::<F>::new().plan_fft_forward(n_fft);

    let rows: Vec<(Vec<F>, Vec<Complex<F>>)> = par::map_range(bsz * n_frames, |idx| {
        let (b, f) = (idx / n_frames, idx % n_frames);
        let xrow = &x.data[b * t..(b + 1) * t];
        let start = f as isize * hop as isize - half as isize;
        let mut buf: Vec<Complex<F>> = (0..n_fft)
            .map(|i| {
                let src = reflect_index(start + i as isize, t);
                Complex::new(window[i] * xrow[src], F::zero())
            })
            .collect();
        fft.process(&mut buf);
        buf.truncate(bins);
        let mags = buf.iter().map(|c| c.norm()).collect();
        (mags, buf)
    });

    let mut out = Vec::with_capacity(bsz * n_frames * bins);
    let mut saved = Vec::with_capacity(bsz * n_frames * bins);
    for (mags, spec) in rows {
        out.extend_from_slice(&mags);
        saved.extend_from_slice(&spec);
    }
    (Tensor::new(vec![bsz, n_frames, bins], out), saved)
}

/// Gradient of the magnitude STFT back to the time signal. Per frame the
/// onesided bins are weighted by g*X/|X|, run through an unnormalized inverse
/// FFT (mirror bins stay zero; only computed bins carry gradient), and the
/// real part is windowed and scattered through the same reflection index map
/// the forward used. Frames overlap, so parallelism stays at the batch level.
pub(super) fn stft_mag_backward<F: Real>(
    x: &Tensor<F>,
    saved: &[Complex<F>],
    gout: &Tensor<F>,
    n_fft: usize,
    hop: usize,
) -> Tensor<F> {
    let (bsz, _, t) = (x.shape[0], x.shape[1], x.shape[2]);
    let bins = n_fft / 2 + 1;
    let half = n_fft / 2;
    let n_frames = gout.shape[1];
    let window: Vec<F> = hann_window(n_fft).iter().map(|&w| r(w)).collect();
    let ifft = FftPlanner::<F>::new().plan_fft_inverse(n_fft);
    let tiny: F = r(1e-30);

    let mut gx = vec![F::zero(); bsz * t];
    par::for_each_chunk_mut(&mut gx, t, |b, row| {
        let mut buf = vec![Complex::new(F::zero(), F::zero()); n_fft];
        for f in 0..n_frames {
            for slot in buf.iter_mut() {
                *slot = Complex::new(F::zero(), F::zero());
            }
            let gbase = (b * n_frames + f) * bins;
            for k in 0..bins {
                let xk = saved[gbase + k];
                let m = xk.norm();
                if m > tiny {
                    let scale = gout.data[gbase + k] / m;
                    buf[k] = Complex::new(xk.re * scale, xk.im * scale);
                }
            }
            ifft.process(&mut buf);
            let start = f as isize * hop as isize - half as isize;
            for i in 0..n_fft {
                let src = reflect_index(start + i as isize, t);
                row[src] = row[src] + buf[i].re * window[i];
            }
        }
    });
    Tensor::new(x.shape.clone(), gx)
}

/// out[b,r,m] = sum_k x[b,r,k] mat[m,k]; `mat` is a non-learned constant.
pub(super) fn matmul_const_forward<F: Real>(x: &Tensor<F>, mat: &Tensor<F>) -> Tensor<F> {
    let (bsz, rows, kdim) = (x.shape[0], x.shape[1], x.shape[2]);
    let m = mat.shape[0];
    let mut out = vec![F::zero(); bsz * rows * m];
    par::for_each_chunk_mut(&mut out, m, |idx, orow| {
        let xrow = &x.data[idx * kdim..(idx + 1) * kdim];
        for (mi, slot) in orow.iter_mut().enumerate() {
            let mrow = &mat.data[mi * kdim..(mi + 1) * kdim];
            let mut acc = F::zero();
            for (xv, mv) in xrow.iter().zip(mrow) {
                acc = acc + *xv * *mv;
            }
            *slot = acc;
        }
    });
    Tensor::new(vec![bsz, rows, m], out)
}

pub(super) fn matmul_const_backward<F: Real>(
    x: &Tensor<F>,
    mat: &Tensor<F>,
    gout: &Tensor<F>,
) -> Tensor<F> {
    let (bsz, rows, kdim) = (x.shape[0], x.shape[1], x.shape[2]);
    let m = mat.shape[0];
    let mut gx = vec![F::zero(); bsz * rows * kdim];
    par::for_each_chunk_mut(&mut gx, kdim, |idx, grow| {
        let gorow = &gout.data[idx * m..(idx + 1) * m];
        for (mi, &g) in gorow.iter().enumerate() {
            let mrow = &mat.data[mi * kdim..(mi + 1) * kdim];
            for (slot, &mv) in grow.iter_mut().zip(mrow) {
                *slot = *slot + g * mv;
            }
        }
    });
    Tensor::new(x.shape.clone(), gx)
}
