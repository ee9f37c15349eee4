//! Raw numeric kernels behind the tape ops.
//!
//! Shape validation happens in the tape layer; kernels assume consistent
//! dimensions. Batch items are independent, so the convolution kernels may
//! parallelize over the batch axis; every output element is still reduced in
//! a fixed sequential order, which keeps results bitwise identical for any
//! worker count.

use rayon::prelude::*;

use super::{ConvSpec, Scalar};

/// Unfold one sample into a (Cin*Kh*Kw) x (Oh*Ow) column matrix, zero-padded.
fn im2col<S: Scalar>(
    sample: &[S],
    cin: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    let spatial = oh * ow;
    for c in 0..cin {
        let plane = &sample[c * h * w..(c + 1) * h * w];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let row = &mut col[((c * spec.kernel_h + ki) * spec.kernel_w + kj) * spatial..]
                    [..spatial];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ki) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        row[oy * ow..(oy + 1) * ow].iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kj) as isize - spec.padding as isize;
                        row[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column-matrix gradient back onto the input sample.
fn col2im_add<S: Scalar>(
    col_grad: &[S],
    cin: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    sample_grad: &mut [S],
) {
    let spatial = oh * ow;
    for c in 0..cin {
        let plane = &mut sample_grad[c * h * w..(c + 1) * h * w];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let row =
                    &col_grad[((c * spec.kernel_h + ki) * spec.kernel_w + kj) * spatial..][..spatial];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ki) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kj) as isize - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        plane[idx] = plane[idx] + row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward: input[B,Cin,H,W] * weight[Cout,Cin,Kh,Kw] + bias.
pub fn conv2d_forward<S: Scalar>(
    input: &[S],
    batch: usize,
    h: usize,
    w: usize,
    weight: &[S],
    bias: &[S],
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let k = cin * spec.kernel_h * spec.kernel_w;
    let spatial = oh * ow;
    let mut out = vec![S::zero(); batch * cout * spatial];

    out.par_chunks_mut(cout * spatial).enumerate().for_each(|(b, out_b)| {
        let sample = &input[b * cin * h * w..(b + 1) * cin * h * w];
        let mut col = vec![S::zero(); k * spatial];
        im2col(sample, cin, h, w, spec, oh, ow, &mut col);
        for co in 0..cout {
            let out_row = &mut out_b[co * spatial..(co + 1) * spatial];
            out_row.iter_mut().for_each(|v| *v = bias[co]);
            let w_row = &weight[co * k..(co + 1) * k];
            for ki in 0..k {
                let wv = w_row[ki];
                let col_row = &col[ki * spatial..(ki + 1) * spatial];
                for j in 0..spatial {
                    out_row[j] = out_row[j] + wv * col_row[j];
                }
            }
        }
    });
    out
}

pub struct ConvGrads<S> {
    pub d_input: Vec<S>,
    pub d_weight: Vec<S>,
    pub d_bias: Vec<S>,
}

pub fn conv2d_backward<S: Scalar>(
    input: &[S],
    batch: usize,
    h: usize,
    w: usize,
    weight: &[S],
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    d_out: &[S],
) -> ConvGrads<S> {
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let k = cin * spec.kernel_h * spec.kernel_w;
    let spatial = oh * ow;

    let mut d_input = vec![S::zero(); batch * cin * h * w];

    // Per-sample weight/bias partials are reduced in batch order afterwards so
    // the result does not depend on the worker count.
    let partials: Vec<(Vec<S>, Vec<S>)> = d_input
        .par_chunks_mut(cin * h * w)
        .enumerate()
        .map(|(b, dx_b)| {
            let sample = &input[b * cin * h * w..(b + 1) * cin * h * w];
            let dout_b = &d_out[b * cout * spatial..(b + 1) * cout * spatial];

            let mut col = vec![S::zero(); k * spatial];
            im2col(sample, cin, h, w, spec, oh, ow, &mut col);

            let mut dw_b = vec![S::zero(); cout * k];
            let mut db_b = vec![S::zero(); cout];
            let mut col_grad = vec![S::zero(); k * spatial];

            for co in 0..cout {
                let dout_row = &dout_b[co * spatial..(co + 1) * spatial];
                db_b[co] = dout_row.iter().copied().sum();
                let w_row = &weight[co * k..(co + 1) * k];
                let dw_row = &mut dw_b[co * k..(co + 1) * k];
                for ki in 0..k {
                    let col_row = &col[ki * spatial..(ki + 1) * spatial];
                    let mut dot = S::zero();
                    for j in 0..spatial {
                        dot = dot + dout_row[j] * col_row[j];
                    }
                    dw_row[ki] = dot;
                    let wv = w_row[ki];
                    let cg_row = &mut col_grad[ki * spatial..(ki + 1) * spatial];
                    for j in 0..spatial {
                        cg_row[j] = cg_row[j] + wv * dout_row[j];
                    }
                }
            }
            col2im_add(&col_grad, cin, h, w, spec, oh, ow, dx_b);
            (dw_b, db_b)
        })
        .collect();

    let mut d_weight = vec![S::zero(); cout * k];
    let mut d_bias = vec![S::zero(); cout];
    for (dw_b, db_b) in &partials {
        for (acc, v) in d_weight.iter_mut().zip(dw_b) {
            *acc = *acc + *v;
        }
        for (acc, v) in d_bias.iter_mut().zip(db_b) {
            *acc = *acc + *v;
        }
    }

    ConvGrads { d_input, d_weight, d_bias }
}

/// Affine map: out[B,M] = input[B,N] . weight[M,N]^T + bias[M].
pub fn dense_forward<S: Scalar>(
    input: &[S],
    batch: usize,
    n: usize,
    weight: &[S],
    bias: &[S],
    m: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); batch * m];
    for b in 0..batch {
        let x = &input[b * n..(b + 1) * n];
        let out_row = &mut out[b * m..(b + 1) * m];
        for i in 0..m {
            let w_row = &weight[i * n..(i + 1) * n];
            let mut acc = bias[i];
            for j in 0..n {
                acc = acc + x[j] * w_row[j];
            }
            out_row[i] = acc;
        }
    }
    out
}

pub struct DenseGrads<S> {
    pub d_input: Vec<S>,
    pub d_weight: Vec<S>,
    pub d_bias: Vec<S>,
}

pub fn dense_backward<S: Scalar>(
    input: &[S],
    batch: usize,
    n: usize,
    weight: &[S],
    m: usize,
    d_out: &[S],
) -> DenseGrads<S> {
    let mut d_input = vec![S::zero(); batch * n];
    let mut d_weight = vec![S::zero(); m * n];
    let mut d_bias = vec![S::zero(); m];
    for b in 0..batch {
        let x = &input[b * n..(b + 1) * n];
        let dy = &d_out[b * m..(b + 1) * m];
        let dx = &mut d_input[b * n..(b + 1) * n];
        for i in 0..m {
            let g = dy[i];
            d_bias[i] = d_bias[i] + g;
            let w_row = &weight[i * n..(i + 1) * n];
            let dw_row = &mut d_weight[i * n..(i + 1) * n];
            for j in 0..n {
                dx[j] = dx[j] + g * w_row[j];
                dw_row[j] = dw_row[j] + g * x[j];
            }
        }
    }
    DenseGrads { d_input, d_weight, d_bias }
}

/// Saved batch-norm intermediates needed by the backward pass.
pub struct BnSaved<S> {
    pub x_hat: Vec<S>,
    pub inv_std: Vec<S>,
    /// Normalization count per channel (B or B*H*W).
    pub count: usize,
    /// True when batch statistics were used (train mode).
    pub batch_stats: bool,
}

/// Normalize per channel over all remaining axes. `inner` is H*W for 4-D
/// feature maps and 1 for 2-D inputs. Train mode also returns the updated
/// running statistics (momentum update, unbiased variance).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<S: Scalar>(
    input: &[S],
    batch: usize,
    channels: usize,
    inner: usize,
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
    train: bool,
    eps: f64,
    momentum: f64,
) -> (Vec<S>, BnSaved<S>, Option<(Vec<S>, Vec<S>)>) {
    let count = batch * inner;
    let mut out = vec![S::zero(); input.len()];
    let mut x_hat = vec![S::zero(); input.len()];
    let mut inv_std = vec![S::zero(); channels];
    let eps = S::from_f64(eps);

    let channel_index = |b: usize, c: usize| (b * channels + c) * inner;

    if train {
        let mut new_mean = running_mean.to_vec();
        let mut new_var = running_var.to_vec();
        let n = S::from_f64(count as f64);
        for c in 0..channels {
            let mut sum = S::zero();
            for b in 0..batch {
                let base = channel_index(b, c);
                for i in 0..inner {
                    sum = sum + input[base + i];
                }
            }
            let mean = sum / n;
            let mut var_sum = S::zero();
            for b in 0..batch {
                let base = channel_index(b, c);
                for i in 0..inner {
                    let d = input[base + i] - mean;
                    var_sum = var_sum + d * d;
                }
            }
            let var = var_sum / n;
            let istd = S::one() / (var + eps).sqrt();
            inv_std[c] = istd;
            for b in 0..batch {
                let base = channel_index(b, c);
                for i in 0..inner {
                    let xh = (input[base + i] - mean) * istd;
                    x_hat[base + i] = xh;
                    out[base + i] = gamma[c] * xh + beta[c];
                }
            }
            let m = S::from_f64(momentum);
            let unbiased = if count > 1 {
                var_sum / S::from_f64((count - 1) as f64)
            } else {
                var
            };
            new_mean[c] = (S::one() - m) * new_mean[c] + m * mean;
            new_var[c] = (S::one() - m) * new_var[c] + m * unbiased;
        }
        let saved = BnSaved { x_hat, inv_std, count, batch_stats: true };
        (out, saved, Some((new_mean, new_var)))
    } else {
        for c in 0..channels {
            let istd = S::one() / (running_var[c] + eps).sqrt();
            inv_std[c] = istd;
            for b in 0..batch {
                let base = channel_index(b, c);
                for i in 0..inner {
                    let xh = (input[base + i] - running_mean[c]) * istd;
                    x_hat[base + i] = xh;
                    out[base + i] = gamma[c] * xh + beta[c];
                }
            }
        }
        let saved = BnSaved { x_hat, inv_std, count, batch_stats: false };
        (out, saved, None)
    }
}

pub struct BnGrads<S> {
    pub d_input: Vec<S>,
    pub d_gamma: Vec<S>,
    pub d_beta: Vec<S>,
}

pub fn batchnorm_backward<S: Scalar>(
    saved: &BnSaved<S>,
    batch: usize,
    channels: usize,
    inner: usize,
    gamma: &[S],
    d_out: &[S],
) -> BnGrads<S> {
    let mut d_input = vec![S::zero(); d_out.len()];
    let mut d_gamma = vec![S::zero(); channels];
    let mut d_beta = vec![S::zero(); channels];
    let channel_index = |b: usize, c: usize| (b * channels + c) * inner;

    for c in 0..channels {
        let mut sum_g = S::zero();
        let mut sum_gx = S::zero();
        for b in 0..batch {
            let base = channel_index(b, c);
            for i in 0..inner {
                let g = d_out[base + i];
                sum_g = sum_g + g;
                sum_gx = sum_gx + g * saved.x_hat[base + i];
            }
        }
        d_beta[c] = sum_g;
        d_gamma[c] = sum_gx;

        if saved.batch_stats {
            let n = S::from_f64(saved.count as f64);
            let scale = gamma[c] * saved.inv_std[c] / n;
            for b in 0..batch {
                let base = channel_index(b, c);
                for i in 0..inner {
                    let g = d_out[base + i];
                    d_input[base + i] =
                        scale * (n * g - sum_g - saved.x_hat[base + i] * sum_gx);
                }
            }
        } else {
            let scale = gamma[c] * saved.inv_std[c];
            for b in 0..batch {
                let base = channel_index(b, c);
                for i in 0..inner {
                    d_input[base + i] = scale * d_out[base + i];
                }
            }
        }
    }
    BnGrads { d_input, d_gamma, d_beta }
}

/// Mean over each kernel window; no padding.
pub fn avg_pool_forward<S: Scalar>(
    input: &[S],
    batch_channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); batch_channels * oh * ow];
    let norm = S::from_f64((kernel * kernel) as f64);
    for p in 0..batch_channels {
        let plane = &input[p * h * w..(p + 1) * h * w];
        let out_plane = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for ki in 0..kernel {
                    let iy = oy * stride + ki;
                    for kj in 0..kernel {
                        acc = acc + plane[iy * w + ox * stride + kj];
                    }
                }
                out_plane[oy * ow + ox] = acc / norm;
            }
        }
    }
    out
}

pub fn avg_pool_backward<S: Scalar>(
    batch_channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    d_out: &[S],
) -> Vec<S> {
    let mut d_input = vec![S::zero(); batch_channels * h * w];
    let norm = S::from_f64((kernel * kernel) as f64);
    for p in 0..batch_channels {
        let d_plane = &mut d_input[p * h * w..(p + 1) * h * w];
        let dout_plane = &d_out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout_plane[oy * ow + ox] / norm;
                for ki in 0..kernel {
                    let iy = oy * stride + ki;
                    for kj in 0..kernel {
                        let idx = iy * w + ox * stride + kj;
                        d_plane[idx] = d_plane[idx] + g;
                    }
                }
            }
        }
    }
    d_input
}

/// Max over each window. Padding cells count as -inf so they never win;
/// argmax indices address the unpadded plane and drive the backward scatter.
#[allow(clippy::too_many_arguments)]
pub fn max_pool_forward<S: Scalar>(
    input: &[S],
    batch_channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> (Vec<S>, Vec<usize>) {
    let mut out = vec![S::zero(); batch_channels * oh * ow];
    let mut argmax = vec![0usize; batch_channels * oh * ow];
    for p in 0..batch_channels {
        let plane = &input[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = S::neg_infinity();
                let mut best_idx = 0usize;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[p * oh * ow + oy * ow + ox] = best;
                argmax[p * oh * ow + oy * ow + ox] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward<S: Scalar>(
    batch_channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    argmax: &[usize],
    d_out: &[S],
) -> Vec<S> {
    let mut d_input = vec![S::zero(); batch_channels * h * w];
    for p in 0..batch_channels {
        let d_plane = &mut d_input[p * h * w..(p + 1) * h * w];
        for j in 0..oh * ow {
            let idx = argmax[p * oh * ow + j];
            d_plane[idx] = d_plane[idx] + d_out[p * oh * ow + j];
        }
    }
    d_input
}

/// Row-wise softmax with max subtraction.
pub fn softmax_forward<S: Scalar>(input: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); input.len()];
    for r in 0..rows {
        let row = &input[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, &x) in out_row.iter_mut().zip(row) {
            let e = (x - max).exp();
            *o = e;
            sum = sum + e;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

pub fn softmax_backward<S: Scalar>(output: &[S], rows: usize, cols: usize, d_out: &[S]) -> Vec<S> {
    let mut d_input = vec![S::zero(); output.len()];
    for r in 0..rows {
        let s = &output[r * cols..(r + 1) * cols];
        let g = &d_out[r * cols..(r + 1) * cols];
        let dot: S = s.iter().zip(g).map(|(&si, &gi)| si * gi).sum();
        let d = &mut d_input[r * cols..(r + 1) * cols];
        for i in 0..cols {
            d[i] = s[i] * (g[i] - dot);
        }
    }
    d_input
}

/// Mean over the batch of -log softmax(logits)[label], via fused log-sum-exp.
pub fn cross_entropy_forward<S: Scalar>(
    logits: &[S],
    batch: usize,
    classes: usize,
    labels: &[usize],
) -> S {
    let mut total = S::zero();
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum_exp: S = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total = total + (lse - row[labels[b]]);
    }
    total / S::from_f64(batch as f64)
}

pub fn cross_entropy_backward<S: Scalar>(
    logits: &[S],
    batch: usize,
    classes: usize,
    labels: &[usize],
    upstream: S,
) -> Vec<S> {
    let mut d_logits = vec![S::zero(); logits.len()];
    let inv_batch = S::one() / S::from_f64(batch as f64);
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        let d_row = &mut d_logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum_exp: S = row.iter().map(|&x| (x - max).exp()).sum();
        for k in 0..classes {
            let p = (row[k] - max).exp() / sum_exp;
            let target = if k == labels[b] { S::one() } else { S::zero() };
            d_row[k] = upstream * (p - target) * inv_batch;
        }
    }
    d_logits
}
