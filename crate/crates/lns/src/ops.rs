//! Dense NN kernels: cross-correlation conv, affine, batch norm, activations,
//! cross-entropy. Forward and backward pairs; the tape composes them.
//!
//! Accumulation of reductions (moments, losses) runs in f64 so results do not
//! depend on summation tricks; elementwise math stays in f32.

use crate::error::{LnsError, Result};
use crate::tensor::Tensor;

/// Output spatial extent of a convolution axis.
///
/// Errors unless `(extent + 2*padding - k)` is a nonnegative multiple of
/// `stride`, so every kernel placement is exact.
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(LnsError::InvalidArgument { op: "conv2d", msg: "stride must be >= 1".into() });
    }
    let padded = extent + 2 * padding;
    if padded < k || (padded - k) % stride != 0 {
        return Err(LnsError::InvalidArgument {
            op: "conv2d",
            msg: format!("extent {extent} with kernel {k}, stride {stride}, padding {padding} has no exact output size"),
        });
    }
    Ok((padded - k) / stride + 1)
}

fn check_conv_shapes(input: &Tensor, weight: &Tensor) -> Result<()> {
    if input.shape.rank() != 4 || weight.shape.rank() != 4 {
        return Err(LnsError::ShapeMismatch {
            op: "conv2d",
            lhs: input.dims().to_vec(),
            rhs: weight.dims().to_vec(),
        });
    }
    if input.dim(1) != weight.dim(1) || weight.dim(2) != weight.dim(3) {
        return Err(LnsError::ShapeMismatch {
            op: "conv2d",
            lhs: input.dims().to_vec(),
            rhs: weight.dims().to_vec(),
        });
    }
    Ok(())
}

/// 2D cross-correlation of `input [n,c,h,w]` with `weight [o,c,k,k]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    check_conv_shapes(input, weight)?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (o, k) = (weight.dim(0), weight.dim(2));
    let oh = conv_out_extent(h, k, stride, padding)?;
    let ow = conv_out_extent(w, k, stride, padding)?;

    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let x = &input.data;
    let wt = &weight.data;
    for ni in 0..n {
        for oi in 0..o {
            let out_plane = &mut out.data[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            for ci in 0..c {
                let x_plane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wt[((oi * c + ci) * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        // valid output rows for this kernel tap
                        for oy in 0..oh {
                            let iy = oy * stride + kh;
                            if iy < padding || iy - padding >= h {
                                continue;
                            }
                            let iy = iy - padding;
                            let xrow = &x_plane[iy * w..(iy + 1) * w];
                            let orow = &mut out_plane[oy * ow..(oy + 1) * ow];
                            for ox in 0..ow {
                                let ix = ox * stride + kw;
                                if ix < padding || ix - padding >= w {
                                    continue;
                                }
                                orow[ox] += wv * xrow[ix - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input and weight.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor) {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (o, k) = (weight.dim(0), weight.dim(2));
    let (oh, ow) = (grad_out.dim(2), grad_out.dim(3));

    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let mut dw = Tensor::zeros(&[o, c, k, k]);
    let x = &input.data;
    let wt = &weight.data;
    let gy = &grad_out.data;
    for ni in 0..n {
        for oi in 0..o {
            let g_plane = &gy[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            for ci in 0..c {
                let x_plane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                let dx_plane = &mut dx.data[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for kh in 0..k {
                    for kw in 0..k {
                        let widx = ((oi * c + ci) * k + kh) * k + kw;
                        let wv = wt[widx];
                        let mut wacc = 0f64;
                        for oy in 0..oh {
                            let iy = oy * stride + kh;
                            if iy < padding || iy - padding >= h {
                                continue;
                            }
                            let iy = iy - padding;
                            let grow = &g_plane[oy * ow..(oy + 1) * ow];
                            let xrow = &x_plane[iy * w..(iy + 1) * w];
                            let dxrow = &mut dx_plane[iy * w..(iy + 1) * w];
                            for ox in 0..ow {
                                let ix = ox * stride + kw;
                                if ix < padding || ix - padding >= w {
                                    continue;
                                }
                                let g = grow[ox];
                                dxrow[ix - padding] += wv * g;
                                wacc += (g * xrow[ix - padding]) as f64;
                            }
                        }
                        dw.data[widx] += wacc as f32;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Affine map `input [n,d] x weight [m,d] + bias [m] -> [n,m]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.shape.rank() != 2
        || weight.shape.rank() != 2
        || input.dim(1) != weight.dim(1)
        || bias.numel() != weight.dim(0)
    {
        return Err(LnsError::ShapeMismatch {
            op: "linear",
            lhs: input.dims().to_vec(),
            rhs: weight.dims().to_vec(),
        });
    }
    let (n, d, m) = (input.dim(0), input.dim(1), weight.dim(0));
    let mut out = Tensor::zeros(&[n, m]);
    for ni in 0..n {
        let xrow = &input.data[ni * d..(ni + 1) * d];
        for mi in 0..m {
            let wrow = &weight.data[mi * d..(mi + 1) * d];
            let mut acc = 0f32;
            for di in 0..d {
                acc += xrow[di] * wrow[di];
            }
            out.data[ni * m + mi] = acc + bias.data[mi];
        }
    }
    Ok(out)
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d, m) = (input.dim(0), input.dim(1), weight.dim(0));
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dw = Tensor::zeros(&[m, d]);
    let mut db = Tensor::zeros(&[m]);
    for ni in 0..n {
        let xrow = &input.data[ni * d..(ni + 1) * d];
        let grow = &grad_out.data[ni * m..(ni + 1) * m];
        let dxrow = &mut dx.data[ni * d..(ni + 1) * d];
        for mi in 0..m {
            let g = grow[mi];
            db.data[mi] += g;
            let wrow = &weight.data[mi * d..(mi + 1) * d];
            let dwrow = &mut dw.data[mi * d..(mi + 1) * d];
            for di in 0..d {
                dxrow[di] += g * wrow[di];
                dwrow[di] += g * xrow[di];
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel batch statistics captured by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance used in the normalizer.
    pub var: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// Samples per channel (n*h*w).
    pub count: usize,
}

/// Channel axis is axis 1; rank-2 input is treated as [n, c].
fn bn_geometry(input: &Tensor) -> Result<(usize, usize, usize)> {
    match input.shape.rank() {
        4 => Ok((input.dim(0), input.dim(1), input.dim(2) * input.dim(3))),
        2 => Ok((input.dim(0), input.dim(1), 1)),
        _ => Err(LnsError::InvalidArgument {
            op: "batch_norm",
            msg: format!("expected rank 2 or 4 input, got {}", input.shape),
        }),
    }
}

/// Training-mode batch norm: normalize by batch statistics over all
/// non-channel axes. Returns the saved statistics for backward / EMA update.
pub fn batch_norm_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, BnBatchStats)> {
    let (n, c, s) = bn_geometry(input)?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(LnsError::ShapeMismatch {
            op: "batch_norm",
            lhs: input.dims().to_vec(),
            rhs: gamma.dims().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(LnsError::InvalidArgument { op: "batch_norm", msg: "eps must be > 0".into() });
    }
    let count = n * s;
    if count == 0 {
        return Err(LnsError::InvalidArgument { op: "batch_norm", msg: "zero-size batch".into() });
    }

    let mut mean = vec![0f32; c];
    let mut var = vec![0f32; c];
    let mut inv_std = vec![0f32; c];
    for ci in 0..c {
        let mut acc = 0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for si in 0..s {
                acc += input.data[base + si] as f64;
            }
        }
        let m = acc / count as f64;
        let mut vacc = 0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for si in 0..s {
                let d = input.data[base + si] as f64 - m;
                vacc += d * d;
            }
        }
        let v = vacc / count as f64;
        mean[ci] = m as f32;
        var[ci] = v as f32;
        inv_std[ci] = (1.0 / (v + eps as f64).sqrt()) as f32;
    }

    let mut out = Tensor::zeros(input.dims());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * s;
            let (g, b, mu, is) = (gamma.data[ci], beta.data[ci], mean[ci], inv_std[ci]);
            for si in 0..s {
                out.data[base + si] = (input.data[base + si] - mu) * is * g + b;
            }
        }
    }
    Ok((out, BnBatchStats { mean, var, inv_std, count }))
}

/// Backward of training-mode batch norm. Returns (d_input, d_gamma, d_beta).
pub fn batch_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    stats: &BnBatchStats,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, s) = bn_geometry(input).expect("stats came from this input");
    let count = stats.count as f64;
    let mut dx = Tensor::zeros(input.dims());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);

    for ci in 0..c {
        let (mu, is) = (stats.mean[ci] as f64, stats.inv_std[ci] as f64);
        let g = gamma.data[ci] as f64;
        // reductions: sum(dy), sum(dy * x_hat)
        let mut sum_dy = 0f64;
        let mut sum_dy_xhat = 0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for si in 0..s {
                let dy = grad_out.data[base + si] as f64;
                let xhat = (input.data[base + si] as f64 - mu) * is;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dbeta.data[ci] = sum_dy as f32;
        dgamma.data[ci] = sum_dy_xhat as f32;
        let mean_dy = sum_dy / count;
        let mean_dy_xhat = sum_dy_xhat / count;
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for si in 0..s {
                let dy = grad_out.data[base + si] as f64;
                let xhat = (input.data[base + si] as f64 - mu) * is;
                dx.data[base + si] = (g * is * (dy - mean_dy - xhat * mean_dy_xhat)) as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode batch norm using running statistics.
pub fn batch_norm_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let (n, c, s) = bn_geometry(input)?;
    if gamma.numel() != c
        || beta.numel() != c
        || running_mean.numel() != c
        || running_var.numel() != c
    {
        return Err(LnsError::ShapeMismatch {
            op: "batch_norm",
            lhs: input.dims().to_vec(),
            rhs: gamma.dims().to_vec(),
        });
    }
    let mut out = Tensor::zeros(input.dims());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * s;
            let is = 1.0 / (running_var.data[ci] + eps).sqrt();
            let (g, b, mu) = (gamma.data[ci], beta.data[ci], running_mean.data[ci]);
            for si in 0..s {
                out.data[base + si] = (input.data[base + si] - mu) * is * g + b;
            }
        }
    }
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor { shape: input.shape.clone(), data }
}

/// Per-channel PReLU; `slope` has one entry per channel (axis 1).
pub fn prelu(input: &Tensor, slope: &Tensor) -> Result<Tensor> {
    let (n, c, s) = bn_geometry(input)?;
    if slope.numel() != c {
        return Err(LnsError::ShapeMismatch {
            op: "prelu",
            lhs: input.dims().to_vec(),
            rhs: slope.dims().to_vec(),
        });
    }
    let mut out = Tensor::zeros(input.dims());
    for ni in 0..n {
        for ci in 0..c {
            let a = slope.data[ci];
            let base = (ni * c + ci) * s;
            for si in 0..s {
                let v = input.data[base + si];
                out.data[base + si] = if v > 0.0 { v } else { a * v };
            }
        }
    }
    Ok(out)
}

pub fn hardtanh(input: &Tensor) -> Tensor {
    let data = input.data.iter().map(|&v| v.clamp(-1.0, 1.0)).collect();
    Tensor { shape: input.shape.clone(), data }
}

pub fn tanh(input: &Tensor) -> Tensor {
    let data = input.data.iter().map(|&v| v.tanh()).collect();
    Tensor { shape: input.shape.clone(), data }
}

/// Mean cross-entropy over the batch with max-subtraction stabilization.
/// Returns the loss and the softmax matrix (saved for backward).
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<(f32, Tensor)> {
    if logits.shape.rank() != 2 || logits.dim(0) != labels.len() || labels.is_empty() {
        return Err(LnsError::InvalidArgument {
            op: "cross_entropy",
            msg: format!("logits {} vs {} labels", logits.shape, labels.len()),
        });
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= k {
            return Err(LnsError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("label {l} at index {i} out of range [0, {k})"),
            });
        }
    }
    let mut softmax = Tensor::zeros(&[n, k]);
    let mut loss = 0f64;
    for ni in 0..n {
        let row = &logits.data[ni * k..(ni + 1) * k];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0f64;
        for &v in row {
            denom += ((v - max) as f64).exp();
        }
        let log_denom = denom.ln();
        let srow = &mut softmax.data[ni * k..(ni + 1) * k];
        for (j, &v) in row.iter().enumerate() {
            srow[j] = (((v - max) as f64).exp() / denom) as f32;
        }
        let l = labels[ni] as usize;
        loss += log_denom - (row[l] - max) as f64;
    }
    Ok(((loss / n as f64) as f32, softmax))
}

/// d(loss)/d(logits) scaled by `upstream`.
pub fn cross_entropy_backward(softmax: &Tensor, labels: &[u32], upstream: f32) -> Tensor {
    let (n, k) = (softmax.dim(0), softmax.dim(1));
    let mut dx = softmax.clone();
    let scale = upstream / n as f32;
    for ni in 0..n {
        dx.data[ni * k + labels[ni] as usize] -= 1.0;
        for j in 0..k {
            dx.data[ni * k + j] *= scale;
        }
    }
    dx
}

/// Pad the two spatial axes of `[n,c,h,w]` with a constant value.
pub fn pad_spatial(input: &Tensor, pad: usize, value: f32) -> Result<Tensor> {
    if input.shape.rank() != 4 {
        return Err(LnsError::InvalidArgument {
            op: "pad_spatial",
            msg: format!("expected rank 4, got {}", input.shape),
        });
    }
    if pad == 0 {
        return Ok(input.clone());
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::filled(&[n, c, hp, wp], value);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let src = (ni * c + ci) * h * w + y * w;
                let dst = (ni * c + ci) * hp * wp + (y + pad) * wp + pad;
                out.data[dst..dst + w].copy_from_slice(&input.data[src..src + w]);
            }
        }
    }
    Ok(out)
}

/// Backward of `pad_spatial`: crop the interior of the gradient.
pub fn crop_spatial(grad_out: &Tensor, pad: usize, h: usize, w: usize) -> Tensor {
    if pad == 0 {
        return grad_out.clone();
    }
    let (n, c) = (grad_out.dim(0), grad_out.dim(1));
    let (hp, wp) = (grad_out.dim(2), grad_out.dim(3));
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let src = (ni * c + ci) * hp * wp + (y + pad) * wp + pad;
                let dst = (ni * c + ci) * h * w + y * w;
                out.data[dst..dst + w].copy_from_slice(&grad_out.data[src..src + w]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    /// Naive six-loop f64 reference convolution (zero padding).
    fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
        let (n, c, h, ww) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, k) = (w.dim(0), w.dim(2));
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (ww + 2 * padding - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0f64;
                        for ci in 0..c {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let iy = (oy * stride + kh) as isize - padding as isize;
                                    let ix = (ox * stride + kw) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= ww as isize {
                                        continue;
                                    }
                                    let xv = x.data
                                        [((ni * c + ci) * h + iy as usize) * ww + ix as usize];
                                    let wv = w.data[((oi * c + ci) * k + kh) * k + kw];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out.data[((ni * o + oi) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data[0], 9.0);
    }

    #[test]
    fn conv_center_delta_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 1, 4, 5], &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data[4] = 1.0; // center tap
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.dims(), x.dims());
        for (a, b) in y.data.iter().zip(&x.data) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 3, 5, 5], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let y = conv2d(&x, &w, stride, pad).unwrap();
            let want = conv_oracle(&x, &w, stride, pad);
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 4, 3, 3]);
        let e = conv2d(&x, &w, 1, 0).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 4, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_rejects_inexact_geometry() {
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let w = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(conv2d(&x, &w, 2, 0).is_err());
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b0 = Tensor::zeros(&[3]);
        assert_eq!(linear(&x, &eye, &b0).unwrap().data, x.data);

        let z = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 3]);
        let b = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = linear(&z, &w, &b).unwrap();
        assert_eq!(y.data, vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 3], &mut rng);
        let w = rand_tensor(&[4, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let y = linear(&x, &w, &b).unwrap();
        for ni in 0..2 {
            for mi in 0..4 {
                let mut acc = b.data[mi] as f64;
                for di in 0..3 {
                    acc += x.data[ni * 3 + di] as f64 * w.data[mi * 3 + di] as f64;
                }
                assert!((y.data[ni * 4 + mi] as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bn_passthrough_on_standardized_input() {
        // per-channel zero-mean unit-variance input, gamma=1 beta=0
        let data = vec![-1.0, 1.0, -1.0, 1.0];
        let x = Tensor::from_vec(&[4, 1], data.clone()).unwrap();
        let (y, _) = batch_norm_train(&x, &Tensor::filled(&[1], 1.0), &Tensor::zeros(&[1]), 1e-5)
            .unwrap();
        for (a, b) in y.data.iter().zip(&data) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn bn_gamma_zero_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[3, 2, 2, 2], &mut rng);
        let beta = Tensor::from_vec(&[2], vec![0.5, -0.25]).unwrap();
        let (y, _) = batch_norm_train(&x, &Tensor::zeros(&[2]), &beta, 1e-5).unwrap();
        for ni in 0..3 {
            for ci in 0..2 {
                for si in 0..4 {
                    assert_eq!(y.data[(ni * 2 + ci) * 4 + si], beta.data[ci]);
                }
            }
        }
    }

    #[test]
    fn bn_moments_match_direct_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[8, 4, 3, 3], &mut rng);
        let gamma = Tensor::from_vec(&[4], vec![1.5, 0.5, 1.2, 1.0]).unwrap();
        let beta = Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let (y, _) = batch_norm_train(&x, &gamma, &beta, 1e-5).unwrap();
        // recompute output moments per channel directly
        for ci in 0..4 {
            let mut vals = Vec::new();
            for ni in 0..8 {
                for si in 0..9 {
                    vals.push(y.data[(ni * 4 + ci) * 9 + si] as f64);
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mean - beta.data[ci] as f64).abs() < 1e-4, "mean {mean}");
            assert!((var - (gamma.data[ci] as f64).powi(2)).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn activation_values() {
        let x = Tensor::from_vec(&[1, 3], vec![-2.0, 3.0, 0.0]).unwrap();
        assert_eq!(relu(&x).data, vec![0.0, 3.0, 0.0]);

        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![-2.0]).unwrap();
        let slope = Tensor::from_vec(&[1], vec![0.25]).unwrap();
        assert_eq!(prelu(&x, &slope).unwrap().data, vec![-0.5]);

        let x = Tensor::from_vec(&[1, 2], vec![1.7, -0.3]).unwrap();
        assert_eq!(hardtanh(&x).data, vec![1.0, -0.3]);
    }

    #[test]
    fn cross_entropy_values() {
        // uniform logits over 10 classes
        let x = Tensor::zeros(&[1, 10]);
        let (l, _) = cross_entropy(&x, &[3]).unwrap();
        assert!((l - (10f32).ln()).abs() < 1e-6);

        let x = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let (l, _) = cross_entropy(&x, &[0]).unwrap();
        assert!((l - 0.313262).abs() < 1e-5);

        let mut x = Tensor::zeros(&[1, 10]);
        x.data[7] = 100.0;
        let (l, _) = cross_entropy(&x, &[7]).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let x = Tensor::zeros(&[2, 4]);
        assert!(cross_entropy(&x, &[1, 4]).is_err());
    }

    #[test]
    fn pad_and_crop_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&[2, 3, 4, 5], &mut rng);
        let p = pad_spatial(&x, 2, -1.0).unwrap();
        assert_eq!(p.dims(), &[2, 3, 8, 9]);
        assert_eq!(p.data[0], -1.0);
        let back = crop_spatial(&p, 2, 4, 5);
        assert_eq!(back.data, x.data);
    }
}
