//! Numeric kernels behind the tape ops, forward and backward.
//!
//! All kernels take validated dimensions and run fixed-order sequential
//! loops, so results are bit-deterministic. Inner loops run along the
//! contiguous W axis.

/// Validated geometry of one conv2d application.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Output extent of a convolution axis, floor semantics.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(k).map(|span| span / stride + 1)
}

/// Range of output indices o with 0 <= o*stride + k_off - pad < input,
/// i.e. the taps that stay in bounds.
#[inline]
fn valid_range(out_len: usize, input: usize, k_off: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    let shift = pad as isize - k_off as isize;
    let lo = if shift > 0 { (shift as usize + stride - 1) / stride } else { 0 };
    let num = input as isize - 1 + shift;
    if num < 0 {
        return None;
    }
    let hi = (num as usize / stride).min(out_len - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

pub fn conv2d_forward(x: &[f64], wgt: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let (cin_g, cout_g) = (d.cin / d.groups, d.cout / d.groups);
    let mut y = vec![0.0; d.n * d.cout * d.ho * d.wo];
    for ni in 0..d.n {
        for g in 0..d.groups {
            for co_l in 0..cout_g {
                let co = g * cout_g + co_l;
                let y_base = (ni * d.cout + co) * d.ho * d.wo;
                for ci_l in 0..cin_g {
                    let ci = g * cin_g + ci_l;
                    let x_base = (ni * d.cin + ci) * d.h * d.w;
                    let w_base = (co * cin_g + ci_l) * d.kh * d.kw;
                    for khi in 0..d.kh {
                        let Some((ho_lo, ho_hi)) = valid_range(d.ho, d.h, khi, d.stride, d.pad)
                        else {
                            continue;
                        };
                        for kwi in 0..d.kw {
                            let Some((wo_lo, wo_hi)) = valid_range(d.wo, d.w, kwi, d.stride, d.pad)
                            else {
                                continue;
                            };
                            let wv = wgt[w_base + khi * d.kw + kwi];
                            for ho_i in ho_lo..=ho_hi {
                                let hi = ho_i * d.stride + khi - d.pad;
                                let x_row = x_base + hi * d.w;
                                let y_row = y_base + ho_i * d.wo;
                                let mut xi = x_row + wo_lo * d.stride + kwi - d.pad;
                                for yo in &mut y[y_row + wo_lo..=y_row + wo_hi] {
                                    *yo += wv * x[xi];
                                    xi += d.stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for ni in 0..d.n {
            for co in 0..d.cout {
                let y_base = (ni * d.cout + co) * d.ho * d.wo;
                let bv = b[co];
                for yo in &mut y[y_base..y_base + d.ho * d.wo] {
                    *yo += bv;
                }
            }
        }
    }
    y
}

/// Gradients of conv2d w.r.t. input, weights and (optionally) bias.
pub fn conv2d_backward(
    x: &[f64],
    wgt: &[f64],
    dy: &[f64],
    has_bias: bool,
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let (cin_g, cout_g) = (d.cin / d.groups, d.cout / d.groups);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wgt.len()];
    for ni in 0..d.n {
        for g in 0..d.groups {
            for co_l in 0..cout_g {
                let co = g * cout_g + co_l;
                let y_base = (ni * d.cout + co) * d.ho * d.wo;
                for ci_l in 0..cin_g {
                    let ci = g * cin_g + ci_l;
                    let x_base = (ni * d.cin + ci) * d.h * d.w;
                    let w_base = (co * cin_g + ci_l) * d.kh * d.kw;
                    for khi in 0..d.kh {
                        let Some((ho_lo, ho_hi)) = valid_range(d.ho, d.h, khi, d.stride, d.pad)
                        else {
                            continue;
                        };
                        for kwi in 0..d.kw {
                            let Some((wo_lo, wo_hi)) = valid_range(d.wo, d.w, kwi, d.stride, d.pad)
                            else {
                                continue;
                            };
                            let wv = wgt[w_base + khi * d.kw + kwi];
                            let mut wsum = 0.0;
                            for ho_i in ho_lo..=ho_hi {
                                let hi = ho_i * d.stride + khi - d.pad;
                                let x_row = x_base + hi * d.w;
                                let y_row = y_base + ho_i * d.wo;
                                let mut xi = x_row + wo_lo * d.stride + kwi - d.pad;
                                for gy in &dy[y_row + wo_lo..=y_row + wo_hi] {
                                    dx[xi] += wv * gy;
                                    wsum += x[xi] * gy;
                                    xi += d.stride;
                                }
                            }
                            dw[w_base + khi * d.kw + kwi] += wsum;
                        }
                    }
                }
            }
        }
    }
    let db = has_bias.then(|| {
        let mut db = vec![0.0; d.cout];
        for ni in 0..d.n {
            for co in 0..d.cout {
                let y_base = (ni * d.cout + co) * d.ho * d.wo;
                db[co] += dy[y_base..y_base + d.ho * d.wo].iter().sum::<f64>();
            }
        }
        db
    });
    (dx, dw, db)
}

/// Validated geometry of one transposed-conv application.
/// Weight layout is Cin x Cout x kh x kw; output extent (H-1)*stride - 2*pad + kh.
#[derive(Debug, Clone, Copy)]
pub struct ConvTDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub fn convt2d_forward(x: &[f64], wgt: &[f64], bias: Option<&[f64]>, d: &ConvTDims) -> Vec<f64> {
    let mut y = vec![0.0; d.n * d.cout * d.ho * d.wo];
    for ni in 0..d.n {
        for ci in 0..d.cin {
            let x_base = (ni * d.cin + ci) * d.h * d.w;
            for co in 0..d.cout {
                let y_base = (ni * d.cout + co) * d.ho * d.wo;
                let w_base = (ci * d.cout + co) * d.kh * d.kw;
                for khi in 0..d.kh {
                    // Input rows hi whose tap hi*stride + khi - pad lands in the output.
                    let Some((hi_lo, hi_hi)) = valid_range(d.h, d.ho, khi, d.stride, d.pad) else {
                        continue;
                    };
                    for kwi in 0..d.kw {
                        let Some((wi_lo, wi_hi)) = valid_range(d.w, d.wo, kwi, d.stride, d.pad)
                        else {
                            continue;
                        };
                        let wv = wgt[w_base + khi * d.kw + kwi];
                        for hi in hi_lo..=hi_hi {
                            let oh = hi * d.stride + khi - d.pad;
                            let x_row = x_base + hi * d.w;
                            let y_row = y_base + oh * d.wo;
                            let mut oi = y_row + wi_lo * d.stride + kwi - d.pad;
                            for xv in &x[x_row + wi_lo..=x_row + wi_hi] {
                                y[oi] += wv * xv;
                                oi += d.stride;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for ni in 0..d.n {
            for co in 0..d.cout {
                let y_base = (ni * d.cout + co) * d.ho * d.wo;
                let bv = b[co];
                for yo in &mut y[y_base..y_base + d.ho * d.wo] {
                    *yo += bv;
                }
            }
        }
    }
    y
}

pub fn convt2d_backward(
    x: &[f64],
    wgt: &[f64],
    dy: &[f64],
    has_bias: bool,
    d: &ConvTDims,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wgt.len()];
    for ni in 0..d.n {
        for ci in 0..d.cin {
            let x_base = (ni * d.cin + ci) * d.h * d.w;
            for co in 0..d.cout {
                let y_base = (ni * d.cout + co) * d.ho * d.wo;
                let w_base = (ci * d.cout + co) * d.kh * d.kw;
                for khi in 0..d.kh {
                    let Some((hi_lo, hi_hi)) = valid_range(d.h, d.ho, khi, d.stride, d.pad) else {
                        continue;
                    };
                    for kwi in 0..d.kw {
                        let Some((wi_lo, wi_hi)) = valid_range(d.w, d.wo, kwi, d.stride, d.pad)
                        else {
                            continue;
                        };
                        let wv = wgt[w_base + khi * d.kw + kwi];
                        let mut wsum = 0.0;
                        for hi in hi_lo..=hi_hi {
                            let oh = hi * d.stride + khi - d.pad;
                            let x_row = x_base + hi * d.w;
                            let y_row = y_base + oh * d.wo;
                            let mut oi = y_row + wi_lo * d.stride + kwi - d.pad;
                            for xi in x_row + wi_lo..=x_row + wi_hi {
                                dx[xi] += wv * dy[oi];
                                wsum += x[xi] * dy[oi];
                                oi += d.stride;
                            }
                        }
                        dw[w_base + khi * d.kw + kwi] += wsum;
                    }
                }
            }
        }
    }
    let db = has_bias.then(|| {
        let mut db = vec![0.0; d.cout];
        for ni in 0..d.n {
            for co in 0..d.cout {
                let y_base = (ni * d.cout + co) * d.ho * d.wo;
                db[co] += dy[y_base..y_base + d.ho * d.wo].iter().sum::<f64>();
            }
        }
        db
    });
    (dx, dw, db)
}

/// Geometry shared by both pooling ops.
#[derive(Debug, Clone, Copy)]
pub struct PoolDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Max pooling; padding acts as -inf. Returns the flattened input index of
/// each maximum (first occurrence wins) for the backward pass.
pub fn maxpool_forward(x: &[f64], d: &PoolDims) -> (Vec<f64>, Vec<usize>) {
    let mut y = vec![0.0; d.n * d.c * d.ho * d.wo];
    let mut arg = vec![0usize; y.len()];
    for nc in 0..d.n * d.c {
        let x_base = nc * d.h * d.w;
        let y_base = nc * d.ho * d.wo;
        for ho_i in 0..d.ho {
            for wo_i in 0..d.wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for khi in 0..d.k {
                    let hi = (ho_i * d.stride + khi) as isize - d.pad as isize;
                    if hi < 0 || hi >= d.h as isize {
                        continue;
                    }
                    for kwi in 0..d.k {
                        let wi = (wo_i * d.stride + kwi) as isize - d.pad as isize;
                        if wi < 0 || wi >= d.w as isize {
                            continue;
                        }
                        let xi = x_base + hi as usize * d.w + wi as usize;
                        if x[xi] > best {
                            best = x[xi];
                            best_i = xi;
                        }
                    }
                }
                y[y_base + ho_i * d.wo + wo_i] = best;
                arg[y_base + ho_i * d.wo + wo_i] = best_i;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(dy: &[f64], arg: &[usize], x_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; x_len];
    for (g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

/// Average pooling dividing by k*k (padding counts as zero contribution).
pub fn avgpool_forward(x: &[f64], d: &PoolDims) -> Vec<f64> {
    let inv = 1.0 / (d.k * d.k) as f64;
    let mut y = vec![0.0; d.n * d.c * d.ho * d.wo];
    for nc in 0..d.n * d.c {
        let x_base = nc * d.h * d.w;
        let y_base = nc * d.ho * d.wo;
        for ho_i in 0..d.ho {
            for wo_i in 0..d.wo {
                let mut sum = 0.0;
                for khi in 0..d.k {
                    let hi = (ho_i * d.stride + khi) as isize - d.pad as isize;
                    if hi < 0 || hi >= d.h as isize {
                        continue;
                    }
                    for kwi in 0..d.k {
                        let wi = (wo_i * d.stride + kwi) as isize - d.pad as isize;
                        if wi < 0 || wi >= d.w as isize {
                            continue;
                        }
                        sum += x[x_base + hi as usize * d.w + wi as usize];
                    }
                }
                y[y_base + ho_i * d.wo + wo_i] = sum * inv;
            }
        }
    }
    y
}

pub fn avgpool_backward(dy: &[f64], d: &PoolDims) -> Vec<f64> {
    let inv = 1.0 / (d.k * d.k) as f64;
    let mut dx = vec![0.0; d.n * d.c * d.h * d.w];
    for nc in 0..d.n * d.c {
        let x_base = nc * d.h * d.w;
        let y_base = nc * d.ho * d.wo;
        for ho_i in 0..d.ho {
            for wo_i in 0..d.wo {
                let g = dy[y_base + ho_i * d.wo + wo_i] * inv;
                for khi in 0..d.k {
                    let hi = (ho_i * d.stride + khi) as isize - d.pad as isize;
                    if hi < 0 || hi >= d.h as isize {
                        continue;
                    }
                    for kwi in 0..d.k {
                        let wi = (wo_i * d.stride + kwi) as isize - d.pad as isize;
                        if wi < 0 || wi >= d.w as isize {
                            continue;
                        }
                        dx[x_base + hi as usize * d.w + wi as usize] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Source channel feeding output channel j of a shuffle with `groups` groups:
/// reshape [g, C/g], transpose, flatten.
#[inline]
pub fn shuffle_src(j: usize, channels: usize, groups: usize) -> usize {
    (j % groups) * (channels / groups) + j / groups
}

/// Applies the channel permutation; `forward` false applies the inverse.
pub fn channel_shuffle_apply(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    forward: bool,
) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for ni in 0..n {
        for j in 0..c {
            let (dst, src) = if forward { (j, shuffle_src(j, c, groups)) } else { (shuffle_src(j, c, groups), j) };
            let yb = (ni * c + dst) * hw;
            let xb = (ni * c + src) * hw;
            y[yb..yb + hw].copy_from_slice(&x[xb..xb + hw]);
        }
    }
    y
}

/// Per-channel batch statistics and the normalized output (train mode).
pub fn bn_forward_train(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            mean[ci] += x[base..base + hw].iter().sum::<f64>();
        }
    }
    for mu in &mut mean {
        *mu /= m;
    }
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let mu = mean[ci];
            var[ci] += x[base..base + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= m;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for i in base..base + hw {
                y[i] = (x[i] - mu) * is * g + b;
            }
        }
    }
    (y, mean, var, inv_std)
}

pub fn bn_forward_eval(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    rmean: &[f64],
    rvar: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = rvar.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, is, g, b) = (rmean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for i in base..base + hw {
                y[i] = (x[i] - mu) * is * g + b;
            }
        }
    }
    (y, inv_std)
}

/// Backward through train-mode batch norm: the batch statistics are
/// functions of x, giving the usual three-term input gradient.
pub fn bn_backward_train(
    x: &[f64],
    dy: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    mean: &[f64],
    inv_std: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for i in base..base + hw {
                s1 += dy[i];
                s2 += dy[i] * (x[i] - mu) * is;
            }
            dbeta[ci] += s1;
            dgamma[ci] += s2;
        }
    }
    let mut dx = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, is, g) = (mean[ci], inv_std[ci], gamma[ci]);
            let (s1, s2) = (dbeta[ci], dgamma[ci]);
            for i in base..base + hw {
                let xh = (x[i] - mu) * is;
                dx[i] = g * is * (dy[i] - s1 / m - xh * s2 / m);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Backward through eval-mode batch norm: running statistics are constants.
pub fn bn_backward_eval(
    x: &[f64],
    dy: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    rmean: &[f64],
    inv_std: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, is, g) = (rmean[ci], inv_std[ci], gamma[ci]);
            for i in base..base + hw {
                dx[i] = dy[i] * g * is;
                dgamma[ci] += dy[i] * (x[i] - mu) * is;
                dbeta[ci] += dy[i];
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Softmax + weighted cross-entropy over 2 classes, fused.
/// Returns (loss, per-pixel softmax probabilities, total pixel weight).
pub fn wce_forward(
    logits: &[f64],
    n: usize,
    hw: usize,
    labels: &[u8],
    weights: [f64; 2],
) -> (f64, Vec<f64>, f64) {
    let mut probs = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut total_w = 0.0;
    for ni in 0..n {
        let base0 = ni * 2 * hw;
        let base1 = base0 + hw;
        for p in 0..hw {
            let (l0, l1) = (logits[base0 + p], logits[base1 + p]);
            let mx = l0.max(l1);
            let (e0, e1) = ((l0 - mx).exp(), (l1 - mx).exp());
            let z = e0 + e1;
            let (p0, p1) = (e0 / z, e1 / z);
            probs[base0 + p] = p0;
            probs[base1 + p] = p1;
            let t = labels[ni * hw + p] as usize;
            let w = weights[t];
            let pt = if t == 0 { p0 } else { p1 };
            loss -= w * pt.ln();
            total_w += w;
        }
    }
    (loss / total_w, probs, total_w)
}

pub fn wce_backward(
    probs: &[f64],
    n: usize,
    hw: usize,
    labels: &[u8],
    weights: [f64; 2],
    total_w: f64,
    upstream: f64,
) -> Vec<f64> {
    let scale = upstream / total_w;
    let mut dl = vec![0.0; probs.len()];
    for ni in 0..n {
        let base0 = ni * 2 * hw;
        let base1 = base0 + hw;
        for p in 0..hw {
            let t = labels[ni * hw + p] as usize;
            let w = weights[t];
            let (p0, p1) = (probs[base0 + p], probs[base1 + p]);
            dl[base0 + p] = scale * w * (p0 - if t == 0 { 1.0 } else { 0.0 });
            dl[base1 + p] = scale * w * (p1 - if t == 1 { 1.0 } else { 0.0 });
        }
    }
    dl
}
