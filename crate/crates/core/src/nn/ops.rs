//! Layer kernels: linear, direct convolution, ReLU, 2x2 max-pooling, and
//! the softmax cross-entropy head.

use crate::error::{FlError, Result};
use crate::tensor::{Real, Tensor};

/// `input [n, in] x weight [out, in]^T + bias [out] -> [n, out]`.
pub fn linear_forward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (n, d_in) = (input.shape()[0], input.shape()[1]);
    let (d_out, w_in) = (weight.shape()[0], weight.shape()[1]);
    if w_in != d_in || bias.len() != d_out {
        return Err(FlError::Shape(format!(
            "linear: input {:?} vs weight {:?} / bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let x = input.data();
    let w = weight.data();
    let b = bias.data();
    let mut out = vec![F::zero(); n * d_out];
    for r in 0..n {
        let row = &x[r * d_in..(r + 1) * d_in];
        for o in 0..d_out {
            let wrow = &w[o * d_in..(o + 1) * d_in];
            let mut acc = b[o];
            for i in 0..d_in {
                acc += row[i] * wrow[i];
            }
            out[r * d_out + o] = acc;
        }
    }
    Tensor::new(vec![n, d_out], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (n, d_in) = (input.shape()[0], input.shape()[1]);
    let d_out = weight.shape()[0];
    let x = input.data();
    let w = weight.data();
    let g = upstream.data();
    let mut gin = vec![F::zero(); n * d_in];
    let mut gw = vec![F::zero(); d_out * d_in];
    let mut gb = vec![F::zero(); d_out];
    for r in 0..n {
        for o in 0..d_out {
            let go = g[r * d_out + o];
            gb[o] += go;
            let wrow = &w[o * d_in..(o + 1) * d_in];
            let xrow = &x[r * d_in..(r + 1) * d_in];
            for i in 0..d_in {
                gin[r * d_in + i] += go * wrow[i];
                gw[o * d_in + i] += go * xrow[i];
            }
        }
    }
    Ok((
        Tensor::new(vec![n, d_in], gin)?,
        Tensor::new(vec![d_out, d_in], gw)?,
        Tensor::new(vec![d_out], gb)?,
    ))
}

/// Direct stride-1 convolution, `input [n, ic, h, w]`, `weight
/// [oc, ic, k, k]`, zero padding `pad` on each side.
pub fn conv_forward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    pad: usize,
) -> Result<Tensor<F>> {
    let s = input.shape();
    let (n, ic, h, w) = (s[0], s[1], s[2], s[3]);
    let ws = weight.shape();
    let (oc, wic, k) = (ws[0], ws[1], ws[2]);
    if wic != ic || ws[3] != k || bias.len() != oc {
        return Err(FlError::Shape(format!(
            "conv: input {:?} vs weight {:?}",
            s, ws
        )));
    }
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![F::zero(); n * oc * oh * ow];
    for bn in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for i in 0..ic {
                        for ky in 0..k {
                            let iy = y + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            for kx in 0..k {
                                let ix = xx + kx;
                                if ix < pad || ix >= w + pad {
                                    continue;
                                }
                                let ix = ix - pad;
                                acc += x[((bn * ic + i) * h + iy) * w + ix]
                                    * wt[((o * ic + i) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bn * oc + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv_backward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    upstream: &Tensor<F>,
    pad: usize,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let s = input.shape();
    let (n, ic, h, w) = (s[0], s[1], s[2], s[3]);
    let ws = weight.shape();
    let (oc, k) = (ws[0], ws[2]);
    let us = upstream.shape();
    let (oh, ow) = (us[2], us[3]);
    let x = input.data();
    let wt = weight.data();
    let g = upstream.data();
    let mut gin = vec![F::zero(); x.len()];
    let mut gw = vec![F::zero(); wt.len()];
    let mut gb = vec![F::zero(); oc];
    for bn in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xx in 0..ow {
                    let go = g[((bn * oc + o) * oh + y) * ow + xx];
                    gb[o] += go;
                    for i in 0..ic {
                        for ky in 0..k {
                            let iy = y + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            for kx in 0..k {
                                let ix = xx + kx;
                                if ix < pad || ix >= w + pad {
                                    continue;
                                }
                                let ix = ix - pad;
                                let xi = ((bn * ic + i) * h + iy) * w + ix;
                                let wi = ((o * ic + i) * k + ky) * k + kx;
                                gin[xi] += go * wt[wi];
                                gw[wi] += go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(s.to_vec(), gin)?,
        Tensor::new(ws.to_vec(), gw)?,
        Tensor::new(vec![oc], gb)?,
    ))
}

/// ReLU; the mask records which inputs were positive.
pub fn relu_forward<F: Real>(input: &Tensor<F>) -> (Tensor<F>, Vec<bool>) {
    let mask: Vec<bool> = input.data().iter().map(|&v| v > F::zero()).collect();
    let data = input
        .data()
        .iter()
        .map(|&v| if v > F::zero() { v } else { F::zero() })
        .collect();
    (
        Tensor::new(input.shape().to_vec(), data).expect("same shape"),
        mask,
    )
}

pub fn relu_backward<F: Real>(upstream: &Tensor<F>, mask: &[bool]) -> Tensor<F> {
    let data = upstream
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { g } else { F::zero() })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data).expect("same shape")
}

/// 2x2 max pooling with stride 2. Ties resolve to the first element of the
/// window so results are deterministic. Returns flat argmax indices.
pub fn maxpool2_forward<F: Real>(input: &Tensor<F>) -> Result<(Tensor<F>, Vec<usize>)> {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(FlError::Shape(format!(
            "maxpool2 needs even spatial dims, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![F::zero(); n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_i = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ((bn * c + ch) * h + 2 * y + dy) * w + 2 * xx + dx;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = ((bn * c + ch) * oh + y) * ow + xx;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward<F: Real>(
    upstream: &Tensor<F>,
    argmax: &[usize],
    in_shape: &[usize],
) -> Tensor<F> {
    let mut gin = vec![F::zero(); in_shape.iter().product()];
    for (o, &g) in upstream.data().iter().enumerate() {
        gin[argmax[o]] += g;
    }
    Tensor::new(in_shape.to_vec(), gin).expect("shape product checked by caller")
}

/// Mean softmax cross-entropy over the batch, log-sum-exp shifted.
///
/// Returns `(loss, grad_logits)` where the gradient already carries the
/// `1/batch` factor of the mean.
pub fn cross_entropy<F: Real>(logits: &Tensor<F>, targets: &[u32]) -> Result<(F, Tensor<F>)> {
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n {
        return Err(FlError::Shape(format!(
            "cross entropy: {} logit rows vs {} targets",
            n,
            targets.len()
        )));
    }
    let z = logits.data();
    let inv_n = F::one() / F::from_usize(n).unwrap();
    let mut grad = vec![F::zero(); z.len()];
    let mut loss = F::zero();
    for r in 0..n {
        let row = &z[r * classes..(r + 1) * classes];
        let t = targets[r] as usize;
        if t >= classes {
            return Err(FlError::Shape(format!(
                "target {} out of range for {} classes",
                t, classes
            )));
        }
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<F>().ln() + m;
        loss += (lse - row[t]) * inv_n;
        for c in 0..classes {
            let p = (row[c] - lse).exp();
            let y = if c == t { F::one() } else { F::zero() };
            grad[r * classes + c] = (p - y) * inv_n;
        }
    }
    Ok((loss, Tensor::new(vec![n, classes], grad)?))
}
