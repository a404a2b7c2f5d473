use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Output positions `ox` for which `ox * stride + k - pad` lies in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, stride: usize, k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn out_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if len + 2 * pad < k || stride == 0 {
        return Err(shape_err!("kernel {k} does not fit input {len} with padding {pad}"));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

/// 2D cross-correlation. `w` is `(out_c, in_c, kh, kw)`, `b` is `(out_c)`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (ic, ih, iw) = x.chw();
    let ws = w.shape();
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    if ws[1] != ic || b.len() != oc {
        return Err(shape_err!(
            "conv weight {:?} / bias {} incompatible with {ic} input channels",
            ws,
            b.len()
        ));
    }
    let oh = out_len(ih, kh, stride, pad)?;
    let ow = out_len(iw, kw, stride, pad)?;
    let mut out = Tensor::zeros(&[oc, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for o in 0..oc {
        let plane = &mut od[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = b.data()[o]);
        for c in 0..ic {
            let inp = &xd[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(oh, stride, ky, pad, ih);
                for kx in 0..kw {
                    let wv = wd[((o * ic + c) * kh + ky) * kw + kx];
                    let (ox0, ox1) = valid_range(ow, stride, kx, pad, iw);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row_in = &inp[iy * iw..(iy + 1) * iw];
                        let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let shift = kx as isize - pad as isize;
                            let src = &row_in[(ox0 as isize + shift) as usize
                                ..(ox1 as isize + shift) as usize];
                            for (dst, &s) in row_out[ox0..ox1].iter_mut().zip(src) {
                                *dst += wv * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                row_out[ox] += wv * row_in[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`]. Parameter gradients are accumulated; the
/// input gradient is written to `grad_x` when requested.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
    mut grad_x: Option<&mut Tensor>,
) {
    let (ic, ih, iw) = x.chw();
    let ws = w.shape();
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let (_, oh, ow) = grad_out.chw();
    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();
    let gwd = grad_w.data_mut();
    for o in 0..oc {
        let gplane = &gd[o * oh * ow..(o + 1) * oh * ow];
        grad_b.data_mut()[o] += gplane.iter().sum::<f64>();
        for c in 0..ic {
            let inp = &xd[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(oh, stride, ky, pad, ih);
                for kx in 0..kw {
                    let widx = ((o * ic + c) * kh + ky) * kw + kx;
                    let wv = wd[widx];
                    let (ox0, ox1) = valid_range(ow, stride, kx, pad, iw);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let row_in = &inp[iy * iw..(iy + 1) * iw];
                        for ox in ox0..ox1 {
                            acc += grow[ox] * row_in[ox * stride + kx - pad];
                        }
                        if let Some(gx) = grad_x.as_deref_mut() {
                            let gx_row =
                                &mut gx.data_mut()[c * ih * iw + iy * iw..c * ih * iw + (iy + 1) * iw];
                            for ox in ox0..ox1 {
                                gx_row[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                    gwd[widx] += acc;
                }
            }
        }
    }
}

/// Transposed convolution with a 2×2 kernel and stride 2 (exact doubling).
/// `w` is `(in_c, out_c, 2, 2)`.
pub fn conv_transpose2x2(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ic, h, wd_) = x.chw();
    let ws = w.shape();
    if ws.len() != 4 || ws[0] != ic || ws[2] != 2 || ws[3] != 2 || b.len() != ws[1] {
        return Err(shape_err!("transposed conv weight {:?} incompatible with {ic} channels", ws));
    }
    let oc = ws[1];
    let (oh, ow) = (2 * h, 2 * wd_);
    let mut out = Tensor::zeros(&[oc, oh, ow]);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for o in 0..oc {
        let plane = &mut od[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = b.data()[o]);
        for c in 0..ic {
            let inp = &xd[c * h * wd_..(c + 1) * h * wd_];
            let k = &wdat[(c * oc + o) * 4..(c * oc + o) * 4 + 4];
            for y in 0..h {
                for x in 0..wd_ {
                    let v = inp[y * wd_ + x];
                    let base = 2 * y * ow + 2 * x;
                    plane[base] += k[0] * v;
                    plane[base + 1] += k[1] * v;
                    plane[base + ow] += k[2] * v;
                    plane[base + ow + 1] += k[3] * v;
                }
            }
        }
    }
    Ok(out)
}

pub fn conv_transpose2x2_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
    grad_x: &mut Tensor,
) {
    let (ic, h, wd_) = x.chw();
    let oc = w.shape()[1];
    let ow = 2 * wd_;
    let oh = 2 * h;
    let xd = x.data();
    let wdat = w.data();
    let gd = grad_out.data();
    for o in 0..oc {
        let gplane = &gd[o * oh * ow..(o + 1) * oh * ow];
        grad_b.data_mut()[o] += gplane.iter().sum::<f64>();
        for c in 0..ic {
            let inp = &xd[c * h * wd_..(c + 1) * h * wd_];
            let kidx = (c * oc + o) * 4;
            let k = [wdat[kidx], wdat[kidx + 1], wdat[kidx + 2], wdat[kidx + 3]];
            let mut acc = [0.0; 4];
            let gx = &mut grad_x.data_mut()[c * h * wd_..(c + 1) * h * wd_];
            for y in 0..h {
                for x in 0..wd_ {
                    let base = 2 * y * ow + 2 * x;
                    let g = [gplane[base], gplane[base + 1], gplane[base + ow], gplane[base + ow + 1]];
                    let v = inp[y * wd_ + x];
                    for t in 0..4 {
                        acc[t] += g[t] * v;
                    }
                    gx[y * wd_ + x] += k[0] * g[0] + k[1] * g[1] + k[2] * g[2] + k[3] * g[3];
                }
            }
            let gw = &mut grad_w.data_mut()[kidx..kidx + 4];
            for t in 0..4 {
                gw[t] += acc[t];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Direct definition with bounds checks on every tap.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor {
        let (ic, ih, iw) = x.chw();
        let ws = w.shape();
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (ih + 2 * p - kh) / s + 1;
        let ow = (iw + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[oc, oh, ow]);
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ic {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < ih && (ix as usize) < iw {
                                    acc += w.data()[((o * ic + c) * kh + ky) * kw + kx]
                                        * x.data()[(c * ih + iy as usize) * iw + ix as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) * scale).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive_for_strides_and_padding() {
        for &(s, p, k, h, w) in &[(1, 1, 3, 5, 6), (2, 1, 3, 8, 8), (2, 1, 3, 7, 5), (1, 0, 1, 4, 3), (3, 2, 3, 9, 7)] {
            let x = seq(&[2, h, w], 0.3);
            let wt = seq(&[3, 2, k, k], 0.1);
            let b = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
            let fast = conv2d(&x, &wt, &b, s, p).unwrap();
            let slow = conv_naive(&x, &wt, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "s={s} p={p}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w; compare against the backward pass.
        let (s, p) = (2, 1);
        let x = seq(&[2, 6, 6], 0.2);
        let wt = seq(&[3, 2, 3, 3], 0.1);
        let b = Tensor::zeros(&[3]);
        let out = conv2d(&x, &wt, &b, s, p).unwrap();
        let g = seq(out.shape(), 0.05);
        let mut gw = Tensor::zeros(wt.shape());
        let mut gb = Tensor::zeros(&[3]);
        let mut gx = Tensor::zeros(x.shape());
        conv2d_backward(&x, &wt, &g, s, p, &mut gw, &mut gb, Some(&mut gx));
        let inner = |a: &Tensor, b: &Tensor| -> f64 { a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum() };
        let lhs = inner(&out, &g);
        assert!((lhs - inner(&gx, &x)).abs() < 1e-10);
        assert!((lhs - inner(&gw, &wt)).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_backward_is_adjoint() {
        let x = seq(&[3, 2, 3], 0.2);
        let wt = seq(&[3, 2, 2, 2], 0.1);
        let b = Tensor::zeros(&[2]);
        let out = conv_transpose2x2(&x, &wt, &b).unwrap();
        assert_eq!(out.shape(), &[2, 4, 6]);
        let g = seq(out.shape(), 0.05);
        let mut gw = Tensor::zeros(wt.shape());
        let mut gb = Tensor::zeros(&[2]);
        let mut gx = Tensor::zeros(x.shape());
        conv_transpose2x2_backward(&x, &wt, &g, &mut gw, &mut gb, &mut gx);
        let inner = |a: &Tensor, b: &Tensor| -> f64 { a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum() };
        let lhs = inner(&out, &g);
        assert!((lhs - inner(&gx, &x)).abs() < 1e-10);
        assert!((lhs - inner(&gw, &wt)).abs() < 1e-10);
    }
}
