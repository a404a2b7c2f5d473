use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Source taps `(i0, i1, frac)` for doubling an axis of length `n`
/// with half-pixel centers (`align_corners = false`).
fn taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear ×2 upsampling of every channel.
pub fn upsample_bilinear2x(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let (ty, tx) = (taps(h), taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        let inp = &xd[ch * h * w..(ch + 1) * h * w];
        let plane = &mut od[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = inp[y0 * w + x0] * (1.0 - fx) + inp[y0 * w + x1] * fx;
                let bot = inp[y1 * w + x0] * (1.0 - fx) + inp[y1 * w + x1] * fx;
                plane[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear2x`]; `grad_out` is `(c, 2h, 2w)`.
pub fn upsample_bilinear2x_backward(grad_out: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, oh, ow) = grad_out.chw();
    let (ty, tx) = (taps(h), taps(w));
    let mut gx = Tensor::zeros(&[c, h, w]);
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    for ch in 0..c {
        let gplane = &gd[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gxd[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = gplane[oy * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    gx
}
