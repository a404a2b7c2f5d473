//! Forward and backward kernels for the handful of layers the networks use.
//!
//! Tensors are single images in CHW layout; batches are handled by the
//! callers looping over images and accumulating parameter gradients.

mod conv;
mod upsample;

pub use conv::{conv2d, conv2d_backward, conv_transpose2x2, conv_transpose2x2_backward};
pub use upsample::{upsample_bilinear2x, upsample_bilinear2x_backward};

use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub fn relu_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Masks `grad` in place with the derivative of ReLU at its output `out`.
pub fn relu_backward_inplace(out: &Tensor, grad: &mut Tensor) {
    for (g, &o) in grad.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Concatenates CHW tensors along channels.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let (_, h, w) = parts[0].chw();
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        let (c, ph, pw) = p.chw();
        if (ph, pw) != (h, w) {
            return Err(shape_err!("cannot concat {ph}x{pw} with {h}x{w}"));
        }
        channels += c;
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(t: &Tensor, sizes: &[usize]) -> Vec<Tensor> {
    let (_, h, w) = t.chw();
    let mut offset = 0;
    sizes
        .iter()
        .map(|&c| {
            let len = c * h * w;
            let part = Tensor::from_vec(&[c, h, w], t.data()[offset..offset + len].to_vec())
                .expect("sizes sum to channel count");
            offset += len;
            part
        })
        .collect()
}

/// `w·x + b` for `w` of shape `(out, in)`.
pub fn linear(x: &[f64], w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    if x.len() != inp || b.len() != out {
        return Err(shape_err!(
            "linear layer {out}x{inp} applied to {} inputs with {} biases",
            x.len(),
            b.len()
        ));
    }
    Ok((0..out)
        .map(|o| b.data()[o] + math::dot(&w.data()[o * inp..(o + 1) * inp], x))
        .collect())
}

/// Accumulates parameter gradients of [`linear`] and returns the input gradient.
pub fn linear_backward(
    x: &[f64],
    w: &Tensor,
    grad_out: &[f64],
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
) -> Vec<f64> {
    let inp = w.shape()[1];
    let mut grad_x = alloc::vec![0.0; inp];
    for (o, &g) in grad_out.iter().enumerate() {
        grad_b.data_mut()[o] += g;
        let row = &w.data()[o * inp..(o + 1) * inp];
        let grow = &mut grad_w.data_mut()[o * inp..(o + 1) * inp];
        for i in 0..inp {
            grow[i] += g * x[i];
            grad_x[i] += g * row[i];
        }
    }
    grad_x
}

/// He-normal initialization: `N(0, 2 / fan_in)`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = math::sqrt(2.0 / fan_in as f64);
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
    t
}
