//! Decoders, pseudo-labels and the cross-consistency fine-tuning loss.
//!
//! Two decoders share the encoder but differ in how they upscale:
//! one learns a 2×2 stride-2 transposed convolution, the other uses fixed
//! bilinear ×2 interpolation followed by a 1×1 convolution. Each stage then
//! concatenates the matching encoder skip tensor and applies a 3×3
//! convolution with ReLU; a final 1×1 convolution produces per-class
//! logits. Probabilities are channel-wise sigmoids.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, validation, Result};
use crate::math;
use crate::model::{conv_layer, conv_layer_backward, init_conv, with_grads, EncoderConfig, EncoderOutput};
use crate::nn;
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::types::LabelMask;

/// Probability clamp inside cross-entropy.
pub const CE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpscaleMode {
    TransposedConv,
    Bilinear,
}

impl UpscaleMode {
    pub fn name(self) -> &'static str {
        match self {
            UpscaleMode::TransposedConv => "transposed-conv",
            UpscaleMode::Bilinear => "bilinear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transposed-conv" => Ok(UpscaleMode::TransposedConv),
            "bilinear" => Ok(UpscaleMode::Bilinear),
            other => Err(validation!("unknown upscale mode `{other}` (transposed-conv | bilinear)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub mode: UpscaleMode,
    pub stages: usize,
    /// Output channels of each stage, deepest first.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl DecoderConfig {
    /// Stage count and channel schedule matched to `encoder`.
    pub fn for_encoder(encoder: &EncoderConfig, mode: UpscaleMode, num_classes: usize, init_seed: u64) -> Self {
        let channels: Vec<usize> = encoder.skip_channels().iter().rev().copied().collect();
        Self {
            mode,
            stages: channels.len(),
            channels,
            num_classes,
            init_seed,
        }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.num_classes == 0 {
            return Err(validation!("decoder needs at least one class"));
        }
        if self.channels.len() != self.stages || self.channels.contains(&0) {
            return Err(validation!(
                "decoder channel schedule {:?} does not match {} stages",
                self.channels,
                self.stages
            ));
        }
        let stride = encoder.output_stride();
        if 1usize << self.stages != stride {
            return Err(validation!(
                "{} decoder stages upscale by {}, but the encoder stride is {stride}",
                self.stages,
                1usize << self.stages
            ));
        }
        Ok(())
    }
}

struct StageTrace {
    input: Tensor,
    upsampled_raw: Option<Tensor>,
    up: Tensor,
    cat: Tensor,
    out: Tensor,
}

pub struct DecoderTrace {
    stages: Vec<StageTrace>,
    head_input: Tensor,
    skip_channels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    in_channels: usize,
    skip_channels: Vec<usize>,
    prefix: String,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, encoder: &EncoderConfig, prefix: &str) -> Result<Self> {
        cfg.validate(encoder)?;
        Ok(Self {
            cfg,
            in_channels: encoder.feature_channels(),
            skip_channels: encoder.skip_channels().to_vec(),
            prefix: String::from(prefix),
        })
    }

    fn name(&self, stage: usize, layer: &str) -> String {
        format!("{}stage{stage}.{layer}", self.prefix)
    }

    fn head(&self) -> String {
        format!("{}head", self.prefix)
    }

    /// Skip channels consumed by decoder stage `d` (deepest skip first).
    fn skip_for(&self, d: usize) -> usize {
        self.skip_channels.len() - 1 - d
    }

    /// Initializes from `cfg.init_seed`.
    pub fn init(&self, params: &mut ParamSet) {
        let mut rng = Rng::seed_from_u64(self.cfg.init_seed);
        let mut in_c = self.in_channels;
        for d in 0..self.cfg.stages {
            let out_c = self.cfg.channels[d];
            match self.cfg.mode {
                UpscaleMode::TransposedConv => {
                    params.insert(
                        format!("{}.weight", self.name(d, "up")),
                        nn::he_normal(&[in_c, out_c, 2, 2], in_c, &mut rng),
                    );
                    params.insert(format!("{}.bias", self.name(d, "up")), Tensor::zeros(&[out_c]));
                }
                UpscaleMode::Bilinear => init_conv(params, &self.name(d, "up"), out_c, in_c, 1, &mut rng),
            }
            let skip_c = self.skip_channels[self.skip_for(d)];
            init_conv(params, &self.name(d, "conv"), out_c, out_c + skip_c, 3, &mut rng);
            in_c = out_c;
        }
        init_conv(params, &self.head(), self.cfg.num_classes, in_c, 1, &mut rng);
    }

    pub fn forward(&self, params: &ParamSet, enc: &EncoderOutput) -> Result<(Tensor, DecoderTrace)> {
        if enc.features.stride != 1 << self.cfg.stages {
            return Err(validation!(
                "feature stride {} cannot be restored by {} decoder stages",
                enc.features.stride,
                self.cfg.stages
            ));
        }
        if enc.skips.len() != self.skip_channels.len() {
            return Err(shape_err!("decoder expects {} skip tensors, got {}", self.skip_channels.len(), enc.skips.len()));
        }
        let mut x = enc.features.values.clone();
        let mut stages = Vec::with_capacity(self.cfg.stages);
        for d in 0..self.cfg.stages {
            let (up, upsampled_raw) = match self.cfg.mode {
                UpscaleMode::TransposedConv => (
                    nn::conv_transpose2x2(
                        &x,
                        params.get(&format!("{}.weight", self.name(d, "up")))?,
                        params.get(&format!("{}.bias", self.name(d, "up")))?,
                    )?,
                    None,
                ),
                UpscaleMode::Bilinear => {
                    let raw = nn::upsample_bilinear2x(&x);
                    (conv_layer(params, &self.name(d, "up"), &raw, 1, 0)?, Some(raw))
                }
            };
            let skip = &enc.skips[self.skip_for(d)];
            let cat = nn::concat_channels(&[&up, skip])?;
            let mut out = conv_layer(params, &self.name(d, "conv"), &cat, 1, 1)?;
            nn::relu_inplace(&mut out);
            stages.push(StageTrace {
                input: x,
                upsampled_raw,
                up,
                cat,
                out: out.clone(),
            });
            x = out;
        }
        let logits = conv_layer(params, &self.head(), &x, 1, 0)?;
        Ok((
            logits,
            DecoderTrace {
                stages,
                head_input: x,
                skip_channels: self.skip_channels.clone(),
            },
        ))
    }

    /// Logits `(C, H, W)` at input resolution.
    pub fn decode(&self, params: &ParamSet, enc: &EncoderOutput) -> Result<Tensor> {
        Ok(self.forward(params, enc)?.0)
    }

    /// Accumulates parameter gradients; returns gradients w.r.t. the
    /// encoder features and each skip tensor.
    pub fn backward(
        &self,
        params: &ParamSet,
        trace: &DecoderTrace,
        grad_logits: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = conv_layer_backward(params, &self.head(), &trace.head_input, grad_logits, 1, 0, grads, true)?
            .expect("requested");
        let mut grad_skips: Vec<Tensor> = Vec::with_capacity(trace.skip_channels.len());
        let mut skip_slots: Vec<Option<Tensor>> = vec![None; trace.skip_channels.len()];
        for d in (0..self.cfg.stages).rev() {
            let st = &trace.stages[d];
            nn::relu_backward_inplace(&st.out, &mut g);
            let gcat = conv_layer_backward(params, &self.name(d, "conv"), &st.cat, &g, 1, 1, grads, true)?
                .expect("requested");
            let up_c = st.up.shape()[0];
            let skip_idx = self.skip_for(d);
            let mut parts = nn::split_channels(&gcat, &[up_c, trace.skip_channels[skip_idx]]);
            skip_slots[skip_idx] = parts.pop();
            let gup = parts.pop().expect("two parts");
            g = match self.cfg.mode {
                UpscaleMode::TransposedConv => {
                    let wname = format!("{}.weight", self.name(d, "up"));
                    let bname = format!("{}.bias", self.name(d, "up"));
                    let w = params.get(&wname)?;
                    let b = params.get(&bname)?;
                    let mut gx = Tensor::zeros(st.input.shape());
                    with_grads(grads, (&wname, w.shape()), (&bname, b.shape()), |gw, gb| {
                        nn::conv_transpose2x2_backward(&st.input, w, &gup, gw, gb, &mut gx)
                    });
                    gx
                }
                UpscaleMode::Bilinear => {
                    let raw = st.upsampled_raw.as_ref().expect("bilinear stage keeps its input");
                    let graw = conv_layer_backward(params, &self.name(d, "up"), raw, &gup, 1, 0, grads, true)?
                        .expect("requested");
                    let (_, h, w) = st.input.chw();
                    nn::upsample_bilinear2x_backward(&graw, h, w)
                }
            };
        }
        for slot in skip_slots {
            grad_skips.push(slot.expect("every skip is consumed once"));
        }
        Ok((g, grad_skips))
    }
}

/// Channel-wise sigmoid probabilities `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub probs: Tensor,
}

impl ProbMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.shape().len() != 3 {
            return Err(shape_err!("probability map must be (C, H, W), got {:?}", probs.shape()));
        }
        if probs.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(validation!("probabilities must lie in [0, 1]"));
        }
        Ok(Self { probs })
    }

    pub fn from_logits(logits: &Tensor) -> Self {
        let mut probs = logits.clone();
        probs.data_mut().iter_mut().for_each(|v| *v = math::sigmoid(*v));
        Self { probs }
    }

    /// Pixel labels: the most probable class when it reaches `threshold`,
    /// else background.
    pub fn to_labels(&self, threshold: f64) -> Result<LabelMask> {
        let (c, h, w) = self.probs.chw();
        let p = h * w;
        let labels = (0..p)
            .map(|i| {
                let (best, bp) = (0..c)
                    .map(|ch| (ch, self.probs.data()[ch * p + i]))
                    .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                if bp >= threshold {
                    best as u8 + 1
                } else {
                    0
                }
            })
            .collect();
        LabelMask::new_2d(h, w, labels, c as u8)
    }
}

/// Thresholded one-hot target. It is plain data: nothing links it back to
/// the probabilities it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub onehot: Tensor,
}


fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(validation!("threshold must lie in (0, 1), got {threshold}"))
    }
}

/// `onehot[c, h, w] = 1` iff `p[c, h, w] ≥ threshold`.
pub fn pseudo_label(p: &ProbMap, threshold: f64) -> Result<PseudoLabel> {
    check_threshold(threshold)?;
    let mut onehot = p.probs.clone();
    onehot
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = if *v >= threshold { 1.0 } else { 0.0 });
    Ok(PseudoLabel { onehot })
}

/// One-hot `(C, H, W)` encoding of foreground classes `1..=C`.
pub fn onehot_target(mask: &LabelMask, channels: usize) -> Result<Tensor> {
    let [d, h, w] = mask.dims();
    if d != 1 {
        return Err(shape_err!("expected a 2D mask, got depth {d}"));
    }
    if mask.num_classes() as usize != channels {
        return Err(shape_err!("mask has {} classes, probabilities have {channels}", mask.num_classes()));
    }
    let p = h * w;
    let mut t = Tensor::zeros(&[channels, h, w]);
    for (i, &l) in mask.labels().iter().enumerate() {
        if l > 0 {
            t.data_mut()[(l as usize - 1) * p + i] = 1.0;
        }
    }
    Ok(t)
}

/// Mean binary cross-entropy with clamped probabilities, and its
/// gradient w.r.t. `p` (zero where the clamp is active).
fn bce_mean(p: &Tensor, y: &Tensor) -> (f64, Tensor) {
    let n = p.len() as f64;
    let mut grad = Tensor::zeros(p.shape());
    let mut total = 0.0;
    for ((&pv, &yv), g) in p.data().iter().zip(y.data()).zip(grad.data_mut()) {
        let pc = pv.clamp(CE_EPS, 1.0 - CE_EPS);
        total -= yv * math::ln(pc) + (1.0 - yv) * math::ln(1.0 - pc);
        if pv > CE_EPS && pv < 1.0 - CE_EPS {
            *g = (-yv / pc + (1.0 - yv) / (1.0 - pc)) / n;
        }
    }
    (total / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsfLoss {
    pub loss: f64,
    pub grad_p1: Tensor,
    pub grad_p2: Tensor,
    /// Targets actually used for `(p1, p2)`.
    pub target_p1: Tensor,
    pub target_p2: Tensor,
}

/// Labeled: `CE(p1, m) + CE(p2, m)`. Unlabeled (`target = None`):
/// `CE(p1, y2) + CE(p2, y1)` with `yⱼ = pseudo_label(pⱼ)` held constant.
/// Each CE is binary cross-entropy averaged over classes and pixels.
pub fn ssf_loss_with_grad(p1: &ProbMap, p2: &ProbMap, target: Option<&LabelMask>, threshold: f64) -> Result<SsfLoss> {
    if p1.probs.shape() != p2.probs.shape() {
        return Err(shape_err!("probability maps differ: {:?} vs {:?}", p1.probs.shape(), p2.probs.shape()));
    }
    let (c, h, w) = p1.probs.chw();
    let (t1, t2) = match target {
        Some(m) => {
            let [_, mh, mw] = m.dims();
            if (mh, mw) != (h, w) {
                return Err(shape_err!("mask {mh}x{mw} does not match probabilities {h}x{w}"));
            }
            let t = onehot_target(m, c)?;
            (t.clone(), t)
        }
        None => {
            let y1 = pseudo_label(p1, threshold)?.onehot;
            let y2 = pseudo_label(p2, threshold)?.onehot;
            (y2, y1)
        }
    };
    let (l1, g1) = bce_mean(&p1.probs, &t1);
    let (l2, g2) = bce_mean(&p2.probs, &t2);
    Ok(SsfLoss {
        loss: l1 + l2,
        grad_p1: g1,
        grad_p2: g2,
        target_p1: t1,
        target_p2: t2,
    })
}

pub fn ssf_loss(p1: &ProbMap, p2: &ProbMap, target: Option<&LabelMask>, threshold: f64) -> Result<f64> {
    Ok(ssf_loss_with_grad(p1, p2, target, threshold)?.loss)
}

/// Gradient of one BCE term w.r.t. the logits behind `p`, in the
/// unclamped sigmoid-cross-entropy form `(p − y) / N`.
pub fn bce_logit_grad(p: &ProbMap, target: &Tensor) -> Tensor {
    let n = p.probs.len() as f64;
    let mut g = p.probs.clone();
    for (gv, &y) in g.data_mut().iter_mut().zip(target.data()) {
        *gv = (*gv - y) / n;
    }
    g
}
