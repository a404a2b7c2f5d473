//! Encoder backbone, dense projection head and the pooled reference head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, validation, Result};
use crate::math;
use crate::nn;
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::types::SliceImage;

/// Added to the norm before dividing, so zero vectors stay finite.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderPreset {
    TinyCnn,
    Resnet50Like,
}

impl EncoderPreset {
    pub fn name(self) -> &'static str {
        match self {
            EncoderPreset::TinyCnn => "tiny-cnn",
            EncoderPreset::Resnet50Like => "resnet50-like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny-cnn" => Ok(EncoderPreset::TinyCnn),
            "resnet50-like" => Ok(EncoderPreset::Resnet50Like),
            other => Err(validation!("unknown encoder preset `{other}` (tiny-cnn | resnet50-like)")),
        }
    }
}

/// Stage layout of the encoder. Stage `i` is a 3×3 convolution with stride
/// `strides[i]` to `widths[i]` channels followed by ReLU and
/// `res_blocks[i]` residual blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub preset: EncoderPreset,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub res_blocks: Vec<usize>,
}

impl EncoderConfig {
    /// Desk-scale default: four conv stages, stride 8, 64 feature channels.
    pub fn tiny_cnn() -> Self {
        Self {
            preset: EncoderPreset::TinyCnn,
            in_channels: 1,
            widths: vec![8, 16, 32, 64],
            strides: vec![1, 2, 2, 2],
            res_blocks: vec![0, 0, 0, 0],
        }
    }

    /// Residual stack with the 3-4-6-3 block layout and stride 16.
    pub fn resnet50_like() -> Self {
        Self {
            preset: EncoderPreset::Resnet50Like,
            in_channels: 1,
            widths: vec![32, 64, 128, 256, 512],
            strides: vec![1, 2, 2, 2, 2],
            res_blocks: vec![0, 3, 4, 6, 3],
        }
    }

    pub fn from_preset(preset: EncoderPreset) -> Self {
        match preset {
            EncoderPreset::TinyCnn => Self::tiny_cnn(),
            EncoderPreset::Resnet50Like => Self::resnet50_like(),
        }
    }

    pub fn output_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    /// Channels of the skip tensors handed to the decoder, shallow first.
    pub fn skip_channels(&self) -> &[usize] {
        &self.widths[..self.widths.len() - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.strides.len() != n || self.res_blocks.len() != n {
            return Err(validation!("encoder widths/strides/res_blocks must be non-empty and equal length"));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(validation!("encoder channel counts must be positive"));
        }
        if self.strides[0] != 1 || self.strides[1..].iter().any(|&s| s != 2) {
            return Err(validation!("encoder strides must be [1, 2, 2, ...]"));
        }
        Ok(())
    }
}

/// Encoder output: `(C_f, D_h, D_w)` features and the input stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(values: Tensor, stride: usize) -> Result<Self> {
        if values.shape().len() != 3 || values.shape()[1] * values.shape()[2] == 0 {
            return Err(shape_err!("feature map must be (C, D_h, D_w), got {:?}", values.shape()));
        }
        Ok(Self { values, stride })
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.values.chw();
        (h, w)
    }
}

/// Unit-norm embedding at every feature-grid position, stored `(C_p, D_h, D_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseProjection {
    pub vectors: Tensor,
}

impl DenseProjection {
    pub fn dim(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.vectors.chw();
        (h, w)
    }

    pub fn positions(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Position-major copy: row `i` is the embedding at grid position `i`.
    pub fn rows(&self) -> Vec<f64> {
        chw_to_rows(&self.vectors)
    }

    /// Builds a projection from position-major rows (no normalization).
    pub fn from_rows(rows: &[f64], dim: usize, grid: (usize, usize)) -> Result<Self> {
        if rows.len() != dim * grid.0 * grid.1 {
            return Err(shape_err!("{} values do not fill a {dim}x{}x{} projection", rows.len(), grid.0, grid.1));
        }
        Ok(Self {
            vectors: rows_to_chw(rows, dim, grid),
        })
    }
}

pub(crate) fn chw_to_rows(t: &Tensor) -> Vec<f64> {
    let (c, h, w) = t.chw();
    let p = h * w;
    let mut rows = vec![0.0; c * p];
    for ch in 0..c {
        for i in 0..p {
            rows[i * c + ch] = t.data()[ch * p + i];
        }
    }
    rows
}

pub(crate) fn rows_to_chw(rows: &[f64], c: usize, grid: (usize, usize)) -> Tensor {
    let p = grid.0 * grid.1;
    let mut t = Tensor::zeros(&[c, grid.0, grid.1]);
    for i in 0..p {
        for ch in 0..c {
            t.data_mut()[ch * p + i] = rows[i * c + ch];
        }
    }
    t
}

/// Takes the weight and bias gradients out of `grads` (zero-filled when
/// absent) for the duration of `f`.
pub(crate) fn with_grads<R>(
    grads: &mut ParamSet,
    weight: (&str, &[usize]),
    bias: (&str, &[usize]),
    f: impl FnOnce(&mut Tensor, &mut Tensor) -> R,
) -> R {
    let mut gw = grads.remove(weight.0).unwrap_or_else(|| Tensor::zeros(weight.1));
    let mut gb = grads.remove(bias.0).unwrap_or_else(|| Tensor::zeros(bias.1));
    let r = f(&mut gw, &mut gb);
    grads.insert(weight.0, gw);
    grads.insert(bias.0, gb);
    r
}

/// Backward of a conv layer named `name` (`.weight` / `.bias`).
pub(crate) fn conv_layer_backward(
    params: &ParamSet,
    name: &str,
    input: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    grads: &mut ParamSet,
    want_input_grad: bool,
) -> Result<Option<Tensor>> {
    let wname = format!("{name}.weight");
    let bname = format!("{name}.bias");
    let w = params.get(&wname)?;
    let b = params.get(&bname)?;
    let mut gx = want_input_grad.then(|| Tensor::zeros(input.shape()));
    with_grads(grads, (&wname, w.shape()), (&bname, b.shape()), |gw, gb| {
        nn::conv2d_backward(input, w, grad_out, stride, pad, gw, gb, gx.as_mut());
    });
    Ok(gx)
}

pub(crate) fn conv_layer(params: &ParamSet, name: &str, input: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    nn::conv2d(
        input,
        params.get(&format!("{name}.weight"))?,
        params.get(&format!("{name}.bias"))?,
        stride,
        pad,
    )
}

pub(crate) fn init_conv(params: &mut ParamSet, name: &str, out_c: usize, in_c: usize, k: usize, rng: &mut Rng) {
    params.insert(format!("{name}.weight"), nn::he_normal(&[out_c, in_c, k, k], in_c * k * k, rng));
    params.insert(format!("{name}.bias"), Tensor::zeros(&[out_c]));
}

struct BlockTrace {
    input: Tensor,
    hidden: Tensor,
    output: Tensor,
}

struct StageTrace {
    input: Tensor,
    conv_out: Tensor,
    blocks: Vec<BlockTrace>,
}

/// Intermediate activations kept for [`Encoder::backward`].
pub struct EncoderTrace {
    stages: Vec<StageTrace>,
}

/// Final features plus the per-stage skip tensors.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub features: FeatureMap,
    pub skips: Vec<Tensor>,
}

/// Encoder network whose parameters live under `prefix` in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    prefix: String,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: String::from(prefix),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn stage_name(&self, i: usize) -> String {
        format!("{}stage{i}.conv", self.prefix)
    }

    fn block_name(&self, i: usize, j: usize, k: usize) -> String {
        format!("{}stage{i}.res{j}.conv{k}", self.prefix)
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        let mut in_c = self.cfg.in_channels;
        for (i, &w) in self.cfg.widths.iter().enumerate() {
            init_conv(params, &self.stage_name(i), w, in_c, 3, rng);
            for j in 0..self.cfg.res_blocks[i] {
                init_conv(params, &self.block_name(i, j, 1), w, w, 3, rng);
                init_conv(params, &self.block_name(i, j, 2), w, w, 3, rng);
                // Residual branches start near identity.
                params.get_mut(&format!("{}.weight", self.block_name(i, j, 2))).expect("just inserted").scale(0.1);
            }
            in_c = w;
        }
    }

    fn check_input(&self, image: &SliceImage) -> Result<()> {
        let s = self.cfg.output_stride();
        let (h, w) = image.dims();
        if h % s != 0 || w % s != 0 {
            return Err(validation!("image {h}x{w} is not divisible by encoder stride {s}"));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamSet, image: &SliceImage) -> Result<(EncoderOutput, EncoderTrace)> {
        self.check_input(image)?;
        let (h, w) = image.dims();
        let mut x = Tensor::from_vec(&[1, h, w], image.pixels().to_vec())?;
        let mut stages = Vec::with_capacity(self.cfg.widths.len());
        let mut skips = Vec::new();
        for i in 0..self.cfg.widths.len() {
            let mut a = conv_layer(params, &self.stage_name(i), &x, self.cfg.strides[i], 1)?;
            nn::relu_inplace(&mut a);
            let conv_out = a.clone();
            let mut blocks = Vec::with_capacity(self.cfg.res_blocks[i]);
            for j in 0..self.cfg.res_blocks[i] {
                let mut hidden = conv_layer(params, &self.block_name(i, j, 1), &a, 1, 1)?;
                nn::relu_inplace(&mut hidden);
                let mut z = conv_layer(params, &self.block_name(i, j, 2), &hidden, 1, 1)?;
                z.add_assign(&a);
                nn::relu_inplace(&mut z);
                blocks.push(BlockTrace {
                    input: a,
                    hidden,
                    output: z.clone(),
                });
                a = z;
            }
            stages.push(StageTrace {
                input: x,
                conv_out,
                blocks,
            });
            if i + 1 < self.cfg.widths.len() {
                skips.push(a.clone());
            }
            x = a;
        }
        let features = FeatureMap::new(x, self.cfg.output_stride())?;
        Ok((EncoderOutput { features, skips }, EncoderTrace { stages }))
    }

    /// Feature map only.
    pub fn encode(&self, params: &ParamSet, image: &SliceImage) -> Result<FeatureMap> {
        Ok(self.forward(params, image)?.0.features)
    }

    /// Features plus skip tensors, without keeping a trace.
    pub fn encode_full(&self, params: &ParamSet, image: &SliceImage) -> Result<EncoderOutput> {
        Ok(self.forward(params, image)?.0)
    }

    /// Accumulates parameter gradients given gradients w.r.t. the features
    /// and (optionally) the skip tensors.
    pub fn backward(
        &self,
        params: &ParamSet,
        trace: &EncoderTrace,
        grad_features: &Tensor,
        grad_skips: Option<&[Tensor]>,
        grads: &mut ParamSet,
    ) -> Result<()> {
        let n = self.cfg.widths.len();
        let mut g = grad_features.clone();
        for i in (0..n).rev() {
            let st = &trace.stages[i];
            if i + 1 < n {
                if let Some(gs) = grad_skips {
                    g.add_assign(&gs[i]);
                }
            }
            for (j, bt) in st.blocks.iter().enumerate().rev() {
                nn::relu_backward_inplace(&bt.output, &mut g);
                // g flows both into the identity path and the conv branch.
                let gh = conv_layer_backward(params, &self.block_name(i, j, 2), &bt.hidden, &g, 1, 1, grads, true)?
                    .expect("requested");
                let mut gh = gh;
                nn::relu_backward_inplace(&bt.hidden, &mut gh);
                let ga = conv_layer_backward(params, &self.block_name(i, j, 1), &bt.input, &gh, 1, 1, grads, true)?
                    .expect("requested");
                g.add_assign(&ga);
            }
            nn::relu_backward_inplace(&st.conv_out, &mut g);
            let gx = conv_layer_backward(params, &self.stage_name(i), &st.input, &g, self.cfg.strides[i], 1, grads, i > 0)?;
            if let Some(gx) = gx {
                g = gx;
            }
        }
        Ok(())
    }
}

/// Dense projection head: 1×1 convolution then per-position L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub in_dim: usize,
    pub embed_dim: usize,
    prefix: String,
}

/// Activations kept for [`ProjectionHead::backward`].
pub struct ProjectionTrace {
    input: Tensor,
    raw: Tensor,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, embed_dim: usize, prefix: &str) -> Self {
        Self {
            in_dim,
            embed_dim,
            prefix: String::from(prefix),
        }
    }

    fn layer(&self) -> String {
        format!("{}conv", self.prefix)
    }

    /// Weights He-initialized, bias zero.
    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        init_conv(params, &self.layer(), self.embed_dim, self.in_dim, 1, rng);
    }

    pub fn forward(&self, params: &ParamSet, fm: &FeatureMap) -> Result<(DenseProjection, ProjectionTrace)> {
        let w = params.get(&format!("{}.weight", self.layer()))?;
        if w.shape() != [self.embed_dim, fm.values.shape()[0], 1, 1] {
            return Err(shape_err!(
                "projection weight {:?} does not map {} channels to {}",
                w.shape(),
                fm.values.shape()[0],
                self.embed_dim
            ));
        }
        let raw = conv_layer(params, &self.layer(), &fm.values, 1, 0)?;
        let vectors = normalize_columns(&raw);
        Ok((
            DenseProjection { vectors },
            ProjectionTrace {
                input: fm.values.clone(),
                raw,
            },
        ))
    }

    pub fn project(&self, params: &ParamSet, fm: &FeatureMap) -> Result<DenseProjection> {
        Ok(self.forward(params, fm)?.0)
    }

    /// Returns the gradient w.r.t. the feature map.
    pub fn backward(
        &self,
        params: &ParamSet,
        trace: &ProjectionTrace,
        grad_out: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<Tensor> {
        let graw = normalize_columns_backward(&trace.raw, grad_out);
        Ok(conv_layer_backward(params, &self.layer(), &trace.input, &graw, 1, 0, grads, true)?.expect("requested"))
    }
}

/// `y = z / (‖z‖ + ε)` applied to every spatial column of a CHW tensor.
pub fn normalize_columns(raw: &Tensor) -> Tensor {
    let (c, h, w) = raw.chw();
    let p = h * w;
    let mut out = raw.clone();
    for i in 0..p {
        let n = math::sqrt((0..c).map(|ch| raw.data()[ch * p + i] * raw.data()[ch * p + i]).sum::<f64>());
        let inv = 1.0 / (n + NORM_EPS);
        for ch in 0..c {
            out.data_mut()[ch * p + i] *= inv;
        }
    }
    out
}

fn normalize_columns_backward(raw: &Tensor, grad_out: &Tensor) -> Tensor {
    let (c, h, w) = raw.chw();
    let p = h * w;
    let mut g = Tensor::zeros(raw.shape());
    let mut z = vec![0.0; c];
    let mut gy = vec![0.0; c];
    for i in 0..p {
        for ch in 0..c {
            z[ch] = raw.data()[ch * p + i];
            gy[ch] = grad_out.data()[ch * p + i];
        }
        let gz = normalize_vector_backward(&z, &gy);
        for ch in 0..c {
            g.data_mut()[ch * p + i] = gz[ch];
        }
    }
    g
}

pub(crate) fn normalize_vector(z: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (math::norm(z) + NORM_EPS);
    z.iter().map(|v| v * inv).collect()
}

/// Gradient of `z / (‖z‖ + ε)` w.r.t. `z`.
pub(crate) fn normalize_vector_backward(z: &[f64], gy: &[f64]) -> Vec<f64> {
    let n = math::norm(z);
    let d = n + NORM_EPS;
    if n == 0.0 {
        return gy.iter().map(|g| g / d).collect();
    }
    let gz_dot = math::dot(gy, z);
    let coeff = gz_dot / (d * d * n);
    z.iter().zip(gy).map(|(zi, gi)| gi / d - coeff * zi).collect()
}

/// Pooled reference head: global average pooling, then linear layers with
/// ReLU between them, then L2 normalization.
#[derive(Debug, Clone)]
pub struct GlobalHead {
    /// Layer widths from input to output, e.g. `[C_f, hidden, C_p]`.
    pub dims: Vec<usize>,
    prefix: String,
}

pub struct GlobalTrace {
    grid: (usize, usize),
    channels: usize,
    activations: Vec<Vec<f64>>,
    raw: Vec<f64>,
}

impl GlobalHead {
    pub fn new(dims: Vec<usize>, prefix: &str) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(validation!("global head needs at least input and output widths"));
        }
        Ok(Self {
            dims,
            prefix: String::from(prefix),
        })
    }

    fn layer(&self, i: usize) -> String {
        format!("{}fc{i}", self.prefix)
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        for i in 0..self.dims.len() - 1 {
            let (inp, out) = (self.dims[i], self.dims[i + 1]);
            params.insert(format!("{}.weight", self.layer(i)), nn::he_normal(&[out, inp], inp, rng));
            params.insert(format!("{}.bias", self.layer(i)), Tensor::zeros(&[out]));
        }
    }

    pub fn forward(&self, params: &ParamSet, fm: &FeatureMap) -> Result<(Vec<f64>, GlobalTrace)> {
        let (c, h, w) = fm.values.chw();
        if c != self.dims[0] {
            return Err(shape_err!("global head expects {} channels, got {c}", self.dims[0]));
        }
        let p = (h * w) as f64;
        let pooled: Vec<f64> = (0..c)
            .map(|ch| fm.values.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / p)
            .collect();
        let mut activations = vec![pooled];
        let layers = self.dims.len() - 1;
        for i in 0..layers {
            let mut y = nn::linear(
                activations.last().expect("non-empty"),
                params.get(&format!("{}.weight", self.layer(i)))?,
                params.get(&format!("{}.bias", self.layer(i)))?,
            )?;
            if i + 1 < layers {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(y);
        }
        let raw = activations.pop().expect("at least one layer");
        let out = normalize_vector(&raw);
        Ok((
            out,
            GlobalTrace {
                grid: (h, w),
                channels: c,
                activations,
                raw,
            },
        ))
    }

    pub fn project(&self, params: &ParamSet, fm: &FeatureMap) -> Result<Vec<f64>> {
        Ok(self.forward(params, fm)?.0)
    }

    /// Returns the gradient w.r.t. the feature map.
    pub fn backward(&self, params: &ParamSet, trace: &GlobalTrace, grad_out: &[f64], grads: &mut ParamSet) -> Result<Tensor> {
        let mut g = normalize_vector_backward(&trace.raw, grad_out);
        let layers = self.dims.len() - 1;
        for i in (0..layers).rev() {
            let input = &trace.activations[i];
            let wname = format!("{}.weight", self.layer(i));
            let bname = format!("{}.bias", self.layer(i));
            let w = params.get(&wname)?;
            let b = params.get(&bname)?;
            let gx = with_grads(grads, (&wname, w.shape()), (&bname, b.shape()), |gw, gb| {
                nn::linear_backward(input, w, &g, gw, gb)
            });
            g = gx;
            if i > 0 {
                // input of layer i is a ReLU output
                for (gv, &a) in g.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
        }
        let (h, w) = trace.grid;
        let p = (h * w) as f64;
        let mut gfm = Tensor::zeros(&[trace.channels, h, w]);
        for ch in 0..trace.channels {
            let v = g[ch] / p;
            gfm.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|x| *x = v);
        }
        Ok(gfm)
    }
}
