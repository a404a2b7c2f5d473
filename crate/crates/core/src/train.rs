//! Model state, the pre-training and fine-tuning loops, and prediction.
//!
//! Every random choice made at step `s` comes from `Rng::stream(seed, s)`,
//! and batch order within an epoch comes from a stream keyed by the epoch
//! number. A run therefore depends only on `(seed, step)`, which is what
//! makes resuming from a checkpoint reproduce an uninterrupted run exactly.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use crate::decoder::{bce_logit_grad, ssf_loss_with_grad, Decoder, DecoderConfig, ProbMap, UpscaleMode};
use crate::error::{validation, Error, Result};
use crate::losses::{build_pairs, global_info_nce_with_grad, local_info_nce_with_grad, BatchEntry, LossConfig, Side};
use crate::model::{DenseProjection, Encoder, EncoderConfig, EncoderOutput, EncoderPreset, GlobalHead, ProjectionHead};
use crate::optim::{AdamConfig, AdamState, Schedule};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::types::{normalize_slice, LabelMask, SliceImage, Volume};
use crate::views::{correspondence_map, sample_view_pair, AugConfig, GeometricTransform};

const LABELED_ORDER: u64 = 1 << 62;
const UNLABELED_ORDER: u64 = 2 << 62;
const PRETRAIN_ORDER: u64 = 3 << 62;
const VIEW_RETRIES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Init,
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Stage::Init),
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(validation!("unknown stage `{other}`")),
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        [Stage::Init, Stage::Pretrain, Stage::Finetune]
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown stage code {c}")))
    }
}

/// Whether both decoders read one encoder or each has its own copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMode {
    Shared,
    Twin,
}

impl EncoderMode {
    pub fn name(self) -> &'static str {
        match self {
            EncoderMode::Shared => "shared",
            EncoderMode::Twin => "twin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(EncoderMode::Shared),
            "twin" => Ok(EncoderMode::Twin),
            other => Err(validation!("unknown encoder mode `{other}` (shared | twin)")),
        }
    }
}

/// Architecture description; everything needed to rebuild the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub preset: EncoderPreset,
    pub embed_dim: usize,
    pub num_classes: u8,
    /// Decoder stage widths, deepest first; `None` mirrors the encoder.
    pub decoder_channels: Option<Vec<usize>>,
    pub decoder_seed1: u64,
    pub decoder_seed2: u64,
    pub encoder_mode: EncoderMode,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: EncoderPreset::TinyCnn,
            embed_dim: 32,
            num_classes: 2,
            decoder_channels: None,
            decoder_seed1: 1,
            decoder_seed2: 2,
            encoder_mode: EncoderMode::Shared,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(validation!("embedding dimension must be positive"));
        }
        if self.num_classes == 0 {
            return Err(validation!("need at least one foreground class"));
        }
        if self.decoder_seed1 == self.decoder_seed2 {
            return Err(validation!("the two decoders need distinct init seeds"));
        }
        Model::new(self).map(|_| ())
    }

    /// `key = value` lines, also used inside checkpoints.
    pub fn to_text(&self) -> String {
        let channels = match &self.decoder_channels {
            None => String::from("auto"),
            Some(c) => c.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","),
        };
        format!(
            "model.preset = {}\nmodel.embed_dim = {}\nmodel.num_classes = {}\nmodel.init_seed = {}\n\
             decoder.channels = {}\ndecoder.seed1 = {}\ndecoder.seed2 = {}\nfinetune.encoder_mode = {}\n",
            self.preset.name(),
            self.embed_dim,
            self.num_classes,
            self.init_seed,
            channels,
            self.decoder_seed1,
            self.decoder_seed2,
            self.encoder_mode.name(),
        )
    }

    /// Applies one `key = value` setting; returns `false` for keys that do
    /// not belong to the model.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let int = |v: &str| v.parse::<u64>().map_err(|_| validation!("`{key}` expects an integer, got `{v}`"));
        match key {
            "model.preset" => self.preset = EncoderPreset::parse(value)?,
            "model.embed_dim" => self.embed_dim = int(value)? as usize,
            "model.num_classes" => {
                self.num_classes = u8::try_from(int(value)?).map_err(|_| validation!("too many classes"))?
            }
            "model.init_seed" => self.init_seed = int(value)?,
            "decoder.channels" => {
                self.decoder_channels = if value == "auto" {
                    None
                } else {
                    Some(value.split(',').map(|v| int(v.trim()).map(|x| x as usize)).collect::<Result<_>>()?)
                }
            }
            "decoder.seed1" => self.decoder_seed1 = int(value)?,
            "decoder.seed2" => self.decoder_seed2 = int(value)?,
            "finetune.encoder_mode" => self.encoder_mode = EncoderMode::parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected `key = value`, got `{line}`")))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::Format(format!("unknown model key `{}`", k.trim())));
            }
        }
        Ok(cfg)
    }
}

/// The layers of a model, built from a [`ModelConfig`]. Holds no weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Encoder,
    pub twin: Encoder,
    pub projection: ProjectionHead,
    pub global_head: GlobalHead,
    pub decoder1: Decoder,
    pub decoder2: Decoder,
    pub mode: EncoderMode,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let ecfg = EncoderConfig::from_preset(cfg.preset);
        let dec = |mode, seed| {
            let mut d = DecoderConfig::for_encoder(&ecfg, mode, cfg.num_classes as usize, seed);
            if let Some(c) = &cfg.decoder_channels {
                d.channels = c.clone();
            }
            d
        };
        Ok(Self {
            encoder: Encoder::new(ecfg.clone(), "encoder.")?,
            twin: Encoder::new(ecfg.clone(), "encoder_twin.")?,
            projection: ProjectionHead::new(ecfg.feature_channels(), cfg.embed_dim, "projection."),
            global_head: GlobalHead::new(vec![ecfg.feature_channels(), cfg.embed_dim], "global_head.")?,
            decoder1: Decoder::new(dec(UpscaleMode::TransposedConv, cfg.decoder_seed1), &ecfg, "decoder1.")?,
            decoder2: Decoder::new(dec(UpscaleMode::Bilinear, cfg.decoder_seed2), &ecfg, "decoder2.")?,
            mode: cfg.encoder_mode,
        })
    }

    /// The encoder feeding decoder 2, given which parameters exist.
    fn second_encoder(&self, params: &ParamSet) -> &Encoder {
        if self.mode == EncoderMode::Twin && params.with_prefix("encoder_twin.").next().is_some() {
            &self.twin
        } else {
            &self.encoder
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub optimizer: AdamState,
    pub stage: Stage,
    /// Steps completed in the current stage.
    pub step: u64,
    /// Seed of the current stage's run.
    pub seed: u64,
    /// Sorted volume ids that have entered any training stage.
    pub trained_ids: Vec<u64>,
}

impl ModelState {
    /// Fresh weights: encoder and heads from `config.init_seed`, decoders
    /// from their own seeds.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config)?;
        let mut params = ParamSet::new();
        model.encoder.init(&mut params, &mut Rng::stream(config.init_seed, 1));
        model.projection.init(&mut params, &mut Rng::stream(config.init_seed, 2));
        model.global_head.init(&mut params, &mut Rng::stream(config.init_seed, 3));
        model.decoder1.init(&mut params);
        model.decoder2.init(&mut params);
        Ok(Self {
            config,
            params,
            optimizer: AdamState::default(),
            stage: Stage::Init,
            step: 0,
            seed: 0,
            trained_ids: Vec::new(),
        })
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(&self.config)
    }

    fn note_trained(&mut self, ids: impl IntoIterator<Item = u64>) {
        let mut set: BTreeSet<u64> = self.trained_ids.iter().copied().collect();
        set.extend(ids);
        self.trained_ids = set.into_iter().collect();
    }

    /// Moves to `stage`, or checks that a resumed run matches.
    fn enter_stage(&mut self, stage: Stage, seed: u64) -> Result<()> {
        if self.stage == stage {
            if self.seed != seed {
                return Err(validation!(
                    "resuming a {} run started with seed {} using seed {seed}",
                    stage.name(),
                    self.seed
                ));
            }
            return Ok(());
        }
        if self.stage == Stage::Finetune {
            return Err(validation!("cannot {} a fine-tuned model", stage.name()));
        }
        if stage == Stage::Finetune {
            self.params.remove_prefix("projection.");
            self.params.remove_prefix("global_head.");
            if self.config.encoder_mode == EncoderMode::Twin {
                self.params.copy_prefix("encoder.", "encoder_twin.");
            }
        }
        self.stage = stage;
        self.step = 0;
        self.seed = seed;
        self.optimizer = AdamState::default();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainLoss {
    /// Dense InfoNCE over corresponding feature-grid positions.
    Local,
    /// InfoNCE over pooled per-image vectors.
    Global,
}

impl PretrainLoss {
    pub fn name(self) -> &'static str {
        match self {
            PretrainLoss::Local => "local",
            PretrainLoss::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(PretrainLoss::Local),
            "global" => Ok(PretrainLoss::Global),
            other => Err(validation!("unknown pre-training loss `{other}` (local | global)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    /// Total steps of the stage; a resumed run continues up to this count.
    pub steps: u64,
    pub seed: u64,
    pub labeled_fraction: f64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub aug: AugConfig,
    pub loss: LossConfig,
    pub pretrain_loss: PretrainLoss,
    pub threshold: f64,
    /// Probability of each (horizontal, vertical) flip on fine-tuning slices.
    pub flip_p: f64,
    /// Weight of the unlabeled term once fully ramped up.
    pub unlabeled_weight: f64,
    /// Steps over which the unlabeled weight grows linearly from 0; 0 means
    /// full weight from the first step.
    pub rampup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            adam: AdamConfig::default(),
            schedule: Schedule::Constant,
            batch_size: 8,
            steps: 500,
            seed: 0,
            labeled_fraction: 1.0,
            checkpoint_every: 0,
            aug: AugConfig::default(),
            loss: LossConfig::default(),
            pretrain_loss: PretrainLoss::Local,
            threshold: 0.5,
            flip_p: 0.5,
            unlabeled_weight: 1.0,
            rampup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn unlabeled_weight_at(&self, step: u64) -> f64 {
        if step >= self.rampup_steps {
            self.unlabeled_weight
        } else {
            self.unlabeled_weight * step as f64 / self.rampup_steps as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(validation!("learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(validation!("batch size must be positive"));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(validation!("labeled fraction must lie in (0, 1], got {}", self.labeled_fraction));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(validation!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(validation!("flip probability must lie in [0, 1]"));
        }
        if !(self.unlabeled_weight >= 0.0) || !self.unlabeled_weight.is_finite() {
            return Err(validation!("unlabeled weight must be finite and non-negative"));
        }
        self.aug.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Zero-based index of the step just applied.
    pub step: u64,
    pub loss: f64,
    /// Fine-tuning only: the labeled and unlabeled parts of `loss`.
    pub labeled: Option<f64>,
    pub unlabeled: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainStats {
    pub steps: Vec<StepRecord>,
    /// `(epoch, mean loss)` for every epoch completed in this call.
    pub epoch_means: Vec<(u64, f64)>,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

impl TrainStats {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Hooks into a running loop. Returning `Break` stops after the current
/// step, leaving the state consistent and resumable.
pub trait TrainObserver {
    fn on_step(&mut self, _state: &ModelState, _record: &StepRecord) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn on_checkpoint(&mut self, _state: &ModelState) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn on_epoch_end(&mut self, _state: &ModelState, _epoch: u64, _mean_loss: f64) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// A normalized training slice with an optional 2D mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainImage {
    pub image: SliceImage,
    pub label: Option<LabelMask>,
}

impl TrainImage {
    pub fn volume_id(&self) -> u64 {
        self.image.source.volume_id
    }
}

/// Normalizes every slice of `volume`, pairing each with its mask slice.
pub fn volume_slices(volume_id: u64, volume: &Volume, label: Option<&LabelMask>) -> Result<Vec<TrainImage>> {
    if let Some(l) = label {
        if l.dims() != volume.dims() {
            return Err(validation!("label dims {:?} differ from volume dims {:?}", l.dims(), volume.dims()));
        }
    }
    (0..volume.depth())
        .map(|z| {
            Ok(TrainImage {
                image: normalize_slice(&volume.slice(volume_id, z)?)?,
                label: label.map(|l| l.slice(z)).transpose()?,
            })
        })
        .collect()
}

fn check_held_out(pool: &[TrainImage], held_out: &[u64]) -> Result<()> {
    let held: BTreeSet<u64> = held_out.iter().copied().collect();
    match pool.iter().find(|t| held.contains(&t.volume_id())) {
        Some(t) => Err(Error::Leakage(t.volume_id())),
        None => Ok(()),
    }
}

/// Indices of the batch used at `step` from a pool of `n` items.
fn batch_indices(seed: u64, order_stream: u64, n: usize, batch: usize, step: u64) -> Vec<usize> {
    let b = batch.min(n);
    let per_epoch = (n / b) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    Rng::stream(seed, order_stream | epoch).shuffle(&mut perm);
    perm[pos * b..(pos + 1) * b].to_vec()
}

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    (n / batch.min(n)) as u64
}

fn trainable(prefixes: &[&str], params: &ParamSet) -> ParamSet {
    let mut g = ParamSet::new();
    for p in prefixes {
        g.accumulate(&params.zeros_like_prefix(p));
    }
    g
}

/// Drives the shared step/epoch/checkpoint bookkeeping of both loops.
fn run_loop(
    state: &mut ModelState,
    cfg: &TrainConfig,
    per_epoch: u64,
    obs: &mut dyn TrainObserver,
    mut step_fn: impl FnMut(&ModelState, u64) -> Result<(ParamSet, f64, Option<(f64, f64)>)>,
) -> Result<TrainStats> {
    let mut stats = TrainStats::default();
    let mut epoch_sum = 0.0;
    let mut epoch_n = 0usize;
    while state.step < cfg.steps {
        let s = state.step;
        let (grads, loss, parts) = step_fn(state, s)?;
        if !loss.is_finite() {
            return Err(validation!("non-finite loss at step {s}"));
        }
        let lr = cfg.schedule.lr_at(cfg.learning_rate, s);
        state.optimizer.step(&cfg.adam, lr, &mut state.params, &grads)?;
        state.step += 1;
        let rec = StepRecord {
            step: s,
            loss,
            labeled: parts.map(|p| p.0),
            unlabeled: parts.map(|p| p.1),
            lr,
        };
        stats.steps.push(rec);
        epoch_sum += loss;
        epoch_n += 1;
        let mut flow = obs.on_step(state, &rec);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            flow = merge(flow, obs.on_checkpoint(state));
        }
        if state.step % per_epoch == 0 {
            let epoch = state.step / per_epoch - 1;
            let mean = epoch_sum / epoch_n as f64;
            stats.epoch_means.push((epoch, mean));
            epoch_sum = 0.0;
            epoch_n = 0;
            flow = merge(flow, obs.on_epoch_end(state, epoch, mean));
        }
        if flow.is_break() {
            stats.stopped_early = state.step < cfg.steps;
            break;
        }
    }
    Ok(stats)
}

fn merge(a: ControlFlow<()>, b: ControlFlow<()>) -> ControlFlow<()> {
    if a.is_break() || b.is_break() {
        ControlFlow::Break(())
    } else {
        ControlFlow::Continue(())
    }
}

/// Self-supervised pre-training of the encoder and its projection head.
/// Decoder weights are never touched.
pub fn pretrain(
    state: &mut ModelState,
    pool: &[TrainImage],
    held_out: &[u64],
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<TrainStats> {
    cfg.validate()?;
    if cfg.batch_size < 2 || pool.len() < 2 {
        return Err(Error::NoNegativeSource);
    }
    check_held_out(pool, held_out)?;
    state.enter_stage(Stage::Pretrain, cfg.seed)?;
    state.note_trained(pool.iter().map(TrainImage::volume_id));
    let model = state.model()?;
    let head = match cfg.pretrain_loss {
        PretrainLoss::Local => "projection.",
        PretrainLoss::Global => "global_head.",
    };
    let per_epoch = steps_per_epoch(pool.len(), cfg.batch_size);
    run_loop(state, cfg, per_epoch, obs, |st, s| {
        let idx = batch_indices(st.seed, PRETRAIN_ORDER, pool.len(), cfg.batch_size, s);
        let mut rng = Rng::stream(st.seed, s);
        let mut grads = trainable(&["encoder.", head], &st.params);
        let loss = match cfg.pretrain_loss {
            PretrainLoss::Local => local_step(&model, &st.params, pool, &idx, &mut rng, cfg, &mut grads)?,
            PretrainLoss::Global => global_step(&model, &st.params, pool, &idx, &mut rng, cfg, &mut grads)?,
        };
        Ok((grads, loss, None))
    })
}

struct ViewForward {
    enc: crate::model::EncoderTrace,
    proj: DenseProjection,
    proj_trace: crate::model::ProjectionTrace,
}

fn local_step(
    model: &Model,
    params: &ParamSet,
    pool: &[TrainImage],
    idx: &[usize],
    rng: &mut Rng,
    cfg: &TrainConfig,
    grads: &mut ParamSet,
) -> Result<f64> {
    for _ in 0..VIEW_RETRIES {
        let mut views = Vec::with_capacity(idx.len());
        let mut corrs = Vec::with_capacity(idx.len());
        for &i in idx {
            let vp = sample_view_pair(&pool[i].image, rng, &cfg.aug)?;
            let run = |img: &SliceImage| -> Result<ViewForward> {
                let (out, enc) = model.encoder.forward(params, img)?;
                let (proj, proj_trace) = model.projection.forward(params, &out.features)?;
                Ok(ViewForward { enc, proj, proj_trace })
            };
            let q = run(&vp.view_q)?;
            let k = run(&vp.view_k)?;
            corrs.push(correspondence_map(&vp.t_q, &vp.t_k, q.proj.grid(), vp.view_q.dims())?);
            views.push((q, k));
        }
        let loss_cfg = LossConfig {
            seed: rng.next_u64(),
            ..cfg.loss
        };
        let entries: Vec<BatchEntry<'_>> = idx
            .iter()
            .zip(&views)
            .zip(&corrs)
            .map(|((&i, (q, k)), c)| BatchEntry {
                image_id: i as u64,
                query: &q.proj,
                key: &k.proj,
                correspondence: c,
            })
            .collect();
        let pairs = build_pairs(&entries, &loss_cfg)?;
        let g = match local_info_nce_with_grad(&pairs, &loss_cfg) {
            Err(Error::NoCorrespondences) => continue,
            other => other?,
        };
        for (e, (q, k)) in views.iter().enumerate() {
            for (side, v) in [(Side::Query, q), (Side::Key, k)] {
                let gproj = DenseProjection::from_rows(g.rows(e, side), v.proj.dim(), v.proj.grid())?;
                let gfm = model.projection.backward(params, &v.proj_trace, &gproj.vectors, grads)?;
                model.encoder.backward(params, &v.enc, &gfm, None, grads)?;
            }
        }
        return Ok(g.loss);
    }
    Err(Error::NoCorrespondences)
}

fn global_step(
    model: &Model,
    params: &ParamSet,
    pool: &[TrainImage],
    idx: &[usize],
    rng: &mut Rng,
    cfg: &TrainConfig,
    grads: &mut ParamSet,
) -> Result<f64> {
    let mut fwd = Vec::with_capacity(idx.len());
    for &i in idx {
        let vp = sample_view_pair(&pool[i].image, rng, &cfg.aug)?;
        let run = |img: &SliceImage| -> Result<_> {
            let (out, enc) = model.encoder.forward(params, img)?;
            let (v, tr) = model.global_head.forward(params, &out.features)?;
            Ok((enc, v, tr))
        };
        fwd.push((run(&vp.view_q)?, run(&vp.view_k)?));
    }
    let b = idx.len();
    let dim = fwd[0].0 .1.len();
    let mut gq = vec![vec![0.0; dim]; b];
    let mut gk = vec![vec![0.0; dim]; b];
    let mut total = 0.0;
    for i in 0..b {
        let others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        let negs: Vec<Vec<f64>> = others.iter().map(|&j| fwd[j].1 .1.clone()).collect();
        let term = global_info_nce_with_grad(&fwd[i].0 .1, &fwd[i].1 .1, &negs, &cfg.loss)?;
        total += term.loss / b as f64;
        let add = |dst: &mut Vec<f64>, src: &[f64]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += s / b as f64);
        add(&mut gq[i], &term.grad_q);
        add(&mut gk[i], &term.grad_pos);
        for (&j, gn) in others.iter().zip(&term.grad_negs) {
            add(&mut gk[j], gn);
        }
    }
    for (i, ((eq, _, tq), (ek, _, tk))) in fwd.iter().enumerate() {
        let gfm = model.global_head.backward(params, tq, &gq[i], grads)?;
        model.encoder.backward(params, eq, &gfm, None, grads)?;
        let gfm = model.global_head.backward(params, tk, &gk[i], grads)?;
        model.encoder.backward(params, ek, &gfm, None, grads)?;
    }
    Ok(total)
}

/// Semi-supervised fine-tuning with two cross-supervising decoders. Each
/// step draws one labeled and (if available) one unlabeled batch.
pub fn finetune(
    state: &mut ModelState,
    labeled: &[TrainImage],
    unlabeled: &[TrainImage],
    held_out: &[u64],
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<TrainStats> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(validation!("fine-tuning needs at least one labeled slice"));
    }
    if let Some(t) = labeled.iter().find(|t| t.label.is_none()) {
        return Err(validation!("labeled pool contains an unlabeled slice from volume {}", t.volume_id()));
    }
    check_held_out(labeled, held_out)?;
    check_held_out(unlabeled, held_out)?;
    state.enter_stage(Stage::Finetune, cfg.seed)?;
    state.note_trained(labeled.iter().chain(unlabeled).map(TrainImage::volume_id));
    let model = state.model()?;
    let mut warnings = Vec::new();
    if unlabeled.is_empty() {
        warnings.push(String::from("unlabeled pool is empty; fine-tuning is supervised only"));
    }
    let prefixes: &[&str] = match state.config.encoder_mode {
        EncoderMode::Shared => &["encoder.", "decoder1.", "decoder2."],
        EncoderMode::Twin => &["encoder.", "encoder_twin.", "decoder1.", "decoder2."],
    };
    let per_epoch = steps_per_epoch(labeled.len(), cfg.batch_size);
    let mut stats = run_loop(state, cfg, per_epoch, obs, |st, s| {
        let mut rng = Rng::stream(st.seed, s);
        let mut grads = trainable(prefixes, &st.params);
        let li = batch_indices(st.seed, LABELED_ORDER, labeled.len(), cfg.batch_size, s);
        let mut lab_loss = 0.0;
        for &i in &li {
            let t = &labeled[i];
            let flip = weak_flip(t.image.dims(), &mut rng, cfg.flip_p);
            let img = apply_flip(&flip, &t.image)?;
            let mask = t.label.as_ref().map(|m| flip_mask(&flip, m)).transpose()?;
            let w = 1.0 / li.len() as f64;
            lab_loss += w * cross_step(&model, &st.params, &img, mask.as_ref(), w, cfg.threshold, &mut grads)?;
        }
        let mut unl_loss = 0.0;
        let weight = cfg.unlabeled_weight_at(s);
        if !unlabeled.is_empty() {
            let ui = batch_indices(st.seed, UNLABELED_ORDER, unlabeled.len(), cfg.batch_size, s);
            for &i in &ui {
                let u = &unlabeled[i].image;
                let img = apply_flip(&weak_flip(u.dims(), &mut rng, cfg.flip_p), u)?;
                let w = 1.0 / ui.len() as f64;
                unl_loss += w * cross_step(&model, &st.params, &img, None, w * weight, cfg.threshold, &mut grads)?;
            }
        }
        Ok((grads, lab_loss + weight * unl_loss, Some((lab_loss, unl_loss))))
    })?;
    stats.warnings = warnings;
    Ok(stats)
}

/// Independent seeded horizontal and vertical flips.
fn weak_flip(dims: (usize, usize), rng: &mut Rng, p: f64) -> GeometricTransform {
    let mut t = GeometricTransform::identity();
    if rng.bernoulli(p) {
        t = t.then(&GeometricTransform::flip_h(dims.1));
    }
    if rng.bernoulli(p) {
        t = t.then(&GeometricTransform::flip_v(dims.0));
    }
    t
}

fn apply_flip(t: &GeometricTransform, img: &SliceImage) -> Result<SliceImage> {
    if t.is_identity() {
        Ok(img.clone())
    } else {
        t.warp(img)
    }
}

fn flip_mask(t: &GeometricTransform, mask: &LabelMask) -> Result<LabelMask> {
    if t.is_identity() {
        return Ok(mask.clone());
    }
    let [_, h, w] = mask.dims();
    let as_image = SliceImage::new(h, w, mask.labels().iter().map(|&l| l as f64).collect(), Default::default())?;
    let warped = t.warp(&as_image)?;
    LabelMask::new_2d(h, w, warped.pixels().iter().map(|&v| v as u8).collect(), mask.num_classes())
}

/// One image through both branches. Adds `scale` times its gradient and
/// returns its (unscaled) loss.
fn cross_step(
    model: &Model,
    params: &ParamSet,
    image: &SliceImage,
    mask: Option<&LabelMask>,
    scale: f64,
    threshold: f64,
    grads: &mut ParamSet,
) -> Result<f64> {
    let enc2 = model.second_encoder(params);
    let twin = !core::ptr::eq(enc2, &model.encoder);
    let (out1, tr1) = model.encoder.forward(params, image)?;
    let second = if twin { Some(enc2.forward(params, image)?) } else { None };
    let out2: &EncoderOutput = second.as_ref().map_or(&out1, |s| &s.0);
    let (l1, dtr1) = model.decoder1.forward(params, &out1)?;
    let (l2, dtr2) = model.decoder2.forward(params, out2)?;
    let p1 = ProbMap::from_logits(&l1);
    let p2 = ProbMap::from_logits(&l2);
    let ssf = ssf_loss_with_grad(&p1, &p2, mask, threshold)?;
    let w = scale;
    let mut g1 = bce_logit_grad(&p1, &ssf.target_p1);
    let mut g2 = bce_logit_grad(&p2, &ssf.target_p2);
    g1.scale(w);
    g2.scale(w);
    let (gf1, gs1) = model.decoder1.backward(params, &dtr1, &g1, grads)?;
    let (gf2, gs2) = model.decoder2.backward(params, &dtr2, &g2, grads)?;
    match second {
        Some((_, tr2)) => {
            model.encoder.backward(params, &tr1, &gf1, Some(&gs1), grads)?;
            enc2.backward(params, &tr2, &gf2, Some(&gs2), grads)?;
        }
        None => {
            let mut gf = gf1;
            gf.add_assign(&gf2);
            let gs: Vec<Tensor> = gs1
                .into_iter()
                .zip(gs2)
                .map(|(mut a, b)| {
                    a.add_assign(&b);
                    a
                })
                .collect();
            model.encoder.backward(params, &tr1, &gf, Some(&gs), grads)?;
        }
    }
    Ok(ssf.loss)
}

/// Averaged probabilities of both decoders for one normalized slice.
pub fn predict_probs(model: &Model, params: &ParamSet, image: &SliceImage) -> Result<ProbMap> {
    let out1 = model.encoder.encode_full(params, image)?;
    let enc2 = model.second_encoder(params);
    let second;
    let out2 = if core::ptr::eq(enc2, &model.encoder) {
        &out1
    } else {
        second = enc2.encode_full(params, image)?;
        &second
    };
    let p1 = ProbMap::from_logits(&model.decoder1.decode(params, &out1)?);
    let p2 = ProbMap::from_logits(&model.decoder2.decode(params, out2)?);
    let mut avg = p1.probs;
    avg.add_assign(&p2.probs);
    avg.scale(0.5);
    Ok(ProbMap { probs: avg })
}

/// Label volume predicted slice by slice and stacked.
pub fn predict_volume(state: &ModelState, volume: &Volume, threshold: f64) -> Result<LabelMask> {
    let model = state.model()?;
    let slices = (0..volume.depth())
        .map(|z| {
            let img = normalize_slice(&volume.slice(0, z)?)?;
            predict_probs(&model, &state.params, &img)?.to_labels(threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMask::stack(&slices)
}
