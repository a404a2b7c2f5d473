//! Flat `section.key = value` run configuration.
//!
//! Sources apply in order: built-in defaults, `--config` file, `--set`
//! overrides, then dedicated command-line flags. `--dump-config` prints
//! the resolved result in the same format, so it can be saved and reused.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use dclseg_core::model::EncoderConfig;
use dclseg_core::optim::Schedule;
use dclseg_core::train::{ModelConfig, PretrainLoss, TrainConfig};
use dclseg_core::views::AugConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub learning_rate: f64,
    pub steps: u64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub aug: AugConfig,
    pub temperature: f64,
    pub negative_subsample: usize,
    pub symmetric: bool,
    pub pretrain: StageConfig,
    pub pretrain_loss: PretrainLoss,
    pub finetune: StageConfig,
    pub threshold: f64,
    pub labeled_fraction: f64,
    pub unlabeled_weight: f64,
    pub rampup_steps: u64,
    pub flip_p: f64,
    pub cosine: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: u64,
    pub val_every: u64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub hd_percentile: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let stage = StageConfig {
            learning_rate: t.learning_rate,
            steps: t.steps,
            batch_size: t.batch_size,
        };
        Self {
            model: ModelConfig::default(),
            aug: t.aug,
            temperature: t.loss.temperature,
            negative_subsample: 0,
            symmetric: t.loss.symmetric,
            pretrain: stage.clone(),
            pretrain_loss: PretrainLoss::Local,
            finetune: stage,
            threshold: t.threshold,
            labeled_fraction: t.labeled_fraction,
            unlabeled_weight: t.unlabeled_weight,
            rampup_steps: t.rampup_steps,
            flip_p: t.flip_p,
            cosine: false,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            checkpoint_every: 0,
            val_every: 1,
            test_fraction: 0.2,
            val_fraction: 0.1,
            hd_percentile: 100.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow::anyhow!("`{key}` cannot take the value `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("`{key}` expects true or false, got `{value}`"),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let encoder = EncoderConfig::from_preset(self.model.preset);
        match key {
            "model.feature_stride" => {
                let s: usize = parse(key, value)?;
                if s != encoder.output_stride() {
                    bail!(
                        "model.feature_stride = {s} does not match preset {} (stride {})",
                        self.model.preset.name(),
                        encoder.output_stride()
                    );
                }
            }
            "decoder.stages" => {
                let s: usize = parse(key, value)?;
                let want = encoder.output_stride().trailing_zeros() as usize;
                if s != want {
                    bail!("decoder.stages = {s} does not restore the {} stride (needs {want})", self.model.preset.name());
                }
            }
            "aug.flip_p" => self.aug.flip_p = parse(key, value)?,
            "aug.max_translate_cells" => self.aug.max_translate_cells = parse(key, value)?,
            "aug.crop_scale_min" => self.aug.crop_scale_min = parse(key, value)?,
            "aug.intensity_jitter" => self.aug.intensity_jitter = parse(key, value)?,
            "aug.noise_std" => self.aug.noise_std = parse(key, value)?,
            "loss.temperature" => self.temperature = parse(key, value)?,
            "loss.negative_subsample" => self.negative_subsample = parse(key, value)?,
            "loss.symmetric" => self.symmetric = parse_bool(key, value)?,
            "pretrain.learning_rate" => self.pretrain.learning_rate = parse(key, value)?,
            "pretrain.steps" => self.pretrain.steps = parse(key, value)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, value)?,
            "pretrain.loss" => self.pretrain_loss = PretrainLoss::parse(value)?,
            "finetune.learning_rate" => self.finetune.learning_rate = parse(key, value)?,
            "finetune.steps" => self.finetune.steps = parse(key, value)?,
            "finetune.batch_size" => self.finetune.batch_size = parse(key, value)?,
            "finetune.threshold" => self.threshold = parse(key, value)?,
            "finetune.labeled_fraction" => self.labeled_fraction = parse(key, value)?,
            "finetune.unlabeled_weight" => self.unlabeled_weight = parse(key, value)?,
            "finetune.rampup_steps" => self.rampup_steps = parse(key, value)?,
            "finetune.flip_p" => self.flip_p = parse(key, value)?,
            "finetune.val_every" => self.val_every = parse(key, value)?,
            "train.schedule" => {
                self.cosine = match value {
                    "constant" => false,
                    "cosine" => true,
                    _ => bail!("train.schedule is constant or cosine, got `{value}`"),
                }
            }
            "train.beta1" => self.beta1 = parse(key, value)?,
            "train.beta2" => self.beta2 = parse(key, value)?,
            "train.eps" => self.eps = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "data.test_fraction" => self.test_fraction = parse(key, value)?,
            "data.val_fraction" => self.val_fraction = parse(key, value)?,
            "eval.hd_percentile" => self.hd_percentile = parse(key, value)?,
            _ => bail!("unknown config key `{key}` (see --dump-config for the full list)"),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("config line {}: expected `key = value`, got `{line}`", n + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("config line {}", n + 1))?;
        }
        Ok(())
    }

    /// `key=value` from a `--set` flag.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .with_context(|| format!("--set expects key=value, got `{assignment}`"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn to_text(&self) -> String {
        let encoder = EncoderConfig::from_preset(self.model.preset);
        let mut s = self.model.to_text();
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k} = {v}").expect("writing to a String");
        };
        kv("model.feature_stride", encoder.output_stride().to_string());
        kv("decoder.stages", encoder.output_stride().trailing_zeros().to_string());
        kv("aug.flip_p", self.aug.flip_p.to_string());
        kv("aug.max_translate_cells", self.aug.max_translate_cells.to_string());
        kv("aug.crop_scale_min", self.aug.crop_scale_min.to_string());
        kv("aug.intensity_jitter", self.aug.intensity_jitter.to_string());
        kv("aug.noise_std", self.aug.noise_std.to_string());
        kv("loss.temperature", self.temperature.to_string());
        kv("loss.negative_subsample", self.negative_subsample.to_string());
        kv("loss.symmetric", self.symmetric.to_string());
        kv("pretrain.learning_rate", self.pretrain.learning_rate.to_string());
        kv("pretrain.steps", self.pretrain.steps.to_string());
        kv("pretrain.batch_size", self.pretrain.batch_size.to_string());
        kv("pretrain.loss", self.pretrain_loss.name().to_string());
        kv("finetune.learning_rate", self.finetune.learning_rate.to_string());
        kv("finetune.steps", self.finetune.steps.to_string());
        kv("finetune.batch_size", self.finetune.batch_size.to_string());
        kv("finetune.threshold", self.threshold.to_string());
        kv("finetune.labeled_fraction", self.labeled_fraction.to_string());
        kv("finetune.unlabeled_weight", self.unlabeled_weight.to_string());
        kv("finetune.rampup_steps", self.rampup_steps.to_string());
        kv("finetune.flip_p", self.flip_p.to_string());
        kv("finetune.val_every", self.val_every.to_string());
        kv("train.schedule", if self.cosine { "cosine" } else { "constant" }.to_string());
        kv("train.beta1", self.beta1.to_string());
        kv("train.beta2", self.beta2.to_string());
        kv("train.eps", self.eps.to_string());
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        kv("data.test_fraction", self.test_fraction.to_string());
        kv("data.val_fraction", self.val_fraction.to_string());
        kv("eval.hd_percentile", self.hd_percentile.to_string());
        s
    }

    fn train_config(&self, stage: &StageConfig, seed: u64) -> TrainConfig {
        let mut aug = self.aug.clone();
        aug.feature_stride = EncoderConfig::from_preset(self.model.preset).output_stride();
        TrainConfig {
            learning_rate: stage.learning_rate,
            adam: dclseg_core::optim::AdamConfig {
                lr: stage.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            schedule: if self.cosine {
                Schedule::Cosine { total_steps: stage.steps }
            } else {
                Schedule::Constant
            },
            batch_size: stage.batch_size,
            steps: stage.steps,
            seed,
            labeled_fraction: self.labeled_fraction,
            checkpoint_every: self.checkpoint_every,
            aug,
            loss: dclseg_core::losses::LossConfig {
                temperature: self.temperature,
                negative_subsample: (self.negative_subsample > 0).then_some(self.negative_subsample),
                symmetric: self.symmetric,
                seed,
            },
            pretrain_loss: self.pretrain_loss,
            threshold: self.threshold,
            flip_p: self.flip_p,
            unlabeled_weight: self.unlabeled_weight,
            rampup_steps: self.rampup_steps,
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> Result<TrainConfig> {
        let c = self.train_config(&self.pretrain, seed);
        c.validate()?;
        Ok(c)
    }

    pub fn finetune_config(&self, seed: u64) -> Result<TrainConfig> {
        let c = self.train_config(&self.finetune, seed);
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_then_reload_is_identity() {
        let mut c = RunConfig::default();
        c.apply_text("finetune.steps = 42\nloss.symmetric = true # comment\ntrain.schedule = cosine\n")
            .unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.finetune.steps, 42);
    }

    #[test]
    fn rejects_unknown_keys_and_inconsistent_strides() {
        let mut c = RunConfig::default();
        assert!(c.apply_assignment("nope.key=1").is_err());
        assert!(c.apply_assignment("model.feature_stride=16").is_err());
        assert!(c.apply_assignment("model.feature_stride=8").is_ok());
        assert!(c.apply_assignment("decoder.stages=4").is_err());
        assert!(c.apply_assignment("finetune.steps=abc").is_err());
    }

    #[test]
    fn stage_configs_validate() {
        let mut c = RunConfig::default();
        c.threshold = 1.0;
        assert!(c.finetune_config(0).is_err());
        assert!(c.pretrain_config(0).is_err());
    }
}
