//! The `dclseg` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{ArgGroup, Args, Parser, Subcommand};
use dclseg_core::checkpoint;
use dclseg_core::metrics::{evaluate_volume, SegReport};
use dclseg_core::synth::{ShapeFamily, ToyConfig};
use dclseg_core::train::{self, ModelState, Stage, StepRecord, TrainObserver};
use dclseg_core::types::Spacing;

use crate::config::RunConfig;
use crate::formats::{load_labels, write_atomic};
use crate::manifest::{generate_toy_dataset, make_splits, relabel, Dataset, InfeasibleFraction, Split, SplitConfig};
use crate::report::{
    curve_row, finetune_curve_header, mean_std, pretrain_curve_header, truncate_curve, write_json, EpochValidation,
    EvaluationReport, MultiSeedSummary, RunRecord, SeedResult, VolumeReport,
};

#[derive(Debug, Parser)]
#[command(name = "dclseg", version, about = "Dense contrastive pre-training and dual-decoder semi-supervised segmentation")]
pub struct Cli {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run seed (defaults to 0, or to the checkpoint's seed when resuming).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Omit wall-clock timing so reports are byte-identical across runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true, default_value = "runs", value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Root holding dataset directories.
    #[arg(long, global = true, env = "DCLSEG_DATA_DIR", default_value = "data", value_name = "DIR")]
    pub data_dir: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic toy dataset with splits.
    GenData(GenDataArgs),
    /// Self-supervised pre-training of the encoder.
    Pretrain(PretrainArgs),
    /// Semi-supervised fine-tuning with two decoders.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint (or saved predictions) on the test split.
    Evaluate(EvaluateArgs),
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected DxHxW, got `{s}`"));
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p.parse().map_err(|_| format!("`{p}` is not a dimension"))?;
    }
    if dims[0] == 0 || dims[1] < 8 || dims[2] < 8 {
        return Err(format!("dims must be at least 1x8x8, got {s}"));
    }
    Ok(dims)
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Dataset directory name under the data root.
    #[arg(long, default_value = "toy")]
    pub name: String,
    /// Number of volumes.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value = "8x32x32", value_parser = parse_dims, value_name = "DxHxW")]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..))]
    pub classes: u8,
    #[arg(long, default_value_t = 0.1)]
    pub noise_std: f64,
    /// Comma-separated subset of ellipses,rectangles,rings.
    #[arg(long, default_value = "ellipses,rectangles,rings")]
    pub families: String,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub labeled_fraction: f64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset name under the data root, or a dataset directory.
    #[arg(long, default_value = "toy")]
    pub dataset: String,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `local` (dense) or `global` (pooled) contrastive objective.
    #[arg(long)]
    pub loss: Option<String>,
    /// Continue from a checkpoint of an interrupted run.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps, as if interrupted.
    #[arg(long, value_name = "STEP")]
    pub stop_at: Option<u64>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("start").required(true).args(["init", "from_scratch", "resume"])))]
pub struct FinetuneArgs {
    #[arg(long, default_value = "toy")]
    pub dataset: String,
    /// Fraction of training volumes whose labels are used.
    #[arg(long)]
    pub labeled_fraction: Option<f64>,
    /// Pre-trained checkpoint providing the encoder.
    #[arg(long, value_name = "CKPT")]
    pub init: Option<PathBuf>,
    /// Start from randomly initialized weights.
    #[arg(long)]
    pub from_scratch: bool,
    /// Continue an interrupted fine-tuning run.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Number of seeded runs (seeds seed, seed+1, ...).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub seeds: u64,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "STEP")]
    pub stop_at: Option<u64>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "pred_dir"])))]
pub struct EvaluateArgs {
    #[arg(long, default_value = "toy")]
    pub dataset: String,
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `.lbl` predictions named like the dataset's labels.
    #[arg(long, value_name = "DIR")]
    pub pred_dir: Option<PathBuf>,
    /// Percentile of boundary distances for the Hausdorff distance.
    #[arg(long)]
    pub hd_percentile: Option<f64>,
}

/// Failure classes that map onto distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage<T>(e: anyhow::Error) -> CliResult<T> {
    Err(CliError::Usage(e))
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(CliError::Usage)?;
        cfg.apply_text(&text).map_err(CliError::Usage)?;
    }
    for s in &cli.set {
        cfg.apply_assignment(s).map_err(CliError::Usage)?;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = resolve_config(&cli)?;
    if let Some(Command::Evaluate(a)) = &cli.command {
        if let Some(p) = a.hd_percentile {
            cfg.hd_percentile = p;
        }
    }
    if cli.dump_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return usage(anyhow!("no subcommand given (try --help)"));
    };
    match command {
        Command::GenData(a) => gen_data(&cli, &cfg, a),
        Command::Pretrain(a) => pretrain(&cli, cfg, a),
        Command::Finetune(a) => finetune(&cli, cfg, a),
        Command::Evaluate(a) => evaluate(&cli, &cfg, a),
    }
}

fn dataset_dir(cli: &Cli, name: &str) -> PathBuf {
    let direct = PathBuf::from(name);
    if direct.join("manifest.tsv").is_file() {
        direct
    } else {
        cli.data_dir.join(name)
    }
}

fn open_dataset(cli: &Cli, name: &str) -> CliResult<Dataset> {
    let dir = dataset_dir(cli, name);
    if !dir.join("manifest.tsv").is_file() {
        return Err(CliError::Runtime(anyhow!(
            "no dataset at {} (run `dclseg gen-data` or set DCLSEG_DATA_DIR)",
            dir.display()
        )));
    }
    Ok(Dataset::open(&dir)?)
}

fn gen_data(cli: &Cli, cfg: &RunConfig, a: &GenDataArgs) -> CliResult<()> {
    let families = a
        .families
        .split(',')
        .map(|f| ShapeFamily::parse(f.trim()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.into()))?;
    let seed = cli.seed.unwrap_or(0);
    let toy = ToyConfig {
        n_volumes: a.n,
        dims: a.dims,
        n_classes: a.classes,
        families,
        noise_std: a.noise_std,
        seed,
        ..ToyConfig::default()
    };
    if let Err(e) = toy.validate() {
        return usage(e.into());
    }
    let dir = cli.data_dir.join(&a.name);
    let manifest = generate_toy_dataset(&toy, &dir)?;
    let split = SplitConfig {
        test_fraction: a.test_fraction.unwrap_or(cfg.test_fraction),
        val_fraction: a.val_fraction.unwrap_or(cfg.val_fraction),
        labeled_fraction: a.labeled_fraction,
        seed,
    };
    let manifest = make_splits(&manifest, &split)?;
    let ds = Dataset { root: dir.clone(), manifest };
    ds.save_manifest()?;
    let m = &ds.manifest;
    let labeled = m.entries_in(Split::Train).filter(|e| e.labeled).count();
    println!(
        "wrote {} volumes to {} (train {}, labeled {}, val {}, test {})",
        m.entries.len(),
        dir.display(),
        m.ids(Split::Train).len(),
        labeled,
        m.ids(Split::Val).len(),
        m.ids(Split::Test).len()
    );
    Ok(())
}

/// Streams curve rows, writes periodic checkpoints, runs per-epoch
/// validation and simulates interruption.
struct CliObserver<'a> {
    curve: File,
    checkpoint: PathBuf,
    stop_at: Option<u64>,
    validation: Option<(&'a Dataset, f64, f64, u64)>,
    epochs: Vec<EpochValidation>,
    val_tsv: Option<File>,
    error: Option<anyhow::Error>,
    progress_every: u64,
}

impl CliObserver<'_> {
    fn fail(&mut self, e: anyhow::Error) -> ControlFlow<()> {
        self.error.get_or_insert(e);
        ControlFlow::Break(())
    }
}

impl TrainObserver for CliObserver<'_> {
    fn on_step(&mut self, state: &ModelState, r: &StepRecord) -> ControlFlow<()> {
        if let Err(e) = self.curve.write_all(curve_row(r).as_bytes()) {
            return self.fail(e.into());
        }
        if self.progress_every > 0 && state.step % self.progress_every == 0 {
            eprintln!("[{}] step {} loss {:.5}", state.stage.name(), state.step, r.loss);
        }
        if self.stop_at == Some(state.step) {
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    }

    fn on_checkpoint(&mut self, state: &ModelState) -> ControlFlow<()> {
        match write_atomic(&self.checkpoint, &checkpoint::encode(state)) {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => self.fail(e),
        }
    }

    fn on_epoch_end(&mut self, state: &ModelState, epoch: u64, mean_loss: f64) -> ControlFlow<()> {
        let Some((ds, threshold, hd, every)) = self.validation else {
            return ControlFlow::Continue(());
        };
        if every == 0 || (epoch + 1) % every != 0 {
            return ControlFlow::Continue(());
        }
        let report = match evaluate_split(ds, state, Split::Val, threshold, hd) {
            Ok(Some(r)) => r.aggregate,
            Ok(None) => return ControlFlow::Continue(()),
            Err(e) => return self.fail(e),
        };
        if let Some(f) = &mut self.val_tsv {
            let opt = |v: Option<f64>| v.map_or_else(|| "NA".into(), |x| format!("{x:?}"));
            let row = format!(
                "{epoch}\t{}\t{mean_loss:?}\t{:?}\t{}\t{}\n",
                state.step,
                report.mean_dsc,
                opt(report.mean_asd),
                opt(report.mean_hd)
            );
            if let Err(e) = f.write_all(row.as_bytes()) {
                return self.fail(e.into());
            }
        }
        self.epochs.push(EpochValidation {
            epoch,
            step: state.step,
            mean_loss,
            report,
        });
        ControlFlow::Continue(())
    }
}

/// Opens the curve file, keeping earlier rows when resuming.
fn open_curve(path: &Path, header: &str, resume_from: Option<u64>) -> anyhow::Result<File> {
    let kept = match resume_from {
        Some(step) if path.is_file() => truncate_curve(&fs::read_to_string(path)?, step),
        _ => header.to_string(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, kept)?;
    Ok(OpenOptions::new().append(true).open(path)?)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<ModelState> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    checkpoint::decode(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn fresh_state(cfg: &RunConfig, ds: &Dataset, init_seed: u64) -> anyhow::Result<ModelState> {
    let mut model = cfg.model.clone();
    model.num_classes = ds.manifest.num_classes;
    model.init_seed = init_seed;
    Ok(ModelState::new(model)?)
}

fn pretrain(cli: &Cli, mut cfg: RunConfig, a: &PretrainArgs) -> CliResult<()> {
    if let Some(s) = a.steps {
        cfg.pretrain.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.pretrain.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.pretrain.batch_size = b;
    }
    if let Some(l) = &a.loss {
        cfg.pretrain_loss = train::PretrainLoss::parse(l).map_err(|e| CliError::Usage(e.into()))?;
    }
    let started = Instant::now();
    let ds = open_dataset(cli, &a.dataset)?;
    let mut state = match &a.resume {
        Some(p) => load_checkpoint(p)?,
        None => fresh_state(&cfg, &ds, cli.seed.unwrap_or(0))?,
    };
    let seed = match (&a.resume, cli.seed) {
        (Some(_), None) => state.seed,
        (_, s) => s.unwrap_or(0),
    };
    let tcfg = cfg.pretrain_config(seed).map_err(CliError::Usage)?;
    let pool = ds.pretrain_pool()?;
    let held_out = ds.manifest.ids(Split::Test);
    let out = cli.out_dir.join("pretrain");
    let ckpt = out.join("checkpoint.ckpt");
    let curve_path = out.join("curve.tsv");
    let resume_step = a.resume.as_ref().map(|_| state.step);
    let mut obs = CliObserver {
        curve: open_curve(&curve_path, pretrain_curve_header(), resume_step)?,
        checkpoint: ckpt.clone(),
        stop_at: a.stop_at,
        validation: None,
        epochs: Vec::new(),
        val_tsv: None,
        error: None,
        progress_every: 50,
    };
    let stats = train::pretrain(&mut state, &pool, &held_out, &tcfg, &mut obs).context("pre-training failed")?;
    if let Some(e) = obs.error.take() {
        return Err(e.into());
    }
    write_atomic(&ckpt, &checkpoint::encode(&state))?;
    let mut record = RunRecord::new("pretrain", cfg.to_text());
    record.seeds = vec![seed];
    record.outputs = vec!["checkpoint.ckpt".into(), "curve.tsv".into()];
    record.warnings = stats.warnings.clone();
    record.final_metrics = serde_json::json!({
        "steps_completed": state.step,
        "final_loss": stats.steps.last().map(|s| s.loss),
        "stopped_early": stats.stopped_early,
        "loss": cfg.pretrain_loss.name(),
    });
    if !cli.deterministic {
        record.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    }
    record.write(&out.join("run.json"))?;
    println!("pretrain: {} steps, checkpoint {}", state.step, ckpt.display());
    Ok(())
}

fn finetune(cli: &Cli, mut cfg: RunConfig, a: &FinetuneArgs) -> CliResult<()> {
    if let Some(s) = a.steps {
        cfg.finetune.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.finetune.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.finetune.batch_size = b;
    }
    if let Some(l) = a.labeled_fraction {
        cfg.labeled_fraction = l;
    }
    if a.resume.is_some() && a.seeds > 1 {
        return usage(anyhow!("--resume continues a single run; drop --seeds"));
    }
    let started = Instant::now();
    let mut ds = open_dataset(cli, &a.dataset)?;
    let split_seed = ds.manifest.seed.unwrap_or(0);
    ds.manifest = match relabel(&ds.manifest, cfg.labeled_fraction, split_seed) {
        Ok(m) => m,
        Err(e) if e.is::<InfeasibleFraction>() => return Err(CliError::Runtime(e)),
        Err(e) => return usage(e),
    };
    let (labeled, unlabeled) = ds.finetune_pools()?;
    let held_out = ds.manifest.ids(Split::Test);
    let base_seed = cli.seed.unwrap_or(0);
    let out = cli.out_dir.join("finetune");
    let init_name = match (&a.init, &a.resume) {
        (Some(_), _) => "pretrained",
        (None, Some(_)) => "resumed",
        _ => "scratch",
    };
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    let mut outputs = Vec::new();
    for k in 0..a.seeds {
        let mut state = match (&a.init, &a.resume) {
            (_, Some(p)) => load_checkpoint(p)?,
            (Some(p), None) => {
                let s = load_checkpoint(p)?;
                if s.stage == Stage::Finetune {
                    return Err(CliError::Runtime(anyhow!("{} is already fine-tuned; use --resume", p.display())));
                }
                if s.config.num_classes != ds.manifest.num_classes {
                    return Err(CliError::Runtime(anyhow!(
                        "checkpoint has {} classes, dataset {}",
                        s.config.num_classes,
                        ds.manifest.num_classes
                    )));
                }
                s
            }
            (None, None) => fresh_state(&cfg, &ds, base_seed + k)?,
        };
        let seed = match (&a.resume, cli.seed) {
            (Some(_), None) => state.seed,
            _ => base_seed + k,
        };
        let tcfg = cfg.finetune_config(seed).map_err(CliError::Usage)?;
        let dir = out.join(format!("seed_{seed}"));
        let ckpt = dir.join("checkpoint.ckpt");
        let resume_step = a.resume.as_ref().map(|_| state.step);
        let val_path = dir.join("val.tsv");
        let val_tsv = open_curve(&val_path, "epoch\tstep\tmean_loss\tmean_dsc\tmean_asd\tmean_hd\n", None)?;
        let mut obs = CliObserver {
            curve: open_curve(&dir.join("curve.tsv"), finetune_curve_header(), resume_step)?,
            checkpoint: ckpt.clone(),
            stop_at: a.stop_at,
            validation: Some((&ds, cfg.threshold, cfg.hd_percentile, cfg.val_every)),
            epochs: Vec::new(),
            val_tsv: Some(val_tsv),
            error: None,
            progress_every: 50,
        };
        let stats = train::finetune(&mut state, &labeled, &unlabeled, &held_out, &tcfg, &mut obs)
            .context("fine-tuning failed")?;
        if let Some(e) = obs.error.take() {
            return Err(e.into());
        }
        for w in &stats.warnings {
            eprintln!("warning: {w}");
        }
        warnings.extend(stats.warnings.iter().cloned());
        write_atomic(&ckpt, &checkpoint::encode(&state))?;
        write_json(&dir.join("val_reports.json"), &obs.epochs)?;
        let final_dsc = evaluate_split(&ds, &state, Split::Val, cfg.threshold, cfg.hd_percentile)?.map(|r| r.aggregate.mean_dsc);
        println!(
            "finetune seed {seed}: {} steps, val DSC {}",
            state.step,
            final_dsc.map_or_else(|| "n/a (empty val split)".into(), |d| format!("{d:.4}"))
        );
        outputs.push(PathBuf::from(format!("seed_{seed}")));
        runs.push(SeedResult {
            seed,
            final_val_dsc: final_dsc.unwrap_or(f64::NAN),
            checkpoint: PathBuf::from(format!("seed_{seed}/checkpoint.ckpt")),
        });
    }
    let dscs: Vec<f64> = runs.iter().map(|r| r.final_val_dsc).collect();
    let (mean, std) = mean_std(&dscs);
    let summary = MultiSeedSummary {
        labeled_fraction: cfg.labeled_fraction,
        init: init_name.to_string(),
        runs,
        mean_dsc: mean,
        std_dsc: std,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!("val DSC over {} run(s): {mean:.4} ± {std:.4}", a.seeds);
    let mut record = RunRecord::new("finetune", cfg.to_text());
    record.seeds = summary.runs.iter().map(|r| r.seed).collect();
    record.outputs = outputs;
    record.warnings = warnings;
    record.final_metrics = serde_json::json!({
        "labeled_fraction": cfg.labeled_fraction,
        "mean_val_dsc": mean,
        "std_val_dsc": std,
    });
    if !cli.deterministic {
        record.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    }
    record.write(&out.join("run.json"))?;
    Ok(())
}

/// Per-volume and aggregate metrics of `state` on one split; `None` when
/// the split is empty.
pub fn evaluate_split(
    ds: &Dataset,
    state: &ModelState,
    split: Split,
    threshold: f64,
    hd: f64,
) -> anyhow::Result<Option<EvaluationReport>> {
    let mut volumes = Vec::new();
    for e in ds.manifest.entries_in(split) {
        let v = ds.load_volume(e)?;
        let gt = ds.load_label(e)?;
        let pred = train::predict_volume(state, &v, threshold)?;
        volumes.push(VolumeReport {
            volume_id: e.id,
            report: evaluate_volume(&pred, &gt, v.spacing(), hd)?,
        });
    }
    finish_report(volumes, hd, "checkpoint")
}

fn finish_report(volumes: Vec<VolumeReport>, hd: f64, source: &str) -> anyhow::Result<Option<EvaluationReport>> {
    if volumes.is_empty() {
        return Ok(None);
    }
    let reports: Vec<SegReport> = volumes.iter().map(|v| v.report.clone()).collect();
    Ok(Some(EvaluationReport {
        hd_percentile: hd,
        source: source.to_string(),
        aggregate: SegReport::aggregate(&reports)?,
        volumes,
    }))
}

fn evaluate(cli: &Cli, cfg: &RunConfig, a: &EvaluateArgs) -> CliResult<()> {
    if !(cfg.hd_percentile > 0.0 && cfg.hd_percentile <= 100.0) {
        return usage(anyhow!("--hd-percentile must lie in (0, 100], got {}", cfg.hd_percentile));
    }
    let started = Instant::now();
    let ds = open_dataset(cli, &a.dataset)?;
    let test: Vec<_> = ds.manifest.entries_in(Split::Test).cloned().collect();
    if test.is_empty() {
        return Err(CliError::Runtime(anyhow!("the test split of {} is empty", ds.root.display())));
    }
    let hd = cfg.hd_percentile;
    let report = match (&a.checkpoint, &a.pred_dir) {
        (Some(p), _) => {
            let state = load_checkpoint(p)?;
            if let Some(leak) = test.iter().find(|e| state.trained_ids.binary_search(&e.id).is_ok()) {
                return Err(CliError::Runtime(anyhow!(
                    "refusing to evaluate: test volume {} was used to train {}",
                    leak.id,
                    p.display()
                )));
            }
            if state.config.num_classes != ds.manifest.num_classes {
                return Err(CliError::Runtime(anyhow!(
                    "checkpoint has {} classes, dataset {}",
                    state.config.num_classes,
                    ds.manifest.num_classes
                )));
            }
            evaluate_split(&ds, &state, Split::Test, cfg.threshold, hd)?
        }
        (None, Some(dir)) => {
            let mut volumes = Vec::new();
            for e in &test {
                let gt = ds.load_label(e)?;
                let name = e
                    .label
                    .as_ref()
                    .and_then(|l| l.file_name())
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(format!("{}.lbl", e.id)));
                let pred = load_labels(&dir.join(&name), Some(ds.manifest.num_classes))?;
                let spacing = ds.load_volume(e).map(|v| v.spacing()).unwrap_or(Spacing::default());
                volumes.push(VolumeReport {
                    volume_id: e.id,
                    report: evaluate_volume(&pred, &gt, spacing, hd).map_err(anyhow::Error::from)?,
                });
            }
            finish_report(volumes, hd, "predictions")?
        }
        (None, None) => return usage(anyhow!("give --checkpoint or --pred-dir")),
    }
    .ok_or_else(|| anyhow!("nothing to evaluate"))?;
    let out = cli.out_dir.join("evaluate");
    write_json(&out.join("report.json"), &report)?;
    write_atomic(&out.join("per_volume.tsv"), report.to_tsv().as_bytes())?;
    println!(
        "test: {} volumes, mean DSC {:.4}, mean ASD {}, mean HD{} {}",
        report.volumes.len(),
        report.aggregate.mean_dsc,
        report.aggregate.mean_asd.map_or("NA".into(), |v| format!("{v:.4}")),
        hd,
        report.aggregate.mean_hd.map_or("NA".into(), |v| format!("{v:.4}")),
    );
    let mut record = RunRecord::new("evaluate", cfg.to_text());
    record.seeds = cli.seed.into_iter().collect();
    record.outputs = vec!["report.json".into(), "per_volume.tsv".into()];
    record.final_metrics = serde_json::to_value(&report.aggregate).map_err(|e| CliError::Runtime(e.into()))?;
    if !cli.deterministic {
        record.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    }
    record.write(&out.join("run.json"))?;
    Ok(())
}
