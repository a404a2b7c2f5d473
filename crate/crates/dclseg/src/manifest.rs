//! Dataset manifests (`manifest.tsv`), volume-level splits and dataset
//! directories.
//!
//! ```text
//! # dclseg-manifest version=1 seed=7 classes=2
//! id	image	label	split	labeled
//! 0	volumes/vol_0000.vol	labels/vol_0000.lbl	train	1
//! ```
//!
//! Paths are relative to the manifest's directory; `-` marks a missing
//! label or an unknown seed.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dclseg_core::rng::Rng;
use dclseg_core::synth::{toy_volume, ToyConfig};
use dclseg_core::train::{volume_slices, TrainImage};
use dclseg_core::types::{LabelMask, Volume};

use crate::formats::{encode_labels, encode_volume, load_labels, write_atomic, AdapterRegistry};

pub const MANIFEST_VERSION: u32 = 1;
const HEADER: &str = "id\timage\tlabel\tsplit\tlabeled";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => bail!("unknown split tag `{other}`"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: u64,
    pub image: PathBuf,
    pub label: Option<PathBuf>,
    pub split: Split,
    pub labeled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub version: u32,
    /// Generation seed of synthetic data.
    pub seed: Option<u64>,
    pub num_classes: u8,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            ensure!(ids.insert(e.id), "duplicate volume id {}", e.id);
            ensure!(
                !e.labeled || e.label.is_some(),
                "volume {} is flagged labeled but has no label path",
                e.id
            );
        }
        ensure!(self.num_classes > 0, "manifest declares no foreground classes");
        Ok(())
    }

    pub fn ids(&self, split: Split) -> Vec<u64> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.id).collect()
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines.next().context("empty manifest")?;
        let meta = first
            .strip_prefix("# dclseg-manifest")
            .context("manifest must start with `# dclseg-manifest`")?;
        let (mut version, mut seed, mut classes) = (None, None, None);
        for field in meta.split_whitespace() {
            let (k, v) = field.split_once('=').with_context(|| format!("bad manifest header field `{field}`"))?;
            match k {
                "version" => version = Some(v.parse::<u32>()?),
                "seed" => seed = if v == "-" { None } else { Some(v.parse::<u64>()?) },
                "classes" => classes = Some(v.parse::<u8>()?),
                _ => bail!("unknown manifest header field `{k}`"),
            }
        }
        let version = version.context("manifest header lacks a version")?;
        ensure!(
            version == MANIFEST_VERSION,
            "unsupported manifest version {version} (this build reads {MANIFEST_VERSION})"
        );
        ensure!(lines.next() == Some(HEADER), "manifest column header must be `{}`", HEADER.replace('\t', "<TAB>"));
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            ensure!(cols.len() == 5, "manifest row {} has {} columns, expected 5", n + 3, cols.len());
            entries.push(ManifestEntry {
                id: cols[0].parse().with_context(|| format!("bad id on manifest row {}", n + 3))?,
                image: PathBuf::from(cols[1]),
                label: (cols[2] != "-").then(|| PathBuf::from(cols[2])),
                split: Split::parse(cols[3])?,
                labeled: match cols[4] {
                    "1" => true,
                    "0" => false,
                    other => bail!("labeled flag must be 0 or 1, got `{other}`"),
                },
            });
        }
        let m = Self {
            version,
            seed,
            num_classes: classes.context("manifest header lacks a class count")?,
            entries,
        };
        m.validate()?;
        Ok(m)
    }
}

impl fmt::Display for DatasetManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seed = self.seed.map_or_else(|| "-".to_string(), |s| s.to_string());
        writeln!(f, "# dclseg-manifest version={} seed={seed} classes={}", self.version, self.num_classes)?;
        writeln!(f, "{HEADER}")?;
        for e in &self.entries {
            let label = e.label.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string());
            writeln!(
                f,
                "{}\t{}\t{label}\t{}\t{}",
                e.id,
                e.image.display(),
                e.split.name(),
                u8::from(e.labeled)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            val_fraction: 0.1,
            labeled_fraction: 1.0,
            seed: 0,
        }
    }
}

/// `round(x)` with halves rounded up.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[derive(Debug, thiserror::Error)]
#[error("labeled fraction {requested} selects no volume out of {n_train} training volumes; the minimum feasible fraction is {min_feasible}")]
pub struct InfeasibleFraction {
    pub requested: f64,
    pub n_train: usize,
    pub min_feasible: f64,
}

/// Seeded volume-level test/val/train split, then [`relabel`] of the
/// training volumes.
pub fn make_splits(manifest: &DatasetManifest, cfg: &SplitConfig) -> Result<DatasetManifest> {
    ensure!(
        (0.0..1.0).contains(&cfg.test_fraction) && (0.0..1.0).contains(&cfg.val_fraction),
        "split fractions must lie in [0, 1)"
    );
    let n = manifest.entries.len();
    let n_test = round_half_up(cfg.test_fraction * n as f64);
    let n_val = round_half_up(cfg.val_fraction * n as f64);
    ensure!(
        n_test + n_val < n,
        "test fraction {} and val fraction {} leave no training volumes out of {n}",
        cfg.test_fraction,
        cfg.val_fraction
    );
    let mut order: Vec<usize> = (0..n).collect();
    Rng::stream(cfg.seed, 0).shuffle(&mut order);
    let mut out = manifest.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.entries[i].split = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
        out.entries[i].labeled = out.entries[i].label.is_some();
    }
    relabel(&out, cfg.labeled_fraction, cfg.seed)
}

/// Re-draws which training volumes are labeled, keeping the split
/// assignment. Validation and test volumes keep their labels.
pub fn relabel(manifest: &DatasetManifest, labeled_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    ensure!(
        labeled_fraction > 0.0 && labeled_fraction <= 1.0,
        "labeled fraction must lie in (0, 1], got {labeled_fraction}"
    );
    let train: Vec<usize> = (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].split == Split::Train)
        .collect();
    let n_train = train.len();
    let n_labeled = round_half_up(labeled_fraction * n_train as f64).min(n_train);
    if n_labeled == 0 {
        return Err(InfeasibleFraction {
            requested: labeled_fraction,
            n_train,
            min_feasible: if n_train == 0 { 1.0 } else { 0.5 / n_train as f64 },
        }
        .into());
    }
    let mut order = train.clone();
    Rng::stream(seed, 1).shuffle(&mut order);
    let chosen: BTreeSet<usize> = order[..n_labeled].iter().copied().collect();
    let mut out = manifest.clone();
    for &i in &train {
        let e = &mut out.entries[i];
        e.labeled = chosen.contains(&i);
        ensure!(!e.labeled || e.label.is_some(), "training volume {} has no label file to use", e.id);
    }
    Ok(out)
}

/// A dataset directory: `manifest.tsv`, `volumes/`, `labels/`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.tsv");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let manifest = DatasetManifest::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn load_volume(&self, e: &ManifestEntry) -> Result<Volume> {
        AdapterRegistry::default().load_volume(&self.root.join(&e.image))
    }

    pub fn load_label(&self, e: &ManifestEntry) -> Result<LabelMask> {
        let path = e.label.as_ref().with_context(|| format!("volume {} has no label", e.id))?;
        let m = load_labels(&self.root.join(path), Some(self.manifest.num_classes))?;
        Ok(m)
    }

    /// Normalized slices of the given entries, with masks when `labels`.
    pub fn slices<'a>(&self, entries: impl Iterator<Item = &'a ManifestEntry>, labels: bool) -> Result<Vec<TrainImage>> {
        let mut out = Vec::new();
        for e in entries {
            let v = self.load_volume(e)?;
            let m = if labels { Some(self.load_label(e)?) } else { None };
            out.extend(volume_slices(e.id, &v, m.as_ref()).with_context(|| format!("volume {}", e.id))?);
        }
        Ok(out)
    }

    /// Pre-training pool: train ∪ val images, no labels.
    pub fn pretrain_pool(&self) -> Result<Vec<TrainImage>> {
        self.slices(
            self.manifest.entries.iter().filter(|e| e.split != Split::Test),
            false,
        )
    }

    /// `(labeled, unlabeled)` training slices.
    pub fn finetune_pools(&self) -> Result<(Vec<TrainImage>, Vec<TrainImage>)> {
        let train: Vec<&ManifestEntry> = self.manifest.entries_in(Split::Train).collect();
        Ok((
            self.slices(train.iter().copied().filter(|e| e.labeled), true)?,
            self.slices(train.iter().copied().filter(|e| !e.labeled), false)?,
        ))
    }

    pub fn save_manifest(&self) -> Result<()> {
        write_atomic(&self.root.join("manifest.tsv"), self.manifest.to_string().as_bytes())
    }
}

/// Writes every toy volume and label under `out_dir` and returns the
/// (unsplit, all-train, all-labeled) manifest.
pub fn generate_toy_dataset(cfg: &ToyConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut entries = Vec::with_capacity(cfg.n_volumes);
    for i in 0..cfg.n_volumes {
        let (v, m) = toy_volume(cfg, i)?;
        let image = PathBuf::from(format!("volumes/vol_{i:04}.vol"));
        let label = PathBuf::from(format!("labels/vol_{i:04}.lbl"));
        write_atomic(&out_dir.join(&image), &encode_volume(&v))?;
        write_atomic(&out_dir.join(&label), &encode_labels(&m))?;
        entries.push(ManifestEntry {
            id: i as u64,
            image,
            label: Some(label),
            split: Split::Train,
            labeled: true,
        });
    }
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        seed: Some(cfg.seed),
        num_classes: cfg.n_classes,
        entries,
    })
}
