//! Raw volume (`.vol`) and label (`.lbl`) files, plus the adapter registry
//! through which other image formats can be plugged in.
//!
//! `.vol`: magic `DCLV`, `u32` version, `u8` dtype (1 = f64), three `u64`
//! dims `[D, H, W]`, three `f64` spacings, then row-major voxels.
//! `.lbl`: magic `DCLL`, `u32` version, `u8` class count, three `u64` dims,
//! then one byte per voxel. All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use dclseg_core::types::{LabelMask, Spacing, Volume};

const VOL_MAGIC: &[u8; 4] = b"DCLV";
const LBL_MAGIC: &[u8; 4] = b"DCLL";
const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(61 + v.voxels().len() * 8);
    out.extend_from_slice(VOL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    for d in v.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for s in v.spacing().0 {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for x in v.voxels() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            bail!("{} file is truncated", self.what)
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        ensure!(self.take(4)? == magic, "not a {} file (bad magic)", self.what);
        let version = u32::from_le_bytes(self.take(4)?.try_into()?);
        ensure!(
            version == FORMAT_VERSION,
            "unsupported {} version {version} (this build reads {FORMAT_VERSION})",
            self.what
        );
        Ok(())
    }

    fn dims(&mut self) -> Result<[usize; 3]> {
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = usize::try_from(u64::from_le_bytes(self.take(8)?.try_into()?))?;
        }
        Ok(dims)
    }

    fn finish(&self) -> Result<()> {
        ensure!(self.pos == self.buf.len(), "{} file has trailing bytes", self.what);
        Ok(())
    }
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut c = Cursor { buf: bytes, pos: 0, what: "volume" };
    c.header(VOL_MAGIC)?;
    ensure!(c.take(1)?[0] == DTYPE_F64, "unsupported voxel dtype");
    let dims = c.dims()?;
    let mut spacing = [0.0; 3];
    for s in &mut spacing {
        *s = f64::from_le_bytes(c.take(8)?.try_into()?);
    }
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).context("volume too large")?;
    let voxels = c
        .take(n.checked_mul(8).context("volume too large")?)?
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    c.finish()?;
    Ok(Volume::new(dims, voxels, Spacing(spacing))?)
}

pub fn encode_labels(m: &LabelMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(33 + m.labels().len());
    out.extend_from_slice(LBL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(m.num_classes());
    for d in m.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(m.labels());
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMask> {
    let mut c = Cursor { buf: bytes, pos: 0, what: "label" };
    c.header(LBL_MAGIC)?;
    let classes = c.take(1)?[0];
    let dims = c.dims()?;
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).context("label volume too large")?;
    let labels = c.take(n)?.to_vec();
    c.finish()?;
    Ok(LabelMask::new(dims, labels, classes)?)
}

/// Writes through a sibling temporary file and a rename, so readers never
/// observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().context("path has no file name")?.to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

/// A reader for one external image format.
pub trait VolumeAdapter: Send + Sync {
    fn name(&self) -> &'static str;
    /// File extensions handled, without the dot.
    fn extensions(&self) -> &'static [&'static str];
    fn load(&self, bytes: &[u8]) -> Result<Volume>;
}

struct RawAdapter;

impl VolumeAdapter for RawAdapter {
    fn name(&self) -> &'static str {
        "raw"
    }

    fn extensions(&self) -> &'static [&'static str] {
        &["vol"]
    }

    fn load(&self, bytes: &[u8]) -> Result<Volume> {
        decode_volume(bytes)
    }
}

/// Maps file extensions to adapters; starts with the raw format only.
pub struct AdapterRegistry {
    adapters: Vec<Box<dyn VolumeAdapter>>,
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        Self {
            adapters: vec![Box::new(RawAdapter)],
        }
    }
}

impl AdapterRegistry {
    pub fn register(&mut self, adapter: Box<dyn VolumeAdapter>) {
        self.adapters.push(adapter);
    }

    fn describe(&self) -> String {
        self.adapters
            .iter()
            .map(|a| format!("{} (.{})", a.name(), a.extensions().join(", .")))
            .collect::<Vec<_>>()
            .join("; ")
    }

    pub fn load_volume(&self, path: &Path) -> Result<Volume> {
        let ext = path.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
        let Some(adapter) = self.adapters.iter().find(|a| a.extensions().contains(&ext.as_str())) else {
            bail!(
                "no volume adapter for `{}`; registered adapters: {}",
                path.display(),
                self.describe()
            )
        };
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        adapter.load(&bytes).with_context(|| format!("decoding {}", path.display()))
    }
}

pub fn load_labels(path: &Path, expected_classes: Option<u8>) -> Result<LabelMask> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let m = decode_labels(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    if let Some(c) = expected_classes {
        ensure!(
            m.num_classes() == c,
            "{} declares {} classes, expected {c}",
            path.display(),
            m.num_classes()
        );
    }
    Ok(m)
}
