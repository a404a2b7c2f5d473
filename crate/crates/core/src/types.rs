//! Volumes, slices and label masks.

use alloc::vec::Vec;

use crate::error::{shape_err, validation, Error, Result};
use crate::math;

/// Physical voxel size in mm, ordered (depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing(pub [f64; 3]);

impl Default for Spacing {
    fn default() -> Self {
        Spacing([1.0; 3])
    }
}

impl Spacing {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(validation!("spacing must be positive and finite, got {:?}", self.0))
        }
    }

    /// In-plane spacing (height, width).
    pub fn in_plane(&self) -> [f64; 2] {
        [self.0[1], self.0[2]]
    }
}

/// 3D scalar volume, row-major (depth, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f64>,
    spacing: Spacing,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f64>, spacing: Spacing) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(validation!("volume dimensions must be >= 1, got {dims:?}"));
        }
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(shape_err!(
                "volume dims {dims:?} need {} voxels, got {}",
                dims.iter().product::<usize>(),
                voxels.len()
            ));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(validation!("volume contains non-finite voxels"));
        }
        spacing.validate()?;
        Ok(Self {
            dims,
            voxels,
            spacing,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    /// Slice `index` along depth, tagged with `volume_id`.
    pub fn slice(&self, volume_id: u64, index: usize) -> Result<SliceImage> {
        if index >= self.dims[0] {
            return Err(validation!("slice {index} out of range for depth {}", self.dims[0]));
        }
        let plane = self.dims[1] * self.dims[2];
        SliceImage::new(
            self.dims[1],
            self.dims[2],
            self.voxels[index * plane..(index + 1) * plane].to_vec(),
            SliceSource {
                volume_id,
                slice_index: index,
            },
        )
    }

    pub fn slices(&self, volume_id: u64) -> Vec<SliceImage> {
        (0..self.dims[0])
            .map(|i| self.slice(volume_id, i).expect("index in range"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SliceSource {
    pub volume_id: u64,
    pub slice_index: usize,
}

/// 2D scalar image, row-major (height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    pub source: SliceSource,
}

impl SliceImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, source: SliceSource) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(validation!("slice dimensions must be >= 1, got {height}x{width}"));
        }
        if pixels.len() != height * width {
            return Err(shape_err!(
                "slice {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            ));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(validation!("slice contains non-finite pixels"));
        }
        Ok(Self {
            height,
            width,
            pixels,
            source,
        })
    }

    /// Builds from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(shape_err!("ragged rows"));
        }
        let pixels = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(height, width, pixels, SliceSource::default())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// Per-slice z-score with the population (N) standard deviation.
///
/// A constant slice maps to all zeros.
pub fn normalize_slice(raw: &SliceImage) -> Result<SliceImage> {
    if raw.pixels.iter().any(|v| !v.is_finite()) {
        return Err(validation!("slice contains non-finite pixels"));
    }
    let n = raw.pixels.len() as f64;
    let mean = raw.pixels.iter().sum::<f64>() / n;
    let var = raw.pixels.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = math::sqrt(var);
    let pixels = if std <= f64::EPSILON * mean.abs().max(1.0) {
        alloc::vec![0.0; raw.pixels.len()]
    } else {
        raw.pixels.iter().map(|v| (v - mean) / std).collect()
    };
    Ok(SliceImage {
        height: raw.height,
        width: raw.width,
        pixels,
        source: raw.source,
    })
}

/// Integer label map, 2D `(1, H, W)` or 3D `(D, H, W)`; 0 is background and
/// foreground classes are `1..=num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: [usize; 3],
    labels: Vec<u8>,
    num_classes: u8,
}

impl LabelMask {
    pub fn new(dims: [usize; 3], labels: Vec<u8>, num_classes: u8) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(validation!("label dimensions must be >= 1, got {dims:?}"));
        }
        if labels.len() != dims.iter().product::<usize>() {
            return Err(shape_err!(
                "label dims {dims:?} need {} values, got {}",
                dims.iter().product::<usize>(),
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > num_classes) {
            return Err(validation!(
                "label value {bad} out of range for {num_classes} foreground classes"
            ));
        }
        Ok(Self {
            dims,
            labels,
            num_classes,
        })
    }

    pub fn new_2d(height: usize, width: usize, labels: Vec<u8>, num_classes: u8) -> Result<Self> {
        Self::new([1, height, width], labels, num_classes)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn slice(&self, index: usize) -> Result<LabelMask> {
        if index >= self.dims[0] {
            return Err(validation!("slice {index} out of range for depth {}", self.dims[0]));
        }
        let plane = self.dims[1] * self.dims[2];
        Ok(LabelMask {
            dims: [1, self.dims[1], self.dims[2]],
            labels: self.labels[index * plane..(index + 1) * plane].to_vec(),
            num_classes: self.num_classes,
        })
    }

    /// Stacks equally sized 2D masks along depth.
    pub fn stack(slices: &[LabelMask]) -> Result<LabelMask> {
        let first = slices
            .first()
            .ok_or_else(|| validation!("cannot stack zero slices"))?;
        let (h, w, c) = (first.dims[1], first.dims[2], first.num_classes);
        let mut labels = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            if s.dims[1] != h || s.dims[2] != w || s.num_classes != c {
                return Err(Error::Shape(alloc::format!(
                    "cannot stack {:?}/{} onto {:?}/{}",
                    s.dims,
                    s.num_classes,
                    first.dims,
                    c
                )));
            }
            labels.extend_from_slice(&s.labels);
        }
        Ok(LabelMask {
            dims: [slices.len() * first.dims[0], h, w],
            labels,
            num_classes: c,
        })
    }

    /// Binary mask of one class.
    pub fn class_mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }
}
