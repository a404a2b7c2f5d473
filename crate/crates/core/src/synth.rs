//! Synthetic toy volumes with exact label masks.
//!
//! Each foreground class is one 3D shape (ellipsoid, box or ellipsoidal
//! shell) at a random position and size, painted with its own intensity
//! on a zero background. Later classes overwrite earlier ones where they
//! overlap, and the label mask is the exact painted support.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{validation, Result};
use crate::rng::Rng;
use crate::types::{LabelMask, Spacing, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipses,
    Rectangles,
    Rings,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Ellipses, ShapeFamily::Rectangles, ShapeFamily::Rings];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Ellipses => "ellipses",
            ShapeFamily::Rectangles => "rectangles",
            ShapeFamily::Rings => "rings",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| validation!("unknown shape family `{s}` (ellipses | rectangles | rings)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub n_volumes: usize,
    /// `[D, H, W]`.
    pub dims: [usize; 3],
    pub n_classes: u8,
    /// Families to draw from; each class picks one at random.
    pub families: Vec<ShapeFamily>,
    pub noise_std: f64,
    pub spacing: Spacing,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_volumes: 20,
            dims: [8, 32, 32],
            n_classes: 2,
            families: ShapeFamily::ALL.to_vec(),
            noise_std: 0.1,
            spacing: Spacing([2.0, 1.0, 1.0]),
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.dims;
        if d == 0 || h < 8 || w < 8 {
            return Err(validation!("toy volumes need depth ≥ 1 and slices of at least 8x8, got {d}x{h}x{w}"));
        }
        if self.n_classes == 0 {
            return Err(validation!("toy data needs at least one foreground class"));
        }
        if self.families.is_empty() {
            return Err(validation!("no shape family selected"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(validation!("noise_std must be finite and non-negative"));
        }
        self.spacing.validate()
    }
}

struct Shape {
    family: ShapeFamily,
    center: [f64; 3],
    radii: [f64; 3],
}

impl Shape {
    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        let u: [f64; 3] = core::array::from_fn(|i| (p[i] - self.center[i]) / self.radii[i]);
        match self.family {
            ShapeFamily::Rectangles => u.iter().all(|v| v.abs() <= 1.0),
            ShapeFamily::Ellipses => u.iter().map(|v| v * v).sum::<f64>() <= 1.0,
            ShapeFamily::Rings => {
                let r2: f64 = u.iter().map(|v| v * v).sum();
                (0.3..=1.0).contains(&r2)
            }
        }
    }
}

fn sample_shape(rng: &mut Rng, family: ShapeFamily, dims: [usize; 3]) -> Shape {
    let mut center = [0.0; 3];
    let mut radii = [0.0; 3];
    for axis in 0..3 {
        let n = dims[axis] as f64;
        let (r, c) = if axis == 0 {
            // shapes span most of the stack so most slices see every class
            let r = (n * rng.uniform_range(0.5, 0.9)).max(0.5);
            (r, (n - 1.0) / 2.0 + rng.uniform_range(-0.15, 0.15) * n)
        } else {
            let r = n * rng.uniform_range(0.12, 0.25);
            let c = rng.uniform_range(r + 1.0, n - 2.0 - r);
            (r, c)
        };
        radii[axis] = r;
        center[axis] = c;
    }
    Shape { family, center, radii }
}

/// Nominal intensity of class `k` over a zero background: odd classes are
/// brighter than the background and even classes darker, with magnitude
/// growing every second class. The polarity survives per-slice z-scoring.
pub fn class_level(class: u8) -> f64 {
    let magnitude = 1.0 + 0.5 * f64::from((class - 1) / 2);
    if class % 2 == 1 {
        magnitude
    } else {
        -magnitude
    }
}

/// Volume number `index` of the toy set; independent of the other volumes.
pub fn toy_volume(cfg: &ToyConfig, index: usize) -> Result<(Volume, LabelMask)> {
    cfg.validate()?;
    let mut rng = Rng::stream(cfg.seed, index as u64);
    let [d, h, w] = cfg.dims;
    let mut labels = vec![0u8; d * h * w];
    let mut voxels = vec![0.0; d * h * w];
    for class in 1..=cfg.n_classes {
        let family = cfg.families[rng.below(cfg.families.len())];
        let shape = sample_shape(&mut rng, family, cfg.dims);
        let level = class_level(class) * rng.uniform_range(0.9, 1.1);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(z, y, x) {
                        let i = (z * h + y) * w + x;
                        labels[i] = class;
                        voxels[i] = level;
                    }
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        for v in &mut voxels {
            *v += cfg.noise_std * rng.normal();
        }
    }
    Ok((
        Volume::new(cfg.dims, voxels, cfg.spacing)?,
        LabelMask::new(cfg.dims, labels, cfg.n_classes)?,
    ))
}

pub fn toy_dataset(cfg: &ToyConfig) -> Result<Vec<(Volume, LabelMask)>> {
    (0..cfg.n_volumes).map(|i| toy_volume(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = ToyConfig { n_volumes: 3, seed: 7, ..Default::default() };
        assert_eq!(toy_dataset(&cfg).unwrap(), toy_dataset(&cfg).unwrap());
        let other = ToyConfig { seed: 8, ..cfg.clone() };
        assert_ne!(toy_dataset(&cfg).unwrap(), toy_dataset(&other).unwrap());
    }

    #[test]
    fn noiseless_single_ellipse_mask_is_intensity_support() {
        let cfg = ToyConfig {
            n_classes: 1,
            families: vec![ShapeFamily::Ellipses],
            noise_std: 0.0,
            seed: 3,
            ..Default::default()
        };
        for i in 0..4 {
            let (v, m) = toy_volume(&cfg, i).unwrap();
            for (&x, &l) in v.voxels().iter().zip(m.labels()) {
                assert_eq!(x > 0.0, l == 1);
            }
            assert!(m.labels().iter().any(|&l| l == 1));
        }
    }

    #[test]
    fn class_polarity_alternates() {
        assert_eq!(class_level(1), 1.0);
        assert_eq!(class_level(2), -1.0);
        assert_eq!(class_level(3), 1.5);
        let cfg = ToyConfig { noise_std: 0.0, seed: 5, ..Default::default() };
        let (v, m) = toy_volume(&cfg, 0).unwrap();
        for (&x, &l) in v.voxels().iter().zip(m.labels()) {
            match l {
                0 => assert_eq!(x, 0.0),
                1 => assert!(x > 0.0),
                _ => assert!(x < 0.0),
            }
        }
    }

    #[test]
    fn every_class_appears() {
        let cfg = ToyConfig { n_volumes: 10, seed: 1, ..Default::default() };
        for (_, m) in toy_dataset(&cfg).unwrap() {
            for c in 1..=cfg.n_classes {
                assert!(m.labels().contains(&c));
            }
        }
    }

    #[test]
    fn rejects_degenerate_config() {
        assert!(toy_volume(&ToyConfig { dims: [0, 0, 0], ..Default::default() }, 0).is_err());
        assert!(toy_volume(&ToyConfig { n_classes: 0, ..Default::default() }, 0).is_err());
    }
}
