//! Augmented query/key views and exact feature-grid correspondences.
//!
//! Geometric augmentations are restricted to maps of the form
//! `view = scale · R · src + offset` where `R` is one of the eight signed
//! permutation matrices, `scale` is a positive integer and `offset` is an
//! integer vector. Coordinates are continuous `(y, x)` with pixel `(r, c)`
//! covering `[r, r+1) × [c, c+1)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{validation, Error, Result};
use crate::rng::Rng;
use crate::types::SliceImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Identity,
    Translation,
    FlipH,
    FlipV,
    Rotation90,
    CropResize,
    Composite,
}

/// Exactly invertible integer-grid transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometricTransform {
    pub kind: TransformKind,
    rot: [[i64; 2]; 2],
    scale: i64,
    offset: [i64; 2],
}

const IDENTITY_ROT: [[i64; 2]; 2] = [[1, 0], [0, 1]];

fn is_signed_permutation(m: &[[i64; 2]; 2]) -> bool {
    let nz = |v: i64| (v != 0) as u8;
    let rows_ok = m.iter().all(|r| nz(r[0]) + nz(r[1]) == 1);
    let cols_ok = (0..2).all(|c| nz(m[0][c]) + nz(m[1][c]) == 1);
    rows_ok && cols_ok && m.iter().flatten().all(|v| v.abs() <= 1)
}

fn matmul(a: &[[i64; 2]; 2], b: &[[i64; 2]; 2]) -> [[i64; 2]; 2] {
    let mut out = [[0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn matvec(m: &[[i64; 2]; 2], v: [i64; 2]) -> [i64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

fn transpose(m: &[[i64; 2]; 2]) -> [[i64; 2]; 2] {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

impl GeometricTransform {
    pub fn identity() -> Self {
        Self {
            kind: TransformKind::Identity,
            rot: IDENTITY_ROT,
            scale: 1,
            offset: [0, 0],
        }
    }

    /// Content moves by `(dy, dx)` pixels; uncovered pixels become zero.
    pub fn translation(dy: i64, dx: i64) -> Self {
        Self {
            kind: TransformKind::Translation,
            rot: IDENTITY_ROT,
            scale: 1,
            offset: [dy, dx],
        }
    }

    /// Mirror across the vertical axis of an image `width` pixels wide.
    pub fn flip_h(width: usize) -> Self {
        Self {
            kind: TransformKind::FlipH,
            rot: [[1, 0], [0, -1]],
            scale: 1,
            offset: [0, width as i64],
        }
    }

    /// Mirror across the horizontal axis of an image `height` pixels tall.
    pub fn flip_v(height: usize) -> Self {
        Self {
            kind: TransformKind::FlipV,
            rot: [[-1, 0], [0, 1]],
            scale: 1,
            offset: [height as i64, 0],
        }
    }

    /// `k` counter-clockwise quarter turns of a square `size × size` image.
    pub fn rotation90(k: u32, size: usize) -> Self {
        let n = size as i64;
        // one quarter turn: (y, x) -> (n - x, y)
        let step = GeometricTransform {
            kind: TransformKind::Rotation90,
            rot: [[0, -1], [1, 0]],
            scale: 1,
            offset: [n, 0],
        };
        let mut t = GeometricTransform::identity();
        for _ in 0..(k % 4) {
            t = t.then(&step);
        }
        t.kind = if k % 4 == 0 {
            TransformKind::Identity
        } else {
            TransformKind::Rotation90
        };
        t
    }

    /// Crops the `(H/scale) × (W/scale)` window at `origin` from an `H × W`
    /// image and enlarges it by pixel replication back to `H × W`.
    pub fn crop_resize(origin: (usize, usize), scale: usize, dims: (usize, usize)) -> Result<Self> {
        let (h, w) = dims;
        if scale == 0 || h % scale != 0 || w % scale != 0 {
            return Err(validation!("crop scale {scale} does not divide image {h}x{w}"));
        }
        let (ch, cw) = (h / scale, w / scale);
        if origin.0 + ch > h || origin.1 + cw > w {
            return Err(validation!(
                "crop window {ch}x{cw} at {:?} exceeds image {h}x{w}",
                origin
            ));
        }
        let s = scale as i64;
        Ok(Self {
            kind: TransformKind::CropResize,
            rot: IDENTITY_ROT,
            scale: s,
            offset: [-s * origin.0 as i64, -s * origin.1 as i64],
        })
    }

    /// Builds from raw parts, rejecting non-invertible maps.
    pub fn from_parts(rot: [[i64; 2]; 2], scale: i64, offset: [i64; 2]) -> Result<Self> {
        let t = Self {
            kind: TransformKind::Composite,
            rot,
            scale,
            offset,
        };
        t.check_invertible()?;
        Ok(t)
    }

    pub fn parts(&self) -> ([[i64; 2]; 2], i64, [i64; 2]) {
        (self.rot, self.scale, self.offset)
    }

    pub fn check_invertible(&self) -> Result<()> {
        if self.scale <= 0 {
            return Err(Error::NonInvertible(alloc::format!("scale {}", self.scale)));
        }
        if !is_signed_permutation(&self.rot) {
            return Err(Error::NonInvertible(alloc::format!("matrix {:?}", self.rot)));
        }
        Ok(())
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &GeometricTransform) -> GeometricTransform {
        let rot = matmul(&next.rot, &self.rot);
        let ro = matvec(&next.rot, self.offset);
        GeometricTransform {
            kind: TransformKind::Composite,
            rot,
            scale: self.scale * next.scale,
            offset: [next.scale * ro[0] + next.offset[0], next.scale * ro[1] + next.offset[1]],
        }
    }

    /// Same map as the identity (ignoring how it was built).
    pub fn is_identity(&self) -> bool {
        self.rot == IDENTITY_ROT && self.scale == 1 && self.offset == [0, 0]
    }

    /// `2·scale·src` for the view point `2·view2⁻¹`, i.e. the inverse map in
    /// doubled-and-scaled integer coordinates.
    #[inline]
    fn inverse_scaled(&self, view2: [i64; 2]) -> [i64; 2] {
        let d = [view2[0] - 2 * self.offset[0], view2[1] - 2 * self.offset[1]];
        matvec(&transpose(&self.rot), d)
    }

    /// Resamples `slice` into this view (same dimensions, zero padding).
    pub fn warp(&self, slice: &SliceImage) -> Result<SliceImage> {
        self.check_invertible()?;
        let (h, w) = slice.dims();
        let two_s = 2 * self.scale;
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let src = self.inverse_scaled([2 * r as i64 + 1, 2 * c as i64 + 1]);
                let (sy, sx) = (src[0].div_euclid(two_s), src[1].div_euclid(two_s));
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    out[r * w + c] = slice.at(sy as usize, sx as usize);
                }
            }
        }
        SliceImage::new(h, w, out, slice.source)
    }
}

/// Augmentation knobs; see the configuration reference for the file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    /// Probability of each flip and of a random quarter-turn rotation.
    pub flip_p: f64,
    /// Maximum translation, in feature cells, along each axis.
    pub max_translate_cells: usize,
    /// Smallest crop side as a fraction of the slice side.
    pub crop_scale_min: f64,
    /// Half-width of the uniform intensity scale and shift jitter.
    pub intensity_jitter: f64,
    pub noise_std: f64,
    /// Pixels per feature cell (the encoder stride).
    pub feature_stride: usize,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            max_translate_cells: 1,
            crop_scale_min: 0.5,
            intensity_jitter: 0.1,
            noise_std: 0.05,
            feature_stride: 8,
        }
    }
}

impl AugConfig {
    pub fn identity(feature_stride: usize) -> Self {
        Self {
            flip_p: 0.0,
            max_translate_cells: 0,
            crop_scale_min: 1.0,
            intensity_jitter: 0.0,
            noise_std: 0.0,
            feature_stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(validation!("aug.flip_p must be in [0, 1], got {}", self.flip_p));
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return Err(validation!("aug.crop_scale_min must be in (0, 1], got {}", self.crop_scale_min));
        }
        if !(self.intensity_jitter >= 0.0 && self.intensity_jitter < 1.0) {
            return Err(validation!("aug.intensity_jitter must be in [0, 1), got {}", self.intensity_jitter));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(validation!("aug.noise_std must be >= 0, got {}", self.noise_std));
        }
        if self.feature_stride == 0 {
            return Err(validation!("feature stride must be positive"));
        }
        Ok(())
    }
}

/// Two augmented views of one slice with their exact geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_q: SliceImage,
    pub view_k: SliceImage,
    pub t_q: GeometricTransform,
    pub t_k: GeometricTransform,
    pub photometric_seed: u64,
}

fn sample_transform(dims: (usize, usize), rng: &mut Rng, cfg: &AugConfig) -> Result<GeometricTransform> {
    let (h, w) = dims;
    let mut t = GeometricTransform::identity();

    let mut scales = vec![1usize];
    let mut s = 2;
    while 1.0 / s as f64 >= cfg.crop_scale_min - 1e-12 && h % s == 0 && w % s == 0 {
        scales.push(s);
        s *= 2;
    }
    let scale = scales[rng.below(scales.len())];
    if scale > 1 {
        let oy = rng.below(h - h / scale + 1);
        let ox = rng.below(w - w / scale + 1);
        t = t.then(&GeometricTransform::crop_resize((oy, ox), scale, dims)?);
    }
    if rng.bernoulli(cfg.flip_p) {
        t = t.then(&GeometricTransform::flip_h(w));
    }
    if rng.bernoulli(cfg.flip_p) {
        t = t.then(&GeometricTransform::flip_v(h));
    }
    if h == w && rng.bernoulli(cfg.flip_p) {
        let k = 1 + rng.below(3) as u32;
        t = t.then(&GeometricTransform::rotation90(k, h));
    }
    if cfg.max_translate_cells > 0 {
        let m = (cfg.max_translate_cells * cfg.feature_stride) as i64;
        let (dy, dx) = (rng.int_inclusive(-m, m), rng.int_inclusive(-m, m));
        t = t.then(&GeometricTransform::translation(dy, dx));
    }
    if t.is_identity() {
        t.kind = TransformKind::Identity;
    }
    Ok(t)
}

fn photometric(view: &mut SliceImage, rng: &mut Rng, cfg: &AugConfig) {
    let j = cfg.intensity_jitter;
    let (gain, shift) = if j > 0.0 {
        (rng.uniform_range(1.0 - j, 1.0 + j), rng.uniform_range(-j, j))
    } else {
        (1.0, 0.0)
    };
    let noisy = cfg.noise_std > 0.0;
    for v in view.pixels_mut() {
        *v = *v * gain + shift;
        if noisy {
            *v += cfg.noise_std * rng.normal();
        }
    }
}

/// Samples geometry for both views, warps, then applies photometric jitter
/// from a separate stream so it never touches the recorded transforms.
pub fn sample_view_pair(slice: &SliceImage, rng: &mut Rng, cfg: &AugConfig) -> Result<ViewPair> {
    cfg.validate()?;
    let dims = slice.dims();
    let t_q = sample_transform(dims, rng, cfg)?;
    let t_k = sample_transform(dims, rng, cfg)?;
    let photometric_seed = rng.next_u64();
    let mut photo = Rng::seed_from_u64(photometric_seed);
    let mut view_q = t_q.warp(slice)?;
    let mut view_k = t_k.warp(slice)?;
    photometric(&mut view_q, &mut photo, cfg);
    photometric(&mut view_k, &mut photo, cfg);
    Ok(ViewPair {
        view_q,
        view_k,
        t_q,
        t_k,
        photometric_seed,
    })
}

/// Matched `(query position, key position)` pairs, sorted by query position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorrespondenceMap {
    pub pairs: Vec<(usize, usize)>,
}

impl CorrespondenceMap {
    pub fn identity(positions: usize) -> Self {
        Self {
            pairs: (0..positions).map(|i| (i, i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Per-axis outcome of mapping one query-view pixel index.
#[derive(Clone, Copy)]
struct AxisMap {
    /// Which key axis (0 = rows, 1 = cols) this query axis lands on.
    key_axis: usize,
    /// Key pixel index along `key_axis`, or `None` when the pixel is padding
    /// in the query view or falls outside the key view.
    key_pixel: Option<i64>,
}

/// Matches feature-grid cells of the query view to cells of the key view.
///
/// Every query-view pixel whose source point lies inside the slice and
/// whose image lies inside the key view casts one vote for
/// `(its query cell, the key cell containing its image)`. Each query cell
/// takes the key cell with the most votes; ties go to the key cell whose
/// center is nearest to the mapped query-cell center, then to the lowest
/// index. Cells without votes are left unmatched.
///
/// Votes factor into a product of per-axis histograms because the
/// transforms never mix axes, so the cost is `O(H + W + (D_h·D_w)²)`.
pub fn correspondence_map(
    t_q: &GeometricTransform,
    t_k: &GeometricTransform,
    feature_dims: (usize, usize),
    image_dims: (usize, usize),
) -> Result<CorrespondenceMap> {
    t_q.check_invertible()?;
    t_k.check_invertible()?;
    let (dh, dw) = feature_dims;
    let (h, w) = image_dims;
    if dh == 0 || dw == 0 || h % dh != 0 || w % dw != 0 {
        return Err(validation!(
            "feature grid {dh}x{dw} does not evenly divide image {h}x{w}"
        ));
    }
    let dims = [h as i64, w as i64];
    let grid = [dh, dw];
    let cell = [h / dh, w / dw];

    // Map each query axis independently.
    let axis_maps: [Vec<AxisMap>; 2] = core::array::from_fn(|qa| {
        let len = dims[qa];
        // unit vector along query axis qa through the inverse rotation
        let src_axis = (0..2).find(|&a| t_q.rot[qa][a] != 0).expect("signed permutation");
        let key_axis = (0..2).find(|&b| t_k.rot[b][src_axis] != 0).expect("signed permutation");
        let sign_q = t_q.rot[qa][src_axis];
        let sign_k = t_k.rot[key_axis][src_axis];
        let two_sq = 2 * t_q.scale;
        (0..len)
            .map(|p| {
                // doubled-scaled source coordinate along src_axis
                let src2 = sign_q * (2 * p + 1 - 2 * t_q.offset[qa]);
                if src2 < 0 || src2 >= two_sq * dims[src_axis] {
                    return AxisMap { key_axis, key_pixel: None };
                }
                let k2 = t_k.scale * sign_k * src2 + two_sq * t_k.offset[key_axis];
                let kp = k2.div_euclid(two_sq);
                let inside = kp >= 0 && kp < dims[key_axis];
                AxisMap {
                    key_axis,
                    key_pixel: inside.then_some(kp),
                }
            })
            .collect()
    });

    // hist[qa][query cell][key cell along the mapped key axis]
    let key_axis_of = [axis_maps[0][0].key_axis, axis_maps[1][0].key_axis];
    let hist: [Vec<Vec<u64>>; 2] = core::array::from_fn(|qa| {
        let ka = key_axis_of[qa];
        let mut hgrid = vec![vec![0u64; grid[ka]]; grid[qa]];
        for (p, m) in axis_maps[qa].iter().enumerate() {
            if let Some(kp) = m.key_pixel {
                hgrid[p / cell[qa]][kp as usize / cell[ka]] += 1;
            }
        }
        hgrid
    });

    let mut pairs = Vec::new();
    for qy in 0..dh {
        for qx in 0..dw {
            let mapped = mapped_center(t_q, t_k, qy, qx, cell);
            let mut best: Option<(u64, f64, usize)> = None;
            for ky in 0..dh {
                for kx in 0..dw {
                    let kc = [ky, kx];
                    let votes = hist[0][qy][kc[key_axis_of[0]]] * hist[1][qx][kc[key_axis_of[1]]];
                    if votes == 0 {
                        continue;
                    }
                    let cy = (ky as f64 + 0.5) * cell[0] as f64;
                    let cx = (kx as f64 + 0.5) * cell[1] as f64;
                    let d2 = (mapped[0] - cy) * (mapped[0] - cy) + (mapped[1] - cx) * (mapped[1] - cx);
                    let j = ky * dw + kx;
                    let better = match best {
                        None => true,
                        Some((bv, bd, _)) => votes > bv || (votes == bv && d2 < bd),
                    };
                    if better {
                        best = Some((votes, d2, j));
                    }
                }
            }
            if let Some((_, _, j)) = best {
                pairs.push((qy * dw + qx, j));
            }
        }
    }
    Ok(CorrespondenceMap { pairs })
}

/// Center of query cell `(qy, qx)` expressed in key-view coordinates.
fn mapped_center(t_q: &GeometricTransform, t_k: &GeometricTransform, qy: usize, qx: usize, cell: [usize; 2]) -> [f64; 2] {
    let c = [(qy as f64 + 0.5) * cell[0] as f64, (qx as f64 + 0.5) * cell[1] as f64];
    let d = [c[0] - t_q.offset[0] as f64, c[1] - t_q.offset[1] as f64];
    let rt = transpose(&t_q.rot);
    let s = t_q.scale as f64;
    let src = [
        (rt[0][0] as f64 * d[0] + rt[0][1] as f64 * d[1]) / s,
        (rt[1][0] as f64 * d[0] + rt[1][1] as f64 * d[1]) / s,
    ];
    let ks = t_k.scale as f64;
    [
        ks * (t_k.rot[0][0] as f64 * src[0] + t_k.rot[0][1] as f64 * src[1]) + t_k.offset[0] as f64,
        ks * (t_k.rot[1][0] as f64 * src[0] + t_k.rot[1][1] as f64 * src[1]) + t_k.offset[1] as f64,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SliceSource;

    fn ramp(h: usize, w: usize) -> SliceImage {
        SliceImage::new(h, w, (0..h * w).map(|i| i as f64).collect(), SliceSource::default()).unwrap()
    }

    #[test]
    fn identity_config_gives_identical_views() {
        let s = ramp(16, 16);
        let pair = sample_view_pair(&s, &mut Rng::seed_from_u64(1), &AugConfig::identity(8)).unwrap();
        assert_eq!(pair.view_q, s);
        assert_eq!(pair.view_k, s);
        assert!(pair.t_q.is_identity() && pair.t_k.is_identity());
    }

    #[test]
    fn same_seed_same_pair() {
        let s = ramp(32, 32);
        let cfg = AugConfig::default();
        let a = sample_view_pair(&s, &mut Rng::seed_from_u64(42), &cfg).unwrap();
        let b = sample_view_pair(&s, &mut Rng::seed_from_u64(42), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn photometric_jitter_leaves_geometry_alone() {
        let s = ramp(32, 32);
        let plain = AugConfig {
            intensity_jitter: 0.0,
            noise_std: 0.0,
            ..AugConfig::default()
        };
        let noisy = AugConfig {
            intensity_jitter: 0.3,
            noise_std: 0.5,
            ..AugConfig::default()
        };
        let a = sample_view_pair(&s, &mut Rng::seed_from_u64(5), &plain).unwrap();
        let b = sample_view_pair(&s, &mut Rng::seed_from_u64(5), &noisy).unwrap();
        assert_eq!((a.t_q, a.t_k), (b.t_q, b.t_k));
        assert_ne!(a.view_q, b.view_q);
    }

    #[test]
    fn double_flip_is_identity_on_pixels() {
        let s = ramp(6, 5);
        let t = GeometricTransform::flip_h(5).then(&GeometricTransform::flip_h(5));
        assert!(t.is_identity());
        assert_eq!(t.warp(&s).unwrap(), s);
        let once = GeometricTransform::flip_h(5).warp(&s).unwrap();
        for r in 0..6 {
            for c in 0..5 {
                assert_eq!(once.at(r, c), s.at(r, 4 - c));
            }
        }
    }

    #[test]
    fn quarter_turn_moves_pixels_counter_clockwise() {
        let s = ramp(3, 3);
        let v = GeometricTransform::rotation90(1, 3).warp(&s).unwrap();
        // view(y', x') = src(x', n-1-y')
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(v.at(y, x), s.at(x, 2 - y));
            }
        }
        assert!(GeometricTransform::rotation90(4, 3).is_identity());
    }

    #[test]
    fn crop_resize_replicates_pixels() {
        let s = ramp(4, 4);
        let v = GeometricTransform::crop_resize((1, 2), 2, (4, 4)).unwrap().warp(&s).unwrap();
        assert_eq!(v.at(0, 0), s.at(1, 2));
        assert_eq!(v.at(1, 1), s.at(1, 2));
        assert_eq!(v.at(3, 3), s.at(2, 3));
        assert!(GeometricTransform::crop_resize((3, 0), 2, (4, 4)).is_err());
        assert!(GeometricTransform::crop_resize((0, 0), 3, (4, 4)).is_err());
    }

    #[test]
    fn invalid_aug_config_rejected() {
        let s = ramp(8, 8);
        let cfg = AugConfig {
            crop_scale_min: 1.5,
            ..AugConfig::default()
        };
        assert!(sample_view_pair(&s, &mut Rng::seed_from_u64(0), &cfg).is_err());
    }

    #[test]
    fn non_invertible_parts_rejected() {
        assert!(matches!(
            GeometricTransform::from_parts([[1, 1], [0, 1]], 1, [0, 0]),
            Err(Error::NonInvertible(_))
        ));
        assert!(GeometricTransform::from_parts(IDENTITY_ROT, 0, [0, 0]).is_err());
    }

    #[test]
    fn identity_transforms_give_identity_map() {
        let id = GeometricTransform::identity();
        let m = correspondence_map(&id, &id, (4, 3), (16, 12)).unwrap();
        assert_eq!(m, CorrespondenceMap::identity(12));
    }

    #[test]
    fn one_cell_shift_right() {
        let id = GeometricTransform::identity();
        let shift = GeometricTransform::translation(0, 4);
        let m = correspondence_map(&id, &shift, (2, 2), (8, 8)).unwrap();
        assert_eq!(m.pairs, vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn disjoint_crops_share_nothing() {
        let a = GeometricTransform::crop_resize((0, 0), 2, (8, 8)).unwrap();
        let b = GeometricTransform::crop_resize((4, 4), 2, (8, 8)).unwrap();
        assert!(correspondence_map(&a, &b, (2, 2), (8, 8)).unwrap().is_empty());
    }

    #[test]
    fn grid_must_divide_image() {
        let id = GeometricTransform::identity();
        assert!(correspondence_map(&id, &id, (3, 3), (8, 8)).is_err());
    }

    fn any_transform(n: usize) -> impl proptest::strategy::Strategy<Value = GeometricTransform> {
        use proptest::prelude::*;
        (0u8..6, 0usize..4, 0usize..n, 0usize..n, -(n as i64)..(n as i64), -(n as i64)..(n as i64), 0u32..4).prop_map(
            move |(kind, sexp, oy, ox, dy, dx, k)| match kind {
                0 => GeometricTransform::identity(),
                1 => GeometricTransform::translation(dy, dx),
                2 => GeometricTransform::flip_h(n),
                3 => GeometricTransform::flip_v(n),
                4 => GeometricTransform::rotation90(k, n),
                _ => {
                    let s = 1usize << sexp.min(2);
                    let lim = n - n / s;
                    GeometricTransform::crop_resize((oy.min(lim), ox.min(lim)), s, (n, n)).unwrap()
                }
            },
        )
    }

    proptest::proptest! {
        #[test]
        fn self_map_is_identity(t in any_transform(16)) {
            let m = correspondence_map(&t, &t, (4, 4), (16, 16)).unwrap();
            // cells whose area is entirely padding have no source pixels at all
            for &(i, j) in &m.pairs {
                proptest::prop_assert_eq!(i, j);
            }
            let visible = (0..16).filter(|&i| {
                let (cy, cx) = (i / 4, i % 4);
                (0..4).any(|dy| (0..4).any(|dx| {
                    let p = [2 * (cy * 4 + dy) as i64 + 1, 2 * (cx * 4 + dx) as i64 + 1];
                    let s = t.inverse_scaled(p);
                    let two = 2 * t.scale;
                    s.iter().all(|&v| v >= 0 && v < two * 16)
                }))
            }).count();
            proptest::prop_assert_eq!(m.len(), visible);
        }

        #[test]
        fn compose_then_warp_equals_warp_twice(a in any_transform(8), b in any_transform(8)) {
            // only meaningful when the first map hides nothing
            let s = ramp(8, 8);
            if a.scale == 1 && a.offset.iter().all(|&o| o == 0 || o == 8) {
                let lhs = a.then(&b).warp(&s).unwrap();
                let rhs = b.warp(&a.warp(&s).unwrap()).unwrap();
                proptest::prop_assert_eq!(lhs, rhs);
            }
        }
    }
}
