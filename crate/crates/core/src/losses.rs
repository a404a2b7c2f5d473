//! Global and dense (local) InfoNCE.
//!
//! For an anchor `q` with positive `k⁺` and negatives `k⁻`:
//!
//! ```text
//! ℓ = −log( exp(q·k⁺/τ) / (exp(q·k⁺/τ) + Σ exp(q·k⁻/τ)) )
//! ```
//!
//! The dense loss averages `ℓ` over every query-view position that has a
//! correspondence in the key view; negatives for a position are all
//! key-view positions of the other images in the batch.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, validation, Error, Result};
use crate::math;
use crate::model::DenseProjection;
use crate::rng::Rng;
use crate::views::CorrespondenceMap;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    /// Keep at most this many negatives per anchor (seeded sampling).
    pub negative_subsample: Option<usize>,
    /// Also use key-view positions as anchors and average both directions.
    pub symmetric: bool,
    /// Seed for negative subsampling.
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            negative_subsample: None,
            symmetric: false,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(validation!("temperature must be positive, got {}", self.temperature));
        }
        if self.negative_subsample == Some(0) {
            return Err(validation!("negative_subsample must be >= 1 when set"));
        }
        Ok(())
    }
}

/// One InfoNCE term and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceTerm {
    pub loss: f64,
    pub grad_q: Vec<f64>,
    pub grad_pos: Vec<f64>,
    pub grad_negs: Vec<Vec<f64>>,
}

fn info_nce_term<'a>(
    q: &[f64],
    pos: &[f64],
    negs: impl ExactSizeIterator<Item = &'a [f64]> + Clone,
    tau: f64,
    want_grad: bool,
) -> (f64, Option<InfoNceTerm>) {
    let mut logits = Vec::with_capacity(negs.len() + 1);
    logits.push(math::dot(q, pos) / tau);
    logits.extend(negs.clone().map(|k| math::dot(q, k) / tau));
    let lse = math::log_sum_exp(&logits);
    let loss = lse - logits[0];
    if !want_grad {
        return (loss, None);
    }
    let weights: Vec<f64> = logits.iter().map(|l| math::exp(l - lse)).collect();
    let d = q.len();
    // ∂ℓ/∂q = (Σ_n wₙ kₙ − k⁺)/τ with w₀ on the positive
    let mut grad_q: Vec<f64> = pos.iter().map(|p| (weights[0] - 1.0) * p / tau).collect();
    let mut grad_negs = Vec::with_capacity(negs.len());
    for (n, k) in negs.enumerate() {
        let w = weights[n + 1];
        for i in 0..d {
            grad_q[i] += w * k[i] / tau;
        }
        grad_negs.push(q.iter().map(|qi| w * qi / tau).collect());
    }
    let grad_pos = q.iter().map(|qi| (weights[0] - 1.0) * qi / tau).collect();
    (
        loss,
        Some(InfoNceTerm {
            loss,
            grad_q,
            grad_pos,
            grad_negs,
        }),
    )
}

fn check_global(q: &[f64], k_pos: &[f64], k_negs: &[Vec<f64>], cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if k_negs.is_empty() {
        return Err(validation!("InfoNCE needs at least one negative"));
    }
    let d = q.len();
    if d == 0 || k_pos.len() != d || k_negs.iter().any(|k| k.len() != d) {
        return Err(shape_err!("query, positive and negatives must share one non-zero dimension"));
    }
    Ok(())
}

/// Single-query InfoNCE over unit vectors.
pub fn global_info_nce(q: &[f64], k_pos: &[f64], k_negs: &[Vec<f64>], cfg: &LossConfig) -> Result<f64> {
    check_global(q, k_pos, k_negs, cfg)?;
    Ok(info_nce_term(q, k_pos, k_negs.iter().map(Vec::as_slice), cfg.temperature, false).0)
}

/// [`global_info_nce`] with gradients for every input vector.
pub fn global_info_nce_with_grad(q: &[f64], k_pos: &[f64], k_negs: &[Vec<f64>], cfg: &LossConfig) -> Result<InfoNceTerm> {
    check_global(q, k_pos, k_negs, cfg)?;
    Ok(info_nce_term(q, k_pos, k_negs.iter().map(Vec::as_slice), cfg.temperature, true)
        .1
        .expect("requested"))
}

/// Which projection of a batch entry a vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Key,
}

impl Side {
    fn other(self) -> Side {
        match self {
            Side::Query => Side::Key,
            Side::Key => Side::Query,
        }
    }
}

/// Reference to one vector of a batch entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VecRef {
    pub entry: usize,
    pub side: Side,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub image_id: u64,
    pub anchor: VecRef,
    pub positive: VecRef,
    pub negatives: Vec<VecRef>,
}

/// Input to [`build_pairs`]: the two projections of one image and the
/// correspondence between their grids.
#[derive(Debug, Clone, Copy)]
pub struct BatchEntry<'a> {
    pub image_id: u64,
    pub query: &'a DenseProjection,
    pub key: &'a DenseProjection,
    pub correspondence: &'a CorrespondenceMap,
}

/// Anchors with their positives and negatives, plus position-major copies
/// of every projection they reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub dim: usize,
    /// Query→key anchors.
    pub anchors: Vec<Anchor>,
    /// Key→query anchors (only with `symmetric`).
    pub reverse_anchors: Vec<Anchor>,
    query_rows: Vec<Vec<f64>>,
    key_rows: Vec<Vec<f64>>,
}

impl PairSet {
    pub fn vector(&self, r: VecRef) -> &[f64] {
        let rows = match r.side {
            Side::Query => &self.query_rows[r.entry],
            Side::Key => &self.key_rows[r.entry],
        };
        &rows[r.position * self.dim..(r.position + 1) * self.dim]
    }

    pub fn entries(&self) -> usize {
        self.query_rows.len()
    }

    /// Position-major rows of one side of an entry.
    pub fn rows(&self, entry: usize, side: Side) -> &[f64] {
        match side {
            Side::Query => &self.query_rows[entry],
            Side::Key => &self.key_rows[entry],
        }
    }

    pub fn rows_mut(&mut self, entry: usize, side: Side) -> &mut [f64] {
        match side {
            Side::Query => &mut self.query_rows[entry],
            Side::Key => &mut self.key_rows[entry],
        }
    }
}

/// Assigns positives from correspondences and negatives from the other
/// images of the batch.
pub fn build_pairs(batch: &[BatchEntry<'_>], cfg: &LossConfig) -> Result<PairSet> {
    cfg.validate()?;
    let first = batch.first().ok_or(Error::NoNegativeSource)?;
    if batch.iter().all(|e| e.image_id == first.image_id) {
        return Err(Error::NoNegativeSource);
    }
    let dim = first.query.dim();
    for (n, e) in batch.iter().enumerate() {
        if e.query.dim() != dim || e.key.dim() != dim {
            return Err(shape_err!("entry {n}: embedding dims differ from {dim}"));
        }
        let (pq, pk) = (e.query.positions(), e.key.positions());
        let mut last = None;
        for &(i, j) in &e.correspondence.pairs {
            if i >= pq || j >= pk {
                return Err(validation!("entry {n}: correspondence ({i}, {j}) out of range"));
            }
            if last.is_some_and(|l| l >= i) {
                return Err(validation!("entry {n}: correspondences must be sorted with unique query positions"));
            }
            last = Some(i);
        }
    }
    let query_rows: Vec<Vec<f64>> = batch.iter().map(|e| e.query.rows()).collect();
    let key_rows: Vec<Vec<f64>> = batch.iter().map(|e| e.key.rows()).collect();

    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut make = |direction: Side| -> Vec<Anchor> {
        let neg_side = direction.other();
        let mut anchors = Vec::new();
        for (n, e) in batch.iter().enumerate() {
            let pool: Vec<VecRef> = batch
                .iter()
                .enumerate()
                .filter(|(_, o)| o.image_id != e.image_id)
                .flat_map(|(m, o)| {
                    let count = match neg_side {
                        Side::Query => o.query.positions(),
                        Side::Key => o.key.positions(),
                    };
                    (0..count).map(move |p| VecRef {
                        entry: m,
                        side: neg_side,
                        position: p,
                    })
                })
                .collect();
            for &(i, j) in &e.correspondence.pairs {
                let (a, p) = match direction {
                    Side::Query => (i, j),
                    Side::Key => (j, i),
                };
                let negatives = match cfg.negative_subsample {
                    Some(cap) if cap < pool.len() => {
                        let mut cand = pool.clone();
                        for t in 0..cap {
                            let pick = t + rng.below(cand.len() - t);
                            cand.swap(t, pick);
                        }
                        cand.truncate(cap);
                        cand
                    }
                    _ => pool.clone(),
                };
                anchors.push(Anchor {
                    image_id: e.image_id,
                    anchor: VecRef {
                        entry: n,
                        side: direction,
                        position: a,
                    },
                    positive: VecRef {
                        entry: n,
                        side: neg_side,
                        position: p,
                    },
                    negatives,
                });
            }
        }
        anchors
    };
    let anchors = make(Side::Query);
    let reverse_anchors = if cfg.symmetric { make(Side::Key) } else { Vec::new() };
    Ok(PairSet {
        dim,
        anchors,
        reverse_anchors,
        query_rows,
        key_rows,
    })
}

/// Loss and gradients w.r.t. every row of every projection in the set.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGrad {
    pub loss: f64,
    pub anchors: usize,
    /// Position-major gradient rows, indexed like the batch.
    pub query: Vec<Vec<f64>>,
    pub key: Vec<Vec<f64>>,
}

impl LocalGrad {
    pub fn rows(&self, entry: usize, side: Side) -> &[f64] {
        match side {
            Side::Query => &self.query[entry],
            Side::Key => &self.key[entry],
        }
    }
}

fn mean_direction(pairs: &PairSet, anchors: &[Anchor], tau: f64, grads: Option<&mut LocalGrad>, weight: f64) -> f64 {
    let d = pairs.dim;
    let inv = 1.0 / anchors.len() as f64;
    let mut total = 0.0;
    let want = grads.is_some();
    let mut grads = grads;
    for a in anchors {
        let negs = a.negatives.iter().map(|&r| pairs.vector(r));
        let (loss, term) = info_nce_term(pairs.vector(a.anchor), pairs.vector(a.positive), negs, tau, want);
        total += loss;
        if let (Some(g), Some(term)) = (grads.as_deref_mut(), term) {
            let scale = weight * inv;
            let mut add = |r: VecRef, v: &[f64]| {
                let rows = match r.side {
                    Side::Query => &mut g.query[r.entry],
                    Side::Key => &mut g.key[r.entry],
                };
                for (dst, src) in rows[r.position * d..(r.position + 1) * d].iter_mut().zip(v) {
                    *dst += scale * src;
                }
            };
            add(a.anchor, &term.grad_q);
            add(a.positive, &term.grad_pos);
            for (r, gv) in a.negatives.iter().zip(&term.grad_negs) {
                add(*r, gv);
            }
        }
    }
    total * inv
}

fn local_impl(pairs: &PairSet, cfg: &LossConfig, want_grad: bool) -> Result<LocalGrad> {
    cfg.validate()?;
    if pairs.anchors.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    if pairs.anchors.iter().chain(&pairs.reverse_anchors).any(|a| a.negatives.is_empty()) {
        return Err(Error::NoNegativeSource);
    }
    let mut g = LocalGrad {
        loss: 0.0,
        anchors: pairs.anchors.len() + pairs.reverse_anchors.len(),
        query: pairs.query_rows.iter().map(|r| vec![0.0; r.len()]).collect(),
        key: pairs.key_rows.iter().map(|r| vec![0.0; r.len()]).collect(),
    };
    let tau = cfg.temperature;
    let both = cfg.symmetric && !pairs.reverse_anchors.is_empty();
    let w = if both { 0.5 } else { 1.0 };
    let mut loss = w * mean_direction(pairs, &pairs.anchors, tau, want_grad.then_some(&mut g), w);
    if both {
        loss += w * mean_direction(pairs, &pairs.reverse_anchors, tau, want_grad.then_some(&mut g), w);
    }
    g.loss = loss;
    Ok(g)
}

/// Mean per-anchor InfoNCE over the corresponded positions of the batch.
pub fn local_info_nce(pairs: &PairSet, cfg: &LossConfig) -> Result<f64> {
    Ok(local_impl(pairs, cfg, false)?.loss)
}

/// [`local_info_nce`] plus gradients w.r.t. all projection rows.
pub fn local_info_nce_with_grad(pairs: &PairSet, cfg: &LossConfig) -> Result<LocalGrad> {
    local_impl(pairs, cfg, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = math::norm(v);
        v.iter().map(|x| x / n).collect()
    }

    fn cfg(tau: f64) -> LossConfig {
        LossConfig {
            temperature: tau,
            ..LossConfig::default()
        }
    }

    #[test]
    fn identical_positive_orthogonal_negative() {
        let l = global_info_nce(&[1.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]], &cfg(1.0)).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn all_orthogonal_is_uniform() {
        let negs = vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0, -1.0]];
        let l = global_info_nce(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &negs, &cfg(1.0)).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn global_errors() {
        assert!(global_info_nce(&[1.0], &[1.0], &[], &cfg(1.0)).is_err());
        assert!(matches!(
            global_info_nce(&[1.0, 0.0], &[1.0], &[vec![1.0, 0.0]], &cfg(1.0)),
            Err(Error::Shape(_))
        ));
        assert!(global_info_nce(&[1.0], &[1.0], &[vec![1.0]], &cfg(0.0)).is_err());
    }

    fn projection(rows: Vec<f64>, dim: usize, grid: (usize, usize)) -> DenseProjection {
        DenseProjection::from_rows(&rows, dim, grid).unwrap()
    }

    #[test]
    fn two_image_identity_batch_counts() {
        let grid = (2, 2);
        let p: Vec<DenseProjection> = (0..2)
            .map(|n| projection((0..8).map(|i| (i + n) as f64).collect(), 2, grid))
            .collect();
        let corr = CorrespondenceMap::identity(4);
        let batch: Vec<BatchEntry> = (0..2)
            .map(|n| BatchEntry {
                image_id: n as u64,
                query: &p[n],
                key: &p[n],
                correspondence: &corr,
            })
            .collect();
        let set = build_pairs(&batch, &LossConfig::default()).unwrap();
        assert_eq!(set.anchors.len(), 8);
        for a in &set.anchors {
            assert_eq!(a.negatives.len(), 4);
            assert!(a.negatives.iter().all(|r| r.entry != a.anchor.entry && r.side == Side::Key));
            assert_eq!(a.positive.position, a.anchor.position);
        }
    }

    #[test]
    fn empty_correspondence_still_supplies_negatives() {
        let p = projection(vec![1.0, 0.0, 0.0, 1.0], 2, (1, 2));
        let full = CorrespondenceMap::identity(2);
        let empty = CorrespondenceMap::default();
        let batch = [
            BatchEntry { image_id: 0, query: &p, key: &p, correspondence: &full },
            BatchEntry { image_id: 1, query: &p, key: &p, correspondence: &empty },
        ];
        let set = build_pairs(&batch, &LossConfig::default()).unwrap();
        assert_eq!(set.anchors.len(), 2);
        assert!(set.anchors.iter().all(|a| a.negatives.len() == 2 && a.negatives.iter().all(|r| r.entry == 1)));
    }

    #[test]
    fn single_image_batch_rejected() {
        let p = projection(vec![1.0, 0.0], 2, (1, 1));
        let corr = CorrespondenceMap::identity(1);
        let batch = [
            BatchEntry { image_id: 3, query: &p, key: &p, correspondence: &corr },
            BatchEntry { image_id: 3, query: &p, key: &p, correspondence: &corr },
        ];
        assert_eq!(build_pairs(&batch, &LossConfig::default()), Err(Error::NoNegativeSource));
        assert_eq!(build_pairs(&batch[..1], &LossConfig::default()), Err(Error::NoNegativeSource));
    }

    #[test]
    fn subsampling_is_capped_and_reproducible() {
        let p = projection((0..18).map(|i| i as f64).collect(), 2, (3, 3));
        let corr = CorrespondenceMap::identity(9);
        let batch: Vec<BatchEntry> = (0..3)
            .map(|n| BatchEntry { image_id: n, query: &p, key: &p, correspondence: &corr })
            .collect();
        let c = LossConfig {
            negative_subsample: Some(2),
            seed: 17,
            ..LossConfig::default()
        };
        let a = build_pairs(&batch, &c).unwrap();
        let b = build_pairs(&batch, &c).unwrap();
        assert!(a.anchors.iter().all(|x| x.negatives.len() == 2));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_anchors_is_an_error() {
        let p = projection(vec![1.0, 0.0], 2, (1, 1));
        let empty = CorrespondenceMap::default();
        let batch = [
            BatchEntry { image_id: 0, query: &p, key: &p, correspondence: &empty },
            BatchEntry { image_id: 1, query: &p, key: &p, correspondence: &empty },
        ];
        let set = build_pairs(&batch, &LossConfig::default()).unwrap();
        assert_eq!(local_info_nce(&set, &LossConfig::default()), Err(Error::NoCorrespondences));
    }

    #[test]
    fn perfect_positive_orthogonal_negative_batch() {
        // image 0 lives on e0, image 1 on e1: each anchor's only negative is orthogonal
        let p0 = projection(vec![1.0, 0.0], 2, (1, 1));
        let p1 = projection(vec![0.0, 1.0], 2, (1, 1));
        let corr = CorrespondenceMap::identity(1);
        let batch = [
            BatchEntry { image_id: 0, query: &p0, key: &p0, correspondence: &corr },
            BatchEntry { image_id: 1, query: &p1, key: &p1, correspondence: &corr },
        ];
        let set = build_pairs(&batch, &cfg(1.0)).unwrap();
        let l = local_info_nce(&set, &cfg(1.0)).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_average_of_symmetric_batch_matches_one_direction() {
        let p0 = projection(unit(&[1.0, 0.2]), 2, (1, 1));
        let p1 = projection(unit(&[0.3, 1.0]), 2, (1, 1));
        let corr = CorrespondenceMap::identity(1);
        let batch = [
            BatchEntry { image_id: 0, query: &p0, key: &p0, correspondence: &corr },
            BatchEntry { image_id: 1, query: &p1, key: &p1, correspondence: &corr },
        ];
        let one = local_info_nce(&build_pairs(&batch, &cfg(0.5)).unwrap(), &cfg(0.5)).unwrap();
        let sym_cfg = LossConfig { symmetric: true, ..cfg(0.5) };
        let set = build_pairs(&batch, &sym_cfg).unwrap();
        assert_eq!(set.reverse_anchors.len(), 2);
        let both = local_info_nce(&set, &sym_cfg).unwrap();
        assert!((one - both).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn loss_decreases_as_positive_aligns(a in 0.0f64..1.4, b in 0.0f64..1.4) {
            // positive at angle θ from q; smaller angle, larger q·k⁺
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            proptest::prop_assume!(hi - lo > 1e-6);
            let q = [1.0, 0.0, 0.0];
            let negs = vec![unit(&[0.2, 0.1, 1.0]), unit(&[-0.5, 0.3, 0.2])];
            let at = |t: f64| global_info_nce(&q, &[t.cos(), t.sin(), 0.0], &negs, &cfg(0.2)).unwrap();
            proptest::prop_assert!(at(lo) < at(hi));
            proptest::prop_assert!(at(hi) > 0.0);
        }
    }
}
