//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the summary prints even
//! when everything passes. Set `DCLSEG_ACCEPTANCE_ONLY=3,5` to run a subset.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dclseg_core::decoder::{ssf_loss_with_grad, ProbMap};
use dclseg_core::losses::{
    build_pairs, global_info_nce, local_info_nce, local_info_nce_with_grad, BatchEntry, LossConfig, Side,
};
use dclseg_core::metrics::{assd, dice, evaluate_volume, hausdorff, BinaryMask};
use dclseg_core::model::{DenseProjection, FeatureMap, ProjectionHead};
use dclseg_core::params::ParamSet;
use dclseg_core::rng::Rng;
use dclseg_core::synth::{toy_dataset, ToyConfig};
use dclseg_core::tensor::Tensor;
use dclseg_core::train::{finetune, predict_volume, pretrain, volume_slices, ModelConfig, ModelState, NoObserver, TrainConfig, TrainImage};
use dclseg_core::types::{LabelMask, Spacing, Volume};
use dclseg_core::views::{correspondence_map, GeometricTransform};

type Outcome = Result<String, String>;

fn main() {
    let only: Option<Vec<u32>> = std::env::var("DCLSEG_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "InfoNCE matches term-by-term oracle", c1_info_nce),
        (2, "single-cell local loss equals global loss", c2_local_equals_global),
        (3, "analytic gradients match finite differences", c3_gradients),
        (4, "correspondences match brute-force voting", c4_correspondence),
        (5, "metrics match brute-force oracle", c5_metrics),
        (6, "overfit at L=100% reaches training DSC > 0.95", c6_overfit),
        (7, "pre-trained init >= scratch at L=25% (5 seeds)", c7_pretrained_vs_scratch),
        (8, "deterministic CLI runs are bit-exact", c8_determinism),
        (9, "resume equals uninterrupted run", c9_resume),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} PASS ({secs:.1}s) {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL ({secs:.1}s) {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unit_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct transcription: −log(exp(s⁺) / (exp(s⁺) + Σ exp(s⁻))).
fn oracle_nce(q: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let num = (dot(q, pos) / tau).exp();
    let den = num + negs.iter().map(|k| (dot(q, k) / tau).exp()).sum::<f64>();
    -(num / den).ln()
}

fn random_projection(rng: &mut Rng, d: usize, grid: (usize, usize)) -> DenseProjection {
    let rows: Vec<f64> = (0..grid.0 * grid.1).flat_map(|_| unit_vec(rng, d)).collect();
    DenseProjection::from_rows(&rows, d, grid).unwrap()
}

fn c1_info_nce() -> Outcome {
    let mut rng = Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let d = 2 + rng.below(15);
        let tau = rng.uniform_range(0.05, 1.0);
        let q = unit_vec(&mut rng, d);
        let pos = unit_vec(&mut rng, d);
        let negs: Vec<Vec<f64>> = (0..1 + rng.below(12)).map(|_| unit_vec(&mut rng, d)).collect();
        let cfg = LossConfig { temperature: tau, ..LossConfig::default() };
        let got = global_info_nce(&q, &pos, &negs, &cfg).map_err(|e| e.to_string())?;
        let err = (got - oracle_nce(&q, &pos, &negs, tau)).abs();
        worst = worst.max(err);
        check(err < 1e-6, || format!("global case {case}: error {err:e}"))?;
    }
    // Dense loss: mean of per-position terms with other images' key cells as negatives.
    for case in 0..50 {
        let d = 2 + rng.below(6);
        let tau = rng.uniform_range(0.05, 1.0);
        let grid = (1 + rng.below(3), 1 + rng.below(3));
        let b = 2 + rng.below(3);
        let queries: Vec<DenseProjection> = (0..b).map(|_| random_projection(&mut rng, d, grid)).collect();
        let keys: Vec<DenseProjection> = (0..b).map(|_| random_projection(&mut rng, d, grid)).collect();
        let n = grid.0 * grid.1;
        let corrs: Vec<_> = (0..b)
            .map(|_| {
                let mut pairs = Vec::new();
                for i in 0..n {
                    if rng.bernoulli(0.7) {
                        pairs.push((i, rng.below(n)));
                    }
                }
                if pairs.is_empty() {
                    pairs.push((0, 0));
                }
                dclseg_core::views::CorrespondenceMap { pairs }
            })
            .collect();
        let batch: Vec<BatchEntry> = (0..b)
            .map(|i| BatchEntry {
                image_id: i as u64,
                query: &queries[i],
                key: &keys[i],
                correspondence: &corrs[i],
            })
            .collect();
        let cfg = LossConfig { temperature: tau, ..LossConfig::default() };
        let pairs = build_pairs(&batch, &cfg).map_err(|e| e.to_string())?;
        let got = local_info_nce(&pairs, &cfg).map_err(|e| e.to_string())?;
        let (mut total, mut count) = (0.0, 0usize);
        for i in 0..b {
            let (qr, kr) = (queries[i].rows(), keys[i].rows());
            let negs: Vec<Vec<f64>> = (0..b)
                .filter(|&j| j != i)
                .flat_map(|j| keys[j].rows().chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>())
                .collect();
            for &(a, p) in &corrs[i].pairs {
                total += oracle_nce(&qr[a * d..(a + 1) * d], &kr[p * d..(p + 1) * d], &negs, tau);
                count += 1;
            }
        }
        let err = (got - total / count as f64).abs();
        worst = worst.max(err);
        check(err < 1e-6, || format!("dense case {case}: error {err:e}"))?;
    }
    // Closed forms.
    let cfg1 = LossConfig { temperature: 1.0, ..LossConfig::default() };
    let l = global_info_nce(&[1.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]], &cfg1).unwrap();
    check((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12, || format!("ln(1+e^-1) form gave {l}"))?;
    let e = [0.0, 0.0, 1.0];
    let negs = vec![vec![0.0, 1.0, 0.0]; 4];
    let l = global_info_nce(&[1.0, 0.0, 0.0], &e, &negs, &cfg1).unwrap();
    check((l - 5f64.ln()).abs() < 1e-12, || format!("orthogonal form gave {l}, expected ln 5"))?;
    Ok(format!("100 random cases + 2 closed forms, max |err| {worst:.1e}"))
}

fn c2_local_equals_global() -> Outcome {
    let mut rng = Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let identity = dclseg_core::views::CorrespondenceMap::identity(1);
    for case in 0..50 {
        let d = 2 + rng.below(10);
        let b = 2 + rng.below(6);
        let tau = rng.uniform_range(0.05, 1.0);
        let cfg = LossConfig { temperature: tau, ..LossConfig::default() };
        let qs: Vec<Vec<f64>> = (0..b).map(|_| unit_vec(&mut rng, d)).collect();
        let ks: Vec<Vec<f64>> = (0..b).map(|_| unit_vec(&mut rng, d)).collect();
        let qp: Vec<DenseProjection> = qs.iter().map(|v| DenseProjection::from_rows(v, d, (1, 1)).unwrap()).collect();
        let kp: Vec<DenseProjection> = ks.iter().map(|v| DenseProjection::from_rows(v, d, (1, 1)).unwrap()).collect();
        let batch: Vec<BatchEntry> = (0..b)
            .map(|i| BatchEntry {
                image_id: i as u64,
                query: &qp[i],
                key: &kp[i],
                correspondence: &identity,
            })
            .collect();
        let local = local_info_nce(&build_pairs(&batch, &cfg).map_err(|e| e.to_string())?, &cfg).map_err(|e| e.to_string())?;
        let global: f64 = (0..b)
            .map(|i| {
                let negs: Vec<Vec<f64>> = (0..b).filter(|&j| j != i).map(|j| ks[j].clone()).collect();
                global_info_nce(&qs[i], &ks[i], &negs, &cfg).unwrap()
            })
            .sum::<f64>()
            / b as f64;
        let err = (local - global).abs();
        worst = worst.max(err);
        check(err < 1e-9, || format!("case {case}: local {local} vs global {global}"))?;
    }
    Ok(format!("50 batches, max |local - global| {worst:.1e}"))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn c3_gradients() -> Outcome {
    const H: f64 = 1e-5;
    let mut rng = Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut checked = 0usize;

    // Dense contrastive loss w.r.t. every projection row.
    for symmetric in [false, true] {
        let d = 4;
        let grid = (2, 2);
        let queries: Vec<DenseProjection> = (0..3).map(|_| random_projection(&mut rng, d, grid)).collect();
        let keys: Vec<DenseProjection> = (0..3).map(|_| random_projection(&mut rng, d, grid)).collect();
        let corr = dclseg_core::views::CorrespondenceMap { pairs: vec![(0, 1), (1, 0), (3, 3)] };
        let batch: Vec<BatchEntry> = (0..3)
            .map(|i| BatchEntry {
                image_id: i as u64,
                query: &queries[i],
                key: &keys[i],
                correspondence: &corr,
            })
            .collect();
        let cfg = LossConfig { temperature: 0.2, symmetric, ..LossConfig::default() };
        let pairs = build_pairs(&batch, &cfg).map_err(|e| e.to_string())?;
        let g = local_info_nce_with_grad(&pairs, &cfg).map_err(|e| e.to_string())?;
        for entry in 0..3 {
            for side in [Side::Query, Side::Key] {
                for idx in 0..pairs.rows(entry, side).len() {
                    let mut plus = pairs.clone();
                    plus.rows_mut(entry, side)[idx] += H;
                    let mut minus = pairs.clone();
                    minus.rows_mut(entry, side)[idx] -= H;
                    let fd = (local_info_nce(&plus, &cfg).unwrap() - local_info_nce(&minus, &cfg).unwrap()) / (2.0 * H);
                    let an = g.rows(entry, side)[idx];
                    let e = rel_err(an, fd);
                    worst = worst.max(e);
                    checked += 1;
                    check(e < 1e-4, || format!("local loss entry {entry} {side:?}[{idx}]: {an} vs {fd}"))?;
                }
            }
        }
    }

    // Cross-supervision loss w.r.t. both probability maps, labeled and unlabeled.
    let (c, h, w) = (2, 3, 4);
    let probs = |rng: &mut Rng| {
        let v: Vec<f64> = (0..c * h * w)
            .map(|_| {
                let p = rng.uniform_range(0.05, 0.9);
                if (p - 0.5).abs() < 0.01 { 0.45 } else { p }
            })
            .collect();
        ProbMap::new(Tensor::from_vec(&[c, h, w], v).unwrap()).unwrap()
    };
    let p1 = probs(&mut rng);
    let p2 = probs(&mut rng);
    let labels: Vec<u8> = (0..h * w).map(|_| rng.below(c + 1) as u8).collect();
    let mask = LabelMask::new([1, h, w], labels, c as u8).unwrap();
    for target in [Some(&mask), None] {
        let s = ssf_loss_with_grad(&p1, &p2, target, 0.5).map_err(|e| e.to_string())?;
        for which in 0..2 {
            for i in 0..c * h * w {
                let eval = |delta: f64| {
                    let (mut a, mut b) = (p1.clone(), p2.clone());
                    let m = if which == 0 { &mut a } else { &mut b };
                    m.probs.data_mut()[i] += delta;
                    ssf_loss_with_grad(&a, &b, target, 0.5).unwrap().loss
                };
                let fd = (eval(H) - eval(-H)) / (2.0 * H);
                let an = if which == 0 { s.grad_p1.data()[i] } else { s.grad_p2.data()[i] };
                let e = rel_err(an, fd);
                worst = worst.max(e);
                checked += 1;
                check(e < 1e-4, || format!("SSF p{}[{i}]: {an} vs {fd}", which + 1))?;
            }
        }
    }

    // Dense projection head w.r.t. its weights and the feature map, via a random linear read-out.
    let head = ProjectionHead::new(5, 3, "proj.");
    let mut params = ParamSet::new();
    head.init(&mut params, &mut rng);
    let bias = params.get_mut("proj.conv.bias").map_err(|e| e.to_string())?;
    for b in bias.data_mut() {
        *b = 0.1 * rng.normal();
    }
    let fm_vals: Vec<f64> = (0..5 * 2 * 3).map(|_| rng.normal()).collect();
    let fm = FeatureMap::new(Tensor::from_vec(&[5, 2, 3], fm_vals).unwrap(), 8).unwrap();
    let readout: Vec<f64> = (0..3 * 2 * 3).map(|_| rng.normal()).collect();
    let objective = |params: &ParamSet, fm: &FeatureMap| -> f64 {
        dot(head.project(params, fm).unwrap().vectors.data(), &readout)
    };
    let (_, trace) = head.forward(&params, &fm).map_err(|e| e.to_string())?;
    let mut grads = ParamSet::new();
    let grad_fm = head
        .backward(&params, &trace, &Tensor::from_vec(&[3, 2, 3], readout.clone()).unwrap(), &mut grads)
        .map_err(|e| e.to_string())?;
    for i in 0..fm.values.len() {
        let (mut a, mut b) = (fm.clone(), fm.clone());
        a.values.data_mut()[i] += H;
        b.values.data_mut()[i] -= H;
        let fd = (objective(&params, &a) - objective(&params, &b)) / (2.0 * H);
        let e = rel_err(grad_fm.data()[i], fd);
        worst = worst.max(e);
        checked += 1;
        check(e < 1e-4, || format!("projection input[{i}]: {} vs {fd}", grad_fm.data()[i]))?;
    }
    for name in ["proj.conv.weight", "proj.conv.bias"] {
        let n = params.get(name).unwrap().len();
        for i in 0..n {
            let (mut a, mut b) = (params.clone(), params.clone());
            a.get_mut(name).unwrap().data_mut()[i] += H;
            b.get_mut(name).unwrap().data_mut()[i] -= H;
            let fd = (objective(&a, &fm) - objective(&b, &fm)) / (2.0 * H);
            let an = grads.get(name).map_err(|e| e.to_string())?.data()[i];
            let e = rel_err(an, fd);
            worst = worst.max(e);
            checked += 1;
            check(e < 1e-4, || format!("{name}[{i}]: {an} vs {fd}"))?;
        }
    }
    Ok(format!("{checked} partial derivatives, max rel err {worst:.1e}"))
}

/// Per-pixel voting from scratch, using only the transforms' affine parts.
fn oracle_correspondence(
    t_q: &GeometricTransform,
    t_k: &GeometricTransform,
    grid: (usize, usize),
    dims: (usize, usize),
) -> Vec<(usize, usize)> {
    let (dh, dw) = grid;
    let (h, w) = dims;
    let (ch, cw) = (h / dh, w / dw);
    let (rq, sq, oq) = t_q.parts();
    let (rk, sk, ok) = t_k.parts();
    // view = s·R·src + o, so src = Rᵀ(view − o)/s
    let to_src = |v: [f64; 2]| -> [f64; 2] {
        let d = [v[0] - oq[0] as f64, v[1] - oq[1] as f64];
        [
            (rq[0][0] as f64 * d[0] + rq[1][0] as f64 * d[1]) / sq as f64,
            (rq[0][1] as f64 * d[0] + rq[1][1] as f64 * d[1]) / sq as f64,
        ]
    };
    let to_key = |s: [f64; 2]| -> [f64; 2] {
        [
            sk as f64 * (rk[0][0] as f64 * s[0] + rk[0][1] as f64 * s[1]) + ok[0] as f64,
            sk as f64 * (rk[1][0] as f64 * s[0] + rk[1][1] as f64 * s[1]) + ok[1] as f64,
        ]
    };
    let mut votes = vec![vec![0u64; dh * dw]; dh * dw];
    for r in 0..h {
        for c in 0..w {
            let src = to_src([r as f64 + 0.5, c as f64 + 0.5]);
            if !(src[0] >= 0.0 && src[0] < h as f64 && src[1] >= 0.0 && src[1] < w as f64) {
                continue;
            }
            let k = to_key(src);
            let (kr, kc) = (k[0].floor(), k[1].floor());
            if kr < 0.0 || kc < 0.0 || kr >= h as f64 || kc >= w as f64 {
                continue;
            }
            let qcell = (r / ch) * dw + c / cw;
            let kcell = (kr as usize / ch) * dw + kc as usize / cw;
            votes[qcell][kcell] += 1;
        }
    }
    let mut out = Vec::new();
    for (qcell, v) in votes.iter().enumerate() {
        let best = *v.iter().max().unwrap();
        if best == 0 {
            continue;
        }
        let center = to_key(to_src([
            (qcell / dw) as f64 * ch as f64 + ch as f64 / 2.0,
            (qcell % dw) as f64 * cw as f64 + cw as f64 / 2.0,
        ]));
        let dist = |k: usize| {
            let y = (k / dw) as f64 * ch as f64 + ch as f64 / 2.0;
            let x = (k % dw) as f64 * cw as f64 + cw as f64 / 2.0;
            (y - center[0]).powi(2) + (x - center[1]).powi(2)
        };
        let mut pick: Option<usize> = None;
        for k in (0..dh * dw).filter(|&k| v[k] == best) {
            if pick.map_or(true, |p| dist(k) < dist(p)) {
                pick = Some(k);
            }
        }
        out.push((qcell, pick.unwrap()));
    }
    out
}

fn random_transform(rng: &mut Rng, kind: usize, dims: (usize, usize), cell: usize) -> GeometricTransform {
    let (h, w) = dims;
    let shift = |rng: &mut Rng| rng.int_inclusive(-(2 * cell as i64), 2 * cell as i64);
    let scales: Vec<usize> = [2usize, 4].into_iter().filter(|s| h % s == 0 && w % s == 0).collect();
    let crop = |rng: &mut Rng| {
        if scales.is_empty() {
            return GeometricTransform::identity();
        }
        let s = scales[rng.below(scales.len())];
        let oy = rng.below(h - h / s + 1);
        let ox = rng.below(w - w / s + 1);
        GeometricTransform::crop_resize((oy, ox), s, dims).unwrap()
    };
    match kind {
        0 => GeometricTransform::identity(),
        1 => GeometricTransform::translation(shift(rng), shift(rng)),
        2 => GeometricTransform::flip_h(w),
        3 => GeometricTransform::flip_v(h),
        4 if h == w => GeometricTransform::rotation90(1 + rng.below(3) as u32, h),
        5 => crop(rng),
        _ => {
            let mut t = crop(rng);
            if rng.bernoulli(0.5) {
                t = t.then(&GeometricTransform::flip_h(w));
            }
            if rng.bernoulli(0.5) {
                t = t.then(&GeometricTransform::flip_v(h));
            }
            if h == w && rng.bernoulli(0.5) {
                t = t.then(&GeometricTransform::rotation90(1 + rng.below(3) as u32, h));
            }
            t.then(&GeometricTransform::translation(shift(rng), shift(rng)))
        }
    }
}

fn c4_correspondence() -> Outcome {
    let mut rng = Rng::seed_from_u64(404);
    let mut cases = 0usize;
    for dh in 1..=8 {
        for dw in 1..=8 {
            for cell in [1usize, 2, 4] {
                let dims = (dh * cell, dw * cell);
                for kq in 0..7 {
                    for kk in 0..7 {
                        let t_q = random_transform(&mut rng, kq, dims, cell);
                        let t_k = random_transform(&mut rng, kk, dims, cell);
                        let got = correspondence_map(&t_q, &t_k, (dh, dw), dims).map_err(|e| e.to_string())?;
                        let want = oracle_correspondence(&t_q, &t_k, (dh, dw), dims);
                        check(got.pairs == want, || {
                            format!("grid {dh}x{dw} cell {cell}: {:?} / {:?} differ", t_q, t_k)
                        })?;
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{cases} transform pairs on grids 1x1..8x8, all exact"))
}

fn oracle_boundary(bits: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && bits[y as usize * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            if at(yi, xi) && !(at(yi - 1, xi) && at(yi + 1, xi) && at(yi, xi - 1) && at(yi, xi + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn oracle_directed(from: &[(usize, usize)], to: &[(usize, usize)], sy: f64, sx: f64) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| ((y as f64 - v as f64) * sy).hypot((x as f64 - u as f64) * sx))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn oracle_percentile(v: &[f64], pct: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (s.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    s[lo] + (rank - lo as f64) * (s[hi] - s[lo])
}

fn c5_metrics() -> Outcome {
    let mut rng = Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (h, w) = (1 + rng.below(16), 1 + rng.below(16));
        let density = rng.uniform_range(0.0, 0.8);
        let sample = |rng: &mut Rng| (0..h * w).map(|_| rng.bernoulli(density)).collect::<Vec<bool>>();
        let a = sample(&mut rng);
        let b = if rng.bernoulli(0.2) { a.clone() } else { sample(&mut rng) };
        let (sy, sx) = (rng.uniform_range(0.5, 2.0), rng.uniform_range(0.5, 2.0));
        let spacing = Spacing([1.0, sy, sx]);
        let ma = BinaryMask::new_2d(h, w, a.clone()).unwrap();
        let mb = BinaryMask::new_2d(h, w, b.clone()).unwrap();

        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
        let want_dice = if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 };
        let got_dice = dice(&ma, &mb).unwrap();
        check(got_dice == want_dice, || format!("case {case}: dice {got_dice} vs {want_dice}"))?;

        let (ba, bb) = (oracle_boundary(&a, h, w), oracle_boundary(&b, h, w));
        let got_assd = assd(&ma, &mb, spacing).unwrap();
        let got_hd = hausdorff(&ma, &mb, spacing, 100.0).unwrap();
        let got_hd95 = hausdorff(&ma, &mb, spacing, 95.0).unwrap();
        if ba.is_empty() || bb.is_empty() {
            check(got_assd.is_none() && got_hd.is_none(), || format!("case {case}: distances should be undefined"))?;
            continue;
        }
        let ab = oracle_directed(&ba, &bb, sy, sx);
        let ba_d = oracle_directed(&bb, &ba, sy, sx);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let want_assd = 0.5 * (mean(&ab) + mean(&ba_d));
        let want_hd = oracle_percentile(&ab, 100.0).max(oracle_percentile(&ba_d, 100.0));
        let want_hd95 = oracle_percentile(&ab, 95.0).max(oracle_percentile(&ba_d, 95.0));
        for (label, got, want) in [("assd", got_assd, want_assd), ("hd", got_hd, want_hd), ("hd95", got_hd95, want_hd95)] {
            let got = got.ok_or_else(|| format!("case {case}: {label} undefined"))?;
            let e = (got - want).abs();
            worst = worst.max(e);
            check(e < 1e-9, || format!("case {case}: {label} {got} vs {want}"))?;
        }
    }
    Ok(format!("200 mask pairs, dice exact, max distance err {worst:.1e}"))
}

fn mean_dsc(state: &ModelState, data: &[(Volume, LabelMask)]) -> f64 {
    let total: f64 = data
        .iter()
        .map(|(v, m)| {
            let p = predict_volume(state, v, 0.5).unwrap();
            evaluate_volume(&p, m, v.spacing(), 100.0).unwrap().mean_dsc
        })
        .sum();
    total / data.len() as f64
}

fn slices(data: &[(Volume, LabelMask)], ids: std::ops::Range<usize>, labeled: bool) -> Vec<TrainImage> {
    ids.flat_map(|i| volume_slices(i as u64, &data[i].0, labeled.then_some(&data[i].1)).unwrap())
        .collect()
}

fn c6_overfit() -> Outcome {
    let data = toy_dataset(&ToyConfig { n_volumes: 14, seed: 7, ..ToyConfig::default() }).map_err(|e| e.to_string())?;
    let labeled = slices(&data, 0..14, true);
    let mut state = ModelState::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { learning_rate: 3e-3, steps: 300, batch_size: 8, seed: 0, ..TrainConfig::default() };
    finetune(&mut state, &labeled, &[], &[], &cfg, &mut NoObserver).map_err(|e| e.to_string())?;
    let dsc = mean_dsc(&state, &data);
    check(dsc > 0.95, || format!("training DSC {dsc:.4} after {} steps", cfg.steps))?;
    Ok(format!("training DSC {dsc:.4} after {} steps", cfg.steps))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn c7_pretrained_vs_scratch() -> Outcome {
    // 20 volumes: 16 train (4 labeled = 25%), 4 held out.
    let data = toy_dataset(&ToyConfig { n_volumes: 20, seed: 7, ..ToyConfig::default() }).map_err(|e| e.to_string())?;
    let labeled = slices(&data, 0..4, true);
    let unlabeled = slices(&data, 4..16, false);
    let pool = slices(&data, 0..16, false);
    let held_out: Vec<u64> = (16..20).collect();
    let test = &data[16..];
    let (mut pre, mut scratch) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        for pretrained in [true, false] {
            let mut state = ModelState::new(ModelConfig { init_seed: seed, ..ModelConfig::default() }).map_err(|e| e.to_string())?;
            if pretrained {
                let cfg = TrainConfig { learning_rate: 1e-3, steps: C7_PRETRAIN_STEPS, batch_size: 8, seed, ..TrainConfig::default() };
                pretrain(&mut state, &pool, &held_out, &cfg, &mut NoObserver).map_err(|e| e.to_string())?;
            }
            let cfg = TrainConfig {
                learning_rate: 3e-3,
                steps: C7_FINETUNE_STEPS,
                batch_size: 4,
                seed,
                rampup_steps: 100,
                ..TrainConfig::default()
            };
            finetune(&mut state, &labeled, &unlabeled, &held_out, &cfg, &mut NoObserver).map_err(|e| e.to_string())?;
            let dsc = mean_dsc(&state, test);
            if pretrained { pre.push(dsc) } else { scratch.push(dsc) }
        }
    }
    let (pm, ps) = mean_std(&pre);
    let (sm, ss) = mean_std(&scratch);
    let detail = format!("pre-trained {pm:.4} ± {ps:.4} vs scratch {sm:.4} ± {ss:.4} held-out DSC");
    check(pm >= sm - 0.02, || detail.clone())?;
    Ok(detail)
}

const C7_PRETRAIN_STEPS: u64 = 400;
const C7_FINETUNE_STEPS: u64 = 200;

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_dclseg"))
        .current_dir(dir)
        .env_remove("DCLSEG_DATA_DIR")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("`dclseg {}` failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr)))
    }
}

fn read(path: impl AsRef<Path>) -> Result<Vec<u8>, String> {
    fs::read(path.as_ref()).map_err(|e| format!("{}: {e}", path.as_ref().display()))
}

fn c8_determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    run_cli(dir, &["--seed", "7", "gen-data", "--n", "8", "--dims", "2x32x32"])?;
    for run in ["a", "b"] {
        let out = format!("runs_{run}");
        let common = ["--deterministic", "--seed", "11", "--out-dir", out.as_str()];
        let mut args = common.to_vec();
        args.extend(["pretrain", "--steps", "50", "--batch-size", "4", "--lr", "1e-3"]);
        run_cli(dir, &args)?;
        let ckpt = format!("{out}/pretrain/checkpoint.ckpt");
        let mut args = common.to_vec();
        args.extend(["finetune", "--init", ckpt.as_str(), "--steps", "50", "--batch-size", "4", "--lr", "1e-3"]);
        run_cli(dir, &args)?;
        let ft = format!("{out}/finetune/seed_11/checkpoint.ckpt");
        let mut args = common.to_vec();
        args.extend(["evaluate", "--checkpoint", ft.as_str(), "--hd-percentile", "95"]);
        run_cli(dir, &args)?;
    }
    let files = [
        "pretrain/curve.tsv",
        "pretrain/checkpoint.ckpt",
        "pretrain/run.json",
        "finetune/seed_11/curve.tsv",
        "finetune/seed_11/checkpoint.ckpt",
        "finetune/summary.json",
        "evaluate/report.json",
        "evaluate/per_volume.tsv",
        "evaluate/run.json",
    ];
    for f in files {
        let (a, b) = (read(dir.join("runs_a").join(f))?, read(dir.join("runs_b").join(f))?);
        check(a == b, || format!("{f} differs between identical runs"))?;
    }
    let rows = String::from_utf8_lossy(&read(dir.join("runs_a/pretrain/curve.tsv"))?).lines().count() - 1;
    check(rows == 50, || format!("curve has {rows} rows, expected 50"))?;
    Ok(format!("{} artifacts byte-identical across two 50-step runs", files.len()))
}

fn last_loss(curve: &[u8]) -> Result<String, String> {
    let text = String::from_utf8_lossy(curve);
    let line = text.lines().last().ok_or("empty curve")?;
    Ok(line.split('\t').nth(1).ok_or("malformed curve row")?.to_string())
}

fn c9_resume() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    run_cli(dir, &["--seed", "5", "gen-data", "--n", "8", "--dims", "2x32x32"])?;
    let base = ["--deterministic", "--seed", "3"];
    let mut details = Vec::new();
    for stage in ["pretrain", "finetune"] {
        let extra: &[&str] = if stage == "finetune" { &["--from-scratch"] } else { &[] };
        let with = |out: &str, more: &[&str]| {
            let mut a: Vec<String> = base.iter().map(|s| s.to_string()).collect();
            a.extend(["--out-dir".into(), out.into(), stage.into()]);
            a.extend(["--steps", "30", "--batch-size", "4", "--lr", "1e-3"].map(String::from));
            a.extend(more.iter().map(|s| s.to_string()));
            a
        };
        let full = with("full", extra);
        run_cli(dir, &full.iter().map(String::as_str).collect::<Vec<_>>())?;
        let mut first = extra.to_vec();
        first.extend(["--stop-at", "12"]);
        let part = with("split", &first);
        run_cli(dir, &part.iter().map(String::as_str).collect::<Vec<_>>())?;
        let sub = if stage == "finetune" { "finetune/seed_3" } else { "pretrain" };
        let ckpt = format!("split/{sub}/checkpoint.ckpt");
        let resumed = with("split", &["--resume", ckpt.as_str()]);
        run_cli(dir, &resumed.iter().map(String::as_str).collect::<Vec<_>>())?;
        let a = read(dir.join(format!("full/{sub}/curve.tsv")))?;
        let b = read(dir.join(format!("split/{sub}/curve.tsv")))?;
        let (la, lb) = (last_loss(&a)?, last_loss(&b)?);
        check(la == lb, || format!("{stage}: final loss {la} vs resumed {lb}"))?;
        check(a == b, || format!("{stage}: loss curves differ after resume"))?;
        let ca = read(dir.join(format!("full/{sub}/checkpoint.ckpt")))?;
        let cb = read(dir.join(format!("split/{sub}/checkpoint.ckpt")))?;
        check(ca == cb, || format!("{stage}: final checkpoints differ"))?;
        details.push(format!("{stage} 12+18 steps final loss {la}"));
    }
    Ok(format!("{}; |Δ| = 0 and checkpoints identical", details.join(", ")))
}
