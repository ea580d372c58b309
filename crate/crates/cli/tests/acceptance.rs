//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpis::datasets::{load_index, write_index, DatasetIndex, Split};
use tpis::evalmetrics::{
    average_precision, dice, evaluate, iou, mean_average_precision, EvalOptions, PixelConfusion, ScoredBox,
    TruthBox,
};
use tpis::imgcore::Raster;
use tpis::instancing::{
    close_contours, extract_instances, fill_mask, mask_to_bbox, BBox, BinaryMask, InstancingConfig, LabelMap,
};
use tpis::neuralseg::gradcheck::{check_all, Perturbation, TOLERANCE};
use tpis::neuralseg::{focal_loss, read_model, write_model, FeatureTensor};
use tpis::tenpool::{compute_tensors, multiscale_tensor, TensorPoolConfig};
use tpis_cli::commands::{cache_paths, cmd_eval, cmd_infer, cmd_prep, cmd_synth, cmd_train, load_manifest, read_predictions, InferOptions, InferSource};
use tpis_cli::config::RunConfig;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Verdict) -> Verdict {
    let t = Instant::now();
    let v = f();
    let spent = t.elapsed();
    verdict(
        v.passed && spent < limit,
        format!("{} ({:.1}s, limit {}s)", v.detail, spent.as_secs_f64(), limit.as_secs()),
    )
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|_| rng.gen()).collect()
}

fn raster(h: usize, w: usize, data: Vec<f64>) -> Raster {
    Raster::new(h, w, 1, data).expect("valid raster")
}

// Reference image operations, written directly from their definitions.

fn refl(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Sobel derivative along `theta`, stencil scaled by 1/8.
fn ref_gradient(img: &[f64], h: usize, w: usize, theta: f64) -> Vec<f64> {
    let sx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let sy = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let (c, s) = (theta.cos(), theta.sin());
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for q in 0..w {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    let v = img[refl(r as isize + a as isize - 1, h) * w + refl(q as isize + b as isize - 1, w)];
                    acc += (c * sx[a][b] + s * sy[a][b]) / 8.0 * v;
                }
            }
            out[r * w + q] = acc;
        }
    }
    out
}

/// Full 2-D Gaussian window of radius ceil(3 sigma).
fn ref_smooth(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let rad = (3.0 * sigma).ceil() as isize;
    let mut win = Vec::new();
    for dy in -rad..=rad {
        for dx in -rad..=rad {
            win.push((dy, dx, (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp()));
        }
    }
    let total: f64 = win.iter().map(|t| t.2).sum();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for q in 0..w {
            out[r * w + q] = win
                .iter()
                .map(|&(dy, dx, v)| v / total * img[refl(r as isize + dy, h) * w + refl(q as isize + dx, w)])
                .sum();
        }
    }
    out
}

/// Tensor entries in (k, m), k <= m order.
fn ref_tensors(img: &[f64], h: usize, w: usize, n: usize, sigma: f64) -> Vec<Vec<f64>> {
    let grads: Vec<Vec<f64>> = (0..n).map(|j| ref_gradient(img, h, w, 2.0 * PI * j as f64 / n as f64)).collect();
    let mut out = Vec::new();
    for k in 0..n {
        for m in k..n {
            let prod: Vec<f64> = grads[k].iter().zip(&grads[m]).map(|(a, b)| a * b).collect();
            out.push(ref_smooth(&prod, h, w, sigma));
        }
    }
    out
}

fn ref_coherent(tensors: &[Vec<f64>], top_k: usize) -> Vec<f64> {
    let norm = |t: &Vec<f64>| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut ranked: Vec<&Vec<f64>> = tensors.iter().collect();
    ranked.sort_by(|a, b| norm(b).partial_cmp(&norm(a)).unwrap());
    let mut acc = vec![0.0; tensors[0].len()];
    for t in &ranked[..top_k] {
        for (a, v) in acc.iter_mut().zip(t.iter()) {
            *a += v.abs();
        }
    }
    acc
}

fn ref_pool(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h / 2 * w / 2];
    for r in 0..h / 2 {
        for q in 0..w / 2 {
            let s = img[2 * r * w + 2 * q] + img[2 * r * w + 2 * q + 1] + img[(2 * r + 1) * w + 2 * q] + img[(2 * r + 1) * w + 2 * q + 1];
            out[r * (w / 2) + q] = s / 4.0;
        }
    }
    out
}

fn ref_unpool(img: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * f * w * f];
    for r in 0..h * f {
        for q in 0..w * f {
            out[r * w * f + q] = img[r / f * w + q / f];
        }
    }
    out
}

fn ref_minmax(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Tensor pooling, step by step: level 0 adds the coherent tensor; each
/// further level pools the image and the previous coherent tensor, weights
/// the image by the pooled tensor (scaled to unit peak), recomputes and adds
/// the result replicated back to full size.
fn ref_algorithm(scan: &[f64], rows: usize, cols: usize, levels: usize, n: usize, sigma: f64) -> (Vec<f64>, usize) {
    let eta = 2;
    let mut mt = vec![0.0; rows * cols];
    let mut img = scan.to_vec();
    let (mut s, mut t) = (rows, cols);
    let mut ic = Vec::new();
    let mut used = 0;
    for i in 0..levels {
        if i == 0 {
            let tensors = ref_tensors(&img, s, t, n, sigma);
            ic = ref_coherent(&tensors, n);
            for (a, b) in mt.iter_mut().zip(&ic) {
                *a += b;
            }
        } else {
            if s % eta != 0 || t % eta != 0 || s.min(t) < eta {
                break;
            }
            img = ref_pool(&img, s, t);
            let mut pooled = ref_pool(&ic, s, t);
            s /= eta;
            t /= eta;
            let peak = pooled.iter().cloned().fold(0.0, f64::max);
            if peak > 0.0 {
                pooled.iter_mut().for_each(|v| *v /= peak);
            }
            img = img.iter().zip(&pooled).map(|(a, b)| a * b).collect();
            let tensors = ref_tensors(&img, s, t, n, sigma);
            ic = ref_coherent(&tensors, n);
            let up = ref_unpool(&ic, s, t, eta.pow(i as u32));
            for (a, b) in mt.iter_mut().zip(&up) {
                *a += b;
            }
        }
        used += 1;
    }
    (ref_minmax(&mt), used)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Verdict {
    let cases: [(&[f64], f64); 3] = [
        (&[0.9872, 0.9691, 0.9735, 0.9820], 0.9779),
        (&[0.9863, 0.9811, 0.9882, 0.9341, 0.9619, 0.9172], 0.9614),
        (&[0.8528, 0.7649, 0.8803, 0.8941, 0.8062], 0.8396),
    ];
    let mut ok = true;
    let mut shown = Vec::new();
    for (aps, reported) in cases {
        let m = mean_average_precision(aps).expect("non-empty");
        let oracle = aps.iter().sum::<f64>() / aps.len() as f64;
        let four = (m * 1e4 + 1e-9).floor() / 1e4;
        ok &= (m - oracle).abs() < 1e-15 && (four - reported).abs() < 1e-12;
        shown.push(format!("{four:.4}"));
    }
    verdict(ok, format!("mAP {}", shown.join(", ")))
}

fn criterion_2() -> Verdict {
    timed(Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w, n, sigma) = (8, 8, 4, 1.5);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let img = random_image(&mut rng, h, w);
            let ts = compute_tensors(&raster(h, w, img.clone()), n, sigma).expect("tensors");
            let oracle = ref_tensors(&img, h, w, n, sigma);
            let mut slot = 0;
            for k in 0..n {
                for m in k..n {
                    worst = worst.max(max_diff(ts.entry(k, m).data(), &oracle[slot]));
                    slot += 1;
                }
            }
        }
        verdict(worst < 1e-6, format!("100 trials, max |diff| {worst:.2e}"))
    })
}

fn criterion_3() -> Verdict {
    timed(Duration::from_secs(10), || {
        let cfg = |levels| TensorPoolConfig {
            levels,
            ..TensorPoolConfig::default()
        };
        let constant = multiscale_tensor(&Raster::filled(16, 16, 1, 0.37), &cfg(3)).expect("constant");
        let zero = constant.map.data().iter().all(|&v| v == 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 12, 16);
        let single = multiscale_tensor(&raster(12, 16, img.clone()), &cfg(1)).expect("n=1");
        let coherent = ref_minmax(&ref_coherent(&ref_tensors(&img, 12, 16, 4, 1.5), 4));
        let d_single = max_diff(single.map.data(), &coherent);

        let guard = multiscale_tensor(&raster(6, 4, random_image(&mut rng, 6, 4)), &cfg(5)).expect("guard");

        let square: Vec<f64> = (0..256)
            .map(|i| if (4..12).contains(&(i / 16)) && (4..12).contains(&(i % 16)) { 1.0 } else { 0.0 })
            .collect();
        let ours = multiscale_tensor(&raster(16, 16, square.clone()), &cfg(2)).expect("square");
        let (oracle, used) = ref_algorithm(&square, 16, 16, 2, 4, 1.5);
        let d_square = max_diff(ours.map.data(), &oracle);

        verdict(
            zero && d_single < 1e-6 && single.levels_used == 1 && guard.levels_used == 2 && ours.levels_used == used && d_square < 1e-6,
            format!(
                "constant zero {zero}, n=1 diff {d_single:.2e}, 6x4 n=5 levels {}, square diff {d_square:.2e}",
                guard.levels_used
            ),
        )
    })
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (16, 24);
    let cfg = TensorPoolConfig::default();
    let (mut map_diff, mut entry_diff): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let img = random_image(&mut rng, h, w);
        let base = multiscale_tensor(&raster(h, w, img.clone()), &cfg).expect("base");
        let base_ts = compute_tensors(&raster(h, w, img.clone()), 4, 1.5).expect("tensors");
        for c in [0.5, 2.0, 10.0] {
            let scaled: Vec<f64> = img.iter().map(|v| c * v).collect();
            let m = multiscale_tensor(&raster(h, w, scaled.clone()), &cfg).expect("scaled");
            map_diff = map_diff.max(max_diff(m.map.data(), base.map.data()));
            let ts = compute_tensors(&raster(h, w, scaled), 4, 1.5).expect("tensors");
            for (a, b) in ts.entries().iter().zip(base_ts.entries()) {
                let expect: Vec<f64> = b.data().iter().map(|v| c * c * v).collect();
                entry_diff = entry_diff.max(max_diff(a.data(), &expect));
            }
        }
    }
    verdict(
        map_diff < 1e-5 && entry_diff < 1e-5,
        format!("map diff {map_diff:.2e}, entry diff {entry_diff:.2e}"),
    )
}

fn criterion_5() -> Verdict {
    timed(Duration::from_secs(60), || {
        let checks = check_all(5, Perturbation::None);
        let kinds = ["conv3x3", "conv7x7", "batch_norm", "relu", "max_pool", "avg_pool", "add", "multiply", "softmax", "focal"];
        let missing: Vec<&str> = kinds
            .iter()
            .copied()
            .filter(|k| !checks.iter().any(|c| c.name.starts_with(k)))
            .collect();
        let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
        let all = checks.iter().all(|c| c.passed && c.rel_error < TOLERANCE);
        verdict(
            all && missing.is_empty() && TOLERANCE <= 1e-5,
            format!("{} checks, worst rel err {worst:.2e}, missing {missing:?}", checks.len()),
        )
    })
}

#[allow(clippy::approx_constant)]
fn criterion_6() -> Verdict {
    let value = |p: f64, alpha: f64, gamma: f64| {
        let probs = FeatureTensor::from_vec((1, 1, 1, 2), vec![p, 1.0 - p]);
        focal_loss::<f64>(&probs, &[0], alpha, gamma, 1).expect("loss").value
    };
    let a = value(1.0, 0.25, 2.0);
    let b = value(0.5, 1.0, 0.0);
    let c = value(0.5, 0.25, 2.0);
    verdict(
        a.abs() < 1e-12 && (b - 0.693147).abs() < 1e-6 && (c - 0.043322).abs() < 1e-6,
        format!("{a:.6} {b:.6} {c:.6}"),
    )
}

struct Overfit {
    dir: tempfile::TempDir,
    manifest: PathBuf,
    cache: PathBuf,
    model: PathBuf,
}

fn criterion_7(run: &mut Option<Overfit>) -> Verdict {
    timed(Duration::from_secs(600), || {
        let dir = tempfile::tempdir().expect("tempdir");
        let manifest = cmd_synth(&dir.path().join("data"), 0, 10, (64, 96), 2).expect("synth");
        let index = load_manifest(&manifest).expect("manifest");
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 200;
        cfg.train.batch = 4;
        cfg.train.seed = 0;
        let cache = dir.path().join("cache");
        cmd_prep(&index, &cache, &cfg.tensor_pool()).expect("prep");
        let model = dir.path().join("model.tpis");
        let s = cmd_train(&index, &cache, &model, &cfg).expect("train");
        *run = Some(Overfit {
            dir,
            manifest,
            cache,
            model,
        });
        verdict(
            s.train_dice >= 0.90 && s.epochs <= 200,
            format!("train mean Dice {:.4} after {} epochs on {} samples", s.train_dice, s.epochs, s.trained_ids.len()),
        )
    })
}

fn criterion_8(run: &Overfit) -> Verdict {
    let index = load_manifest(&run.manifest).expect("manifest");
    let preds = run.dir.path().join("preds.json");
    let source = InferSource::Manifest {
        index: index.clone(),
        split: Some(Split::Test),
        cache: Some(run.cache.clone()),
    };
    let opts = InferOptions {
        masks: true,
        overlays: None,
    };
    if let Err(e) = cmd_infer(&run.model, &source, &preds, &InstancingConfig::default(), &opts) {
        return verdict(false, format!("infer: {e}"));
    }
    let eval = EvalOptions {
        iou_thr: 0.5,
        by_occlusion: true,
    };
    let report = match cmd_eval(&preds, &index, &run.dir.path().join("report"), &eval) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("eval: {e}")),
    };
    let map = report.map.unwrap_or(0.0);
    let levels = report.occlusion.as_ref().map_or(0, Vec::len);

    // Remove every instance of the last category from one occlusion level:
    // that level's AP for it must be undefined and left out of its mAP.
    let predictions = read_predictions(&preds).expect("predictions");
    let mut thinned: DatasetIndex = index.clone();
    let last = index.categories.len() as u16;
    let target = predictions
        .iter()
        .filter_map(|p| index.record(&p.id))
        .find(|r| r.occlusion != tpis::datasets::Occlusion::None)
        .map(|r| (r.id.clone(), r.occlusion));
    let Some((target_id, target_level)) = target else {
        return verdict(false, "no occluded test image");
    };
    for r in thinned.records.iter_mut().filter(|r| r.occlusion == target_level) {
        r.annotations.retain(|a| a.category != last);
    }
    let empty_ok = match evaluate(&predictions, &thinned, preds.parent().expect("parent"), &eval) {
        Ok(rep) => rep.occlusion.unwrap_or_default().iter().filter(|o| o.level == target_level.as_str()).all(|o| {
            let defined: Vec<f64> = o.ap.iter().flatten().copied().collect();
            o.ap[usize::from(last) - 1].is_none() && o.map == mean_average_precision(&defined).ok()
        }),
        Err(_) => false,
    };
    verdict(
        map >= 0.95 && levels > 0 && empty_ok,
        format!("mAP@0.5 {map:.4}, {levels} occlusion levels, empty category on {target_id} handled {empty_ok}"),
    )
}

fn ap_oracle(dets: &[(f64, bool)], n_gt: usize) -> f64 {
    // Precision envelope summed at every recall step.
    let mut order: Vec<&(f64, bool)> = dets.iter().collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut tp = 0.0;
    let mut points = Vec::new();
    for (i, d) in order.iter().enumerate() {
        if d.1 {
            tp += 1.0;
        }
        points.push((tp / n_gt as f64, tp / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        if points[i].0 > prev_recall {
            let best = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (points[i].0 - prev_recall) * best;
            prev_recall = points[i].0;
        }
    }
    ap
}

fn criterion_9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut identity: f64 = 0.0;
    for _ in 0..1000 {
        let c = PixelConfusion {
            tp: rng.gen_range(0..5000),
            fp: rng.gen_range(0..5000),
            fn_: rng.gen_range(1..5000),
        };
        let (i, d) = (iou(&c).expect("iou"), dice(&c).expect("dice"));
        identity = identity.max((d - 2.0 * i / (1.0 + i)).abs());
    }

    let b = |r: usize| BBox::new(r, r, r + 9, r + 9).expect("box");
    let gts = [TruthBox { image: 0, bbox: b(0) }, TruthBox { image: 0, bbox: b(20) }];
    let dets = [
        ScoredBox { image: 0, score: 0.9, bbox: b(0) },
        ScoredBox { image: 0, score: 0.8, bbox: b(40) },
        ScoredBox { image: 0, score: 0.7, bbox: b(20) },
    ];
    let hand = average_precision(&dets, &gts, 0.5).ok().flatten().unwrap_or(f64::NAN);
    let hand_oracle = ap_oracle(&[(0.9, true), (0.8, false), (0.7, true)], 2);

    let mut invariant = true;
    for _ in 0..100 {
        let n_gt = rng.gen_range(1..6);
        let gts: Vec<TruthBox> = (0..n_gt).map(|k| TruthBox { image: 0, bbox: b(20 * k) }).collect();
        let mut dets: Vec<ScoredBox> = (0..rng.gen_range(1..10))
            .map(|_| ScoredBox {
                image: 0,
                score: rng.gen_range(0.01..1.0),
                bbox: b(20 * rng.gen_range(0..8)),
            })
            .collect();
        let before = average_precision(&dets, &gts, 0.5).expect("ap");
        let (p, k) = (rng.gen_range(0.2..5.0), rng.gen_range(0.1..3.0));
        for d in dets.iter_mut() {
            d.score = k * d.score.powf(p) + 0.5;
        }
        let after = average_precision(&dets, &gts, 0.5).expect("ap");
        invariant &= match (before, after) {
            (Some(x), Some(y)) => (x - y).abs() < 1e-12,
            _ => false,
        };
    }
    verdict(
        identity < 1e-12 && (hand - 0.8333).abs() < 1e-4 && (hand - hand_oracle).abs() < 1e-12 && invariant,
        format!("identity {identity:.1e}, hand AP {hand:.4}, monotone invariance {invariant}"),
    )
}

fn outline(h: usize, w: usize, r0: usize, c0: usize, rh: usize, cw: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    for r in r0..r0 + rh {
        for c in c0..c0 + cw {
            if (r == r0 || r == r0 + rh - 1 || c == c0 || c == c0 + cw - 1) && r < h && c < w {
                px.push((r, c));
            }
        }
    }
    px
}

/// Closed region by flood from the border through non-wall pixels.
fn fill_oracle(m: &BinaryMask) -> BinaryMask {
    let (h, w) = m.dims();
    let mut outside = vec![false; h * w];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && !m.get(r, c) {
                outside[r * w + c] = true;
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        let mut nb = Vec::new();
        if r > 0 {
            nb.push((r - 1, c));
        }
        if c > 0 {
            nb.push((r, c - 1));
        }
        if r + 1 < h {
            nb.push((r + 1, c));
        }
        if c + 1 < w {
            nb.push((r, c + 1));
        }
        for (a, b) in nb {
            if !m.get(a, b) && !outside[a * w + b] {
                outside[a * w + b] = true;
                stack.push((a, b));
            }
        }
    }
    BinaryMask::from_fn(h, w, |r, c| !outside[r * w + c])
}

fn criterion_10() -> Verdict {
    let mut ring = outline(5, 5, 0, 0, 5, 5);
    ring.retain(|&p| p != (0, 2));
    let filled = fill_mask(&close_contours(&BinaryMask::from_pixels(5, 5, &ring), 20.0)).count();

    let (h, w) = (20, 30);
    let mut lm = LabelMap::background(h, w);
    let first = outline(h, w, 2, 3, 6, 8);
    let second = outline(h, w, 10, 15, 7, 10);
    for &(r, c) in &first {
        lm.set(r, c, 1, 0.9);
    }
    for &(r, c) in &second {
        lm.set(r, c, 1, 0.7);
    }
    let cfg = InstancingConfig {
        min_area: 5,
        ..InstancingConfig::default()
    };
    let dets = extract_instances(&lm, &cfg);
    let mut boxes: Vec<[usize; 4]> = dets.iter().map(|d| d.bbox.to_array()).collect();
    boxes.sort();
    let want: Vec<[usize; 4]> = [&first, &second]
        .iter()
        .map(|px| mask_to_bbox(&BinaryMask::from_pixels(h, w, px)).expect("box").to_array())
        .collect();
    let tight = dets.len() == 2 && boxes == want && dets.iter().all(|d| mask_to_bbox(&d.mask.mask).map(|b| b == d.bbox).unwrap_or(false));

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut idempotent = true;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(4..16), rng.gen_range(4..16));
        let mut px = Vec::new();
        for _ in 0..rng.gen_range(1..4) {
            let (r0, c0) = (rng.gen_range(0..h - 2), rng.gen_range(0..w - 2));
            let (rh, cw) = (rng.gen_range(3..=h - r0), rng.gen_range(3..=w - c0));
            px.extend(outline(h, w, r0, c0, rh, cw));
        }
        for _ in 0..rng.gen_range(0..6) {
            px.push((rng.gen_range(0..h), rng.gen_range(0..w)));
        }
        let m = BinaryMask::from_pixels(h, w, &px);
        let once = fill_mask(&m);
        idempotent &= fill_mask(&once) == once && once == fill_oracle(&m);
    }
    verdict(
        filled == 25 && tight && idempotent,
        format!("ring fills {filled}, boxes {boxes:?}, fill idempotent {idempotent}"),
    )
}

fn file_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<(PathBuf, Vec<u8>)> = fs::read_dir(dir)
        .expect("cache dir")
        .map(|e| {
            let p = e.expect("entry").path();
            let b = fs::read(&p).expect("read");
            (p, b)
        })
        .collect();
    out.sort();
    out
}

fn criterion_11(run: &Overfit) -> Verdict {
    let model = read_model(&run.model).expect("model");
    let again = run.dir.path().join("again.tpis");
    write_model(&model, &again).expect("write");
    let model_exact = fs::read(&again).ok() == fs::read(&run.model).ok() && read_model(&again).ok().as_ref() == Some(&model);

    let index = load_index(&run.manifest).expect("manifest");
    let copy = run.dir.path().join("data").join("copy.jsonl");
    write_index(&index, &copy).expect("write manifest");
    let manifest_exact = load_index(&copy).map(|i| i == index).unwrap_or(false);

    let cfg = RunConfig::default().tensor_pool();
    let before = file_bytes(&run.cache);
    let stamp = fs::metadata(cache_paths(&run.cache, &index.records[0].id).0).and_then(|m| m.modified()).ok();
    let prep = cmd_prep(&index, &run.cache, &cfg).expect("prep");
    let after_stamp = fs::metadata(cache_paths(&run.cache, &index.records[0].id).0).and_then(|m| m.modified()).ok();
    let prep_idempotent = prep.computed == 0 && prep.skipped == index.records.len() && before == file_bytes(&run.cache) && stamp == after_stamp;

    verdict(
        model_exact && manifest_exact && prep_idempotent,
        format!("model bytes {model_exact}, manifest {manifest_exact}, prep recomputed {}", prep.computed),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            verdict(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let mut overfit = None;
    let mut results: Vec<(usize, &str, Verdict)> = vec![
        (1, "mAP aggregation", guarded(criterion_1)),
        (2, "tensor set oracle", guarded(criterion_2)),
        (3, "tensor pooling properties", guarded(criterion_3)),
        (4, "intensity scale invariance", guarded(criterion_4)),
        (5, "gradient checks", guarded(criterion_5)),
        (6, "focal loss point values", guarded(criterion_6)),
        (7, "overfit on synthetic corpus", guarded(|| criterion_7(&mut overfit))),
    ];
    match &overfit {
        Some(run) => {
            results.push((8, "end-to-end detection", guarded(|| criterion_8(run))));
            results.push((9, "metric identities", guarded(criterion_9)));
            results.push((10, "instancing pipeline", guarded(criterion_10)));
            results.push((11, "serialization round trips", guarded(|| criterion_11(run))));
        }
        None => {
            results.push((8, "end-to-end detection", verdict(false, "no trained model")));
            results.push((9, "metric identities", guarded(criterion_9)));
            results.push((10, "instancing pipeline", guarded(criterion_10)));
            results.push((11, "serialization round trips", verdict(false, "no trained model")));
        }
    }
    let mut failed = 0;
    for (n, name, v) in &results {
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("{tag} criterion {n}: {name}: {}", v.detail);
        failed += usize::from(!v.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
