//! Built-in consistency checks: gradient verification, an independent
//! tensor-set transcription and metric identities.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::evalmetrics::{average_precision, dice, iou, mean_average_precision, PixelConfusion, ScoredBox, TruthBox};
use crate::imgcore::Raster;
use crate::instancing::BBox;
use crate::neuralseg::gradcheck::{check_all, Perturbation};
use crate::tenpool::compute_tensors;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "[{}] {:<32} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(s, "{} checks, {} failed", self.checks.len(), failed);
        s
    }
}

fn outcome(name: impl Into<String>, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
    }
}

/// Literal per-pixel transcription: 3x3 directional Sobel stencil, product,
/// then a full 2-D Gaussian window, all with reflect-101 borders.
fn naive_tensor_entry(img: &[f64], h: usize, w: usize, n: usize, k: usize, m: usize, sigma: f64) -> Vec<f64> {
    let refl = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let mut i = i;
        while i < 0 || i >= len {
            i = if i < 0 { -i } else { 2 * (len - 1) - i };
        }
        i as usize
    };
    let grad = |theta: f64| -> Vec<f64> {
        let (c, s) = (theta.cos(), theta.sin());
        let sx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let sy = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for q in 0..w {
                let mut acc = 0.0;
                for (a, (rx, ry)) in sx.iter().zip(&sy).enumerate() {
                    for b in 0..3 {
                        let v = img[refl(r as isize + a as isize - 1, h) * w + refl(q as isize + b as isize - 1, w)];
                        acc += (c * rx[b] + s * ry[b]) / 8.0 * v;
                    }
                }
                out[r * w + q] = acc;
            }
        }
        out
    };
    let gk = grad(2.0 * PI * k as f64 / n as f64);
    let gm = grad(2.0 * PI * m as f64 / n as f64);
    let prod: Vec<f64> = gk.iter().zip(&gm).map(|(a, b)| a * b).collect();
    let rad = (3.0 * sigma).ceil() as isize;
    let mut win = Vec::new();
    let mut total = 0.0;
    for dy in -rad..=rad {
        for dx in -rad..=rad {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            win.push((dy, dx, v));
            total += v;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for q in 0..w {
            out[r * w + q] = win
                .iter()
                .map(|&(dy, dx, v)| v / total * prod[refl(r as isize + dy, h) * w + refl(q as isize + dx, w)])
                .sum();
        }
    }
    out
}

fn tensor_oracle_check(trials: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (h, w, n, sigma) = (8, 8, 4, 1.5);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let data: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
        let ts = match Raster::new(h, w, 1, data.clone()).and_then(|r| compute_tensors(&r, n, sigma)) {
            Ok(ts) => ts,
            Err(e) => return outcome("tensor set oracle", false, e.to_string()),
        };
        for k in 0..n {
            for m in k..n {
                let naive = naive_tensor_entry(&data, h, w, n, k, m, sigma);
                for (a, b) in ts.entry(k, m).data().iter().zip(&naive) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    outcome(
        "tensor set oracle",
        worst < 1e-6,
        format!("{trials} trials, max |diff| {worst:.2e}"),
    )
}

fn dice_identity_check() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut ordered = true;
    for _ in 0..1000 {
        let c = PixelConfusion {
            tp: rng.gen_range(0..10_000),
            fp: rng.gen_range(0..10_000),
            fn_: rng.gen_range(1..10_000),
        };
        let (i, d) = (iou(&c).expect("nonzero"), dice(&c).expect("nonzero"));
        worst = worst.max((d - 2.0 * i / (1.0 + i)).abs());
        ordered &= 0.0 <= i && i <= d && d <= 1.0;
    }
    outcome(
        "dice/iou identity",
        worst < 1e-12 && ordered,
        format!("1000 confusions, max |diff| {worst:.2e}"),
    )
}

fn ap_hand_check() -> CheckOutcome {
    let b = |r: usize| BBox::new(r, r, r + 9, r + 9).expect("valid box");
    let gts = [TruthBox { image: 0, bbox: b(0) }, TruthBox { image: 0, bbox: b(20) }];
    let dets = [
        ScoredBox { image: 0, score: 0.9, bbox: b(0) },
        ScoredBox { image: 0, score: 0.8, bbox: b(40) },
        ScoredBox { image: 0, score: 0.7, bbox: b(20) },
    ];
    match average_precision(&dets, &gts, 0.5) {
        Ok(Some(ap)) => outcome("average precision hand case", (ap - 0.8333).abs() < 1e-4, format!("AP {ap:.6}")),
        other => outcome("average precision hand case", false, format!("{other:?}")),
    }
}

fn map_table_check() -> CheckOutcome {
    let cases: [(&[f64], f64); 3] = [
        (&[0.9872, 0.9691, 0.9735, 0.9820], 0.9779),
        (&[0.9863, 0.9811, 0.9882, 0.9341, 0.9619, 0.9172], 0.9614),
        (&[0.8528, 0.7649, 0.8803, 0.8941, 0.8062], 0.8396),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (aps, reported) in cases {
        let m = mean_average_precision(aps).unwrap_or(f64::NAN);
        let truncated = (m * 1e4 + 1e-9).floor() / 1e4;
        ok &= (truncated - reported).abs() < 1e-9 && (m - reported).abs() < 1e-4;
        detail.push(format!("{m:.6}"));
    }
    outcome("mAP aggregation", ok, detail.join(" "))
}

/// Runs every check. Deterministic: identical runs give identical reports.
pub fn run_selftest(perturb: Perturbation) -> SelftestReport {
    let mut checks: Vec<CheckOutcome> = check_all(7, perturb)
        .into_iter()
        .map(|g| outcome(format!("grad {}", g.name), g.passed, format!("rel err {:.2e}", g.rel_error)))
        .collect();
    checks.push(tensor_oracle_check(10));
    checks.push(dice_identity_check());
    checks.push(ap_hand_check());
    checks.push(map_table_check());
    SelftestReport { checks }
}
