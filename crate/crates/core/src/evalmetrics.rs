//! Pixel overlap metrics, per-category average precision and the
//! aggregated evaluation report.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{load_mask, record_masks, DatasetIndex, Occlusion};
use crate::instancing::{BBox, BinaryMask};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelConfusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl PixelConfusion {
    pub fn from_masks(pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        if pred.dims() != truth.dims() {
            return Err(Error::contract("confusion of differently sized masks"));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &PixelConfusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// `Tp / (Tp + Fp + Fn)`.
pub fn iou(c: &PixelConfusion) -> Result<f64> {
    let d = c.tp + c.fp + c.fn_;
    if d == 0 {
        return Err(Error::contract("IoU undefined for an empty confusion"));
    }
    Ok(c.tp as f64 / d as f64)
}

/// `2 Tp / (2 Tp + Fp + Fn)`.
pub fn dice(c: &PixelConfusion) -> Result<f64> {
    let d = 2 * c.tp + c.fp + c.fn_;
    if d == 0 {
        return Err(Error::contract("Dice undefined for an empty confusion"));
    }
    Ok(2.0 * c.tp as f64 / d as f64)
}

/// A scored box on one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// A ground-truth box on one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruthBox {
    pub image: usize,
    pub bbox: BBox,
}

/// True-positive flags in ranked order: detections are visited by
/// descending score (stable) and each claims the unmatched ground truth on
/// its image with the highest box IoU, if that reaches `iou_thr`.
pub fn match_detections(dets: &[ScoredBox], gts: &[TruthBox], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.image != d.image {
                    continue;
                }
                let o = d.bbox.iou(&g.bbox);
                if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the all-point interpolated precision-recall curve for ranked
/// true-positive flags against `n_gt` ground truths.
pub fn ap_from_flags(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (k, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Average precision of one category; `None` when there is no ground
/// truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[TruthBox], iou_thr: f64) -> Result<Option<f64>> {
    if !(iou_thr > 0.0 && iou_thr < 1.0) {
        return Err(Error::contract(format!("IoU threshold {iou_thr} outside (0, 1)")));
    }
    Ok(ap_from_flags(&match_detections(dets, gts, iou_thr), gts.len()))
}

pub fn mean_average_precision(per_category_ap: &[f64]) -> Result<f64> {
    if per_category_ap.is_empty() {
        return Err(Error::contract("mAP of an empty list"));
    }
    Ok(per_category_ap.iter().sum::<f64>() / per_category_ap.len() as f64)
}

/// One detection in a predictions file. Boxes are inclusive
/// `[row_min, col_min, row_max, col_max]` in working-frame pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedInstance {
    pub category: String,
    pub score: f64,
    pub bbox: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_png: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub id: String,
    pub detections: Vec<PredictedInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iou_thr: f64,
    pub by_occlusion: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_thr: 0.5,
            by_occlusion: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub name: String,
    pub ground_truths: usize,
    pub detections: usize,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionReport {
    pub level: String,
    pub images: usize,
    /// Per-category AP, `None` where the subset has no ground truth.
    pub ap: Vec<Option<f64>>,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub images: usize,
    pub categories: Vec<CategoryReport>,
    pub mean_iou: Option<f64>,
    pub mean_dice: Option<f64>,
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<Vec<OcclusionReport>>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    mean_average_precision(&v).ok()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// Aligned text table: one row per category, then means and the
    /// optional occlusion breakdown.
    pub fn to_table(&self) -> String {
        let width = self
            .categories
            .iter()
            .map(|c| c.name.len())
            .chain(["category".len(), "mean".len()])
            .max()
            .unwrap_or(8);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>8}  {:>4}  {:>5}", "category", "IoU", "DC", "AP@thr", "GT", "dets");
        for c in &self.categories {
            let _ = writeln!(
                s,
                "{:<width$}  {:>6}  {:>6}  {:>8}  {:>4}  {:>5}",
                c.name,
                fmt_opt(c.iou),
                fmt_opt(c.dice),
                fmt_opt(c.ap),
                c.ground_truths,
                c.detections
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>6}  {:>6}  {:>8}",
            "mean",
            fmt_opt(self.mean_iou),
            fmt_opt(self.mean_dice),
            fmt_opt(self.map)
        );
        if let Some(levels) = &self.occlusion {
            let _ = writeln!(s);
            let mut head = format!("{:<6}  {:>6}", "level", "images");
            for c in &self.categories {
                let _ = write!(head, "  {:>w$}", c.name, w = c.name.len().max(6));
            }
            let _ = writeln!(s, "{head}  {:>6}", "mAP");
            for l in levels {
                let mut row = format!("{:<6}  {:>6}", l.level, l.images);
                for (c, ap) in self.categories.iter().zip(&l.ap) {
                    let _ = write!(row, "  {:>w$}", fmt_opt(*ap), w = c.name.len().max(6));
                }
                let _ = writeln!(s, "{row}  {:>6}", fmt_opt(l.map));
            }
        }
        let _ = writeln!(s, "IoU threshold {:.2}, {} images", self.iou_threshold, self.images);
        s
    }
}

/// Scores predictions against the index. Only images present in `preds`
/// are evaluated. IoU and Dice are computed when every evaluated image has
/// ground-truth masks and every prediction carries a mask; mask paths in
/// `preds` resolve against `pred_root`.
pub fn evaluate(
    preds: &[ImagePredictions],
    index: &DatasetIndex,
    pred_root: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if !(opts.iou_thr > 0.0 && opts.iou_thr < 1.0) {
        return Err(Error::Input(format!("IoU threshold {} outside (0, 1)", opts.iou_thr)));
    }
    let n_cat = index.categories.len();
    let mut dets: Vec<Vec<ScoredBox>> = vec![Vec::new(); n_cat + 1];
    let mut gts: Vec<Vec<TruthBox>> = vec![Vec::new(); n_cat + 1];
    let mut levels: Vec<Occlusion> = Vec::with_capacity(preds.len());
    let mut seen = HashMap::new();
    for (img, p) in preds.iter().enumerate() {
        let rec = index
            .record(&p.id)
            .ok_or_else(|| Error::Input(format!("prediction for unknown image id '{}'", p.id)))?;
        if seen.insert(p.id.as_str(), img).is_some() {
            return Err(Error::Input(format!("image id '{}' predicted twice", p.id)));
        }
        levels.push(rec.occlusion);
        for a in &rec.annotations {
            gts[usize::from(a.category)].push(TruthBox { image: img, bbox: a.bbox });
        }
        for d in &p.detections {
            let cat = index
                .categories
                .index_of(&d.category)
                .ok_or_else(|| Error::Input(format!("image '{}': unknown category '{}'", p.id, d.category)))?;
            let [r0, c0, r1, c1] = d.bbox;
            let bbox = BBox::new(r0, c0, r1, c1).map_err(|e| Error::Input(format!("image '{}': {e}", p.id)))?;
            dets[usize::from(cat)].push(ScoredBox { image: img, score: d.score, bbox });
        }
    }

    let confusions = pixel_confusions(preds, index, pred_root)?;
    let mut categories = Vec::with_capacity(n_cat);
    for cat in 1..=n_cat {
        let ap = average_precision(&dets[cat], &gts[cat], opts.iou_thr)?;
        let (iou_v, dice_v) = match &confusions {
            Some(c) => (iou(&c[cat]).ok(), dice(&c[cat]).ok()),
            None => (None, None),
        };
        categories.push(CategoryReport {
            name: index.categories.names[cat - 1].clone(),
            ground_truths: gts[cat].len(),
            detections: dets[cat].len(),
            iou: iou_v,
            dice: dice_v,
            ap,
        });
    }

    let occlusion = if opts.by_occlusion {
        let mut by_level: BTreeMap<Occlusion, Vec<usize>> = BTreeMap::new();
        for (img, &l) in levels.iter().enumerate() {
            if l != Occlusion::None {
                by_level.entry(l).or_default().push(img);
            }
        }
        let mut out = Vec::new();
        for (level, imgs) in by_level {
            let keep = |i: usize| imgs.binary_search(&i).is_ok();
            let mut aps = Vec::with_capacity(n_cat);
            for cat in 1..=n_cat {
                let d: Vec<ScoredBox> = dets[cat].iter().filter(|d| keep(d.image)).copied().collect();
                let g: Vec<TruthBox> = gts[cat].iter().filter(|g| keep(g.image)).copied().collect();
                aps.push(average_precision(&d, &g, opts.iou_thr)?);
            }
            out.push(OcclusionReport {
                level: level.as_str().to_string(),
                images: imgs.len(),
                map: mean_defined(aps.iter().copied()),
                ap: aps,
            });
        }
        Some(out)
    } else {
        None
    };

    Ok(EvalReport {
        iou_threshold: opts.iou_thr,
        images: preds.len(),
        mean_iou: mean_defined(categories.iter().map(|c| c.iou)),
        mean_dice: mean_defined(categories.iter().map(|c| c.dice)),
        map: mean_defined(categories.iter().map(|c| c.ap)),
        categories,
        occlusion,
    })
}

/// Per-category pixel confusions summed over images, or `None` when masks
/// are missing on either side.
fn pixel_confusions(
    preds: &[ImagePredictions],
    index: &DatasetIndex,
    pred_root: &Path,
) -> Result<Option<Vec<PixelConfusion>>> {
    let (h, w) = index.frame;
    let n_cat = index.categories.len();
    if preds.iter().any(|p| p.detections.iter().any(|d| d.mask_png.is_none())) {
        return Ok(None);
    }
    let mut total = vec![PixelConfusion::default(); n_cat + 1];
    for p in preds {
        let rec = index.record(&p.id).expect("ids checked by caller");
        let Some(truth) = record_masks(index, rec)? else {
            return Ok(None);
        };
        let mut gt_union = vec![BinaryMask::new(h, w); n_cat + 1];
        for (cat, m) in truth {
            let c = usize::from(cat);
            gt_union[c] = gt_union[c].union(&m);
        }
        let mut pred_union = vec![BinaryMask::new(h, w); n_cat + 1];
        for d in &p.detections {
            let cat = usize::from(index.categories.index_of(&d.category).expect("checked by caller"));
            let path = d.mask_png.as_ref().expect("checked above");
            let path = if path.is_absolute() { path.clone() } else { pred_root.join(path) };
            pred_union[cat] = pred_union[cat].union(&load_mask(&path, h, w)?);
        }
        for cat in 1..=n_cat {
            total[cat].merge(&PixelConfusion::from_masks(&pred_union[cat], &gt_union[cat])?);
        }
    }
    Ok(Some(total))
}
