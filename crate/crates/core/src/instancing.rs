//! Recovers item instances from a per-pixel contour label map: fragment
//! cleanup, contour closing, region filling and component extraction.

use serde::{Deserialize, Serialize};

pub use crate::morph::BinaryMask;
use crate::morph::{self, components};
use crate::{Error, Result};

/// Per-pixel category (0 is background) and the probability behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
    pub confidence: Vec<f64>,
}

impl LabelMap {
    /// All-background map with zero confidence.
    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
            confidence: vec![0.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, labels: Vec<u16>, confidence: Vec<f64>) -> Result<Self> {
        if labels.len() != height * width || confidence.len() != height * width {
            return Err(Error::contract(format!(
                "label map {height}x{width} needs {} labels and confidences, got {} and {}",
                height * width,
                labels.len(),
                confidence.len()
            )));
        }
        if let Some(c) = confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::contract(format!("confidence {c} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            labels,
            confidence,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn label(&self, r: usize, c: usize) -> u16 {
        self.labels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, label: u16, confidence: f64) {
        let i = r * self.width + c;
        self.labels[i] = label;
        self.confidence[i] = confidence;
    }

    /// Highest category index present.
    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn category_mask(&self, category: u16) -> BinaryMask {
        BinaryMask::from_vec(
            self.height,
            self.width,
            self.labels.iter().map(|&l| l == category).collect(),
        )
    }
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Result<Self> {
        if row_min > row_max || col_min > col_max {
            return Err(Error::contract(format!(
                "degenerate box ({row_min},{col_min})-({row_max},{col_max})"
            )));
        }
        Ok(Self {
            row_min,
            col_min,
            row_max,
            col_max,
        })
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.row_min, self.col_min, self.row_max, self.col_max]
    }

    /// Intersection over union of the covered pixel sets.
    pub fn iou(&self, other: &BBox) -> f64 {
        let r0 = self.row_min.max(other.row_min);
        let c0 = self.col_min.max(other.col_min);
        let r1 = self.row_max.min(other.row_max);
        let c1 = self.col_max.min(other.col_max);
        if r0 > r1 || c0 > c1 {
            return 0.0;
        }
        let inter = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub category: u16,
    pub mask: BinaryMask,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: u16,
    pub score: f64,
    pub bbox: BBox,
    pub mask: InstanceMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstancingConfig {
    /// Components smaller than this many pixels are dropped.
    pub min_area: usize,
    /// Longest gap, in pixels, that contour closing will bridge.
    pub max_join_distance: f64,
    /// Within one connected foreground blob, categories holding less than
    /// this share of its pixels are relabeled to the dominant category.
    pub min_label_share: f64,
}

impl Default for InstancingConfig {
    fn default() -> Self {
        Self {
            min_area: 50,
            max_join_distance: 20.0,
            min_label_share: 0.25,
        }
    }
}

impl InstancingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_area == 0 {
            return Err(Error::contract("min_area must be at least 1"));
        }
        if !(self.max_join_distance >= 0.0) {
            return Err(Error::contract("max_join_distance must be nonnegative"));
        }
        if !(0.0..=0.5).contains(&self.min_label_share) {
            return Err(Error::contract("min_label_share must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// Resolves scattered minority labels: inside every 8-connected foreground
/// blob, pixels of a category whose share of the blob is below `min_share`
/// take the blob's dominant category (most pixels, lowest index on ties).
pub fn harmonize_labels(lm: &LabelMap, min_share: f64) -> LabelMap {
    let mut out = lm.clone();
    if min_share <= 0.0 {
        return out;
    }
    let fg = BinaryMask::from_vec(lm.height, lm.width, lm.labels.iter().map(|&l| l > 0).collect());
    let mut counts = vec![0usize; usize::from(lm.max_label()) + 1];
    for comp in components(&fg, true) {
        counts.iter_mut().for_each(|c| *c = 0);
        for &i in &comp {
            counts[usize::from(lm.labels[i])] += 1;
        }
        let dominant = (1..counts.len()).fold(1, |best, c| if counts[c] > counts[best] { c } else { best });
        let floor = min_share * comp.len() as f64;
        for &i in &comp {
            if (counts[usize::from(lm.labels[i])] as f64) < floor {
                out.labels[i] = dominant as u16;
            }
        }
    }
    out
}

/// Relabels as background every 8-connected single-category component
/// with fewer than `min_area` pixels.
pub fn clean_fragments(lm: &LabelMap, min_area: usize) -> LabelMap {
    let mut out = lm.clone();
    for cat in 1..=lm.max_label() {
        for comp in components(&lm.category_mask(cat), true) {
            if comp.len() < min_area {
                for i in comp {
                    out.labels[i] = 0;
                    out.confidence[i] = 0.0;
                }
            }
        }
    }
    out
}

/// Joins the loose ends of open contours. Closed components pass through;
/// endpoints of the rest are taken from their skeletons and paired greedily
/// by ascending distance up to `max_join_distance`.
pub fn close_contours(binary: &BinaryMask, max_join_distance: f64) -> BinaryMask {
    let (h, w) = binary.dims();
    let mut open = BinaryMask::new(h, w);
    for comp in components(binary, true) {
        let part = BinaryMask::from_vec(h, w, index_mask(h * w, &comp));
        if fill_mask(&part).count() == part.count() {
            for &i in &comp {
                open.set(i / w, i % w, true);
            }
        }
    }
    if open.is_empty() {
        return binary.clone();
    }
    let skeleton = morph::thin(&open);
    let ends: Vec<(usize, usize)> = skeleton
        .pixels()
        .filter(|&(r, c)| skeleton.neighbor_count(r, c) == 1)
        .collect();

    let mut pairs = Vec::new();
    for a in 0..ends.len() {
        for b in a + 1..ends.len() {
            let d = distance(ends[a], ends[b]);
            if d <= max_join_distance {
                pairs.push((d, a, b));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut used = vec![false; ends.len()];
    let mut out = binary.clone();
    for (_, a, b) in pairs {
        if used[a] || used[b] {
            continue;
        }
        used[a] = true;
        used[b] = true;
        morph::draw_line(&mut out, ends[a], ends[b]);
    }
    out
}

fn index_mask(len: usize, idx: &[usize]) -> Vec<bool> {
    let mut v = vec![false; len];
    for &i in idx {
        v[i] = true;
    }
    v
}

fn distance(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    dr.hypot(dc)
}

/// Contour plus every pixel the border cannot reach through 4-connected
/// background steps.
pub fn fill_mask(closed: &BinaryMask) -> BinaryMask {
    let (h, w) = closed.dims();
    if h == 0 || w == 0 {
        return closed.clone();
    }
    let reached = morph::border_reachable(closed);
    BinaryMask::from_vec(h, w, reached.iter().map(|&r| !r).collect())
}

/// Tight inclusive bounds of the set pixels.
pub fn mask_to_bbox(mask: &BinaryMask) -> Result<BBox> {
    let mut it = mask.pixels();
    let (r, c) = it
        .next()
        .ok_or_else(|| Error::contract("bounding box of an empty mask"))?;
    let mut b = BBox {
        row_min: r,
        col_min: c,
        row_max: r,
        col_max: c,
    };
    for (r, c) in it {
        b.row_min = b.row_min.min(r);
        b.col_min = b.col_min.min(c);
        b.row_max = b.row_max.max(r);
        b.col_max = b.col_max.max(c);
    }
    Ok(b)
}

/// Full pipeline: harmonize and clean labels, then per category close,
/// fill and split into 8-connected instances. Sorted by descending score.
pub fn extract_instances(lm: &LabelMap, cfg: &InstancingConfig) -> Vec<Detection> {
    let cleaned = clean_fragments(&harmonize_labels(lm, cfg.min_label_share), cfg.min_area.max(1));
    let (h, w) = lm.dims();
    let mut dets = Vec::new();
    for cat in 1..=cleaned.max_label() {
        let contour = cleaned.category_mask(cat);
        if contour.is_empty() {
            continue;
        }
        let filled = fill_mask(&close_contours(&contour, cfg.max_join_distance));
        for comp in components(&filled, true) {
            let (sum, n) = comp
                .iter()
                .filter(|&&i| cleaned.labels[i] == cat)
                .fold((0.0, 0usize), |(s, n), &i| (s + cleaned.confidence[i], n + 1));
            let score = if n > 0 {
                sum / n as f64
            } else {
                comp.iter().map(|&i| cleaned.confidence[i]).sum::<f64>() / comp.len() as f64
            };
            let mask = BinaryMask::from_vec(h, w, index_mask(h * w, &comp));
            let bbox = mask_to_bbox(&mask).expect("component is non-empty");
            dets.push(Detection {
                category: cat,
                score: score.clamp(0.0, 1.0),
                bbox,
                mask: InstanceMask {
                    category: cat,
                    area: comp.len(),
                    mask,
                },
            });
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets
}
