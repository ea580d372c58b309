//! Manifest ingestion, ground-truth contour targets and the synthetic
//! verification corpus.
//!
//! A manifest is JSON lines. The first line is a header:
//!
//! ```json
//! {"dataset": "gdxray", "categories": ["gun", "knife"], "version": 1,
//!  "frame": [576, 768], "train_fraction": 0.8}
//! ```
//!
//! Every following line is one sample:
//!
//! ```json
//! {"id": "B0046_0001", "path": "img/B0046_0001.png", "split": "test",
//!  "occlusion": "OP2", "size": [1024, 1280],
//!  "annotations": [{"category": "gun", "bbox": [10, 12, 200, 310],
//!                   "mask_path": "masks/B0046_0001_0.png"}]}
//! ```
//!
//! `frame` defaults to 576x768. When `size` is present the boxes are
//! rescaled from it to the frame; otherwise they are taken to be in frame
//! coordinates already.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imgcore::{Raster, WORKING_HEIGHT, WORKING_WIDTH};
use crate::instancing::{mask_to_bbox, BBox, BinaryMask, LabelMap};
use crate::morph::{dilate, erode};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
/// Default outline thickness of ground-truth contours, in pixels.
pub const DEFAULT_THICKNESS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryTable {
    pub dataset: String,
    /// Foreground names; category `i + 1` is `names[i]`, 0 is background.
    pub names: Vec<String>,
}

impl CategoryTable {
    pub fn new(dataset: impl Into<String>, names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Schema {
                line: 1,
                msg: "category table is empty".into(),
            });
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Schema {
                    line: 1,
                    msg: format!("duplicate category '{n}'"),
                });
            }
        }
        if names.len() >= usize::from(u16::MAX) {
            return Err(Error::Schema {
                line: 1,
                msg: "too many categories".into(),
            });
        }
        Ok(Self {
            dataset: dataset.into(),
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Index of a foreground category (1-based).
    pub fn index_of(&self, name: &str) -> Option<u16> {
        self.names.iter().position(|n| n == name).map(|i| i as u16 + 1)
    }

    pub fn name(&self, index: u16) -> Option<&str> {
        if index == 0 {
            return None;
        }
        self.names.get(usize::from(index) - 1).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum Occlusion {
    #[default]
    #[serde(rename = "none")]
    None,
    OP1,
    OP2,
    OP3,
}

impl Occlusion {
    pub fn as_str(&self) -> &'static str {
        match self {
            Occlusion::None => "none",
            Occlusion::OP1 => "OP1",
            Occlusion::OP2 => "OP2",
            Occlusion::OP3 => "OP3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub category: u16,
    /// In working-frame coordinates.
    pub bbox: BBox,
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
    pub occlusion: Occlusion,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub categories: CategoryTable,
    pub records: Vec<SampleRecord>,
    /// Working frame `(height, width)`.
    pub frame: (usize, usize),
    /// Expected share of training records, when the dataset fixes one.
    pub train_fraction: Option<f64>,
    pub provenance: BTreeMap<String, serde_json::Value>,
    /// Directory relative paths resolve against. Not serialized.
    pub root: PathBuf,
}

impl DatasetIndex {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Whether the train/test counts agree with the header's convention
    /// (always true when none is recorded).
    pub fn split_matches_convention(&self) -> bool {
        match self.train_fraction {
            None => true,
            Some(f) => {
                let expected = (f * self.records.len() as f64).round() as usize;
                self.split(Split::Train).count() == expected
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    dataset: String,
    categories: Vec<String>,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    provenance: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationLine {
    category: String,
    bbox: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_path: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    id: String,
    path: PathBuf,
    split: Split,
    #[serde(default, skip_serializing_if = "is_none_occlusion")]
    occlusion: Occlusion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<[usize; 2]>,
    #[serde(default)]
    annotations: Vec<AnnotationLine>,
}

fn is_none_occlusion(o: &Occlusion) -> bool {
    *o == Occlusion::None
}

/// Maps an inclusive pixel span from a source axis of length `from` onto
/// one of length `to`.
fn rescale_span(lo: usize, hi: usize, from: usize, to: usize) -> (usize, usize) {
    if from == to {
        return (lo, hi);
    }
    let s = to as f64 / from as f64;
    let a = (lo as f64 * s).floor() as usize;
    let b = (((hi + 1) as f64 * s).ceil() as usize).saturating_sub(1);
    (a.min(to - 1), b.max(a).min(to - 1))
}

pub fn parse_index(text: &str, root: &Path) -> Result<DatasetIndex> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, htext) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "manifest is empty".into(),
    })?;
    let header: HeaderLine = serde_json::from_str(htext).map_err(|e| Error::Parse {
        line: hline,
        msg: format!("header: {e}"),
    })?;
    if header.version != MANIFEST_VERSION {
        return Err(Error::Schema {
            line: hline,
            msg: format!("manifest version {} (expected {MANIFEST_VERSION})", header.version),
        });
    }
    let categories = CategoryTable::new(header.dataset, header.categories).map_err(|e| match e {
        Error::Schema { msg, .. } => Error::Schema { line: hline, msg },
        other => other,
    })?;
    let frame = match header.frame {
        Some([h, w]) if h > 0 && w > 0 => (h, w),
        Some(f) => {
            return Err(Error::Schema {
                line: hline,
                msg: format!("invalid frame {f:?}"),
            })
        }
        None => (WORKING_HEIGHT, WORKING_WIDTH),
    };
    if let Some(f) = header.train_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Schema {
                line: hline,
                msg: format!("train_fraction {f} outside [0, 1]"),
            });
        }
    }

    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (line, text) in lines {
        let raw: RecordLine = serde_json::from_str(text).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let schema = |msg: String| Error::Schema { line, msg };
        if !ids.insert(raw.id.clone()) {
            return Err(schema(format!("duplicate id '{}'", raw.id)));
        }
        if raw.occlusion != Occlusion::None && raw.split != Split::Test {
            return Err(schema(format!(
                "occlusion level {} on non-test sample '{}'",
                raw.occlusion.as_str(),
                raw.id
            )));
        }
        let (src_h, src_w) = match raw.size {
            Some([h, w]) if h > 0 && w > 0 => (h, w),
            Some(s) => return Err(schema(format!("invalid size {s:?}"))),
            None => frame,
        };
        let mut annotations = Vec::with_capacity(raw.annotations.len());
        for a in raw.annotations {
            let category = categories
                .index_of(&a.category)
                .ok_or_else(|| schema(format!("unknown category '{}'", a.category)))?;
            let [r0, c0, r1, c1] = a.bbox;
            if r0 > r1 || c0 > c1 || r1 >= src_h || c1 >= src_w {
                return Err(schema(format!(
                    "bbox {:?} outside a {src_h}x{src_w} image",
                    a.bbox
                )));
            }
            let (r0, r1) = rescale_span(r0, r1, src_h, frame.0);
            let (c0, c1) = rescale_span(c0, c1, src_w, frame.1);
            annotations.push(Annotation {
                category,
                bbox: BBox::new(r0, c0, r1, c1)?,
                mask_path: a.mask_path,
            });
        }
        records.push(SampleRecord {
            id: raw.id,
            path: raw.path,
            split: raw.split,
            occlusion: raw.occlusion,
            annotations,
        });
    }
    let index = DatasetIndex {
        categories,
        records,
        frame,
        train_fraction: header.train_fraction,
        provenance: header.provenance,
        root: root.to_path_buf(),
    };
    if !index.split_matches_convention() {
        log::warn!(
            "{}: train/test split differs from the recorded fraction {:?}",
            index.categories.dataset,
            index.train_fraction
        );
    }
    Ok(index)
}

/// Reads and validates a manifest; relative paths resolve against its
/// directory.
pub fn load_index(manifest_path: &Path) -> Result<DatasetIndex> {
    let f = fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| Error::io(manifest_path, e))?);
        text.push('\n');
    }
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_index(&text, &root)
}

pub fn format_index(index: &DatasetIndex) -> Result<String> {
    let header = HeaderLine {
        dataset: index.categories.dataset.clone(),
        categories: index.categories.names.clone(),
        version: MANIFEST_VERSION,
        frame: Some([index.frame.0, index.frame.1]),
        train_fraction: index.train_fraction,
        provenance: index.provenance.clone(),
    };
    let mut out = json(&header)?;
    out.push('\n');
    for r in &index.records {
        let line = RecordLine {
            id: r.id.clone(),
            path: r.path.clone(),
            split: r.split,
            occlusion: r.occlusion,
            size: None,
            annotations: r
                .annotations
                .iter()
                .map(|a| AnnotationLine {
                    category: index
                        .categories
                        .name(a.category)
                        .expect("annotation categories come from the table")
                        .to_string(),
                    bbox: a.bbox.to_array(),
                    mask_path: a.mask_path.clone(),
                })
                .collect(),
        };
        out.push_str(&json(&line)?);
        out.push('\n');
    }
    Ok(out)
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_index(index: &DatasetIndex, manifest_path: &Path) -> Result<()> {
    let text = format_index(index)?;
    let f = fs::File::create(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(manifest_path, e))
}

/// Loads a binary mask image (any nonzero luma is set), resampled to
/// `(height, width)` by nearest neighbour.
pub fn load_mask(path: &Path, height: usize, width: usize) -> Result<BinaryMask> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (sh, sw) = (img.height() as usize, img.width() as usize);
    if sh == 0 || sw == 0 {
        return Err(Error::Format(format!("{}: empty mask image", path.display())));
    }
    Ok(BinaryMask::from_fn(height, width, |r, c| {
        let sr = (r * sh / height).min(sh - 1);
        let sc = (c * sw / width).min(sw - 1);
        img.get_pixel(sc as u32, sr as u32).0[0] > 0
    }))
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.dims();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Outline band of `mask`: `ceil(t/2)` rings inside the boundary and
/// `floor(t/2)` rings outside it. Thickness 1 is `mask - erode(mask)`.
pub fn contour_band(mask: &BinaryMask, thickness: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut band = BinaryMask::new(h, w);
    if thickness == 0 {
        return band;
    }
    let mut inner = mask.clone();
    for _ in 0..thickness.div_ceil(2) {
        let next = erode(&inner);
        band = band.union(&inner.minus(&next));
        inner = next;
    }
    let mut outer = mask.clone();
    for _ in 0..thickness / 2 {
        let next = dilate(&outer);
        band = band.union(&next.minus(&outer));
        outer = next;
    }
    band
}

/// Filled rectangle covering `bbox`, clipped to `(height, width)`.
pub fn box_mask(bbox: &BBox, height: usize, width: usize) -> BinaryMask {
    BinaryMask::from_fn(height, width, |r, c| {
        (bbox.row_min..=bbox.row_max).contains(&r) && (bbox.col_min..=bbox.col_max).contains(&c)
    })
}

/// Ground-truth contour label map from per-annotation region masks.
/// Later annotations overwrite earlier ones where bands touch.
pub fn contour_target_from_masks(
    height: usize,
    width: usize,
    regions: &[(u16, BinaryMask)],
    thickness: usize,
) -> Result<LabelMap> {
    let mut lm = LabelMap::background(height, width);
    lm.confidence.iter_mut().for_each(|c| *c = 1.0);
    for (cat, mask) in regions {
        if mask.dims() != (height, width) {
            return Err(Error::contract("region mask size differs from the target"));
        }
        if mask.is_empty() {
            log::warn!("skipping empty region of category {cat}");
            continue;
        }
        for (r, c) in contour_band(mask, thickness).pixels() {
            lm.set(r, c, *cat, 1.0);
        }
    }
    Ok(lm)
}

/// Ground-truth contours for a record: mask outlines where a mask is
/// given, box perimeters otherwise.
pub fn make_contour_target(index: &DatasetIndex, record: &SampleRecord, thickness: usize) -> Result<LabelMap> {
    let (h, w) = index.frame;
    let mut regions = Vec::with_capacity(record.annotations.len());
    for a in &record.annotations {
        let mask = match &a.mask_path {
            Some(p) => load_mask(&index.resolve(p), h, w)?,
            None => box_mask(&a.bbox, h, w),
        };
        regions.push((a.category, mask));
    }
    contour_target_from_masks(h, w, &regions, thickness)
}

/// Region masks of a record's annotations, where available.
pub fn record_masks(index: &DatasetIndex, record: &SampleRecord) -> Result<Option<Vec<(u16, BinaryMask)>>> {
    let (h, w) = index.frame;
    let mut out = Vec::new();
    for a in &record.annotations {
        match &a.mask_path {
            Some(p) => out.push((a.category, load_mask(&index.resolve(p), h, w)?)),
            None => return Ok(None),
        }
    }
    Ok(Some(out))
}

/// In-memory synthetic scenes together with their index.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub index: DatasetIndex,
    /// One-channel scans in [0, 1], quantized to 8 bits.
    pub images: Vec<Raster>,
    /// Region masks per record, aligned with each record's annotations.
    pub masks: Vec<Vec<(u16, BinaryMask)>>,
}

pub const SYNTHETIC_CATEGORIES: [&str; 3] = ["rectangle", "disk", "annulus"];
pub const SYNTHETIC_TRAIN_FRACTION: f64 = 0.8;
/// Items of each category placed in every scene.
pub const SYNTHETIC_ITEMS_PER_CATEGORY: usize = 2;

/// Smooth value noise: random lattice values interpolated bilinearly.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let fy = r as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for c in 0..w {
            let fx = c as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |y: usize, x: usize| grid[y * gw + x];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

// Item size follows the frame area available per item; a 64x96 scene with
// four items is the unit.
fn shape_mask(rng: &mut ChaCha8Rng, category: usize, scale: f64) -> BinaryMask {
    match category {
        0 => {
            let rh = (rng.gen_range(12.0..20.0) * scale).round().max(3.0) as usize;
            let rw = (rng.gen_range(14.0..26.0) * scale).round().max(3.0) as usize;
            BinaryMask::from_fn(rh, rw, |_, _| true)
        }
        _ => {
            let radius = rng.gen_range(7.0..11.0) * scale;
            let hole = if category == 2 { radius * 0.5 } else { -1.0 };
            let d = (2.0 * radius).ceil() as usize + 1;
            let c = (d as f64 - 1.0) / 2.0;
            BinaryMask::from_fn(d, d, |r, q| {
                let rr = ((r as f64 - c).powi(2) + (q as f64 - c).powi(2)).sqrt();
                rr <= radius && rr > hole
            })
        }
    }
}

fn place(mask: &BinaryMask, at: (usize, usize), h: usize, w: usize) -> BinaryMask {
    let mut out = BinaryMask::new(h, w);
    for (r, c) in mask.pixels() {
        out.set(at.0 + r, at.1 + c, true);
    }
    out
}

/// Deterministic scenes: two items per category over a textured background
/// with faint clutter, 80/20 train/test split, test samples tagged
/// OP1, OP2, OP3 in turn.
pub fn synthetic_corpus(seed: u64, count: usize, dims: (usize, usize), categories: usize) -> Result<SyntheticCorpus> {
    if count == 0 {
        return Err(Error::contract("synthetic corpus needs at least one image"));
    }
    if !(2..=3).contains(&categories) {
        return Err(Error::contract("synthetic corpus supports 2 or 3 categories"));
    }
    let (h, w) = dims;
    if h < 32 || w < 32 {
        return Err(Error::contract("synthetic scenes need at least 32x32 pixels"));
    }
    let names: Vec<String> = SYNTHETIC_CATEGORIES[..categories].iter().map(|s| s.to_string()).collect();
    let table = CategoryTable::new("synthetic", names)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = ((SYNTHETIC_TRAIN_FRACTION * count as f64).round() as usize).min(count);
    let margin = 3;
    let gap = 4;
    let items = categories * SYNTHETIC_ITEMS_PER_CATEGORY;
    let scale = ((h * w) as f64 / (64.0 * 96.0) * 4.0 / items as f64).sqrt().min(h.min(w) as f64 / 64.0).max(0.25);

    let mut images = Vec::with_capacity(count);
    let mut all_masks = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let coarse = value_noise(&mut rng, h, w, 16);
        let fine = value_noise(&mut rng, h, w, 3);
        let mut img: Vec<f64> = coarse
            .iter()
            .zip(&fine)
            .map(|(a, b)| 0.82 + 0.05 * a + 0.025 * b)
            .collect();

        let mut regions = Vec::with_capacity(items);
        for layout in 0.. {
            if layout == 20 {
                return Err(Error::contract(format!("could not lay out {items} items in a {h}x{w} scene")));
            }
            regions.clear();
            let mut occupied = BinaryMask::new(h, w);
            for cat in (0..categories).flat_map(|c| std::iter::repeat_n(c, SYNTHETIC_ITEMS_PER_CATEGORY)) {
                let mut placed = None;
                for _ in 0..2000 {
                    let shape = shape_mask(&mut rng, cat, scale);
                    let (sh, sw) = shape.dims();
                    if sh + 2 * margin > h || sw + 2 * margin > w {
                        continue;
                    }
                    let at = (
                        rng.gen_range(margin..=h - margin - sh),
                        rng.gen_range(margin..=w - margin - sw),
                    );
                    let m = place(&shape, at, h, w);
                    let mut halo = m.clone();
                    for _ in 0..gap {
                        halo = dilate(&halo);
                    }
                    if halo.intersect_count(&occupied) == 0 {
                        placed = Some(m);
                        break;
                    }
                }
                let Some(m) = placed else { break };
                occupied = occupied.union(&m);
                regions.push((cat as u16 + 1, m));
            }
            if regions.len() == items {
                break;
            }
        }

        // Faint clutter may overlap anything.
        for _ in 0..rng.gen_range(1..=2) {
            let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
            let (ry, rx) = (rng.gen_range(4.0..10.0), rng.gen_range(4.0..14.0));
            let dim = rng.gen_range(0.93..0.97);
            for r in 0..h {
                for c in 0..w {
                    if ((r as f64 - cy) / ry).powi(2) + ((c as f64 - cx) / rx).powi(2) <= 1.0 {
                        img[r * w + c] *= dim;
                    }
                }
            }
        }
        for (_, m) in &regions {
            let atten = rng.gen_range(0.4..0.5);
            let grain = value_noise(&mut rng, h, w, 4);
            for (r, c) in m.pixels() {
                let k = r * w + c;
                img[k] *= atten * (1.0 + 0.08 * grain[k]);
            }
        }
        let img: Vec<f64> = img
            .into_iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        images.push(Raster::new(h, w, 1, img)?);

        let id = format!("syn{i:04}");
        let split = if i < n_train { Split::Train } else { Split::Test };
        let occlusion = match split {
            Split::Train => Occlusion::None,
            Split::Test => [Occlusion::OP1, Occlusion::OP2, Occlusion::OP3][(i - n_train) % 3],
        };
        let annotations = regions
            .iter()
            .enumerate()
            .map(|(k, (cat, m))| {
                Ok(Annotation {
                    category: *cat,
                    bbox: mask_to_bbox(m)?,
                    mask_path: Some(PathBuf::from(format!("masks/{id}_{k}.png"))),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(SampleRecord {
            id: id.clone(),
            path: PathBuf::from(format!("images/{id}.png")),
            split,
            occlusion,
            annotations,
        });
        all_masks.push(regions);
    }
    let mut provenance = BTreeMap::new();
    provenance.insert("generator".into(), serde_json::json!("synthetic"));
    provenance.insert("seed".into(), serde_json::json!(seed));
    Ok(SyntheticCorpus {
        index: DatasetIndex {
            categories: table,
            records,
            frame: dims,
            train_fraction: Some(SYNTHETIC_TRAIN_FRACTION),
            provenance,
            root: PathBuf::new(),
        },
        images,
        masks: all_masks,
    })
}

/// Writes images, masks and `manifest.jsonl` under `dir`; returns the
/// manifest path.
pub fn write_synthetic(corpus: &SyntheticCorpus, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
    for ((rec, img), regions) in corpus.index.records.iter().zip(&corpus.images).zip(&corpus.masks) {
        let (h, w) = img.dims();
        let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([(img.get(y as usize, x as usize, 0) * 255.0).round() as u8])
        });
        let path = dir.join(&rec.path);
        gray.save(&path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for (a, (_, m)) in rec.annotations.iter().zip(regions) {
            if let Some(p) = &a.mask_path {
                save_mask(m, &dir.join(p))?;
            }
        }
    }
    let manifest = dir.join("manifest.jsonl");
    write_index(&corpus.index, &manifest)?;
    Ok(manifest)
}

/// Convenience: generate and write in one step.
pub fn synthetic_dataset(seed: u64, count: usize, dims: (usize, usize), categories: usize, dir: &Path) -> Result<(DatasetIndex, SyntheticCorpus)> {
    let corpus = synthetic_corpus(seed, count, dims, categories)?;
    let manifest = write_synthetic(&corpus, dir)?;
    Ok((load_index(&manifest)?, corpus))
}
