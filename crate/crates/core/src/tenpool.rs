//! Orientation structure tensors and the pyramid-pooled multi-scale tensor.
//!
//! For `N` orientations `theta_j = 2 pi j / N`, the tensor set holds every
//! smoothed product `G * (D_k . D_m)` with `k <= m`, where `D_j` is the
//! directional derivative along `theta_j`. The coherent tensor sums the
//! magnitudes of the `top_k` entries with the largest Frobenius norm.
//!
//! The multi-scale tensor accumulates coherent tensors over a pyramid of
//! block-averaged images. Each coarser level is masked by the previous
//! level's coherent tensor (pooled, scaled to unit peak) so that contours
//! found at finer scales steer what survives at coarser ones.

use std::f64::consts::PI;
use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::imgcore::{
    axis_gradients, combine_direction, ensure_gray, gaussian_smooth, GradientKernelConfig, Raster,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorPoolConfig {
    /// Number of gradient orientations (`N`).
    pub orientations: usize,
    /// Pyramid depth (`n`).
    pub levels: usize,
    /// Pooling factor; only 2 is supported.
    pub eta: usize,
    /// Smoothing scale applied to every gradient product.
    pub sigma: f64,
    /// Entries summed into the coherent tensor. `None` means `orientations`.
    pub top_k: Option<usize>,
}

impl Default for TensorPoolConfig {
    fn default() -> Self {
        Self {
            orientations: 4,
            levels: 3,
            eta: 2,
            sigma: 1.5,
            top_k: None,
        }
    }
}

impl TensorPoolConfig {
    pub fn unique_count(&self) -> usize {
        self.orientations * (self.orientations + 1) / 2
    }

    pub fn effective_top_k(&self) -> usize {
        self.top_k.unwrap_or(self.orientations)
    }

    pub fn validate(&self) -> Result<()> {
        if self.orientations < 2 {
            return Err(Error::contract("orientation count must be at least 2"));
        }
        if self.levels < 1 {
            return Err(Error::contract("pyramid needs at least one level"));
        }
        if self.eta != 2 {
            return Err(Error::contract("pooling factor must be 2"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::contract("sigma must be positive"));
        }
        let k = self.effective_top_k();
        if k < 1 || k > self.unique_count() {
            return Err(Error::contract(format!(
                "top_k {k} outside 1..={}",
                self.unique_count()
            )));
        }
        Ok(())
    }
}

/// The `N(N+1)/2` unique entries of the orientation tensor matrix.
#[derive(Debug, Clone)]
pub struct TensorSet {
    orientations: usize,
    entries: Vec<Raster>,
}

impl TensorSet {
    /// Builds a set from entries stored in `(0,0), (0,1), .., (N-1,N-1)` order.
    pub fn from_entries(orientations: usize, entries: Vec<Raster>) -> Result<Self> {
        if orientations < 2 || entries.len() != orientations * (orientations + 1) / 2 {
            return Err(Error::contract(format!(
                "{} entries do not form a tensor set for N = {orientations}",
                entries.len()
            )));
        }
        let first = &entries[0];
        if first.channels() != 1 {
            return Err(Error::contract("tensor entries must be single-channel"));
        }
        for e in &entries[1..] {
            first.same_shape(e)?;
        }
        Ok(Self {
            orientations,
            entries,
        })
    }

    pub fn orientations(&self) -> usize {
        self.orientations
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.entries[0].dims()
    }

    pub fn entries(&self) -> &[Raster] {
        &self.entries
    }

    /// Storage slot of the pair `(k, m)`; symmetric in its arguments.
    pub fn slot(&self, k: usize, m: usize) -> usize {
        let (k, m) = if k <= m { (k, m) } else { (m, k) };
        k * self.orientations - k * (k.saturating_sub(1)) / 2 + (m - k)
    }

    pub fn entry(&self, k: usize, m: usize) -> &Raster {
        &self.entries[self.slot(k, m)]
    }

    /// The `(k, m)` pair stored at a slot.
    pub fn pair(&self, slot: usize) -> (usize, usize) {
        let mut s = slot;
        for k in 0..self.orientations {
            let row = self.orientations - k;
            if s < row {
                return (k, k + s);
            }
            s -= row;
        }
        panic!("slot {slot} out of range");
    }
}

/// Computes every unique smoothed gradient product for `orientations`
/// evenly spaced directions.
pub fn compute_tensors(gray: &Raster, orientations: usize, sigma: f64) -> Result<TensorSet> {
    compute_tensors_with(gray, orientations, sigma, &GradientKernelConfig::default())
}

pub fn compute_tensors_with(
    gray: &Raster,
    orientations: usize,
    sigma: f64,
    kernel: &GradientKernelConfig,
) -> Result<TensorSet> {
    if orientations < 2 {
        return Err(Error::contract("orientation count must be at least 2"));
    }
    let (dx, dy) = axis_gradients(gray, kernel)?;
    let grads: Vec<Raster> = (0..orientations)
        .map(|j| combine_direction(&dx, &dy, 2.0 * PI * j as f64 / orientations as f64))
        .collect();
    let mut entries = Vec::with_capacity(orientations * (orientations + 1) / 2);
    for k in 0..orientations {
        for m in k..orientations {
            let product = grads[k].zip_map(&grads[m], |a, b| a * b)?;
            entries.push(gaussian_smooth(&product, sigma)?);
        }
    }
    Ok(TensorSet {
        orientations,
        entries,
    })
}

/// Sums the magnitudes of the `top_k` entries ranked by descending
/// Frobenius norm; equal norms keep storage order.
pub fn coherent_tensor(ts: &TensorSet, top_k: usize) -> Result<Raster> {
    if top_k < 1 || top_k > ts.len() {
        return Err(Error::contract(format!(
            "top_k {top_k} outside 1..={}",
            ts.len()
        )));
    }
    let norms: Vec<f64> = ts.entries.iter().map(Raster::frobenius_norm).collect();
    let mut order: Vec<usize> = (0..ts.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let (h, w) = ts.dims();
    let mut acc = Raster::zeros(h, w, 1);
    for &i in &order[..top_k] {
        for (o, v) in acc.data_mut().iter_mut().zip(ts.entries[i].data()) {
            *o += v.abs();
        }
    }
    Ok(acc)
}

/// Non-overlapping `eta x eta` block average.
pub fn pool(img: &Raster, eta: usize) -> Result<Raster> {
    let (h, w) = img.dims();
    if eta == 0 || h % eta != 0 || w % eta != 0 {
        return Err(Error::contract(format!(
            "cannot pool {h}x{w} by {eta}: dimensions not divisible"
        )));
    }
    let ch = img.channels();
    let (oh, ow) = (h / eta, w / eta);
    let scale = 1.0 / (eta * eta) as f64;
    let mut out = Raster::zeros(oh, ow, ch);
    for r in 0..oh {
        for c in 0..ow {
            for k in 0..ch {
                let mut acc = 0.0;
                for dr in 0..eta {
                    for dc in 0..eta {
                        acc += img.get(r * eta + dr, c * eta + dc, k);
                    }
                }
                out.set(r, c, k, acc * scale);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor replication of every pixel into an `f x f` block.
pub fn unpool(img: &Raster, f: usize) -> Result<Raster> {
    if f == 0 {
        return Err(Error::contract("unpool factor must be at least 1"));
    }
    let (h, w) = img.dims();
    let ch = img.channels();
    let mut out = Raster::zeros(h * f, w * f, ch);
    for r in 0..h * f {
        for c in 0..w * f {
            for k in 0..ch {
                out.set(r, c, k, img.get(r / f, c / f, k));
            }
        }
    }
    Ok(out)
}

/// Fused multi-scale tensor map, min-max normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct MultiScaleTensor {
    pub map: Raster,
    pub config: TensorPoolConfig,
    pub levels_used: usize,
}

/// Runs the tensor pooling pyramid on a scan (luma is used for colour input).
pub fn multiscale_tensor(scan: &Raster, cfg: &TensorPoolConfig) -> Result<MultiScaleTensor> {
    cfg.validate()?;
    let eta = cfg.eta;
    let top_k = cfg.effective_top_k();
    let mut img = ensure_gray(scan)?;
    let (rows, cols) = img.dims();
    let mut fused = Raster::zeros(rows, cols, 1);
    let mut coherent = Raster::zeros(rows, cols, 1);
    let mut levels_used = 0;

    for level in 0..cfg.levels {
        if level == 0 {
            let ts = compute_tensors(&img, cfg.orientations, cfg.sigma)?;
            coherent = coherent_tensor(&ts, top_k)?;
            add_into(&mut fused, &coherent);
        } else {
            let (s, t) = img.dims();
            if s % eta != 0 || t % eta != 0 || s.min(t) < eta {
                break;
            }
            img = pool(&img, eta)?;
            let pooled = pool(&coherent, eta)?;
            let peak = pooled.min_max().1;
            let weights = if peak > 0.0 {
                pooled.map(|v| v / peak)
            } else {
                pooled
            };
            img = img.zip_map(&weights, |a, b| a * b)?;
            let ts = compute_tensors(&img, cfg.orientations, cfg.sigma)?;
            coherent = coherent_tensor(&ts, top_k)?;
            add_into(&mut fused, &unpool(&coherent, eta.pow(level as u32))?);
        }
        levels_used += 1;
    }

    Ok(MultiScaleTensor {
        map: normalize_unit(&fused),
        config: *cfg,
        levels_used,
    })
}

fn add_into(acc: &mut Raster, other: &Raster) {
    debug_assert_eq!(acc.dims(), other.dims());
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

/// Min-max normalization; constant rasters map to zero.
pub fn normalize_unit(img: &Raster) -> Raster {
    let (lo, hi) = img.min_max();
    if !(hi > lo) {
        return img.map(|_| 0.0);
    }
    let span = hi - lo;
    img.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Sidecar written next to a cached map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSidecar {
    pub config: TensorPoolConfig,
    pub levels_used: usize,
    pub height: usize,
    pub width: usize,
}

/// Writes the map as a 16-bit grayscale PNG and its JSON sidecar.
pub fn write_cached(mst: &MultiScaleTensor, png_path: &Path, sidecar_path: &Path) -> Result<()> {
    let (h, w) = mst.map.dims();
    let pixels: Vec<u16> = mst
        .map
        .data()
        .iter()
        .map(|&m| (65535.0 * m.clamp(0.0, 1.0)).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::contract("cached map buffer size mismatch"))?;
    buf.save(png_path)
        .map_err(|e| Error::Format(format!("{}: {e}", png_path.display())))?;
    let sidecar = CacheSidecar {
        config: mst.config,
        levels_used: mst.levels_used,
        height: h,
        width: w,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(sidecar_path, json).map_err(|e| Error::io(sidecar_path, e))
}

pub fn read_sidecar(sidecar_path: &Path) -> Result<CacheSidecar> {
    let text = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: format!("{}: {e}", sidecar_path.display()),
    })
}

/// Reads a cached map back; values are quantized to 1/65535.
pub fn read_cached(png_path: &Path, sidecar_path: &Path) -> Result<MultiScaleTensor> {
    let sidecar = read_sidecar(sidecar_path)?;
    let img = image::open(png_path)
        .map_err(|e| Error::Format(format!("{}: {e}", png_path.display())))?
        .into_luma16();
    let (w, h) = img.dimensions();
    if (h as usize, w as usize) != (sidecar.height, sidecar.width) {
        return Err(Error::Format(format!(
            "{}: size {h}x{w} disagrees with sidecar",
            png_path.display()
        )));
    }
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| f64::from(v) / 65535.0)
        .collect();
    Ok(MultiScaleTensor {
        map: Raster::new(h as usize, w as usize, 1, data)?,
        config: sidecar.config,
        levels_used: sidecar.levels_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Raster {
        Raster::from_fn(h, w, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn slot_layout_is_upper_triangle() {
        let ts = compute_tensors(&Raster::zeros(4, 4, 1), 4, 1.0).unwrap();
        assert_eq!(ts.len(), 10);
        let mut expected = 0;
        for k in 0..4 {
            for m in k..4 {
                assert_eq!(ts.slot(k, m), expected);
                assert_eq!(ts.slot(m, k), expected);
                assert_eq!(ts.pair(expected), (k, m));
                expected += 1;
            }
        }
    }

    #[test]
    fn constant_image_gives_zero_tensors() {
        let ts = compute_tensors(&Raster::filled(9, 9, 1, 0.3), 4, 1.5).unwrap();
        assert_eq!(ts.len(), 10);
        for e in ts.entries() {
            assert!(e.data().iter().all(|&v| v == 0.0));
        }
        assert!(compute_tensors(&Raster::zeros(4, 4, 1), 1, 1.5).is_err());
    }

    #[test]
    fn two_orientations_force_entry_relations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random(&mut rng, 10, 10);
        let ts = compute_tensors(&img, 2, 1.5).unwrap();
        let (a, b, c) = (ts.entry(0, 0), ts.entry(0, 1), ts.entry(1, 1));
        for i in 0..a.data().len() {
            assert_eq!(b.data()[i], -a.data()[i]);
            assert_eq!(c.data()[i], a.data()[i]);
        }
    }

    #[test]
    fn antipodal_entries_negate_for_four_orientations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ts = compute_tensors(&random(&mut rng, 12, 12), 4, 1.5).unwrap();
        for i in 0..144 {
            assert_eq!(ts.entry(0, 2).data()[i], -ts.entry(0, 0).data()[i]);
            assert_eq!(ts.entry(1, 3).data()[i], -ts.entry(1, 1).data()[i]);
        }
    }

    #[test]
    fn coherent_single_nonzero_entry() {
        let mut entries = vec![Raster::zeros(3, 3, 1); 3];
        entries[1] = Raster::from_fn(3, 3, |r, c| r as f64 - c as f64);
        let ts = TensorSet::from_entries(2, entries).unwrap();
        let coh = coherent_tensor(&ts, 3).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(coh.get(r, c, 0), (r as f64 - c as f64).abs());
            }
        }
        assert!(coherent_tensor(&ts, 0).is_err());
        assert!(coherent_tensor(&ts, 4).is_err());
    }

    #[test]
    fn coherent_forced_ranking() {
        let entries = vec![
            Raster::filled(2, 2, 1, -1.0),
            Raster::filled(2, 2, 1, 0.1),
            Raster::zeros(2, 2, 1),
        ];
        let ts = TensorSet::from_entries(2, entries).unwrap();
        let coh = coherent_tensor(&ts, 1).unwrap();
        assert!(coh.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pool_and_unpool() {
        let block = Raster::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool(&block, 2).unwrap().data(), &[2.5]);
        let c = pool(&Raster::filled(6, 4, 1, 0.7), 2).unwrap();
        assert_eq!(c.dims(), (3, 2));
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(pool(&Raster::zeros(3, 4, 1), 2).is_err());

        let one = Raster::filled(1, 1, 1, 0.4);
        let up = unpool(&one, 3).unwrap();
        assert_eq!(up.dims(), (3, 3));
        assert!(up.data().iter().all(|&v| v == 0.4));
        assert!(unpool(&one, 0).is_err());
    }

    #[test]
    fn pool_matches_block_mean_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random(&mut rng, 8, 8);
        let p = pool(&img, 2).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let mut s = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        s += img.get(2 * r + i, 2 * c + j, 0);
                    }
                }
                assert!((p.get(r, c, 0) - s / 4.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn guard_stops_at_odd_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scan = random(&mut rng, 6, 4);
        let cfg = TensorPoolConfig {
            levels: 5,
            ..Default::default()
        };
        let mst = multiscale_tensor(&scan, &cfg).unwrap();
        assert_eq!(mst.levels_used, 2);
    }

    #[test]
    fn constant_scan_gives_zero_map() {
        let scan = Raster::filled(16, 16, 3, 0.5);
        let mst = multiscale_tensor(&scan, &TensorPoolConfig::default()).unwrap();
        assert_eq!(mst.levels_used, 3);
        assert!(mst.map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_level_is_normalized_coherent_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let scan = random(&mut rng, 12, 10);
        let cfg = TensorPoolConfig {
            levels: 1,
            ..Default::default()
        };
        let mst = multiscale_tensor(&scan, &cfg).unwrap();
        let coh = coherent_tensor(&compute_tensors(&scan, 4, 1.5).unwrap(), 4).unwrap();
        let (lo, hi) = coh.min_max();
        for (m, c) in mst.map.data().iter().zip(coh.data()) {
            assert!((m - (c - lo) / (hi - lo)).abs() < 1e-12);
        }
    }

    #[test]
    fn cache_round_trip_quantizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scan = random(&mut rng, 16, 8);
        let mst = multiscale_tensor(&scan, &TensorPoolConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (png, side) = (dir.path().join("m.png"), dir.path().join("m.json"));
        write_cached(&mst, &png, &side).unwrap();
        let back = read_cached(&png, &side).unwrap();
        assert_eq!(back.levels_used, mst.levels_used);
        assert_eq!(back.config, mst.config);
        for (a, b) in back.map.data().iter().zip(mst.map.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}
