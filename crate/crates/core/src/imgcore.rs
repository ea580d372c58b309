//! Raster container and the primitive image operations the rest of the
//! pipeline is built on.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageReader};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Working resolution every scan is standardized to.
pub const WORKING_HEIGHT: usize = 576;
pub const WORKING_WIDTH: usize = 768;

/// Dense row-major image buffer, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::contract(format!(
                "raster channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::contract(format!(
                "raster data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("raster contains non-finite samples"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a single-channel raster from a per-pixel function.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        self.data[(r * self.width + c) * self.channels + ch] = v;
    }

    /// Applies `f` to every sample.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pixel-wise combination of two rasters of identical shape.
    pub fn zip_map(&self, other: &Raster, f: impl Fn(f64, f64) -> f64) -> Result<Raster> {
        self.same_shape(other)?;
        Ok(Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Raster) -> Result<()> {
        if self.height != other.height
            || self.width != other.width
            || self.channels != other.channels
        {
            return Err(Error::contract(format!(
                "raster shape mismatch: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Fixed 3x3 derivative stencils.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DerivativeOperator {
    Sobel,
}

/// Derivative operator configuration. Boundaries are always reflected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientKernelConfig {
    pub operator: DerivativeOperator,
    /// Scale applied to the raw stencil response; 1/8 makes a unit ramp
    /// produce a unit derivative.
    pub normalization: f64,
}

impl Default for GradientKernelConfig {
    fn default() -> Self {
        Self {
            operator: DerivativeOperator::Sobel,
            normalization: 1.0 / 8.0,
        }
    }
}

/// Reflects an out-of-range index back into `0..n` without repeating the
/// edge sample (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Decodes an 8-bit PNG or JPEG into a 3-channel raster in [0, 1] at the
/// requested size.
pub fn load_and_standardize(path: &Path, target_h: usize, target_w: usize) -> Result<Raster> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(image::ImageFormat::Png) | Some(image::ImageFormat::Jpeg) => {}
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported image format {other:?}",
                path.display()
            )))
        }
    }
    let img = reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    standardize_image(&img, target_h, target_w)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Converts a decoded image into a standardized raster.
pub fn standardize_image(img: &DynamicImage, target_h: usize, target_w: usize) -> Result<Raster> {
    let (h, w) = (img.height() as usize, img.width() as usize);
    let data: Vec<f64> = match img.color() {
        ColorType::L8 | ColorType::La8 => img
            .to_luma8()
            .into_raw()
            .into_iter()
            .flat_map(|v| {
                let v = f64::from(v) / 255.0;
                [v, v, v]
            })
            .collect(),
        ColorType::Rgb8 | ColorType::Rgba8 => img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "unsupported sample layout {other:?}; only 8-bit images are accepted"
            )))
        }
    };
    let raster = Raster::new(h, w, 3, data)?;
    if (h, w) == (target_h, target_w) {
        return Ok(raster);
    }
    resize_bilinear(&raster, target_h, target_w)
}

/// Bilinear resampling with half-pixel-center alignment and clamped edges.
pub fn resize_bilinear(img: &Raster, target_h: usize, target_w: usize) -> Result<Raster> {
    if target_h == 0 || target_w == 0 || img.height == 0 || img.width == 0 {
        return Err(Error::contract("resize requires non-empty source and target"));
    }
    let ch = img.channels;
    let sy = img.height as f64 / target_h as f64;
    let sx = img.width as f64 / target_w as f64;
    let axis = |dst: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..target_w).map(|c| axis(c, sx, img.width)).collect();
    let mut out = Raster::zeros(target_h, target_w, ch);
    for r in 0..target_h {
        let (r0, r1, fy) = axis(r, sy, img.height);
        for (c, &(c0, c1, fx)) in cols.iter().enumerate() {
            for k in 0..ch {
                let top = img.get(r0, c0, k) * (1.0 - fx) + img.get(r0, c1, k) * fx;
                let bottom = img.get(r1, c0, k) * (1.0 - fx) + img.get(r1, c1, k) * fx;
                out.set(r, c, k, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

/// ITU-R BT.601 luma.
pub fn to_gray(img: &Raster) -> Result<Raster> {
    if img.channels != 3 {
        return Err(Error::contract(format!(
            "to_gray expects 3 channels, got {}",
            img.channels
        )));
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    Ok(Raster {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    })
}

/// Returns the raster itself if single-channel, its luma otherwise.
pub fn ensure_gray(img: &Raster) -> Result<Raster> {
    match img.channels {
        1 => Ok(img.clone()),
        _ => to_gray(img),
    }
}

// Direction cosines are snapped to a 2^-40 grid so that antipodal angles
// yield exactly negated components.
fn direction(theta: f64) -> (f64, f64) {
    const GRID: f64 = (1u64 << 40) as f64;
    let snap = |v: f64| (v * GRID).round() / GRID;
    (snap(theta.cos()), snap(theta.sin()))
}

fn sobel_xy(gray: &Raster, cfg: &GradientKernelConfig) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = gray.dims();
    let mut dx = vec![0.0; h * w];
    let mut dy = vec![0.0; h * w];
    let at = |r: isize, c: isize| gray.data[reflect_index(r, h) * w + reflect_index(c, w)];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let (nw, n, ne) = (at(r - 1, c - 1), at(r - 1, c), at(r - 1, c + 1));
            let (wv, ev) = (at(r, c - 1), at(r, c + 1));
            let (sw, s, se) = (at(r + 1, c - 1), at(r + 1, c), at(r + 1, c + 1));
            let gx = (ne + 2.0 * ev + se) - (nw + 2.0 * wv + sw);
            let gy = (sw + 2.0 * s + se) - (nw + 2.0 * n + ne);
            let i = r as usize * w + c as usize;
            dx[i] = gx * cfg.normalization;
            dy[i] = gy * cfg.normalization;
        }
    }
    (dx, dy)
}

/// Derivative of a single-channel raster along direction `theta` (radians,
/// measured from the column axis towards the row axis).
pub fn directional_gradient(
    gray: &Raster,
    theta: f64,
    cfg: &GradientKernelConfig,
) -> Result<Raster> {
    let (dx, dy) = axis_gradients(gray, cfg)?;
    Ok(combine_direction(&dx, &dy, theta))
}

/// Column- and row-axis derivatives; every directional derivative is a
/// linear combination of the two.
pub fn axis_gradients(gray: &Raster, cfg: &GradientKernelConfig) -> Result<(Raster, Raster)> {
    if gray.channels != 1 {
        return Err(Error::contract("directional gradient expects a single channel"));
    }
    if cfg.normalization <= 0.0 {
        return Err(Error::contract("gradient normalization must be positive"));
    }
    let (dx, dy) = sobel_xy(gray, cfg);
    let wrap = |data| Raster {
        height: gray.height,
        width: gray.width,
        channels: 1,
        data,
    };
    Ok((wrap(dx), wrap(dy)))
}

pub(crate) fn combine_direction(dx: &Raster, dy: &Raster, theta: f64) -> Raster {
    let (c, s) = direction(theta);
    Raster {
        height: dx.height,
        width: dx.width,
        channels: 1,
        data: dx
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&gx, &gy)| c * gx + s * gy)
            .collect(),
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian smoothing with reflected boundaries.
pub fn gaussian_smooth(img: &Raster, sigma: f64) -> Result<Raster> {
    if !(sigma > 0.0) {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w, ch) = (img.height, img.width, img.channels);

    let mut tmp = vec![0.0; img.data.len()];
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = 0.0;
                for (t, &wt) in kernel.iter().enumerate() {
                    let cc = reflect_index(c as isize + t as isize - radius, w);
                    acc += wt * img.data[(r * w + cc) * ch + k];
                }
                tmp[(r * w + c) * ch + k] = acc;
            }
        }
    }
    let mut out = vec![0.0; img.data.len()];
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = 0.0;
                for (t, &wt) in kernel.iter().enumerate() {
                    let rr = reflect_index(r as isize + t as isize - radius, h);
                    acc += wt * tmp[(rr * w + c) * ch + k];
                }
                out[(r * w + c) * ch + k] = acc;
            }
        }
    }
    Ok(Raster {
        height: h,
        width: w,
        channels: ch,
        data: out,
    })
}
