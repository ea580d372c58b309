use image::{Rgb, RgbImage};

use tpis::imgcore::Raster;
use tpis::instancing::Detection;

const PALETTE: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

fn colour(category: u16) -> [u8; 3] {
    PALETTE[usize::from(category.max(1) - 1) % PALETTE.len()]
}

/// Scan with each detection's mask tinted and its box outlined in the
/// category colour.
pub fn draw_overlay(scan: &Raster, dets: &[Detection]) -> RgbImage {
    let (h, w) = scan.dims();
    let ch = scan.channels();
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        if ch == 3 {
            Rgb([byte(scan.get(r, c, 0)), byte(scan.get(r, c, 1)), byte(scan.get(r, c, 2))])
        } else {
            let g = byte(scan.get(r, c, 0));
            Rgb([g, g, g])
        }
    });
    for d in dets {
        let tint = colour(d.category);
        for (r, c) in d.mask.mask.pixels() {
            let p = img.get_pixel_mut(c as u32, r as u32);
            for k in 0..3 {
                p[k] = ((u16::from(p[k]) + u16::from(tint[k])) / 2) as u8;
            }
        }
        let b = d.bbox;
        for c in b.col_min..=b.col_max {
            img.put_pixel(c as u32, b.row_min as u32, Rgb(tint));
            img.put_pixel(c as u32, b.row_max as u32, Rgb(tint));
        }
        for r in b.row_min..=b.row_max {
            img.put_pixel(b.col_min as u32, r as u32, Rgb(tint));
            img.put_pixel(b.col_max as u32, r as u32, Rgb(tint));
        }
    }
    img
}
