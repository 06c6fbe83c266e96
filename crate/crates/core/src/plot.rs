//! DET curves rendered to PNG. FMR runs along a log axis from 1e-4 to 1,
//! FNMR along a linear axis from 0 to 1. Curves are told apart by colour
//! only; the caller records which colour is which.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::evaluation::DetCurve;
use crate::io::write_atomic;

pub const PALETTE: [[u8; 3]; 6] = [
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

const MIN_LOG_FMR: f64 = -4.0;
const MARGIN: u32 = 24;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        put(img, x, y + 1, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws every curve on one set of axes.
pub fn render_det(curves: &[&DetCurve], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let span = (size - 2 * MARGIN) as f64;
    let to_px = |fmr: f64, fnmr: f64| -> (i64, i64) {
        let lx = fmr.max(10f64.powf(MIN_LOG_FMR)).log10();
        let x = MARGIN as f64 + (lx - MIN_LOG_FMR) / -MIN_LOG_FMR * span;
        let y = MARGIN as f64 + (1.0 - fnmr.clamp(0.0, 1.0)) * span;
        (x.round() as i64, y.round() as i64)
    };
    let grid = Rgb([225, 225, 225]);
    for d in 0..=(-MIN_LOG_FMR as i32) {
        let (x, _) = to_px(10f64.powi(-d), 0.0);
        line(&mut img, (x, MARGIN as i64), (x, (size - MARGIN) as i64), grid);
    }
    for k in 0..=10 {
        let (_, y) = to_px(1.0, k as f64 / 10.0);
        line(&mut img, (MARGIN as i64, y), ((size - MARGIN) as i64, y), grid);
    }
    let axis = Rgb([0, 0, 0]);
    let (lo, hi) = (MARGIN as i64, (size - MARGIN) as i64);
    line(&mut img, (lo, hi), (hi, hi), axis);
    line(&mut img, (lo, lo), (lo, hi), axis);
    for (ci, curve) in curves.iter().enumerate() {
        let colour = Rgb(PALETTE[ci % PALETTE.len()]);
        let pts: Vec<(i64, i64)> = curve.points.iter().map(|p| to_px(p.fmr, p.fnmr)).collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], colour);
        }
        // Legend swatch in the top-right corner.
        let y = MARGIN as i64 + 4 + 8 * ci as i64;
        for dx in 0..12 {
            for dy in 0..5 {
                put(&mut img, hi - 14 + dx, y + dy, colour);
            }
        }
    }
    img
}

pub fn write_det_plot(path: &Path, curves: &[&DetCurve], size: u32) -> Result<()> {
    let mut bytes = Vec::new();
    render_det(curves, size).write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(path, &bytes)
}
