use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::raster::RasterGrid;

const NODATA_RGB: Rgb<u8> = Rgb([235, 235, 235]);

/// Yellow-green ramp from bare ground to dense forest.
const RAMP: [[f64; 3]; 5] = [
    [255.0, 255.0, 204.0],
    [194.0, 230.0, 153.0],
    [120.0, 198.0, 121.0],
    [49.0, 163.0, 84.0],
    [0.0, 104.0, 55.0],
];

fn ramp(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let k = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - k as f64;
    let c = |i: usize| (RAMP[k][i] * (1.0 - f) + RAMP[k + 1][i] * f).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Internal(format!("{}: {e}", path.display())))
}

/// Render band 0 of `grid` with a linear color ramp over `[lo, hi]`.
pub fn render_map(grid: &RasterGrid, lo: f64, hi: f64, path: &Path) -> Result<()> {
    let band = grid.band(0);
    let span = (hi - lo).max(f64::EPSILON);
    let img = RgbImage::from_fn(grid.cols() as u32, grid.rows() as u32, |x, y| {
        let v = band[y as usize * grid.cols() + x as usize];
        if grid.is_nodata(v) || !v.is_finite() {
            NODATA_RGB
        } else {
            ramp((v as f64 - lo) / span)
        }
    });
    save(&img, path)
}

/// Prediction-versus-reference scatter with a 1:1 line, both axes on
/// `[0, max]`.
pub fn scatter_plot(pred: &[f64], truth: &[f64], max: f64, path: &Path) -> Result<()> {
    const SIZE: u32 = 400;
    const MARGIN: u32 = 30;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let inner = (SIZE - 2 * MARGIN) as f64;
    let to_px = |v: f64| (v / max).clamp(0.0, 1.0) * inner;
    let black = Rgb([0, 0, 0]);
    for i in MARGIN..=SIZE - MARGIN {
        img.put_pixel(i, SIZE - MARGIN, black);
        img.put_pixel(MARGIN, i, black);
        let d = i - MARGIN;
        img.put_pixel(MARGIN + d, SIZE - MARGIN - d, Rgb([200, 60, 60]));
    }
    for (&p, &t) in pred.iter().zip(truth) {
        let x = MARGIN as f64 + to_px(t);
        let y = (SIZE - MARGIN) as f64 - to_px(p);
        for (dx, dy) in [(0i32, 0i32), (1, 0), (0, 1), (-1, 0), (0, -1)] {
            let (px, py) = (x as i32 + dx, y as i32 + dy);
            if px >= 0 && py >= 0 && (px as u32) < SIZE && (py as u32) < SIZE {
                img.put_pixel(px as u32, py as u32, Rgb([40, 90, 160]));
            }
        }
    }
    save(&img, path)
}
