//! Terrain derivatives of an elevation band.

use super::sar::single_band;
use crate::error::Result;
use crate::raster::RasterGrid;

/// Slope in degrees by Horn's 3x3 finite differences. Edge pixels reuse the
/// nearest in-bounds neighbour; a nodata neighbour is replaced by the
/// centre value.
pub fn slope_degrees(dem: &RasterGrid) -> Result<RasterGrid> {
    let z = single_band(dem)?;
    let (rows, cols) = (dem.rows(), dem.cols());
    let [dx, dy] = dem.spec.pixel_size;
    let (dx, dy) = (dx.abs(), dy.abs());
    let nd = dem.nodata_f32();
    let mut out = vec![nd; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let centre = z[r * cols + c];
            if dem.is_nodata(centre) {
                continue;
            }
            let at = |dr: isize, dc: isize| -> f64 {
                let rr = (r as isize + dr).clamp(0, rows as isize - 1) as usize;
                let cc = (c as isize + dc).clamp(0, cols as isize - 1) as usize;
                let v = z[rr * cols + cc];
                if dem.is_nodata(v) {
                    centre as f64
                } else {
                    v as f64
                }
            };
            let gx = ((at(-1, 1) + 2.0 * at(0, 1) + at(1, 1))
                - (at(-1, -1) + 2.0 * at(0, -1) + at(1, -1)))
                / (8.0 * dx);
            let gy = ((at(1, -1) + 2.0 * at(1, 0) + at(1, 1))
                - (at(-1, -1) + 2.0 * at(-1, 0) + at(-1, 1)))
                / (8.0 * dy);
            out[r * cols + c] = (gx.hypot(gy)).atan().to_degrees() as f32;
        }
    }
    Ok(dem.with_band("slope", out))
}
