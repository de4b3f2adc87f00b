use super::sar::single_band;
use crate::error::{Error, Result};
use crate::raster::{GridSpec, RasterGrid};

/// Keys cubic convolution kernel with a = -0.5.
fn keys(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic resampling. `factor` is source pixel size over target pixel size,
/// so `factor = 2.5` takes a 25 m grid to 10 m. The upper-left corner is kept;
/// sample coordinates outside the source are clamped to the edge pixels.
pub fn resample_bicubic(band: &RasterGrid, factor: f64) -> Result<RasterGrid> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Config(format!(
            "resample factor must be positive, got {factor}"
        )));
    }
    let src = single_band(band)?;
    let (rows, cols) = (band.rows(), band.cols());
    let out_rows = (rows as f64 * factor).round() as usize;
    let out_cols = (cols as f64 * factor).round() as usize;
    if out_rows == 0 || out_cols == 0 {
        return Err(Error::Config("resampling produces an empty grid".into()));
    }
    let spec = GridSpec {
        rows: out_rows,
        cols: out_cols,
        origin: band.spec.origin,
        pixel_size: [
            band.spec.pixel_size[0] / factor,
            band.spec.pixel_size[1] / factor,
        ],
        crs: band.spec.crs.clone(),
    };
    let nd = band.nodata_f32();
    let at = |r: isize, c: isize| -> f32 {
        let r = r.clamp(0, rows as isize - 1) as usize;
        let c = c.clamp(0, cols as isize - 1) as usize;
        src[r * cols + c]
    };
    let mut out = vec![nd; out_rows * out_cols];
    for i in 0..out_rows {
        let sy = (i as f64 + 0.5) / factor - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let wy = [keys(fy + 1.0), keys(fy), keys(fy - 1.0), keys(fy - 2.0)];
        for j in 0..out_cols {
            let sx = (j as f64 + 0.5) / factor - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let wx = [keys(fx + 1.0), keys(fx), keys(fx - 1.0), keys(fx - 2.0)];
            let mut acc = 0.0;
            let mut valid = true;
            'taps: for (dy, &wyk) in wy.iter().enumerate() {
                if wyk == 0.0 {
                    continue;
                }
                for (dx, &wxk) in wx.iter().enumerate() {
                    if wxk == 0.0 {
                        continue;
                    }
                    let v = at(y0 as isize + dy as isize - 1, x0 as isize + dx as isize - 1);
                    if band.is_nodata(v) {
                        valid = false;
                        break 'taps;
                    }
                    acc += wyk * wxk * v as f64;
                }
            }
            if valid {
                out[i * out_cols + j] = acc as f32;
            }
        }
    }
    RasterGrid::from_band(spec, band.band_names[0].clone(), band.nodata, out)
}
