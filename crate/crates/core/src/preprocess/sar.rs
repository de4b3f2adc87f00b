//! SAR band conditioning: PALSAR DN calibration, speckle smoothing and
//! polarization ratios.

use crate::error::{Error, Result};
use crate::raster::RasterGrid;

/// Calibration factor of the PALSAR-2 mosaic, in dB.
pub const PALSAR_CALIBRATION_FACTOR: f64 = -83.0;

pub(crate) fn single_band(grid: &RasterGrid) -> Result<&[f32]> {
    if grid.bands() != 1 {
        return Err(Error::Shape(format!(
            "expected a single-band grid, got {} bands",
            grid.bands()
        )));
    }
    Ok(grid.band(0))
}

/// Gamma-naught in dB for one digital number: `10 log10(DN^2) + CF`.
pub fn palsar_gamma0(dn: f64) -> Option<f64> {
    (dn > 0.0 && dn.is_finite()).then(|| 10.0 * (dn * dn).log10() + PALSAR_CALIBRATION_FACTOR)
}

/// Convert a DN band to gamma-naught dB. Returns the band and the number of
/// pixels that were set to nodata (non-positive DN or input nodata).
pub fn calibrate_palsar(dn: &RasterGrid) -> Result<(RasterGrid, usize)> {
    let src = single_band(dn)?;
    let nd = dn.nodata_f32();
    let mut dropped = 0;
    let out = src
        .iter()
        .map(|&v| {
            match (!dn.is_nodata(v))
                .then(|| palsar_gamma0(v as f64))
                .flatten()
            {
                Some(db) => db as f32,
                None => {
                    dropped += 1;
                    nd
                }
            }
        })
        .collect();
    Ok((dn.with_band("gamma0_db", out), dropped))
}

/// Mean over the `(2r+1)^2` window clipped to the grid, skipping nodata.
pub fn focal_mean(band: &RasterGrid, radius: usize) -> Result<RasterGrid> {
    if radius < 1 {
        return Err(Error::Config("focal mean radius must be >= 1".into()));
    }
    let src = single_band(band)?;
    let (rows, cols) = (band.rows(), band.cols());
    // Summed-area tables of values and valid counts, (rows+1) x (cols+1).
    let stride = cols + 1;
    let mut sum = vec![0.0f64; (rows + 1) * stride];
    let mut cnt = vec![0u32; (rows + 1) * stride];
    for r in 0..rows {
        let mut row_sum = 0.0;
        let mut row_cnt = 0;
        for c in 0..cols {
            let v = src[r * cols + c];
            if !band.is_nodata(v) {
                row_sum += v as f64;
                row_cnt += 1;
            }
            sum[(r + 1) * stride + c + 1] = sum[r * stride + c + 1] + row_sum;
            cnt[(r + 1) * stride + c + 1] = cnt[r * stride + c + 1] + row_cnt;
        }
    }
    let nd = band.nodata_f32();
    let mut out = vec![nd; rows * cols];
    for r in 0..rows {
        let r0 = r.saturating_sub(radius);
        let r1 = (r + radius + 1).min(rows);
        for c in 0..cols {
            let c0 = c.saturating_sub(radius);
            let c1 = (c + radius + 1).min(cols);
            let s = sum[r1 * stride + c1] - sum[r0 * stride + c1] - sum[r1 * stride + c0]
                + sum[r0 * stride + c0];
            let n = cnt[r1 * stride + c1] + cnt[r0 * stride + c0]
                - cnt[r0 * stride + c1]
                - cnt[r1 * stride + c0];
            if n > 0 {
                out[r * cols + c] = (s / n as f64) as f32;
            }
        }
    }
    Ok(band.with_band(band.band_names[0].clone(), out))
}

/// Ratio of two backscatter bands expressed in dB: `a_db - b_db`.
pub fn db_ratio(a_db: &RasterGrid, b_db: &RasterGrid) -> Result<RasterGrid> {
    let a = single_band(a_db)?;
    let b = single_band(b_db)?;
    a_db.check_aligned(b_db)?;
    let nd = a_db.nodata_f32();
    let out = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            if a_db.is_nodata(x) || b_db.is_nodata(y) {
                nd
            } else {
                (x as f64 - y as f64) as f32
            }
        })
        .collect();
    Ok(a_db.with_band("ratio_db", out))
}
