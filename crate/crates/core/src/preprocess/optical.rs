//! Vegetation indices and multi-epoch NDVI statistics.

use serde::{Deserialize, Serialize};

use super::sar::single_band;
use crate::error::{Error, Result};
use crate::raster::RasterGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectralIndex {
    Ndvi,
    Kndvi,
    Ndmi,
}

impl SpectralIndex {
    /// Band names the index reads, in (positive, negative) order.
    pub fn required_bands(self) -> (&'static str, &'static str) {
        match self {
            SpectralIndex::Ndvi | SpectralIndex::Kndvi => ("B8", "B4"),
            SpectralIndex::Ndmi => ("B8", "B11"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SpectralIndex::Ndvi => "NDVI",
            SpectralIndex::Kndvi => "kNDVI",
            SpectralIndex::Ndmi => "NDMI",
        }
    }

    /// Scalar evaluation; `None` for a zero denominator.
    pub fn eval(self, pos: f64, neg: f64) -> Option<f64> {
        let den = pos + neg;
        if den == 0.0 {
            return None;
        }
        let nd = (pos - neg) / den;
        Some(match self {
            SpectralIndex::Kndvi => (nd * nd).tanh(),
            _ => nd,
        })
    }
}

/// Compute an index from a grid holding the required bands by name
/// (`B8`/`B4` for NDVI and kNDVI, `B8`/`B11` for NDMI).
pub fn spectral_index(kind: SpectralIndex, bands: &RasterGrid) -> Result<RasterGrid> {
    let (p, n) = kind.required_bands();
    let pos = bands
        .band_by_name(p)
        .map_err(|_| Error::Config(format!("{} needs band `{p}`", kind.name())))?;
    let neg = bands
        .band_by_name(n)
        .map_err(|_| Error::Config(format!("{} needs band `{n}`", kind.name())))?;
    let nd = bands.nodata_f32();
    let out = pos
        .iter()
        .zip(neg)
        .map(|(&a, &b)| {
            if bands.is_nodata(a) || bands.is_nodata(b) {
                return nd;
            }
            kind.eval(a as f64, b as f64).map_or(nd, |v| v as f32)
        })
        .collect();
    Ok(bands.with_band(kind.name(), out))
}

/// Per-pixel (min, max, max - min) over an NDVI time series, skipping nodata epochs.
pub fn temporal_ndvi_stats(stack: &[RasterGrid]) -> Result<(RasterGrid, RasterGrid, RasterGrid)> {
    let first = stack
        .first()
        .ok_or_else(|| Error::Config("temporal stack is empty".into()))?;
    let bands: Vec<&[f32]> = stack
        .iter()
        .map(|g| {
            first.check_aligned(g)?;
            single_band(g)
        })
        .collect::<Result<_>>()?;
    let nd = first.nodata_f32();
    let n = first.spec.len();
    let (mut lo, mut hi, mut diff) = (vec![nd; n], vec![nd; n], vec![nd; n]);
    for i in 0..n {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for (g, b) in stack.iter().zip(&bands) {
            let v = b[i];
            if !g.is_nodata(v) {
                min = min.min(v);
                max = max.max(v);
            }
        }
        if min.is_finite() {
            lo[i] = min;
            hi[i] = max;
            diff[i] = max - min;
        }
    }
    Ok((
        first.with_band("NDVI_min", lo),
        first.with_band("NDVI_max", hi),
        first.with_band("NDVI_diff", diff),
    ))
}
