use crate::error::{Error, Result};
use crate::raster::RasterGrid;

/// Per-pixel mean and population standard deviation across fold maps.
/// A pixel that is nodata in any map is nodata in both outputs.
pub fn ensemble(maps: &[RasterGrid]) -> Result<(RasterGrid, RasterGrid)> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Config("ensemble of zero maps".into()))?;
    if first.bands() != 1 {
        return Err(Error::Shape("ensemble members must be single-band".into()));
    }
    for m in &maps[1..] {
        first.check_aligned(m)?;
        if m.bands() != 1 {
            return Err(Error::Shape("ensemble members must be single-band".into()));
        }
    }
    let n = maps.len() as f64;
    let nodata = first.nodata_f32();
    let len = first.values.len();
    let (mut mean, mut std) = (vec![nodata; len], vec![nodata; len]);
    for i in 0..len {
        if maps.iter().any(|m| m.is_nodata(m.values[i])) {
            continue;
        }
        let mu = maps.iter().map(|m| m.values[i] as f64).sum::<f64>() / n;
        let var = maps
            .iter()
            .map(|m| (m.values[i] as f64 - mu).powi(2))
            .sum::<f64>()
            / n;
        mean[i] = mu as f32;
        std[i] = var.sqrt() as f32;
    }
    Ok((
        RasterGrid::from_band(first.spec.clone(), "agb_mean", first.nodata, mean)?,
        RasterGrid::from_band(first.spec.clone(), "agb_std", first.nodata, std)?,
    ))
}

/// Keep biomass where the mask is 1, nodata where it is 0 or nodata.
pub fn apply_forest_mask(agb: &RasterGrid, mask: &RasterGrid) -> Result<RasterGrid> {
    agb.check_aligned(mask)?;
    if mask.bands() != 1 {
        return Err(Error::Shape("forest mask must be single-band".into()));
    }
    let nodata = agb.nodata_f32();
    let mut out = agb.clone();
    for b in 0..agb.bands() {
        let band = out.band_mut(b);
        for (i, v) in band.iter_mut().enumerate() {
            let m = mask.values[i];
            if mask.is_nodata(m) || m == 0.0 {
                *v = nodata;
            } else if m != 1.0 {
                return Err(Error::Domain(format!(
                    "forest mask value {m} at ({}, {}) is not 0, 1 or nodata",
                    i / mask.cols(),
                    i % mask.cols()
                )));
            }
        }
    }
    Ok(out)
}
