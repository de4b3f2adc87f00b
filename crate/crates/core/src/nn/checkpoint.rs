//! Parameters as one flat BTR1 band plus a JSON table of contents.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::raster::{read_raster, write_raster, GridSpec, RasterGrid};

pub const THETA_BAND: &str = "theta";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

pub fn flatten_params(store: &ParamStore<f32>) -> (Vec<ParamEntry>, Vec<f32>) {
    let mut entries = Vec::with_capacity(store.len());
    let mut flat = Vec::with_capacity(store.numel());
    for (name, p) in store.iter() {
        entries.push(ParamEntry {
            name: name.clone(),
            kind: p.kind,
            shape: p.value.shape().to_vec(),
            offset: flat.len(),
            len: p.value.len(),
        });
        flat.extend_from_slice(p.value.data());
    }
    (entries, flat)
}

pub fn unflatten_params(entries: &[ParamEntry], flat: &[f32]) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for e in entries {
        let end = e
            .offset
            .checked_add(e.len)
            .filter(|&end| end <= flat.len())
            .ok_or_else(|| {
                Error::Integrity(format!("parameter `{}` runs past the tensor store", e.name))
            })?;
        let t = Tensor::from_vec(&e.shape, flat[e.offset..end].to_vec()).map_err(|_| {
            Error::Integrity(format!(
                "parameter `{}` length disagrees with shape",
                e.name
            ))
        })?;
        store.insert(e.name.clone(), t, e.kind)?;
    }
    if let Some(name) = store.first_non_finite() {
        return Err(Error::NonFinite(format!("stored parameter `{name}`")));
    }
    Ok(store)
}

pub fn write_param_store(
    store: &ParamStore<f32>,
    path: impl AsRef<Path>,
) -> Result<Vec<ParamEntry>> {
    let (entries, flat) = flatten_params(store);
    let grid = RasterGrid {
        spec: GridSpec::new(1, flat.len(), [0.0, 0.0], [1.0, -1.0]),
        band_names: vec![THETA_BAND.into()],
        nodata: f64::from(f32::MIN),
        values: flat,
    };
    write_raster(&grid, path)?;
    Ok(entries)
}

pub fn read_param_store(path: impl AsRef<Path>, entries: &[ParamEntry]) -> Result<ParamStore<f32>> {
    let grid = read_raster(path)?;
    if grid.bands() != 1 || grid.band_names[0] != THETA_BAND {
        return Err(Error::Integrity(
            "tensor store must hold a single `theta` band".into(),
        ));
    }
    unflatten_params(entries, &grid.values)
}
