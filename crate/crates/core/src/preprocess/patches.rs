use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_raster, write_raster, GridSpec, RasterGrid};

pub const PATCH_SIZE: usize = 64;

/// Default 29-band input roster, grouped by source:
/// Sentinel-1 (3), Sentinel-2 L2A (12), optical indices (6), PALSAR-2 (4),
/// terrain (2), position (2).
pub const DEFAULT_ROSTER: [&str; 29] = [
    "VV",
    "VH",
    "VV_VH", //
    "B1",
    "B2",
    "B3",
    "B4",
    "B5",
    "B6",
    "B7",
    "B8",
    "B8A",
    "B9",
    "B11",
    "B12", //
    "NDVI",
    "kNDVI",
    "NDMI",
    "NDVI_min",
    "NDVI_max",
    "NDVI_diff", //
    "HV",
    "HH",
    "HV_HH",
    "LIA", //
    "elevation",
    "slope", //
    "lat",
    "lon",
];

pub fn default_roster() -> Vec<String> {
    DEFAULT_ROSTER.iter().map(|s| s.to_string()).collect()
}

/// Assemble a multi-band stack in roster order from co-registered sources.
/// Each roster entry is looked up by band name across all sources.
pub fn stack_channels(sources: &[RasterGrid], roster: &[String]) -> Result<RasterGrid> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Config("no source rasters".into()))?;
    for s in sources {
        first.check_aligned(s)?;
    }
    let n = first.spec.len();
    let mut values = Vec::with_capacity(n * roster.len());
    for name in roster {
        let (src, k) = sources
            .iter()
            .find_map(|s| s.band_index(name).map(|k| (s, k)))
            .ok_or_else(|| Error::Config(format!("roster band `{name}` missing from sources")))?;
        if src.nodata == first.nodata {
            values.extend_from_slice(src.band(k));
        } else {
            let nd = first.nodata_f32();
            values.extend(
                src.band(k)
                    .iter()
                    .map(|&v| if src.is_nodata(v) { nd } else { v }),
            );
        }
    }
    let grid = RasterGrid {
        spec: first.spec.clone(),
        band_names: roster.to_vec(),
        nodata: first.nodata,
        values,
    };
    grid.validate()?;
    Ok(grid)
}

/// A square feature tile with its sparse label plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// Channel-major `channels x size x size`.
    pub features: Vec<f32>,
    /// `size x size`, biomass in Mg/ha or -1 where unlabeled.
    pub labels: Vec<f32>,
    pub channels: usize,
    pub size: usize,
    pub origin_row: usize,
    pub origin_col: usize,
    pub fold_id: usize,
}

impl PatchSample {
    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.features[k * n..(k + 1) * n]
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v >= 0.0).count()
    }
}

/// Cut a `size x size` window out of every band.
pub fn extract_window(grid: &RasterGrid, row: usize, col: usize, size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(grid.bands() * size * size);
    for b in 0..grid.bands() {
        let band = grid.band(b);
        for r in row..row + size {
            let start = r * grid.cols() + col;
            out.extend_from_slice(&band[start..start + size]);
        }
    }
    out
}

/// Non-overlapping tiles; partial edge tiles and tiles without a single
/// labeled pixel are dropped.
pub fn patchify(stack: &RasterGrid, labels: &RasterGrid, size: usize) -> Result<Vec<PatchSample>> {
    stack.check_aligned(labels)?;
    if labels.bands() != 1 {
        return Err(Error::Shape("label grid must have one band".into()));
    }
    if stack.rows() < size || stack.cols() < size {
        return Err(Error::Config(format!(
            "grid {}x{} is smaller than one {size}x{size} patch",
            stack.rows(),
            stack.cols()
        )));
    }
    let mut out = Vec::new();
    for tr in 0..stack.rows() / size {
        for tc in 0..stack.cols() / size {
            let (row, col) = (tr * size, tc * size);
            let lab = extract_window(labels, row, col, size);
            if !lab.iter().any(|&v| v >= 0.0) {
                continue;
            }
            out.push(PatchSample {
                features: extract_window(stack, row, col, size),
                labels: lab,
                channels: stack.bands(),
                size,
                origin_row: row,
                origin_col: col,
                fold_id: 0,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchEntry {
    pub file: String,
    pub origin_row: usize,
    pub origin_col: usize,
    pub labeled_pixels: usize,
}

/// Index of a patch archive directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchIndex {
    pub size: usize,
    pub roster: Vec<String>,
    pub nodata: f64,
    pub grid: GridSpec,
    pub patches: Vec<PatchEntry>,
}

/// Write one BTR1 file per patch (roster bands plus a trailing `label` band)
/// and an `index.json`.
pub fn write_patch_archive(
    dir: &Path,
    patches: &[PatchSample],
    parent: &RasterGrid,
) -> Result<PatchIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(patches.len());
    for p in patches {
        let file = format!("patch_r{:05}_c{:05}.btr", p.origin_row, p.origin_col);
        let mut names = parent.band_names.clone();
        names.push("label".to_string());
        let mut values = p.features.clone();
        values.extend_from_slice(&p.labels);
        let grid = RasterGrid {
            spec: parent
                .spec
                .window(p.origin_row, p.origin_col, p.size, p.size),
            band_names: names,
            nodata: parent.nodata,
            values,
        };
        write_raster(&grid, dir.join(&file))?;
        entries.push(PatchEntry {
            file,
            origin_row: p.origin_row,
            origin_col: p.origin_col,
            labeled_pixels: p.labeled_count(),
        });
    }
    let index = PatchIndex {
        size: patches.first().map_or(PATCH_SIZE, |p| p.size),
        roster: parent.band_names.clone(),
        nodata: parent.nodata,
        grid: parent.spec.clone(),
        patches: entries,
    };
    let json = serde_json::to_vec_pretty(&index).map_err(|e| Error::Internal(e.to_string()))?;
    let path = dir.join("index.json");
    fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(index)
}

pub fn read_patch_archive(dir: &Path) -> Result<(PatchIndex, Vec<PatchSample>)> {
    let path = dir.join("index.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: PatchIndex = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut patches = Vec::with_capacity(index.patches.len());
    for entry in &index.patches {
        let grid = read_raster(dir.join(&entry.file))?;
        let c = grid.bands() - 1;
        if grid.rows() != index.size || grid.cols() != index.size || c != index.roster.len() {
            return Err(Error::Integrity(format!(
                "patch {} has unexpected shape",
                entry.file
            )));
        }
        let n = index.size * index.size;
        patches.push(PatchSample {
            features: grid.values[..c * n].to_vec(),
            labels: grid.values[c * n..].to_vec(),
            channels: c,
            size: index.size,
            origin_row: entry.origin_row,
            origin_col: entry.origin_col,
            fold_id: 0,
        });
    }
    Ok((index, patches))
}
