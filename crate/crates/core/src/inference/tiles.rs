use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::preprocess::patches::extract_window;
use crate::preprocess::PatchSample;
use crate::raster::{RasterGrid, DEFAULT_NODATA};
use crate::training::{predict_samples, ModelCheckpoint};

pub const TILE: usize = 64;
pub const OVERLAP: usize = 10;
pub const TRIM: usize = 3;

/// Tile origins along each axis; tiles are the cartesian product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub rows: usize,
    pub cols: usize,
    pub tile: usize,
    pub trim: usize,
    pub row_origins: Vec<usize>,
    pub col_origins: Vec<usize>,
}

fn axis_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let last = len - tile;
    let mut out: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o < last)
        .collect();
    out.push(last);
    out.dedup();
    out
}

impl TilePlan {
    /// Origins every `tile - overlap` pixels, the last one clamped to the
    /// far edge.
    pub fn new(rows: usize, cols: usize, tile: usize, overlap: usize, trim: usize) -> Result<Self> {
        if tile == 0 || overlap >= tile || 2 * trim >= tile {
            return Err(Error::Config(format!(
                "tile {tile}, overlap {overlap}, trim {trim} is not a usable tiling"
            )));
        }
        if rows < tile || cols < tile {
            return Err(Error::Config(format!(
                "raster {rows}x{cols} is smaller than one {tile}x{tile} tile"
            )));
        }
        let stride = tile - overlap;
        Ok(Self {
            rows,
            cols,
            tile,
            trim,
            row_origins: axis_origins(rows, tile, stride),
            col_origins: axis_origins(cols, tile, stride),
        })
    }

    /// Abutting tiles with nothing trimmed.
    pub fn naive(rows: usize, cols: usize, tile: usize) -> Result<Self> {
        Self::new(rows, cols, tile, 0, 0)
    }

    pub fn origins(&self) -> Vec<(usize, usize)> {
        self.row_origins
            .iter()
            .flat_map(|&r| self.col_origins.iter().map(move |&c| (r, c)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.row_origins.len() * self.col_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Retained half-open local range of a tile starting at `origin` on an
    /// axis of length `len`: the trim ring is dropped except at raster edges.
    pub fn kept(&self, origin: usize, len: usize) -> (usize, usize) {
        let lo = if origin == 0 { 0 } else { self.trim };
        let hi = if origin + self.tile == len {
            self.tile
        } else {
            self.tile - self.trim
        };
        (lo, hi)
    }

    /// Per-pixel number of retained tile contributions.
    pub fn coverage(&self) -> Vec<u32> {
        let mut count = vec![0u32; self.rows * self.cols];
        for (r0, c0) in self.origins() {
            let (rl, rh) = self.kept(r0, self.rows);
            let (cl, ch) = self.kept(c0, self.cols);
            for r in r0 + rl..r0 + rh {
                for c in c0 + cl..c0 + ch {
                    count[r * self.cols + c] += 1;
                }
            }
        }
        count
    }

    /// Indices `i` such that the set of tiles retaining pixel `i - 1` and
    /// pixel `i` differ along one axis.
    fn axis_seams(&self, origins: &[usize], len: usize) -> Vec<usize> {
        let owners = |i: usize| -> Vec<usize> {
            origins
                .iter()
                .enumerate()
                .filter(|(_, &o)| {
                    let (lo, hi) = self.kept(o, len);
                    i >= o + lo && i < o + hi
                })
                .map(|(k, _)| k)
                .collect()
        };
        (1..len).filter(|&i| owners(i - 1) != owners(i)).collect()
    }

    pub fn row_seams(&self) -> Vec<usize> {
        self.axis_seams(&self.row_origins, self.rows)
    }

    pub fn col_seams(&self) -> Vec<usize> {
        self.axis_seams(&self.col_origins, self.cols)
    }
}

pub fn plan_tiles(rows: usize, cols: usize, tile: usize, overlap: usize) -> Result<TilePlan> {
    TilePlan::new(rows, cols, tile, overlap, TRIM)
}

/// Stitch per-tile predictions. `tiles[k]` is the `tile x tile` output of
/// the k-th origin of `plan.origins()`. Contributions are summed in plan
/// order whatever order the tiles were produced in, then divided by the
/// per-pixel count.
pub fn stitch(plan: &TilePlan, tiles: &[Vec<f32>]) -> Result<Vec<f32>> {
    let origins = plan.origins();
    if tiles.len() != origins.len() {
        return Err(Error::Shape(format!(
            "{} tiles for a plan of {}",
            tiles.len(),
            origins.len()
        )));
    }
    let t = plan.tile;
    let mut sum = vec![0.0f64; plan.rows * plan.cols];
    let mut count = vec![0u32; plan.rows * plan.cols];
    for (&(r0, c0), pred) in origins.iter().zip(tiles) {
        if pred.len() != t * t {
            return Err(Error::Shape(format!(
                "tile prediction of {} values, expected {}",
                pred.len(),
                t * t
            )));
        }
        let (rl, rh) = plan.kept(r0, plan.rows);
        let (cl, ch) = plan.kept(c0, plan.cols);
        for r in rl..rh {
            for c in cl..ch {
                let idx = (r0 + r) * plan.cols + c0 + c;
                sum[idx] += pred[r * t + c] as f64;
                count[idx] += 1;
            }
        }
    }
    sum.iter()
        .zip(&count)
        .enumerate()
        .map(|(i, (&s, &n))| {
            if n == 0 {
                Err(Error::Internal(format!(
                    "pixel ({}, {}) is not covered by the tile plan",
                    i / plan.cols,
                    i % plan.cols
                )))
            } else {
                Ok((s / n as f64) as f32)
            }
        })
        .collect()
}

/// Run `predict` on every tile in `order` (a permutation of tile indices)
/// and stitch the results.
pub fn predict_tiles_with<F>(plan: &TilePlan, order: &[usize], mut predict: F) -> Result<Vec<f32>>
where
    F: FnMut(usize, usize, usize) -> Result<Vec<f32>>,
{
    let origins = plan.origins();
    let mut tiles: Vec<Option<Vec<f32>>> = vec![None; origins.len()];
    for &k in order {
        let (r, c) = *origins
            .get(k)
            .ok_or_else(|| Error::Config(format!("tile index {k} outside the plan")))?;
        tiles[k] = Some(predict(k, r, c)?);
    }
    let tiles: Vec<Vec<f32>> = tiles
        .into_iter()
        .enumerate()
        .map(|(k, t)| t.ok_or_else(|| Error::Internal(format!("tile {k} was never predicted"))))
        .collect::<Result<_>>()?;
    stitch(plan, &tiles)
}

fn agb_grid(stack: &RasterGrid, values: Vec<f32>) -> Result<RasterGrid> {
    RasterGrid::from_band(stack.spec.clone(), "agb", DEFAULT_NODATA, values)
}

/// Whole-raster biomass from a spatial model, tiles visited in `order`.
pub fn predict_tiled_ordered(
    ckpt: &ModelCheckpoint,
    stack: &RasterGrid,
    plan: &TilePlan,
    order: &[usize],
) -> Result<RasterGrid> {
    if ckpt.desc.kind == ModelKind::AuFc {
        return Err(Error::Config(
            "the pixel-independent model is not tiled; use predict_map".into(),
        ));
    }
    if plan.tile != ckpt.desc.patch_size || plan.rows != stack.rows() || plan.cols != stack.cols() {
        return Err(Error::Shape(
            "tile plan does not match the model or the raster".into(),
        ));
    }
    if stack.bands() != ckpt.roster.len() {
        return Err(Error::Shape(format!(
            "stack has {} bands, the model expects {}",
            stack.bands(),
            ckpt.roster.len()
        )));
    }
    let nodata = stack.nodata_f32();
    let t = plan.tile;
    let values = predict_tiles_with(plan, order, |_, r, c| {
        let sample = PatchSample {
            features: extract_window(stack, r, c, t),
            labels: vec![-1.0; t * t],
            channels: stack.bands(),
            size: t,
            origin_row: r,
            origin_col: c,
            fold_id: 0,
        };
        Ok(predict_samples(ckpt, &[sample], nodata)?.remove(0))
    })?;
    agb_grid(stack, values)
}

pub fn predict_tiled(
    ckpt: &ModelCheckpoint,
    stack: &RasterGrid,
    plan: &TilePlan,
) -> Result<RasterGrid> {
    let order: Vec<usize> = (0..plan.len()).collect();
    predict_tiled_ordered(ckpt, stack, plan, &order)
}

/// Per-pixel prediction with the pixel-independent model.
pub fn predict_pixelwise(ckpt: &ModelCheckpoint, stack: &RasterGrid) -> Result<RasterGrid> {
    if ckpt.desc.kind != ModelKind::AuFc {
        return Err(Error::Config(
            "pixelwise prediction needs the pixel-independent model".into(),
        ));
    }
    let (c, n) = (stack.bands(), stack.rows() * stack.cols());
    let nodata = stack.nodata_f32();
    let mut out = Vec::with_capacity(n);
    let chunk = 256;
    for start in (0..n).step_by(chunk) {
        let samples: Vec<PatchSample> = (start..(start + chunk).min(n))
            .map(|i| PatchSample {
                features: (0..c).map(|b| stack.band(b)[i]).collect(),
                labels: vec![-1.0],
                channels: c,
                size: 1,
                origin_row: i / stack.cols(),
                origin_col: i % stack.cols(),
                fold_id: 0,
            })
            .collect();
        out.extend(
            predict_samples(ckpt, &samples, nodata)?
                .into_iter()
                .map(|v| v[0]),
        );
    }
    agb_grid(stack, out)
}

/// Overlap-and-trim tiling for spatial models, per-pixel for the
/// pixel-independent one.
pub fn predict_map(ckpt: &ModelCheckpoint, stack: &RasterGrid) -> Result<RasterGrid> {
    if ckpt.desc.kind == ModelKind::AuFc {
        return predict_pixelwise(ckpt, stack);
    }
    let plan = plan_tiles(stack.rows(), stack.cols(), ckpt.desc.patch_size, OVERLAP)?;
    predict_tiled(ckpt, stack, &plan)
}

/// Mean absolute neighbour difference across the plan's seams minus the
/// same quantity over all other neighbour pairs: the jump a stitched map
/// shows at tile transitions beyond its ordinary texture.
pub fn seam_discontinuity(map: &[f32], plan: &TilePlan) -> f64 {
    let (rows, cols) = (plan.rows, plan.cols);
    let row_seam: Vec<bool> = {
        let mut v = vec![false; rows];
        plan.row_seams().into_iter().for_each(|i| v[i] = true);
        v
    };
    let col_seam: Vec<bool> = {
        let mut v = vec![false; cols];
        plan.col_seams().into_iter().for_each(|i| v[i] = true);
        v
    };
    let (mut seam, mut ns, mut other, mut no) = (0.0, 0usize, 0.0, 0usize);
    for r in 0..rows {
        for c in 0..cols {
            let v = map[r * cols + c] as f64;
            if c > 0 {
                let d = (v - map[r * cols + c - 1] as f64).abs();
                if col_seam[c] {
                    seam += d;
                    ns += 1;
                } else {
                    other += d;
                    no += 1;
                }
            }
            if r > 0 {
                let d = (v - map[(r - 1) * cols + c] as f64).abs();
                if row_seam[r] {
                    seam += d;
                    ns += 1;
                } else {
                    other += d;
                    no += 1;
                }
            }
        }
    }
    if ns == 0 {
        return 0.0;
    }
    (seam / ns as f64 - other / no.max(1) as f64).max(0.0)
}
