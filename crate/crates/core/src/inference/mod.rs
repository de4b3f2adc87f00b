//! Whole-raster prediction, fold ensembles, masking and figures.

pub mod ensemble;
pub mod plot;
pub mod tiles;

pub use ensemble::{apply_forest_mask, ensemble};
pub use tiles::{
    plan_tiles, predict_map, predict_pixelwise, predict_tiled, predict_tiled_ordered,
    predict_tiles_with, seam_discontinuity, stitch, TilePlan, OVERLAP, TILE, TRIM,
};
