//! Band derivations, footprint screening, label construction and
//! standardization.

pub mod footprints;
pub mod geo;
pub mod optical;
pub mod patches;
pub mod resample;
pub mod sar;
pub mod standardize;
pub mod terrain;

pub use footprints::{
    agb_from_rh80, filter_footprints, footprint_mean, footprint_weights, geolocation_filter,
    rasterize_footprints, rh80_from_agb, FilterReport, FilterRules,
};
pub use geo::latlon_planes;
pub use optical::{spectral_index, temporal_ndvi_stats, SpectralIndex};
pub use patches::{
    default_roster, patchify, stack_channels, PatchSample, DEFAULT_ROSTER, PATCH_SIZE,
};
pub use resample::resample_bicubic;
pub use sar::{calibrate_palsar, db_ratio, focal_mean, PALSAR_CALIBRATION_FACTOR};
pub use standardize::{channel_moments, StandardizationStats};
pub use terrain::slope_degrees;
