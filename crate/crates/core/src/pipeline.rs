//! End-to-end scene preparation: sensor rasters and raw footprints in, a
//! co-registered feature stack and sparse label plane out.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{
    calibrate_palsar, db_ratio, default_roster, filter_footprints, focal_mean, geolocation_filter,
    latlon_planes, rasterize_footprints, resample_bicubic, slope_degrees, spectral_index,
    stack_channels, temporal_ndvi_stats, FilterReport, FilterRules, SpectralIndex,
};
use crate::raster::{read_raster, write_footprints, write_raster, FootprintRecord, RasterGrid};

pub const STACK_FILE: &str = "stack.btr";
pub const LABELS_FILE: &str = "labels.btr";
pub const FILTERED_FILE: &str = "footprints_filtered.csv";
pub const REPORT_FILE: &str = "filter_report.json";

const SOURCE_FILES: [&str; 5] = [
    "s1.btr",
    "s2.btr",
    "ndvi_epochs.btr",
    "palsar.btr",
    "dem.btr",
];

/// Raw sensor rasters. `s1` (VV, VH in dB), `s2` (reflectance bands by name)
/// and `ndvi_epochs` share the target grid; `palsar` (HV, HH as DN plus LIA
/// in degrees) and `dem` (elevation) may be coarser by an integer factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    pub s1: RasterGrid,
    pub s2: RasterGrid,
    pub ndvi_epochs: RasterGrid,
    pub palsar: RasterGrid,
    pub dem: RasterGrid,
}

impl SourceSet {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (g, f) in self.grids().into_iter().zip(SOURCE_FILES) {
            write_raster(g, dir.join(f))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let r = |f: &str| read_raster(dir.join(f));
        Ok(Self {
            s1: r(SOURCE_FILES[0])?,
            s2: r(SOURCE_FILES[1])?,
            ndvi_epochs: r(SOURCE_FILES[2])?,
            palsar: r(SOURCE_FILES[3])?,
            dem: r(SOURCE_FILES[4])?,
        })
    }

    fn grids(&self) -> [&RasterGrid; 5] {
        [
            &self.s1,
            &self.s2,
            &self.ndvi_epochs,
            &self.palsar,
            &self.dem,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Radius of the speckle filter applied to SAR bands, pixels.
    pub focal_radius: usize,
    pub filter: FilterRules,
    pub roster: Vec<String>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            focal_radius: 1,
            filter: FilterRules::default(),
            roster: default_roster(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub quality: FilterReport,
    pub geolocation: FilterReport,
    /// PALSAR pixels with non-positive DN, set to nodata.
    pub palsar_dropped: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub stack: RasterGrid,
    pub labels: RasterGrid,
    pub footprints: Vec<FootprintRecord>,
    pub report: PreprocessReport,
}

fn renamed(mut g: RasterGrid, name: &str) -> RasterGrid {
    g.band_names = vec![name.to_string()];
    g
}

fn upsample_factor(coarse: &RasterGrid, target: &RasterGrid) -> Result<f64> {
    let f = coarse.spec.pixel_size[0] / target.spec.pixel_size[0];
    let ok = f >= 1.0
        && (f - f.round()).abs() < 1e-9
        && coarse.spec.origin == target.spec.origin
        && coarse.rows() as f64 * f == target.rows() as f64
        && coarse.cols() as f64 * f == target.cols() as f64;
    if !ok {
        return Err(Error::Shape(format!(
            "{}x{} grid at {} m does not nest in the {}x{} target grid",
            coarse.rows(),
            coarse.cols(),
            coarse.spec.pixel_size[0],
            target.rows(),
            target.cols()
        )));
    }
    Ok(f.round())
}

/// All derived bands on the target grid, plus the HV gamma-naught plane the
/// geolocation screen needs. Band selection and order follow `roster`.
pub fn build_stack(
    src: &SourceSet,
    config: &PreprocessConfig,
) -> Result<(RasterGrid, RasterGrid, usize)> {
    let target = &src.s1;
    let rad = config.focal_radius;
    let mut planes: Vec<RasterGrid> = Vec::new();

    let vv = focal_mean(
        &renamed(
            src.s1
                .band_grid(src.s1.band_index("VV").ok_or_else(missing("VV"))?),
            "VV",
        ),
        rad,
    )?;
    let vh = focal_mean(
        &renamed(
            src.s1
                .band_grid(src.s1.band_index("VH").ok_or_else(missing("VH"))?),
            "VH",
        ),
        rad,
    )?;
    planes.push(renamed(db_ratio(&vv, &vh)?, "VV_VH"));
    planes.extend([vv, vh]);

    target.check_aligned(&src.s2)?;
    for kind in [
        SpectralIndex::Ndvi,
        SpectralIndex::Kndvi,
        SpectralIndex::Ndmi,
    ] {
        planes.push(spectral_index(kind, &src.s2)?);
    }
    planes.push(src.s2.clone());

    target.check_aligned(&src.ndvi_epochs)?;
    let epochs: Vec<RasterGrid> = (0..src.ndvi_epochs.bands())
        .map(|k| src.ndvi_epochs.band_grid(k))
        .collect();
    let (lo, hi, diff) = temporal_ndvi_stats(&epochs)?;
    planes.extend([lo, hi, diff]);

    let pf = upsample_factor(&src.palsar, target)?;
    let mut palsar_dropped = 0;
    let mut hv_db = None;
    let mut pol = Vec::new();
    for name in ["HV", "HH"] {
        let k = src.palsar.band_index(name).ok_or_else(missing(name))?;
        let (db, dropped) = calibrate_palsar(&src.palsar.band_grid(k))?;
        palsar_dropped += dropped;
        let fine = renamed(resample_bicubic(&focal_mean(&db, rad)?, pf)?, name);
        if name == "HV" {
            hv_db = Some(fine.clone());
        }
        pol.push(fine);
    }
    planes.push(renamed(db_ratio(&pol[0], &pol[1])?, "HV_HH"));
    planes.extend(pol);
    let lia = src.palsar.band_index("LIA").ok_or_else(missing("LIA"))?;
    planes.push(renamed(
        resample_bicubic(&src.palsar.band_grid(lia), pf)?,
        "LIA",
    ));

    let df = upsample_factor(&src.dem, target)?;
    let elevation = renamed(resample_bicubic(&src.dem.band_grid(0), df)?, "elevation");
    planes.push(slope_degrees(&elevation)?);
    planes.push(elevation);

    let (lat, lon) = latlon_planes(&target.spec);
    planes.extend([lat, lon]);

    let stack = stack_channels(&planes, &config.roster)?;
    let hv = hv_db.ok_or_else(|| Error::Internal("HV plane not built".into()))?;
    Ok((stack, hv, palsar_dropped))
}

fn missing(name: &'static str) -> impl Fn() -> Error {
    move || Error::Config(format!("source band `{name}` is missing"))
}

/// Build the stack, screen footprints on quality then geolocation, and
/// rasterize the survivors into the label plane.
pub fn prepare_scene(
    src: &SourceSet,
    footprints: &[FootprintRecord],
    config: &PreprocessConfig,
) -> Result<Scene> {
    let (stack, hv, palsar_dropped) = build_stack(src, config)?;
    let (kept, quality) = filter_footprints(footprints, &config.filter);
    let kndvi = spectral_index(SpectralIndex::Kndvi, &src.s2)?;
    let (kept, geolocation) = geolocation_filter(&kept, &kndvi, &hv)?;
    let labels = rasterize_footprints(&kept, &stack.spec)?;
    log::info!(
        "footprints: {} in, {} after quality, {} after geolocation",
        footprints.len(),
        quality.output_count,
        geolocation.output_count
    );
    Ok(Scene {
        stack,
        labels,
        footprints: kept,
        report: PreprocessReport {
            quality,
            geolocation,
            palsar_dropped,
        },
    })
}

pub fn write_prepared(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_raster(&scene.stack, dir.join(STACK_FILE))?;
    write_raster(&scene.labels, dir.join(LABELS_FILE))?;
    write_footprints(&scene.footprints, dir.join(FILTERED_FILE))?;
    let json =
        serde_json::to_vec_pretty(&scene.report).map_err(|e| Error::Internal(e.to_string()))?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_landscape, sample_footprints, SynthSpec};

    #[test]
    fn stack_follows_roster_and_labels_are_sparse() {
        let spec = SynthSpec {
            rows: 128,
            cols: 128,
            ..SynthSpec::default()
        };
        let land = generate_landscape(&spec).unwrap();
        let fps = sample_footprints(&land.truth, &spec).unwrap();
        let scene = prepare_scene(&land.sources, &fps, &PreprocessConfig::default()).unwrap();
        assert_eq!(scene.stack.band_names, default_roster());
        assert!(scene.stack.values.iter().all(|v| v.is_finite()));
        assert_eq!(scene.report.palsar_dropped, 0);
        let labeled = scene.labels.values.iter().filter(|&&v| v >= 0.0).count();
        assert!(labeled > 0 && labeled < scene.labels.values.len() / 4);
        assert!(scene.footprints.len() < fps.len());
        assert_eq!(
            scene.report.geolocation.output_count,
            scene.footprints.len()
        );
    }

    #[test]
    fn coarse_grid_must_nest() {
        let spec = SynthSpec {
            rows: 64,
            cols: 64,
            ..SynthSpec::default()
        };
        let mut src = generate_landscape(&spec).unwrap().sources;
        src.dem.spec.origin[0] += 5.0;
        assert!(matches!(
            build_stack(&src, &PreprocessConfig::default()),
            Err(Error::Shape(_))
        ));
    }
}
