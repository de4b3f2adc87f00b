//! Synthetic landscapes with known biomass and lidar-like sparse sampling.
//!
//! A smooth latent field sets the true biomass. Sensor rasters are noisy,
//! saturating transforms of it, written at their native resolutions so the
//! full preprocessing chain runs on them. The NIR and HH bands also carry a
//! zero-mean texture whose amplitude grows with biomass; it averages out
//! within a pixel or footprint and can only be read from a neighbourhood.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::SourceSet;
use crate::preprocess::footprints::{
    RULE_COVERAGE_BEAM, RULE_DAYTIME, RULE_DEGRADED, RULE_LOW_QUALITY, RULE_SENSITIVITY,
};
use crate::preprocess::{footprint_mean, rh80_from_agb, PALSAR_CALIBRATION_FACTOR};
use crate::raster::{
    write_footprints, write_raster, BeamType, FootprintRecord, GridSpec, RasterGrid, DEFAULT_NODATA,
};

pub const MAX_AGB: f64 = 300.0;
pub const TRUTH_FILE: &str = "truth_agb.btr";
pub const FOREST_MASK_FILE: &str = "forest_mask.btr";
pub const FOOTPRINTS_FILE: &str = "footprints.csv";
pub const SPEC_FILE: &str = "synth_spec.json";

/// Biomass below which a pixel counts as non-forest in the mask.
const FOREST_MIN_AGB: f32 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_channels: usize,
    pub seed: u64,
    /// Target pixel size in meters.
    pub pixel_size: f64,
    /// Smoothing scale of the biomass field, pixels.
    pub correlation_length: f64,
    /// Label noise on footprint biomass, Mg/ha.
    pub noise_std: f64,
    /// Multiplier on every sensor noise term.
    pub sensor_noise: f64,
    /// Along-track distance between footprint centers, meters.
    pub footprint_spacing: f64,
    pub footprint_radius: f64,
    /// Cross-track distance between parallel tracks, meters.
    pub track_spacing: f64,
    /// Track heading, degrees clockwise from north.
    pub track_angle: f64,
    /// Fraction of footprints given exactly one failing quality field.
    pub quality_fail_fraction: f64,
    /// Fraction of footprints whose reported center is displaced from the
    /// point actually measured.
    pub geolocation_error_fraction: f64,
    /// Fraction of the scene under cloud in the optical bands.
    pub cloud_fraction: f64,
    pub palsar_pixel_size: f64,
    pub dem_pixel_size: f64,
    pub ndvi_epochs: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            rows: 512,
            cols: 512,
            n_channels: 29,
            seed: 0,
            pixel_size: 10.0,
            correlation_length: 12.0,
            noise_std: 10.0,
            sensor_noise: 1.0,
            footprint_spacing: 60.0,
            footprint_radius: 12.5,
            track_spacing: 150.0,
            track_angle: 12.0,
            quality_fail_fraction: 0.15,
            geolocation_error_fraction: 0.03,
            cloud_fraction: 0.25,
            palsar_pixel_size: 20.0,
            dem_pixel_size: 40.0,
            ndvi_epochs: 4,
        }
    }
}

impl SynthSpec {
    pub fn palsar_factor(&self) -> usize {
        (self.palsar_pixel_size / self.pixel_size).round() as usize
    }

    pub fn dem_factor(&self) -> usize {
        (self.dem_pixel_size / self.pixel_size).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.correlation_length < 1.0 {
            return bad(format!(
                "correlation length {} < 1 pixel",
                self.correlation_length
            ));
        }
        if self.noise_std < 0.0 || self.sensor_noise < 0.0 {
            return bad("noise levels must be >= 0".into());
        }
        if self.n_channels != 29 {
            return bad(format!(
                "the simulated sensors yield 29 channels, not {}",
                self.n_channels
            ));
        }
        if !(self.pixel_size > 0.0 && self.footprint_spacing > 0.0 && self.footprint_radius > 0.0)
            || !(self.track_spacing > 0.0)
        {
            return bad("sizes and spacings must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.quality_fail_fraction)
            || !(0.0..=1.0).contains(&self.geolocation_error_fraction)
            || !(0.0..1.0).contains(&self.cloud_fraction)
        {
            return bad("fractions must lie in [0, 1]".into());
        }
        if self.ndvi_epochs == 0 {
            return bad("need at least one NDVI epoch".into());
        }
        for (name, size) in [
            ("PALSAR", self.palsar_pixel_size),
            ("DEM", self.dem_pixel_size),
        ] {
            let f = size / self.pixel_size;
            if f < 1.0 || (f - f.round()).abs() > 1e-9 {
                return bad(format!(
                    "{name} pixel size must be an integer multiple of the target"
                ));
            }
            let f = f.round() as usize;
            if self.rows % f != 0 || self.cols % f != 0 || self.rows / f < 4 || self.cols / f < 4 {
                return bad(format!(
                    "{}x{} grid does not divide into {name} pixels",
                    self.rows, self.cols
                ));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        let mut g = GridSpec::new(
            self.rows,
            self.cols,
            [500_000.0, 2_600_000.0],
            [self.pixel_size, -self.pixel_size],
        );
        g.crs = "EPSG:32649".into();
        g
    }
}

/// Ground truth plus the simulated sensor rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub spec: SynthSpec,
    pub truth: RasterGrid,
    pub forest_mask: RasterGrid,
    pub sources: SourceSet,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Gaussian-filtered white noise, standardized to mean 0 and unit variance.
/// The noise is drawn on a padded canvas so the filter has no edge effects.
pub fn smooth_field(rows: usize, cols: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = k.len() / 2;
    let (pr, pc) = (rows + 2 * r, cols + 2 * r);
    let noise: Vec<f64> = (0..pr * pc).map(|_| normal(rng)).collect();
    let mut tmp = vec![0.0; pr * cols];
    for i in 0..pr {
        for j in 0..cols {
            tmp[i * cols + j] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * noise[i * pc + j + t])
                .sum();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[(i + t) * cols + j])
                .sum();
        }
    }
    standardize(&mut out);
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - m) / s);
}

/// Mean over `f x f` blocks.
fn block_mean(v: &[f64], rows: usize, cols: usize, f: usize) -> Vec<f64> {
    let (br, bc) = (rows / f, cols / f);
    let mut out = vec![0.0; br * bc];
    for i in 0..rows {
        for j in 0..cols {
            out[(i / f) * bc + j / f] += v[i * cols + j];
        }
    }
    let area = (f * f) as f64;
    out.iter_mut().for_each(|x| *x /= area);
    out
}

/// Opacity in [0, 1]: zero below the `1 - fraction` quantile of `field`,
/// ramping to fully opaque over 0.3 standard deviations.
fn cloud_opacity(field: &[f64], fraction: f64) -> Vec<f64> {
    if fraction <= 0.0 {
        return vec![0.0; field.len()];
    }
    let mut sorted = field.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((1.0 - fraction) * sorted.len() as f64) as usize;
    let t = sorted[k.min(sorted.len() - 1)];
    field
        .iter()
        .map(|&f| ((f - t) / 0.3).clamp(0.0, 1.0))
        .collect()
}

fn saturating(k: f64, a: f64) -> f64 {
    1.0 - (-k * a).exp()
}

/// Noise-free NIR/red pair for relative biomass `a` in [0, 1].
fn clean_nir_red(a: f64) -> (f64, f64) {
    let v = saturating(6.0, a);
    (0.23 + 0.17 * v, 0.12 - 0.09 * v)
}

/// Canopy cover a footprint of relative biomass `a` would report before
/// noise: the kNDVI of the clean reflectances.
pub fn expected_cover(a: f64) -> f64 {
    let (nir, red) = clean_nir_red(a);
    let nd = (nir - red) / (nir + red);
    (nd * nd).tanh()
}

/// Sentinel-2 band table: (name, bare value, vegetated change, haze weight,
/// saturation rate).
const S2_BANDS: [(&str, f64, f64, f64, f64); 12] = [
    ("B1", 0.060, 0.000, 0.10, 6.0),
    ("B2", 0.070, -0.030, 0.09, 6.0),
    ("B3", 0.100, -0.040, 0.08, 6.0),
    ("B4", 0.120, -0.090, 0.07, 6.0),
    ("B5", 0.150, -0.060, 0.06, 6.0),
    ("B6", 0.190, 0.060, 0.05, 6.0),
    ("B7", 0.210, 0.120, 0.04, 6.0),
    ("B8", 0.230, 0.170, 0.04, 6.0),
    ("B8A", 0.240, 0.160, 0.04, 6.0),
    ("B9", 0.090, 0.030, 0.05, 6.0),
    ("B11", 0.270, -0.100, 0.02, 5.0),
    ("B12", 0.200, -0.110, 0.02, 5.0),
];

fn grid_of(spec: &GridSpec, names: Vec<String>, values: Vec<f32>) -> RasterGrid {
    RasterGrid {
        spec: spec.clone(),
        band_names: names,
        nodata: DEFAULT_NODATA,
        values,
    }
}

fn coarse_spec(g: &GridSpec, f: usize) -> GridSpec {
    GridSpec {
        rows: g.rows / f,
        cols: g.cols / f,
        origin: g.origin,
        pixel_size: [g.pixel_size[0] * f as f64, g.pixel_size[1] * f as f64],
        crs: g.crs.clone(),
    }
}

/// Simulate truth and sensor rasters. Fully determined by `spec`.
pub fn generate_landscape(spec: &SynthSpec) -> Result<Landscape> {
    spec.validate()?;
    let (rows, cols) = (spec.rows, spec.cols);
    let n = rows * cols;
    let grid = spec.grid();
    let s = spec.seed;
    let sn = spec.sensor_noise;

    let terrain = smooth_field(
        rows,
        cols,
        3.0 * spec.correlation_length,
        &mut rng_for(s, 1),
    );
    let broad = smooth_field(rows, cols, spec.correlation_length, &mut rng_for(s, 2));
    let fine = smooth_field(rows, cols, 2.0, &mut rng_for(s, 3));
    let moisture = smooth_field(
        rows,
        cols,
        2.0 * spec.correlation_length,
        &mut rng_for(s, 4),
    );
    let haze_src = smooth_field(
        rows,
        cols,
        2.5 * spec.correlation_length,
        &mut rng_for(s, 5),
    );

    let mut latent: Vec<f64> = (0..n)
        .map(|i| 0.85 * broad[i] + 0.4 * terrain[i] + 0.25 * fine[i])
        .collect();
    standardize(&mut latent);
    let agb: Vec<f64> = latent
        .iter()
        .map(|z| MAX_AGB / (1.0 + (-1.7 * (z - 0.3)).exp()))
        .collect();
    let rel: Vec<f64> = agb.iter().map(|v| v / MAX_AGB).collect();
    let haze: Vec<f64> = haze_src.iter().map(|h| (h - 1.0).max(0.0)).collect();
    let cloud = cloud_opacity(
        &smooth_field(
            rows,
            cols,
            2.0 * spec.correlation_length,
            &mut rng_for(s, 6),
        ),
        spec.cloud_fraction,
    );
    // east-facing slopes brighten C-band returns
    let aspect: Vec<f64> = (0..n)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let e = terrain[r * cols + (c + 1).min(cols - 1)];
            let w = terrain[r * cols + c.saturating_sub(1)];
            (e - w) * spec.correlation_length
        })
        .collect();

    let mut noise = rng_for(s, 10);
    let mut texture = rng_for(s, 11);

    let mut s1 = Vec::with_capacity(2 * n);
    for i in 0..n {
        s1.push(
            (-12.0
                + 4.0 * saturating(5.0, rel[i])
                + 1.2 * moisture[i]
                + 0.8 * aspect[i]
                + sn * 1.5 * normal(&mut noise)) as f32,
        );
    }
    for i in 0..n {
        s1.push(
            (-20.0
                + 7.0 * saturating(5.0, rel[i])
                + 0.8 * moisture[i]
                + 0.5 * aspect[i]
                + sn * 1.5 * normal(&mut noise)) as f32,
        );
    }

    let mut s2 = Vec::with_capacity(12 * n);
    for &(name, bare, veg, hz, k) in &S2_BANDS {
        for i in 0..n {
            let mut v =
                bare + veg * saturating(k, rel[i]) + hz * haze[i] + sn * 0.008 * normal(&mut noise);
            if name == "B8" {
                v += 0.06 * rel[i] * if texture.random_bool(0.5) { 1.0 } else { -1.0 };
            }
            if name == "B11" || name == "B12" {
                v -= 0.015 * moisture[i];
            }
            if cloud[i] > 0.0 {
                v += cloud[i] * (0.45 + 0.1 * normal(&mut noise) - v);
            }
            s2.push(v.clamp(0.001, 1.0) as f32);
        }
    }

    let epochs = spec.ndvi_epochs;
    let mut ndvi = Vec::with_capacity(epochs * n);
    for t in 0..epochs {
        let season = 0.5 + 0.5 * (2.0 * PI * t as f64 / epochs as f64).cos();
        for i in 0..n {
            let base = 0.2 + 0.65 * saturating(6.0, rel[i]);
            let amp = 0.35 * (1.0 - saturating(5.0, rel[i]));
            ndvi.push(
                (base - amp * season + sn * 0.03 * normal(&mut noise)).clamp(-1.0, 1.0) as f32,
            );
        }
    }

    let pf = spec.palsar_factor();
    let pspec = coarse_spec(&grid, pf);
    let pn = pspec.rows * pspec.cols;
    let agb_p = block_mean(&agb, rows, cols, pf);
    let moist_p = block_mean(&moisture, rows, cols, pf);
    let aspect_p = block_mean(&aspect, rows, cols, pf);
    let to_dn = |db: f64| 10f64.powf((db - PALSAR_CALIBRATION_FACTOR) / 20.0) as f32;
    let mut palsar = Vec::with_capacity(3 * pn);
    for i in 0..pn {
        palsar.push(to_dn(
            -25.0
                + 8.0 * saturating(5.5, agb_p[i] / MAX_AGB)
                + 0.8 * moist_p[i]
                + sn * normal(&mut noise),
        ));
    }
    for i in 0..pn {
        let tex = 3.0 * agb_p[i] / MAX_AGB * if texture.random_bool(0.5) { 1.0 } else { -1.0 };
        palsar.push(to_dn(
            -16.0
                + 3.0 * saturating(5.0, agb_p[i] / MAX_AGB)
                + 0.5 * moist_p[i]
                + tex
                + sn * normal(&mut noise),
        ));
    }
    for &a in aspect_p.iter().take(pn) {
        palsar.push((38.0 + 6.0 * a).clamp(10.0, 70.0) as f32);
    }

    let df = spec.dem_factor();
    let dspec = coarse_spec(&grid, df);
    let dem: Vec<f32> = block_mean(&terrain, rows, cols, df)
        .into_iter()
        .map(|t| (300.0 + 180.0 * t) as f32)
        .collect();

    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let sources = SourceSet {
        s1: grid_of(&grid, names(&["VV", "VH"]), s1),
        s2: grid_of(
            &grid,
            S2_BANDS.iter().map(|b| b.0.to_string()).collect(),
            s2,
        ),
        ndvi_epochs: grid_of(
            &grid,
            (0..epochs).map(|t| format!("NDVI_t{t}")).collect(),
            ndvi,
        ),
        palsar: grid_of(&pspec, names(&["HV", "HH", "LIA"]), palsar),
        dem: grid_of(&dspec, names(&["elevation"]), dem),
    };
    let truth = RasterGrid::from_band(
        grid.clone(),
        "agb",
        DEFAULT_NODATA,
        agb.iter().map(|&v| v as f32).collect(),
    )?;
    let mask = truth
        .values
        .iter()
        .map(|&v| if v >= FOREST_MIN_AGB { 1.0 } else { 0.0 })
        .collect();
    let forest_mask = RasterGrid::from_band(grid, "forest", DEFAULT_NODATA, mask)?;
    Ok(Landscape {
        spec: spec.clone(),
        truth,
        forest_mask,
        sources,
    })
}

/// The quality fields of a record that passes every rule.
fn passing_fields(cover: f64, rng: &mut impl Rng) -> (f64, u8, u8, BeamType, f64) {
    let floor = if cover >= 0.8 { 0.98 } else { 0.9 };
    (
        rng.random_range(-60.0..-1.0),
        0,
        1,
        BeamType::Power,
        rng.random_range(floor..=1.0),
    )
}

/// Footprints along parallel tracks, biomass taken as the area-weighted
/// truth under each disc plus label noise and inverted to rh80.
pub fn sample_footprints(truth: &RasterGrid, spec: &SynthSpec) -> Result<Vec<FootprintRecord>> {
    spec.validate()?;
    let g = &truth.spec;
    let mut rng = rng_for(spec.seed, 20);
    let (w, h) = (
        g.cols as f64 * g.pixel_size[0],
        g.rows as f64 * -g.pixel_size[1],
    );
    let (x0, y1) = (g.origin[0], g.origin[1]);
    let centre = (x0 + w / 2.0, y1 - h / 2.0);
    let th = spec.track_angle.to_radians();
    let along = (th.sin(), -th.cos());
    let across = (th.cos(), th.sin());
    let half = 0.5 * w.hypot(h);
    let n_tracks = (2.0 * half / spec.track_spacing).ceil() as i64;
    let steps = (half / spec.footprint_spacing).ceil() as i64;
    let inside = |x: f64, y: f64| x > x0 && x < x0 + w && y < y1 && y > y1 - h;
    let fail_rules = [
        RULE_DAYTIME,
        RULE_DEGRADED,
        RULE_LOW_QUALITY,
        RULE_COVERAGE_BEAM,
        RULE_SENSITIVITY,
    ];
    let mut out = Vec::new();
    for t in 0..=n_tracks {
        let offset = (t as f64 - n_tracks as f64 / 2.0) * spec.track_spacing;
        let phase = rng.random_range(0.0..spec.footprint_spacing);
        let (px, py) = (centre.0 + offset * across.0, centre.1 + offset * across.1);
        let mut idx = 0;
        for j in -steps..=steps {
            let d = j as f64 * spec.footprint_spacing + phase;
            let (x, y) = (px + d * along.0, py + d * along.1);
            if !inside(x, y) {
                continue;
            }
            let mut fp = FootprintRecord {
                id: format!("t{t:03}_{idx:04}"),
                center_x: x,
                center_y: y,
                radius: spec.footprint_radius,
                rh80: 0.0,
                rh98: 0.0,
                canopy_cover: 0.0,
                sensitivity: 1.0,
                quality_flag: 1,
                degrade_flag: 0,
                solar_elevation: -30.0,
                beam_type: BeamType::Power,
            };
            idx += 1;
            let mut probe = fp.clone();
            if rng.random_bool(spec.geolocation_error_fraction) {
                let ang = rng.random_range(0.0..2.0 * PI);
                let dist = rng.random_range(40.0..80.0);
                probe.center_x += dist * ang.cos();
                probe.center_y += dist * ang.sin();
            }
            let measured = match footprint_mean(truth, &probe) {
                Ok(m) => m[0],
                Err(_) => footprint_mean(truth, &fp)?[0],
            };
            let agb = (measured + spec.noise_std * normal(&mut rng)).max(0.0);
            fp.rh80 = rh80_from_agb(agb)?;
            fp.rh98 = fp.rh80 * 1.15 + 1.0 + 0.5 * normal(&mut rng).abs();
            fp.canopy_cover =
                (expected_cover(measured / MAX_AGB) + 0.05 * normal(&mut rng)).clamp(0.0, 1.0);
            let (sun, degrade, quality, beam, sens) = passing_fields(fp.canopy_cover, &mut rng);
            fp.solar_elevation = sun;
            fp.degrade_flag = degrade;
            fp.quality_flag = quality;
            fp.beam_type = beam;
            fp.sensitivity = sens;
            if rng.random_bool(spec.quality_fail_fraction) {
                let rule = fail_rules[rng.random_range(0..fail_rules.len())];
                inject_failure(&mut fp, rule, &mut rng);
            }
            out.push(fp);
        }
    }
    Ok(out)
}

fn inject_failure(fp: &mut FootprintRecord, rule: &str, rng: &mut impl Rng) {
    match rule {
        RULE_DAYTIME => fp.solar_elevation = rng.random_range(0.0..60.0),
        RULE_DEGRADED => fp.degrade_flag = 1,
        RULE_LOW_QUALITY => fp.quality_flag = 0,
        RULE_COVERAGE_BEAM => fp.beam_type = BeamType::Coverage,
        _ => {
            let floor = if fp.canopy_cover >= 0.8 { 0.98 } else { 0.9 };
            fp.sensitivity = rng.random_range(0.5..floor);
        }
    }
}

/// A footprint table with designed rule violations. Each record carries the
/// rule that should remove it (the first violated one in rule order), or
/// `None` if it should be kept.
pub fn filter_fixture(n: usize, seed: u64) -> Vec<(FootprintRecord, Option<&'static str>)> {
    let mut rng = rng_for(seed, 30);
    let order = [
        RULE_DAYTIME,
        RULE_DEGRADED,
        RULE_LOW_QUALITY,
        RULE_COVERAGE_BEAM,
        RULE_SENSITIVITY,
    ];
    (0..n)
        .map(|i| {
            // covers straddling the dense threshold, including exactly 0.8
            let cover = match i % 5 {
                0 => 0.8,
                1 => 0.79,
                _ => rng.random_range(0.0..=1.0),
            };
            let (sun, degrade, quality, beam, sens) = passing_fields(cover, &mut rng);
            let mut fp = FootprintRecord {
                id: format!("fx{i:04}"),
                center_x: i as f64 * 60.0,
                center_y: 0.0,
                radius: 12.5,
                rh80: 15.0,
                rh98: 19.0,
                canopy_cover: cover,
                sensitivity: sens,
                quality_flag: quality,
                degrade_flag: degrade,
                solar_elevation: sun,
                beam_type: beam,
            };
            let mut violated = Vec::new();
            for &rule in &order {
                if rng.random_bool(0.15) {
                    inject_failure(&mut fp, rule, &mut rng);
                    violated.push(rule);
                }
            }
            // boundary values that must still pass
            if violated.is_empty() && i % 7 == 3 {
                fp.sensitivity = if cover >= 0.8 { 0.98 } else { 0.9 };
                fp.solar_elevation = -1e-6;
            }
            // sun exactly on the horizon counts as daytime
            if !violated.contains(&RULE_DAYTIME) && i % 11 == 5 {
                fp.solar_elevation = 0.0;
                violated.insert(0, RULE_DAYTIME);
            }
            (fp, violated.first().copied())
        })
        .collect()
}

/// Write the sensor rasters, truth, mask, footprints and spec under `dir`.
pub fn write_scene(dir: &Path, land: &Landscape, footprints: &[FootprintRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    land.sources.write(dir)?;
    write_raster(&land.truth, dir.join(TRUTH_FILE))?;
    write_raster(&land.forest_mask, dir.join(FOREST_MASK_FILE))?;
    write_footprints(footprints, dir.join(FOOTPRINTS_FILE))?;
    let json = serde_json::to_vec_pretty(&land.spec).map_err(|e| Error::Internal(e.to_string()))?;
    let path = dir.join(SPEC_FILE);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{agb_from_rh80, FilterRules};

    fn small() -> SynthSpec {
        SynthSpec {
            rows: 128,
            cols: 128,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn kernel_sums_to_one() {
        let k = gaussian_kernel(2.5);
        assert_eq!(k.len(), 17);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_landscape(&small()).unwrap();
        let b = generate_landscape(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_landscape(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn biomass_statistics() {
        let land = generate_landscape(&SynthSpec::default()).unwrap();
        let v = &land.truth.values;
        assert!(v.iter().all(|&x| (0.0..=300.0).contains(&x)));
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        assert!((80.0..=160.0).contains(&mean), "mean {mean}");
    }

    #[test]
    fn source_geometry() {
        let land = generate_landscape(&small()).unwrap();
        let s = &land.sources;
        assert_eq!((s.palsar.rows(), s.palsar.spec.pixel_size[0]), (64, 20.0));
        assert_eq!((s.dem.rows(), s.dem.spec.pixel_size[0]), (32, 40.0));
        assert_eq!(s.s2.bands(), 12);
        assert_eq!(s.ndvi_epochs.bands(), 4);
    }

    #[test]
    fn noise_free_hv_rises_with_biomass() {
        let spec = SynthSpec {
            sensor_noise: 0.0,
            ..small()
        };
        let land = generate_landscape(&spec).unwrap();
        // moisture still perturbs HV, so compare the biomass deciles
        let agb: Vec<f64> = land.truth.values.iter().map(|&v| v as f64).collect();
        let blocks = block_mean(&agb, 128, 128, 2);
        let hv = land.sources.palsar.band(0);
        let mut pairs: Vec<(f64, f64)> = blocks
            .iter()
            .zip(hv)
            .map(|(&a, &d)| (a, d as f64))
            .collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let n = pairs.len();
        let lo: f64 = pairs[..n / 10].iter().map(|p| p.1).sum::<f64>() / (n / 10) as f64;
        let hi: f64 = pairs[n - n / 10..].iter().map(|p| p.1).sum::<f64>() / (n / 10) as f64;
        assert!(hi > lo);
    }

    #[test]
    fn rh80_inverse_round_trip() {
        assert_eq!(rh80_from_agb(0.0).unwrap(), 0.0);
        assert!((rh80_from_agb(159.90).unwrap() - 20.0).abs() / 20.0 < 1e-3);
        for k in 1..=300 {
            let agb = k as f64;
            let back = agb_from_rh80(rh80_from_agb(agb).unwrap()).unwrap();
            assert!((back - agb).abs() / agb < 1e-6);
        }
    }

    #[test]
    fn along_track_spacing() {
        let spec = small();
        let land = generate_landscape(&spec).unwrap();
        let fps = sample_footprints(&land.truth, &spec).unwrap();
        assert!(fps.len() > 50);
        let mut checked = 0;
        for w in fps.windows(2) {
            let same_track = w[0].id[..4] == w[1].id[..4];
            if same_track {
                let d = (w[0].center_x - w[1].center_x).hypot(w[0].center_y - w[1].center_y);
                assert!((d - 60.0).abs() < 1e-6, "{d}");
                checked += 1;
            }
        }
        assert!(checked > 40);
        assert!(fps.iter().all(|f| f.validate().is_ok()));
    }

    #[test]
    fn fixture_matches_rule_table() {
        let rules = FilterRules::default();
        for (fp, expected) in filter_fixture(500, 3) {
            assert_eq!(rules.first_failure(&fp), expected, "{fp:?}");
        }
    }
}
