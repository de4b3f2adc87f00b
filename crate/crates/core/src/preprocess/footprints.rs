//! Lidar footprint handling: biomass allometry, quality and geolocation
//! filtering, rasterization to sparse labels, and area-weighted extraction.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BeamType, FootprintRecord, GridSpec, RasterGrid, LABEL_SENTINEL};

pub const AGB_COEFFICIENT: f64 = 5.58;
pub const AGB_EXPONENT: f64 = 1.12;

/// Aboveground biomass (Mg/ha) from the 80th-percentile relative height (m).
pub fn agb_from_rh80(rh80: f64) -> Result<f64> {
    if rh80 < 0.0 || !rh80.is_finite() {
        return Err(Error::Domain(format!(
            "rh80 must be a finite value >= 0, got {rh80}"
        )));
    }
    Ok(AGB_COEFFICIENT * rh80.powf(AGB_EXPONENT))
}

/// Inverse of [`agb_from_rh80`].
pub fn rh80_from_agb(agb: f64) -> Result<f64> {
    if agb < 0.0 || !agb.is_finite() {
        return Err(Error::Domain(format!(
            "agb must be a finite value >= 0, got {agb}"
        )));
    }
    Ok((agb / AGB_COEFFICIENT).powf(1.0 / AGB_EXPONENT))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    /// Removal counts keyed by rule, in evaluation order.
    pub removed_by_rule: IndexMap<String, usize>,
    pub output_count: usize,
    /// Set when a fitting stage could not run and was skipped.
    #[serde(default)]
    pub degenerate_fit: bool,
    /// Fitted `HV_dB = a + b log10(rh98)` coefficients, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<[f64; 2]>,
}

impl FilterReport {
    fn new(input_count: usize, rules: &[&str]) -> Self {
        Self {
            input_count,
            removed_by_rule: rules.iter().map(|r| (r.to_string(), 0)).collect(),
            output_count: input_count,
            degenerate_fit: false,
            curve: None,
        }
    }

    fn remove(&mut self, rule: &str) {
        *self.removed_by_rule.entry(rule.to_string()).or_default() += 1;
        self.output_count -= 1;
    }

    pub fn removed(&self) -> usize {
        self.removed_by_rule.values().sum()
    }
}

/// Footprint quality thresholds. Defaults follow the GEDI screening used for
/// biomass labels: night shots, non-degraded, quality flag set, power beams,
/// and a sensitivity floor that tightens over dense canopy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRules {
    pub require_night: bool,
    pub power_beams_only: bool,
    pub dense_cover_threshold: f64,
    pub min_sensitivity_sparse: f64,
    pub min_sensitivity_dense: f64,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            require_night: true,
            power_beams_only: true,
            dense_cover_threshold: 0.8,
            min_sensitivity_sparse: 0.9,
            min_sensitivity_dense: 0.98,
        }
    }
}

pub const RULE_DAYTIME: &str = "daytime";
pub const RULE_DEGRADED: &str = "degraded";
pub const RULE_LOW_QUALITY: &str = "low_quality";
pub const RULE_COVERAGE_BEAM: &str = "coverage_beam";
pub const RULE_SENSITIVITY: &str = "low_sensitivity";

impl FilterRules {
    /// The first rule the record fails, or `None` if it is retained.
    pub fn first_failure(&self, r: &FootprintRecord) -> Option<&'static str> {
        if self.require_night && r.solar_elevation >= 0.0 {
            return Some(RULE_DAYTIME);
        }
        if r.degrade_flag == 1 {
            return Some(RULE_DEGRADED);
        }
        if r.quality_flag == 0 {
            return Some(RULE_LOW_QUALITY);
        }
        if self.power_beams_only && r.beam_type != BeamType::Power {
            return Some(RULE_COVERAGE_BEAM);
        }
        let floor = if r.canopy_cover >= self.dense_cover_threshold {
            self.min_sensitivity_dense
        } else {
            self.min_sensitivity_sparse
        };
        if r.sensitivity < floor {
            return Some(RULE_SENSITIVITY);
        }
        None
    }
}

pub fn filter_footprints(
    records: &[FootprintRecord],
    rules: &FilterRules,
) -> (Vec<FootprintRecord>, FilterReport) {
    let mut report = FilterReport::new(
        records.len(),
        &[
            RULE_DAYTIME,
            RULE_DEGRADED,
            RULE_LOW_QUALITY,
            RULE_COVERAGE_BEAM,
            RULE_SENSITIVITY,
        ],
    );
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        match rules.first_failure(r) {
            Some(rule) => report.remove(rule),
            None => kept.push(r.clone()),
        }
    }
    (kept, report)
}

pub const RULE_NO_COVERAGE: &str = "outside_grid";
pub const RULE_COVER_MISMATCH: &str = "cover_kndvi_mismatch";
pub const RULE_CURVE_RESIDUAL: &str = "hv_rh98_residual";

/// Residual threshold, in dB, for the HV-vs-RH98 curve stage.
pub const CURVE_RESIDUAL_DB: f64 = 2.5;

/// Two-stage screen against geolocation error.
///
/// Stage one drops records whose |canopy cover - kNDVI| exceeds the mean of
/// that difference by more than one (population) standard deviation. Stage
/// two fits `HV_dB = a + b log10(rh98)` over the survivors and drops records
/// whose residual exceeds 2.5 dB. Footprints not covered by the grids are
/// dropped first.
pub fn geolocation_filter(
    records: &[FootprintRecord],
    kndvi: &RasterGrid,
    hv_db: &RasterGrid,
) -> Result<(Vec<FootprintRecord>, FilterReport)> {
    kndvi.check_aligned(hv_db)?;
    let mut report = FilterReport::new(
        records.len(),
        &[RULE_NO_COVERAGE, RULE_COVER_MISMATCH, RULE_CURVE_RESIDUAL],
    );

    let mut sampled = Vec::with_capacity(records.len());
    for r in records {
        let k = footprint_mean(kndvi, r);
        let h = footprint_mean(hv_db, r);
        match (k, h) {
            (Ok(k), Ok(h)) => sampled.push((r, k[0], h[0])),
            _ => report.remove(RULE_NO_COVERAGE),
        }
    }

    let diffs: Vec<f64> = sampled
        .iter()
        .map(|(r, k, _)| (r.canopy_cover - k).abs())
        .collect();
    let survivors: Vec<_> = match mean_std(&diffs) {
        Some((mean, std)) => {
            let limit = mean + std;
            sampled
                .into_iter()
                .zip(&diffs)
                .filter_map(|(s, &d)| {
                    if d > limit {
                        report.remove(RULE_COVER_MISMATCH);
                        None
                    } else {
                        Some(s)
                    }
                })
                .collect()
        }
        None => sampled,
    };

    let xs: Vec<f64> = survivors
        .iter()
        .map(|(r, _, _)| r.rh98.max(f64::MIN_POSITIVE).log10())
        .collect();
    let ys: Vec<f64> = survivors.iter().map(|(_, _, h)| *h).collect();
    let kept = match fit_line(&xs, &ys) {
        Some((a, b)) => {
            report.curve = Some([a, b]);
            survivors
                .into_iter()
                .zip(xs.iter().zip(&ys))
                .filter_map(|((r, _, _), (&x, &y))| {
                    if (y - (a + b * x)).abs() > CURVE_RESIDUAL_DB {
                        report.remove(RULE_CURVE_RESIDUAL);
                        None
                    } else {
                        Some(r.clone())
                    }
                })
                .collect()
        }
        None => {
            report.degenerate_fit = true;
            survivors.into_iter().map(|(r, _, _)| r.clone()).collect()
        }
    };
    Ok((kept, report))
}

/// Population mean and standard deviation.
pub(crate) fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Ordinary least squares `y = a + b x`; `None` when under-determined.
fn fit_line(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if xs.len() < 3 {
        return None;
    }
    let (mx, _) = mean_std(xs)?;
    let (my, _) = mean_std(ys)?;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-12 * xs.len() as f64 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

/// Sparse label plane: pixels whose center lies inside a footprint disc take
/// that footprint's biomass; everything else is the -1 sentinel. Where discs
/// overlap, the footprint with the nearest center wins.
pub fn rasterize_footprints(records: &[FootprintRecord], spec: &GridSpec) -> Result<RasterGrid> {
    let n = spec.len();
    let mut labels = vec![LABEL_SENTINEL; n];
    let mut best = vec![f64::INFINITY; n];
    for r in records {
        let agb = agb_from_rh80(r.rh80)? as f32;
        let Some((r0, r1, c0, c1)) = disc_bounds(spec, r) else {
            continue;
        };
        for row in r0..r1 {
            for col in c0..c1 {
                let (x, y) = spec.pixel_center(row, col);
                let d = ((x - r.center_x).powi(2) + (y - r.center_y).powi(2)).sqrt();
                let idx = row * spec.cols + col;
                if d <= r.radius && d < best[idx] {
                    best[idx] = d;
                    labels[idx] = agb;
                }
            }
        }
    }
    Ok(RasterGrid {
        spec: spec.clone(),
        band_names: vec!["label".to_string()],
        nodata: crate::raster::DEFAULT_NODATA,
        values: labels,
    })
}

/// Pixel index range (rows, cols; half-open) covering the disc's bounding box.
fn disc_bounds(spec: &GridSpec, fp: &FootprintRecord) -> Option<(usize, usize, usize, usize)> {
    let (rt, cl) = spec.to_pixel(fp.center_x - fp.radius, fp.center_y + fp.radius);
    let (rb, cr) = spec.to_pixel(fp.center_x + fp.radius, fp.center_y - fp.radius);
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    let r0 = clamp(rt.floor(), spec.rows);
    let r1 = clamp(rb.ceil(), spec.rows);
    let c0 = clamp(cl.floor(), spec.cols);
    let c1 = clamp(cr.ceil(), spec.cols);
    (r0 < r1 && c0 < c1).then_some((r0, r1, c0, c1))
}

/// Area of the intersection of a disc and an axis-aligned rectangle, in
/// closed form.
pub fn disc_rect_overlap(cx: f64, cy: f64, radius: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let (x0, x1) = (x0.min(x1) - cx, x0.max(x1) - cx);
    let (y0, y1) = (y0.min(y1) - cy, y0.max(y1) - cy);
    let q = |a: f64, b: f64| quadrant_area(radius, a, b);
    (q(x1, y1) - q(x0, y1) - q(x1, y0) + q(x0, y0)).max(0.0)
}

/// `int_0^x sqrt(r^2 - t^2) dt` for |x| <= r.
fn half_chord_integral(r: f64, x: f64) -> f64 {
    let x = x.clamp(-r, r);
    0.5 * (x * (r * r - x * x).max(0.0).sqrt() + r * r * (x / r).asin())
}

/// Area of `{X <= a, Y <= b}` within the origin-centred disc of radius `r`.
fn quadrant_area(r: f64, a: f64, b: f64) -> f64 {
    if a <= -r || b <= -r {
        return 0.0;
    }
    let a = a.min(r);
    let h = |x: f64| half_chord_integral(r, x);
    if b >= r {
        return 2.0 * (h(a) - h(-r));
    }
    // |x| < t: the line Y = b cuts the chord; beyond t the chord lies wholly
    // below b (b >= 0) or wholly above it (b < 0)
    let t = (r * r - b * b).sqrt();
    let mut area = 0.0;
    let mid = (-t, t);
    let hi = a.min(mid.1);
    if hi > mid.0 {
        area += b * (hi - mid.0) + h(hi) - h(mid.0);
    }
    if b >= 0.0 {
        let left = a.min(-t);
        area += 2.0 * (h(left) - h(-r));
        if a > t {
            area += 2.0 * (h(a) - h(t));
        }
    }
    area
}

/// (pixel index, overlap area) for every pixel the footprint disc touches.
pub fn footprint_weights(spec: &GridSpec, fp: &FootprintRecord) -> Vec<(usize, f64)> {
    let Some((r0, r1, c0, c1)) = disc_bounds(spec, fp) else {
        return Vec::new();
    };
    let [dx, dy] = spec.pixel_size;
    let mut out = Vec::new();
    for row in r0..r1 {
        let ya = spec.origin[1] + row as f64 * dy;
        let yb = ya + dy;
        for col in c0..c1 {
            let xa = spec.origin[0] + col as f64 * dx;
            let a = disc_rect_overlap(fp.center_x, fp.center_y, fp.radius, xa, xa + dx, ya, yb);
            if a > 0.0 {
                out.push((row * spec.cols + col, a));
            }
        }
    }
    out
}

/// Area-weighted per-band mean over the footprint disc. Nodata pixels are
/// left out and the remaining weights renormalized.
pub fn footprint_mean(stack: &RasterGrid, fp: &FootprintRecord) -> Result<Vec<f64>> {
    let weights = footprint_weights(&stack.spec, fp);
    let mut out = Vec::with_capacity(stack.bands());
    for b in 0..stack.bands() {
        let band = stack.band(b);
        let (mut s, mut w) = (0.0, 0.0);
        for &(idx, a) in &weights {
            let v = band[idx];
            if !stack.is_nodata(v) {
                s += a * v as f64;
                w += a;
            }
        }
        if w <= 0.0 {
            return Err(Error::Domain(format!(
                "footprint `{}` has no valid overlap with band `{}`",
                fp.id, stack.band_names[b]
            )));
        }
        out.push(s / w);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::DEFAULT_NODATA;

    pub(crate) fn fp(id: &str, x: f64, y: f64) -> FootprintRecord {
        FootprintRecord {
            id: id.to_string(),
            center_x: x,
            center_y: y,
            radius: 12.5,
            rh80: 20.0,
            rh98: 25.0,
            canopy_cover: 0.5,
            sensitivity: 0.92,
            quality_flag: 1,
            degrade_flag: 0,
            solar_elevation: -10.0,
            beam_type: BeamType::Power,
        }
    }

    #[test]
    fn allometry_spot_values() {
        assert_eq!(agb_from_rh80(0.0).unwrap(), 0.0);
        // references from 30-digit evaluation of 5.58 * h^1.12
        assert!((agb_from_rh80(10.0).unwrap() - 73.558_726_011_447_52).abs() < 1e-9);
        assert!((agb_from_rh80(20.0).unwrap() - 159.877_663_999_284_78).abs() < 1e-9);
        assert!(agb_from_rh80(-1.0).is_err());
        let back = rh80_from_agb(159.877_663_999_284_78).unwrap();
        assert!((back - 20.0).abs() < 1e-9);
        assert_eq!(rh80_from_agb(0.0).unwrap(), 0.0);
    }

    #[test]
    fn rule_examples() {
        let rules = FilterRules::default();
        let ok = fp("a", 0.0, 0.0);
        assert_eq!(rules.first_failure(&ok), None);

        let mut day = ok.clone();
        day.solar_elevation = 5.0;
        assert_eq!(rules.first_failure(&day), Some(RULE_DAYTIME));

        let mut dense = ok.clone();
        dense.canopy_cover = 0.85;
        dense.sensitivity = 0.95;
        assert_eq!(rules.first_failure(&dense), Some(RULE_SENSITIVITY));
        dense.sensitivity = 0.98;
        assert_eq!(rules.first_failure(&dense), None);

        let mut multi = ok.clone();
        multi.degrade_flag = 1;
        multi.beam_type = BeamType::Coverage;
        assert_eq!(rules.first_failure(&multi), Some(RULE_DEGRADED));
    }

    #[test]
    fn filter_report_balances() {
        let mut recs = vec![fp("a", 0.0, 0.0); 4];
        recs[1].quality_flag = 0;
        recs[2].beam_type = BeamType::Coverage;
        let (kept, report) = filter_footprints(&recs, &FilterRules::default());
        assert_eq!(kept.len(), 2);
        assert_eq!(report.output_count + report.removed(), report.input_count);
        assert_eq!(report.removed_by_rule[RULE_LOW_QUALITY], 1);
        assert_eq!(report.removed_by_rule[RULE_COVERAGE_BEAM], 1);
        let (again, _) = filter_footprints(&kept, &FilterRules::default());
        assert_eq!(again, kept);
    }

    fn spec(rows: usize, cols: usize) -> GridSpec {
        GridSpec::new(rows, cols, [0.0, 0.0], [10.0, -10.0])
    }

    #[test]
    fn rasterize_plus_shape() {
        let s = spec(5, 5);
        assert!(rasterize_footprints(&[], &s)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == -1.0));
        let (x, y) = s.pixel_center(2, 2);
        let labels = rasterize_footprints(&[fp("a", x, y)], &s).unwrap();
        let labeled: Vec<usize> = (0..25).filter(|&i| labels.values[i] >= 0.0).collect();
        assert_eq!(labeled, vec![7, 11, 12, 13, 17]);
        let expected = agb_from_rh80(20.0).unwrap() as f32;
        assert!(labeled.iter().all(|&i| labels.values[i] == expected));
    }

    #[test]
    fn rasterize_nearest_center_wins() {
        let s = spec(3, 6);
        let (xa, ya) = s.pixel_center(1, 1);
        let mut a = fp("a", xa, ya);
        a.rh80 = 10.0;
        // contested pixel (1,2) is 10 m from a and 8 m from b
        let mut b = fp("b", xa + 18.0, ya);
        b.rh80 = 30.0;
        let labels = rasterize_footprints(&[a, b], &s).unwrap();
        let got = labels.values[s.cols + 2];
        assert_eq!(got, agb_from_rh80(30.0).unwrap() as f32);
        assert_eq!(
            labels.values[s.cols + 1],
            agb_from_rh80(10.0).unwrap() as f32
        );
    }

    #[test]
    fn overlap_area_full_and_quarter() {
        let r: f64 = 3.0;
        let full = std::f64::consts::PI * r * r;
        let a = disc_rect_overlap(0.0, 0.0, r, -10.0, 10.0, -10.0, 10.0);
        assert!((a - full).abs() / full < 1e-12);
        let q = disc_rect_overlap(0.0, 0.0, r, 0.0, 10.0, 0.0, 10.0);
        assert!((q - full / 4.0).abs() / full < 1e-12);
        let half = disc_rect_overlap(1.0, 2.0, r, -9.0, 1.0, -9.0, 9.0);
        assert!((half - full / 2.0).abs() / full < 1e-12);
        // circular segment cut by the chord at distance 1
        let seg = disc_rect_overlap(0.0, 0.0, r, -9.0, 9.0, 1.0, 9.0);
        let oracle = r * r * (1.0 / r).acos() - (r * r - 1.0f64).sqrt();
        assert!((seg - oracle).abs() < 1e-12);
    }

    #[test]
    fn footprint_mean_symmetry_and_containment() {
        let s = spec(4, 4);
        let mut g = RasterGrid::filled(s.clone(), vec!["v".into()], DEFAULT_NODATA, 7.0);
        let mut small = fp("a", 15.0, -15.0);
        small.radius = 2.0;
        assert!((footprint_mean(&g, &small).unwrap()[0] - 7.0).abs() < 1e-12);
        // centered on the shared corner of four pixels
        let corner = fp("b", 20.0, -20.0);
        assert!((footprint_mean(&g, &corner).unwrap()[0] - 7.0).abs() < 1e-9);
        // nodata drops out
        g.values[0] = DEFAULT_NODATA as f32;
        let mut at0 = fp("c", 5.0, -5.0);
        at0.radius = 4.0;
        assert!(footprint_mean(&g, &at0).is_err());
        let outside = fp("d", 1000.0, 1000.0);
        assert!(footprint_mean(&g, &outside).is_err());
    }
}
