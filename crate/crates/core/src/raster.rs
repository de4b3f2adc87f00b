//! Grid and footprint data model plus the on-disk formats.
//!
//! Rasters live in a small container called BTR1:
//!
//! ```text
//! 0..4      b"BTR1"
//! 4..8      u32 LE, JSON header length H
//! 8..8+H    UTF-8 JSON {"dtype","shape":[bands,rows,cols],"band_names","origin","pixel_size","nodata","crs"}
//! 8+H..     band-major, row-major f32 LE payload
//! ```
//!
//! Footprints are a plain CSV with a fixed header (see [`FOOTPRINT_COLUMNS`]).

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BTR1";

/// Default footprint radius in meters (25 m diameter).
pub const DEFAULT_FOOTPRINT_RADIUS: f64 = 12.5;

/// Label value for pixels without lidar supervision.
pub const LABEL_SENTINEL: f32 = -1.0;

pub const DEFAULT_NODATA: f64 = -9999.0;

/// Georeferencing of a north-up grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Map coordinates of the upper-left corner of the upper-left pixel.
    pub origin: [f64; 2],
    /// Pixel size; x positive, y negative.
    pub pixel_size: [f64; 2],
    pub crs: String,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, origin: [f64; 2], pixel_size: [f64; 2]) -> Self {
        Self {
            rows,
            cols,
            origin,
            pixel_size,
            crs: "LOCAL:projected-m".to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Map coordinates of the center of pixel (row, col).
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin[0] + (col as f64 + 0.5) * self.pixel_size[0],
            self.origin[1] + (row as f64 + 0.5) * self.pixel_size[1],
        )
    }

    /// Fractional (row, col) of a map coordinate, pixel corners at integers.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y - self.origin[1]) / self.pixel_size[1],
            (x - self.origin[0]) / self.pixel_size[0],
        )
    }

    /// The sub-grid starting at (row, col).
    pub fn window(&self, row: usize, col: usize, rows: usize, cols: usize) -> GridSpec {
        GridSpec {
            rows,
            cols,
            origin: [
                self.origin[0] + col as f64 * self.pixel_size[0],
                self.origin[1] + row as f64 * self.pixel_size[1],
            ],
            pixel_size: self.pixel_size,
            crs: self.crs.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size[0] > 0.0) || !(self.pixel_size[1] < 0.0) {
            return Err(Error::Integrity(format!(
                "pixel_size must be (+x, -y), got {:?}",
                self.pixel_size
            )));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Integrity("origin must be finite".into()));
        }
        Ok(())
    }
}

/// A georeferenced multi-band grid with band-major f32 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub spec: GridSpec,
    pub band_names: Vec<String>,
    pub nodata: f64,
    pub values: Vec<f32>,
}

impl RasterGrid {
    pub fn filled(spec: GridSpec, band_names: Vec<String>, nodata: f64, fill: f32) -> Self {
        let n = spec.len() * band_names.len();
        Self {
            spec,
            band_names,
            nodata,
            values: vec![fill; n],
        }
    }

    pub fn from_band(
        spec: GridSpec,
        name: impl Into<String>,
        nodata: f64,
        values: Vec<f32>,
    ) -> Result<Self> {
        let grid = Self {
            spec,
            band_names: vec![name.into()],
            nodata,
            values,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn rows(&self) -> usize {
        self.spec.rows
    }

    pub fn cols(&self) -> usize {
        self.spec.cols
    }

    pub fn bands(&self) -> usize {
        self.band_names.len()
    }

    pub fn nodata_f32(&self) -> f32 {
        self.nodata as f32
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        v == self.nodata as f32 || v.is_nan()
    }

    pub fn band(&self, k: usize) -> &[f32] {
        let n = self.spec.len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn band_mut(&mut self, k: usize) -> &mut [f32] {
        let n = self.spec.len();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.band_names.iter().position(|b| b == name)
    }

    pub fn band_by_name(&self, name: &str) -> Result<&[f32]> {
        self.band_index(name)
            .map(|k| self.band(k))
            .ok_or_else(|| Error::Config(format!("band `{name}` not present")))
    }

    /// Copy of a single band as its own grid.
    pub fn band_grid(&self, k: usize) -> RasterGrid {
        RasterGrid {
            spec: self.spec.clone(),
            band_names: vec![self.band_names[k].clone()],
            nodata: self.nodata,
            values: self.band(k).to_vec(),
        }
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.values[(band * self.spec.rows + row) * self.spec.cols + col]
    }

    pub fn set(&mut self, band: usize, row: usize, col: usize, v: f32) {
        let idx = (band * self.spec.rows + row) * self.spec.cols + col;
        self.values[idx] = v;
    }

    /// Same grid geometry and nodata, new single band.
    pub fn with_band(&self, name: impl Into<String>, values: Vec<f32>) -> RasterGrid {
        debug_assert_eq!(values.len(), self.spec.len());
        RasterGrid {
            spec: self.spec.clone(),
            band_names: vec![name.into()],
            nodata: self.nodata,
            values,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let expected = self.spec.len() * self.bands();
        if self.values.len() != expected {
            return Err(Error::Integrity(format!(
                "values length {} != rows*cols*bands = {}",
                self.values.len(),
                expected
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.band_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Integrity(format!("duplicate band name `{name}`")));
            }
        }
        if !self.nodata.is_finite() {
            return Err(Error::Integrity("nodata must be finite".into()));
        }
        Ok(())
    }

    pub fn check_aligned(&self, other: &RasterGrid) -> Result<()> {
        if self.spec.rows != other.spec.rows
            || self.spec.cols != other.spec.cols
            || self.spec.origin != other.spec.origin
            || self.spec.pixel_size != other.spec.pixel_size
        {
            return Err(Error::Shape(format!(
                "grids are not co-registered: {}x{} @ {:?} vs {}x{} @ {:?}",
                self.spec.rows,
                self.spec.cols,
                self.spec.origin,
                other.spec.rows,
                other.spec.cols,
                other.spec.origin
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: [usize; 3],
    band_names: Vec<String>,
    origin: [f64; 2],
    pixel_size: [f64; 2],
    nodata: f64,
    crs: String,
}

pub fn encode_raster(grid: &RasterGrid) -> Result<Vec<u8>> {
    grid.validate()?;
    let header = Header {
        dtype: "f32".to_string(),
        shape: [grid.bands(), grid.rows(), grid.cols()],
        band_names: grid.band_names.clone(),
        origin: grid.spec.origin,
        pixel_size: grid.spec.pixel_size,
        nodata: grid.nodata,
        crs: grid.spec.crs.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + grid.values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raster(bytes: &[u8]) -> Result<RasterGrid> {
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(Error::Format("missing BTR1 magic".into()));
    }
    let hlen = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Format(format!("header length {hlen} exceeds file size")))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!(
            "unsupported dtype `{}`",
            header.dtype
        )));
    }
    let [bands, rows, cols] = header.shape;
    if header.band_names.len() != bands {
        return Err(Error::Integrity(format!(
            "{} band names for {} bands",
            header.band_names.len(),
            bands
        )));
    }
    let payload = &bytes[8 + hlen..];
    let n = bands * rows * cols;
    if payload.len() != n * 4 {
        return Err(Error::Integrity(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            n * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let grid = RasterGrid {
        spec: GridSpec {
            rows,
            cols,
            origin: header.origin,
            pixel_size: header.pixel_size,
            crs: header.crs,
        },
        band_names: header.band_names,
        nodata: header.nodata,
        values,
    };
    grid.validate()?;
    Ok(grid)
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<RasterGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes)
}

pub fn write_raster(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_raster(grid)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeamType {
    Power,
    Coverage,
}

/// One lidar footprint: relative-height metrics, quality flags and geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintRecord {
    pub id: String,
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub rh80: f64,
    pub rh98: f64,
    pub canopy_cover: f64,
    pub sensitivity: f64,
    pub quality_flag: u8,
    pub degrade_flag: u8,
    pub solar_elevation: f64,
    pub beam_type: BeamType,
}

pub const FOOTPRINT_COLUMNS: [&str; 12] = [
    "id",
    "center_x",
    "center_y",
    "radius",
    "rh80",
    "rh98",
    "canopy_cover",
    "sensitivity",
    "quality_flag",
    "degrade_flag",
    "solar_elevation",
    "beam_type",
];

impl FootprintRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.radius > 0.0) {
            return Err(format!("radius must be positive, got {}", self.radius));
        }
        if !(0.0..=1.0).contains(&self.canopy_cover) {
            return Err(format!("canopy_cover {} outside [0, 1]", self.canopy_cover));
        }
        if !(0.0..=1.0).contains(&self.sensitivity) {
            return Err(format!("sensitivity {} outside [0, 1]", self.sensitivity));
        }
        if self.rh80 < 0.0 || self.rh98 < self.rh80 {
            return Err(format!(
                "expected rh98 >= rh80 >= 0, got rh80={} rh98={}",
                self.rh80, self.rh98
            ));
        }
        if self.quality_flag > 1 || self.degrade_flag > 1 {
            return Err("flags must be 0 or 1".to_string());
        }
        Ok(())
    }
}

/// Parse a footprint table. Row numbers in errors count data rows from 1.
pub fn parse_footprints<R: std::io::Read>(reader: R) -> Result<Vec<FootprintRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .clone();
    for col in FOOTPRINT_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Schema(format!("missing column `{col}`")));
        }
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<FootprintRecord>().enumerate() {
        let row_no = i + 1;
        let rec = row.map_err(|e| Error::Parse {
            row: row_no,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|message| Error::InvalidRecord {
            row: row_no,
            message,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_footprints(path: impl AsRef<Path>) -> Result<Vec<FootprintRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_footprints(file)
}

pub fn format_footprints(records: &[FootprintRecord]) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        wtr.write_record(FOOTPRINT_COLUMNS)
            .map_err(|e| Error::Internal(e.to_string()))?;
    }
    for r in records {
        wtr.serialize(r)
            .map_err(|e| Error::Internal(e.to_string()))?;
    }
    wtr.into_inner().map_err(|e| Error::Internal(e.to_string()))
}

pub fn write_footprints(records: &[FootprintRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = format_footprints(records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, bands: usize) -> RasterGrid {
        let names = (0..bands).map(|b| format!("b{b}")).collect();
        RasterGrid::filled(
            GridSpec::new(rows, cols, [500_000.0, 2_500_000.0], [10.0, -10.0]),
            names,
            DEFAULT_NODATA,
            0.0,
        )
    }

    #[test]
    fn minimal_file_decodes() {
        let g = grid(1, 1, 1);
        let bytes = encode_raster(&g).unwrap();
        let back = decode_raster(&bytes).unwrap();
        assert_eq!(back.values, vec![0.0]);
        assert_eq!(back, g);
    }

    #[test]
    fn zero_payload_is_sixteen_zero_bytes() {
        let bytes = encode_raster(&grid(2, 2, 1)).unwrap();
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload = &bytes[8 + hlen..];
        assert_eq!(payload, &[0u8; 16]);
    }

    #[test]
    fn header_echoes_shape() {
        let bytes = encode_raster(&grid(4, 5, 3)).unwrap();
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + hlen]).unwrap();
        assert!(header.contains("\"shape\":[3,4,5]"), "{header}");
        assert!(header.starts_with("{\"dtype\":\"f32\""));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = encode_raster(&grid(2, 2, 1)).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_raster(&wrong), Err(Error::Format(_))));
        bytes.pop();
        assert!(matches!(decode_raster(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn rejects_south_up_and_duplicate_names() {
        let mut g = grid(2, 2, 2);
        g.band_names[1] = "b0".into();
        assert!(g.validate().is_err());
        let mut g = grid(2, 2, 1);
        g.spec.pixel_size[1] = 10.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn pixel_center_affine() {
        let g = grid(3, 4, 1);
        assert_eq!(g.spec.pixel_center(0, 0), (500_005.0, 2_499_995.0));
        assert_eq!(g.spec.pixel_center(2, 3), (500_035.0, 2_499_975.0));
    }

    #[test]
    fn footprint_csv_errors() {
        let empty = FOOTPRINT_COLUMNS.join(",") + "\n";
        assert!(parse_footprints(empty.as_bytes()).unwrap().is_empty());

        let missing = "id,center_x\n1,2\n";
        let err = parse_footprints(missing.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema(ref m) if m.contains("center_y")));

        let bad_cover = format!(
            "{}\na,0,0,12.5,10,12,1.3,0.95,1,0,-5,power\n",
            FOOTPRINT_COLUMNS.join(",")
        );
        let err = parse_footprints(bad_cover.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { row: 1, .. }), "{err}");

        let non_numeric = format!(
            "{}\na,0,0,12.5,10,12,0.3,0.95,1,0,-5,power\nb,0,x,12.5,10,12,0.3,0.95,1,0,-5,power\n",
            FOOTPRINT_COLUMNS.join(",")
        );
        let err = parse_footprints(non_numeric.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err}");
    }
}
