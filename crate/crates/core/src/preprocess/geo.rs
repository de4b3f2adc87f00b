use crate::raster::{GridSpec, RasterGrid, DEFAULT_NODATA};

/// Planes holding the y ("lat") and x ("lon") map coordinate of every pixel
/// center. For a geographic CRS these are degrees; for a projected CRS they
/// are the projected northing/easting, which carry the same positional cue.
pub fn latlon_planes(spec: &GridSpec) -> (RasterGrid, RasterGrid) {
    let mut lat = Vec::with_capacity(spec.len());
    let mut lon = Vec::with_capacity(spec.len());
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let (x, y) = spec.pixel_center(r, c);
            lat.push(y as f32);
            lon.push(x as f32);
        }
    }
    let mk = |name: &str, values| RasterGrid {
        spec: spec.clone(),
        band_names: vec![name.to_string()],
        nodata: DEFAULT_NODATA,
        values,
    };
    (mk("lat", lat), mk("lon", lon))
}
