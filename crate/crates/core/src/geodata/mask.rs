use std::path::Path;

use super::polygons::PolygonLayer;
use super::raster::{read_raster, write_raster, Band, BandedRaster, GeoTransform};
use super::GeodataError;
use crate::sampling::point_in_polygon;

pub const BACKGROUND: u8 = 0;
pub const CLEAN_ICE: u8 = 1;
pub const DEBRIS: u8 = 2;

/// Per-pixel class codes: 0 background, 1 clean ice, 2 debris.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self, GeodataError> {
        if values.len() != width * height {
            return Err(GeodataError::InvalidMask(format!("{} codes for a {}x{} mask", values.len(), width, height)));
        }
        if let Some(v) = values.iter().find(|&&v| v > DEBRIS) {
            return Err(GeodataError::InvalidMask(format!("invalid class code {v}")));
        }
        Ok(Self { width, height, values })
    }

    pub fn background(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![BACKGROUND; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, code: u8) {
        debug_assert!(code <= DEBRIS);
        self.values[row * self.width + col] = code;
    }

    /// Fraction of pixels carrying a glacier class.
    pub fn glacier_fraction(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().filter(|&&v| v != BACKGROUND).count() as f64 / self.values.len() as f64
    }

    pub fn crop(&self, col: usize, row: usize, w: usize, h: usize) -> Result<Self, GeodataError> {
        if col + w > self.width || row + h > self.height {
            return Err(GeodataError::InvalidMask(format!(
                "window {}x{} at ({}, {}) exceeds {}x{} mask",
                w, h, col, row, self.width, self.height
            )));
        }
        let values = (row..row + h)
            .flat_map(|y| self.values[y * self.width + col..y * self.width + col + w].iter().copied())
            .collect();
        Ok(Self { width: w, height: h, values })
    }

    /// Single-band raster named `mask` holding the codes as reals.
    pub fn to_raster(&self, geotransform: GeoTransform) -> BandedRaster {
        let band = Band { name: "mask".into(), values: self.values.iter().map(|&v| f32::from(v)).collect() };
        BandedRaster::new(self.width, self.height, vec![band], geotransform).expect("mask raster is valid")
    }

    pub fn from_raster(raster: &BandedRaster) -> Result<Self, GeodataError> {
        if raster.bands().len() != 1 {
            return Err(GeodataError::InvalidMask(format!("mask raster has {} bands", raster.bands().len())));
        }
        let values = raster
            .band_values("mask")
            .map_err(|_| GeodataError::InvalidMask("mask raster band must be named \"mask\"".into()))?
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(BACKGROUND),
                v if v == 1.0 => Ok(CLEAN_ICE),
                v if v == 2.0 => Ok(DEBRIS),
                v => Err(GeodataError::InvalidMask(format!("invalid class code {v}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(raster.width(), raster.height(), values)
    }
}

pub fn write_mask(mask: &LabelMask, geotransform: GeoTransform, path: impl AsRef<Path>) -> Result<(), GeodataError> {
    write_raster(&mask.to_raster(geotransform), path)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<(LabelMask, GeoTransform), GeodataError> {
    let raster = read_raster(path)?;
    Ok((LabelMask::from_raster(&raster)?, raster.geotransform()))
}

/// Burns polygons into a label grid. A pixel takes the label of the last
/// feature whose rings contain its center under the even-odd rule.
pub fn rasterize_polygons(
    polygons: &PolygonLayer,
    width: usize,
    height: usize,
    geotransform: GeoTransform,
) -> Result<LabelMask, GeodataError> {
    if !geotransform.is_invertible() {
        return Err(GeodataError::DegenerateGeotransform(geotransform.0));
    }
    let mut mask = LabelMask::background(width, height);
    if width == 0 || height == 0 {
        return Ok(mask);
    }
    for feature in &polygons.features {
        let Some((c0, c1, r0, r1)) = pixel_window(feature.bbox(), geotransform, width, height) else {
            continue;
        };
        let code = feature.label.code();
        for row in r0..=r1 {
            for col in c0..=c1 {
                if point_in_polygon(geotransform.pixel_center(col, row), &feature.rings) {
                    mask.set(col, row, code);
                }
            }
        }
    }
    Ok(mask)
}

/// Pixel index range that can contain centers inside `bbox`, padded by one
/// pixel against rounding in the inverse transform.
fn pixel_window(
    (x0, y0, x1, y1): (f64, f64, f64, f64),
    gt: GeoTransform,
    width: usize,
    height: usize,
) -> Option<(usize, usize, usize, usize)> {
    let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)];
    let (mut cmin, mut rmin, mut cmax, mut rmax) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        let (c, r) = gt.invert(x, y)?;
        cmin = cmin.min(c);
        cmax = cmax.max(c);
        rmin = rmin.min(r);
        rmax = rmax.max(r);
    }
    if !(cmin.is_finite() && cmax.is_finite() && rmin.is_finite() && rmax.is_finite()) {
        return None;
    }
    let lo = |v: f64| (v.floor() - 1.0).max(0.0);
    let hi = |v: f64, n: usize| (v.ceil() + 1.0).min(n as f64 - 1.0);
    let (c0, c1, r0, r1) = (lo(cmin), hi(cmax, width), lo(rmin), hi(rmax, height));
    if c0 > c1 || r0 > r1 {
        return None;
    }
    Some((c0 as usize, c1 as usize, r0 as usize, r1 as usize))
}
