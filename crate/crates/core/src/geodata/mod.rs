//! Raster and polygon data model, file formats, synthetic scenes and
//! image rendering.

mod mask;
mod polygons;
mod raster;
mod render;
mod synth;

use std::path::Path;

use thiserror::Error;

pub use mask::{rasterize_polygons, read_mask, write_mask, LabelMask, BACKGROUND, CLEAN_ICE, DEBRIS};
pub use polygons::{read_polygons, write_polygons, GlacierClass, PolygonFeature, PolygonLayer, Ring};
pub use raster::{
    decode_raster, encode_raster, read_raster, write_raster, Band, BandedRaster, GeoTransform, RASTER_MAGIC,
};
pub use render::{render_rgb_png, rgb_image, save_gray, save_rgb, to_display_u8};
pub use synth::{class_counts, synth_scene, SceneConfig};

/// Band order of a raw scene.
pub const CANONICAL_BANDS: [&str; 13] =
    ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "BQA", "elevation", "NDSI", "NDVI", "NDWI", "slope"];

#[derive(Debug, Error)]
pub enum GeodataError {
    #[error("bad magic at byte {offset}: expected \"GLRD1\\n\"")]
    MagicMismatch { offset: usize },
    #[error("invalid header at byte {offset}: {reason}")]
    HeaderInvalid { offset: usize, reason: String },
    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    TruncatedPayload { offset: usize, expected: usize, found: usize },
    #[error("unexpected trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize },
    #[error("non-finite sample at byte {offset}")]
    NonFiniteValue { offset: usize },
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid polygon data: {0}")]
    PolygonInvalid(String),
    #[error("geotransform {0:?} is not invertible")]
    DegenerateGeotransform([f64; 6]),
    #[error("invalid scene config: {0}")]
    ConfigInvalid(String),
    #[error("unknown band {0:?}")]
    UnknownBand(String),
    #[error("cannot write image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl GeodataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        GeodataError::Io { path: path.display().to_string(), source }
    }
}

/// A scene with its glacier outlines and the mask rasterized from them.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub raster: BandedRaster,
    pub polygons: PolygonLayer,
    pub mask: LabelMask,
}

const RASTER_FILE: &str = "raster.grd";
const POLYGON_FILE: &str = "polygons.geojson";
const MASK_FILE: &str = "mask.grd";

impl SceneBundle {
    /// Checks that the mask is exactly the rasterization of the polygons.
    pub fn is_consistent(&self) -> Result<bool, GeodataError> {
        let r = &self.raster;
        Ok(rasterize_polygons(&self.polygons, r.width(), r.height(), r.geotransform())? == self.mask)
    }

    /// Writes `raster.grd`, `polygons.geojson` and `mask.grd` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), GeodataError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| GeodataError::io(dir, e))?;
        write_raster(&self.raster, dir.join(RASTER_FILE))?;
        write_polygons(&self.polygons, dir.join(POLYGON_FILE))?;
        write_mask(&self.mask, self.raster.geotransform(), dir.join(MASK_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, GeodataError> {
        let dir = dir.as_ref();
        let raster = read_raster(dir.join(RASTER_FILE))?;
        let polygons = read_polygons(dir.join(POLYGON_FILE))?;
        let (mask, _) = read_mask(dir.join(MASK_FILE))?;
        if mask.width() != raster.width() || mask.height() != raster.height() {
            return Err(GeodataError::InvalidMask(format!(
                "mask is {}x{} but raster is {}x{}",
                mask.width(),
                mask.height(),
                raster.width(),
                raster.height()
            )));
        }
        Ok(Self { raster, polygons, mask })
    }
}
