//! Patch-center sampling inside glacier outlines, patch extraction and
//! train/test splitting.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodata::{
    read_mask, read_raster, write_mask, write_raster, Band, BandedRaster, GeoTransform, GeodataError, LabelMask,
    PolygonLayer, Ring, SceneBundle,
};
use crate::preprocess::MODEL_BANDS;
use crate::tensor::{Shape, Tensor};

/// Rejection-sampling attempts allowed per requested center.
pub const ATTEMPTS_PER_CENTER: usize = 10_000;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("polygon layer is empty")]
    NoPolygons,
    #[error("patch size {size} must be even, positive and fit a {width}x{height} raster")]
    SizeInvalid { size: usize, width: usize, height: usize },
    #[error("no valid patch center found after {attempts} attempts")]
    NoValidCenter { attempts: usize },
    #[error("window of patch {id} at ({col}, {row}) size {size} leaves the {width}x{height} raster")]
    WindowOutOfBounds { id: String, col: usize, row: usize, size: usize, width: usize, height: usize },
    #[error("scene has {found} bands, expected the {expected} preprocessed model bands")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("test fraction {0} must lie strictly between 0 and 1")]
    FractionInvalid(f64),
    #[error("no patch specs to split")]
    EmptySpecs,
    #[error("patch spec CSV line {line}: {reason}")]
    CsvInvalid { line: usize, reason: String },
    #[error(transparent)]
    Geodata(#[from] GeodataError),
}

/// Even-odd containment over all rings. Points exactly on an edge count as
/// inside.
pub fn point_in_polygon((x, y): (f64, f64), rings: &[Ring]) -> bool {
    let mut inside = false;
    for ring in rings {
        let v = ring.vertices();
        for k in 0..v.len() - 1 {
            let (xi, yi) = v[k];
            let (xj, yj) = v[k + 1];
            if on_segment((x, y), (xi, yi), (xj, yj)) {
                return true;
            }
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
        }
    }
    inside
}

fn on_segment((x, y): (f64, f64), (x0, y0): (f64, f64), (x1, y1): (f64, f64)) -> bool {
    let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
    cross == 0.0 && x >= x0.min(x1) && x <= x0.max(x1) && y >= y0.min(y1) && y <= y0.max(y1)
}

/// True when `point` lies in any feature of `layer`.
pub fn in_any_polygon(point: (f64, f64), layer: &PolygonLayer) -> bool {
    layer.features.iter().any(|f| {
        let (x0, y0, x1, y1) = f.bbox();
        point.0 >= x0 && point.0 <= x1 && point.1 >= y0 && point.1 <= y1 && point_in_polygon(point, &f.rings)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// A square window centered on pixel `(col, row)`. The window covers
/// `[col − size/2, col + size/2) × [row − size/2, row + size/2)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub id: String,
    pub col: usize,
    pub row: usize,
    pub size: usize,
    pub split: Split,
}

impl PatchSpec {
    /// Top-left pixel of the window, if it does not underflow.
    pub fn origin(&self) -> Option<(usize, usize)> {
        let half = self.size / 2;
        Some((self.col.checked_sub(half)?, self.row.checked_sub(half)?))
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        let half = self.size / 2;
        self.size > 0 && self.col >= half && self.row >= half && self.col + half <= width && self.row + half <= height
    }

    /// Geographic position of the center pixel.
    pub fn center_lonlat(&self, geotransform: GeoTransform) -> (f64, f64) {
        geotransform.pixel_center(self.col, self.row)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterGeometry {
    pub width: usize,
    pub height: usize,
    pub geotransform: GeoTransform,
}

impl RasterGeometry {
    pub fn of(raster: &BandedRaster) -> Self {
        Self { width: raster.width(), height: raster.height(), geotransform: raster.geotransform() }
    }
}

/// Draws `n` patch centers uniformly over the pixels whose window fits the
/// raster, keeping those whose center lies inside a glacier polygon.
pub fn sample_centers(
    polygons: &PolygonLayer,
    n: usize,
    geometry: RasterGeometry,
    size: usize,
    seed: u64,
) -> Result<Vec<PatchSpec>, SamplingError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if polygons.is_empty() {
        return Err(SamplingError::NoPolygons);
    }
    let RasterGeometry { width, height, geotransform } = geometry;
    if size == 0 || !size.is_multiple_of(2) || size > width || size > height {
        return Err(SamplingError::SizeInvalid { size, width, height });
    }
    let half = size / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = ATTEMPTS_PER_CENTER.saturating_mul(n);
    let mut specs = Vec::with_capacity(n);
    for _ in 0..budget {
        let col = rng.gen_range(half..=width - half);
        let row = rng.gen_range(half..=height - half);
        if in_any_polygon(geotransform.pixel_center(col, row), polygons) {
            specs.push(PatchSpec { id: format!("p{:04}", specs.len()), col, row, size, split: Split::Train });
            if specs.len() == n {
                return Ok(specs);
            }
        }
    }
    Err(SamplingError::NoValidCenter { attempts: budget })
}

/// A model-ready crop: `input` is `(1, 9, size, size)` in model band order.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub spec: PatchSpec,
    pub input: Tensor<f32>,
    pub mask: LabelMask,
    /// Geotransform of the crop's top-left pixel.
    pub geotransform: GeoTransform,
}

impl Patch {
    pub fn to_raster(&self) -> BandedRaster {
        let bands = MODEL_BANDS
            .iter()
            .enumerate()
            .map(|(c, name)| Band { name: name.to_string(), values: self.input.plane(0, c).to_vec() })
            .collect();
        BandedRaster::new(self.spec.size, self.spec.size, bands, self.geotransform).expect("patch raster is valid")
    }

    /// Writes `<id>_x.grd` and `<id>_y.grd` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SamplingError> {
        let dir = dir.as_ref();
        write_raster(&self.to_raster(), dir.join(format!("{}_x.grd", self.spec.id)))?;
        write_mask(&self.mask, self.geotransform, dir.join(format!("{}_y.grd", self.spec.id)))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, spec: &PatchSpec) -> Result<Self, SamplingError> {
        let dir = dir.as_ref();
        let raster = read_raster(dir.join(format!("{}_x.grd", spec.id)))?;
        let (mask, _) = read_mask(dir.join(format!("{}_y.grd", spec.id)))?;
        if raster.width() != spec.size
            || raster.height() != spec.size
            || mask.width() != spec.size
            || mask.height() != spec.size
        {
            return Err(SamplingError::WindowOutOfBounds {
                id: spec.id.clone(),
                col: spec.col,
                row: spec.row,
                size: spec.size,
                width: raster.width(),
                height: raster.height(),
            });
        }
        let input = raster_to_tensor(&raster)?;
        Ok(Self { spec: spec.clone(), input, mask, geotransform: raster.geotransform() })
    }
}

fn raster_to_tensor(raster: &BandedRaster) -> Result<Tensor<f32>, SamplingError> {
    if raster.bands().len() != MODEL_BANDS.len() {
        return Err(SamplingError::ChannelMismatch { expected: MODEL_BANDS.len(), found: raster.bands().len() });
    }
    let data = raster.bands().iter().flat_map(|b| b.values.iter().copied()).collect();
    Ok(Tensor::from_vec(Shape::new(1, raster.bands().len(), raster.height(), raster.width()), data)
        .expect("band sizes checked by BandedRaster"))
}

/// Crops the spec's window from a preprocessed scene.
pub fn extract_patch(scene: &SceneBundle, spec: &PatchSpec) -> Result<Patch, SamplingError> {
    let (w, h) = (scene.raster.width(), scene.raster.height());
    let out_of_bounds = || SamplingError::WindowOutOfBounds {
        id: spec.id.clone(),
        col: spec.col,
        row: spec.row,
        size: spec.size,
        width: w,
        height: h,
    };
    if !spec.fits(w, h) {
        return Err(out_of_bounds());
    }
    let (c0, r0) = spec.origin().ok_or_else(out_of_bounds)?;
    let raster = scene.raster.crop(c0, r0, spec.size, spec.size)?;
    let input = raster_to_tensor(&raster)?;
    let mask = scene.mask.crop(c0, r0, spec.size, spec.size)?;
    Ok(Patch { spec: spec.clone(), input, mask, geotransform: raster.geotransform() })
}

/// Samples `n` centers inside the scene's polygons and extracts their patches.
pub fn sample_patches(scene: &SceneBundle, n: usize, size: usize, seed: u64) -> Result<Vec<Patch>, SamplingError> {
    let specs = sample_centers(&scene.polygons, n, RasterGeometry::of(&scene.raster), size, seed)?;
    specs.iter().map(|spec| extract_patch(scene, spec)).collect()
}

/// Assigns `round(test_fraction · n)` randomly chosen specs to the test split.
pub fn split_patches(specs: &[PatchSpec], test_fraction: f64, seed: u64) -> Result<Vec<PatchSpec>, SamplingError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(SamplingError::FractionInvalid(test_fraction));
    }
    if specs.is_empty() {
        return Err(SamplingError::EmptySpecs);
    }
    let n_test = (test_fraction * specs.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = specs.to_vec();
    for (rank, &i) in order.iter().enumerate() {
        out[i].split = if rank < n_test { Split::Test } else { Split::Train };
    }
    Ok(out)
}

pub const SPEC_CSV_HEADER: &str = "id,col,row,size,split";

pub fn specs_to_csv(specs: &[PatchSpec]) -> String {
    let mut out = format!("{SPEC_CSV_HEADER}\n");
    for s in specs {
        writeln!(out, "{},{},{},{},{}", s.id, s.col, s.row, s.size, s.split).unwrap();
    }
    out
}

pub fn specs_from_csv(text: &str) -> Result<Vec<PatchSpec>, SamplingError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == SPEC_CSV_HEADER => {}
        _ => return Err(SamplingError::CsvInvalid { line: 1, reason: format!("expected header {SPEC_CSV_HEADER:?}") }),
    }
    lines
        .map(|(i, line)| {
            let bad = |reason: String| SamplingError::CsvInvalid { line: i + 1, reason };
            let fields: Vec<&str> = line.trim().split(',').collect();
            let [id, col, row, size, split] = fields[..] else {
                return Err(bad(format!("expected 5 fields, found {}", fields.len())));
            };
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(bad(format!("invalid patch id {id:?}")));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
            Ok(PatchSpec {
                id: id.to_string(),
                col: num(col)?,
                row: num(row)?,
                size: num(size)?,
                split: split.parse().map_err(bad)?,
            })
        })
        .collect()
}

pub fn write_specs(specs: &[PatchSpec], path: impl AsRef<Path>) -> Result<(), SamplingError> {
    fs::write(path.as_ref(), specs_to_csv(specs))
        .map_err(|e| GeodataError::Io { path: path.as_ref().display().to_string(), source: e }.into())
}

pub fn read_specs(path: impl AsRef<Path>) -> Result<Vec<PatchSpec>, SamplingError> {
    let text = fs::read_to_string(path.as_ref())
        .map_err(|e| SamplingError::from(GeodataError::Io { path: path.as_ref().display().to_string(), source: e }))?;
    specs_from_csv(&text)
}
