//! Synthetic 13-band scenes with glacier outlines.
//!
//! Glaciers are star-shaped blobs (a circle with radially perturbed
//! vertices). Each band is a per-class level plus a smooth terrain field and
//! Gaussian noise, mapped into a band-specific physical range, so classes are
//! separable but not trivially so.

use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mask::rasterize_polygons;
use super::polygons::{GlacierClass, PolygonFeature, PolygonLayer, Ring};
use super::raster::{Band, BandedRaster, GeoTransform};
use super::{GeodataError, SceneBundle, CANONICAL_BANDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub clean_ice_blobs: usize,
    pub debris_blobs: usize,
    /// Standard deviation of per-pixel noise, in units of a band's range.
    pub noise: f64,
    /// Blob radius bounds in pixels.
    pub blob_radius_min: f64,
    pub blob_radius_max: f64,
    pub blob_vertices: usize,
    /// Relative radial jitter of blob vertices, in `[0, 1)`.
    pub blob_jitter: f64,
    pub origin_lon: f64,
    pub origin_lat: f64,
    /// Degrees per pixel.
    pub pixel_size: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            clean_ice_blobs: 8,
            debris_blobs: 5,
            noise: 0.05,
            blob_radius_min: 20.0,
            blob_radius_max: 45.0,
            blob_vertices: 24,
            blob_jitter: 0.35,
            origin_lon: 85.0,
            origin_lat: 28.5,
            pixel_size: 0.00027,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<(), GeodataError> {
        let fail = |msg: &str| Err(GeodataError::ConfigInvalid(msg.to_string()));
        if self.width == 0 || self.height == 0 {
            return fail("width and height must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be finite and nonnegative");
        }
        if !(self.blob_radius_min > 0.0
            && self.blob_radius_min <= self.blob_radius_max
            && self.blob_radius_max.is_finite())
        {
            return fail("blob radii must satisfy 0 < min <= max");
        }
        if self.blob_vertices < 3 {
            return fail("blobs need at least 3 vertices");
        }
        if !(0.0..1.0).contains(&self.blob_jitter) {
            return fail("blob_jitter must be in [0, 1)");
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return fail("pixel_size must be positive");
        }
        if !(self.origin_lon.is_finite() && self.origin_lat.is_finite()) {
            return fail("origin must be finite");
        }
        Ok(())
    }
}

/// How one band responds to class and terrain.
struct BandProfile {
    lo: f64,
    hi: f64,
    /// Normalized level for background, clean ice, debris.
    levels: [f64; 3],
    terrain: f64,
    /// Round to integers (digital numbers); saturates at the range ends.
    quantized: bool,
}

const fn profile(lo: f64, hi: f64, levels: [f64; 3], terrain: f64, quantized: bool) -> BandProfile {
    BandProfile { lo, hi, levels, terrain, quantized }
}

/// In `CANONICAL_BANDS` order. BQA carries no class signal.
const PROFILES: [BandProfile; 13] = [
    profile(0.0, 255.0, [0.30, 0.97, 0.45], 0.10, true),
    profile(0.0, 255.0, [0.28, 0.95, 0.42], 0.10, true),
    profile(0.0, 255.0, [0.25, 0.93, 0.40], 0.10, true),
    profile(10.0, 210.0, [0.40, 0.70, 0.50], 0.10, true),
    profile(0.0, 120.0, [0.50, 0.10, 0.45], 0.15, true),
    profile(120.0, 180.0, [0.60, 0.20, 0.40], 0.20, true),
    profile(0.0, 90.0, [0.45, 0.10, 0.40], 0.15, true),
    profile(672.0, 2800.0, [0.50, 0.50, 0.50], 0.0, true),
    profile(2500.0, 7500.0, [0.35, 0.75, 0.60], 0.30, false),
    profile(-0.6, 0.95, [0.30, 0.90, 0.50], 0.05, false),
    profile(-0.4, 0.8, [0.55, 0.30, 0.40], 0.05, false),
    profile(-0.8, 0.6, [0.40, 0.70, 0.45], 0.05, false),
    profile(0.0, 70.0, [0.40, 0.25, 0.30], 0.25, false),
];

const BQA_CODES: [f64; 4] = [672.0, 676.0, 680.0, 2800.0];

/// Smooth field in `[-1, 1]` from a few random plane waves.
struct Terrain {
    waves: Vec<(f64, f64, f64)>,
}

impl Terrain {
    fn new(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Self {
        let scale = width.max(height) as f64;
        let waves = (0..4)
            .map(|_| {
                let angle = rng.gen_range(0.0..TAU);
                let freq = rng.gen_range(0.5..3.0) * TAU / scale;
                (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..TAU))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, col: f64, row: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|(kx, ky, phase)| (kx * col + ky * row + phase).sin()).sum();
        s / self.waves.len() as f64
    }
}

fn blob(rng: &mut ChaCha8Rng, config: &SceneConfig, gt: GeoTransform) -> Result<Ring, GeodataError> {
    let r = rng.gen_range(config.blob_radius_min..=config.blob_radius_max);
    let (w, h) = (config.width as f64, config.height as f64);
    // Keep centers inside the raster; blobs may still spill over the edge.
    let cx = rng.gen_range(0.0..w);
    let cy = rng.gen_range(0.0..h);
    let k = config.blob_vertices;
    let phase = rng.gen_range(0.0..TAU);
    let vertices = (0..k)
        .map(|i| {
            let a = phase + TAU * i as f64 / k as f64;
            let rr = r * (1.0 + config.blob_jitter * rng.gen_range(-1.0..1.0));
            gt.apply(cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect();
    Ring::closed(vertices)
}

/// Generates a 13-band scene, glacier outlines and their mask from `seed`.
pub fn synth_scene(seed: u64, config: &SceneConfig) -> Result<SceneBundle, GeodataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = GeoTransform::north_up(config.origin_lon, config.origin_lat, config.pixel_size);

    let mut features = Vec::with_capacity(config.clean_ice_blobs + config.debris_blobs);
    for _ in 0..config.clean_ice_blobs {
        features.push(PolygonFeature { rings: vec![blob(&mut rng, config, gt)?], label: GlacierClass::CleanIce });
    }
    for _ in 0..config.debris_blobs {
        features.push(PolygonFeature { rings: vec![blob(&mut rng, config, gt)?], label: GlacierClass::Debris });
    }
    let polygons = PolygonLayer { features };
    let mask = rasterize_polygons(&polygons, config.width, config.height, gt)?;

    let terrain = Terrain::new(&mut rng, config.width, config.height);
    let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let n = config.width * config.height;
    let field: Vec<f64> = (0..n).map(|i| terrain.at((i % config.width) as f64, (i / config.width) as f64)).collect();

    let mut bands = Vec::with_capacity(CANONICAL_BANDS.len());
    for (name, p) in CANONICAL_BANDS.iter().zip(PROFILES.iter()) {
        let values = if *name == "BQA" {
            (0..n).map(|_| BQA_CODES[rng.gen_range(0..BQA_CODES.len())] as f32).collect()
        } else {
            let span = p.hi - p.lo;
            mask.values()
                .iter()
                .zip(&field)
                .map(|(&code, &f)| {
                    let level = p.levels[code as usize];
                    let jitter = if config.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    let t = (level + p.terrain * f + jitter).clamp(0.0, 1.0);
                    let v = p.lo + span * t;
                    (if p.quantized { v.round() } else { v }) as f32
                })
                .collect()
        };
        bands.push(Band { name: name.to_string(), values });
    }
    let raster = BandedRaster::new(config.width, config.height, bands, gt)?;
    Ok(SceneBundle { raster, polygons, mask })
}

/// Pixel counts per class code, handy for reporting label imbalance.
pub fn class_counts(mask: &super::LabelMask) -> [usize; 3] {
    let mut counts = [0usize; 3];
    for &v in mask.values() {
        counts[v as usize] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            width: 96,
            height: 80,
            clean_ice_blobs: 3,
            debris_blobs: 2,
            blob_radius_min: 6.0,
            blob_radius_max: 12.0,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bundle() {
        let a = synth_scene(7, &small()).unwrap();
        let b = synth_scene(7, &small()).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(8, &small()).unwrap();
        assert_ne!(a.raster, c.raster);
    }

    #[test]
    fn canonical_band_names_with_distinct_ranges() {
        let s = synth_scene(1, &small()).unwrap();
        assert_eq!(s.raster.band_names(), CANONICAL_BANDS.to_vec());
        let ranges: Vec<(f32, f32)> = s
            .raster
            .bands()
            .iter()
            .map(|b| b.values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
            .collect();
        for i in 0..ranges.len() {
            for j in i + 1..ranges.len() {
                assert_ne!(
                    ranges[i], ranges[j],
                    "bands {} and {} share a range",
                    CANONICAL_BANDS[i], CANONICAL_BANDS[j]
                );
            }
        }
    }

    #[test]
    fn zero_blobs_gives_background() {
        let s = synth_scene(3, &SceneConfig { clean_ice_blobs: 0, debris_blobs: 0, ..small() }).unwrap();
        assert!(s.mask.values().iter().all(|&v| v == 0));
        assert!(s.polygons.is_empty());
    }

    #[test]
    fn default_scene_is_imbalanced() {
        // Counted directly from the generated mask.
        for seed in 0..3 {
            let s = synth_scene(seed, &SceneConfig::default()).unwrap();
            let counts = class_counts(&s.mask);
            let glacier = (counts[1] + counts[2]) as f64 / s.mask.values().len() as f64;
            assert!(glacier > 0.0 && glacier < 0.5, "seed {seed}: glacier fraction {glacier}");
            assert!(counts[1] > 0 && counts[2] > 0);
        }
    }

    #[test]
    fn mask_matches_rasterized_polygons() {
        let s = synth_scene(11, &small()).unwrap();
        let m = rasterize_polygons(&s.polygons, s.raster.width(), s.raster.height(), s.raster.geotransform()).unwrap();
        assert_eq!(m, s.mask);
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(matches!(synth_scene(0, &SceneConfig { width: 0, ..small() }), Err(GeodataError::ConfigInvalid(_))));
        assert!(matches!(
            synth_scene(0, &SceneConfig { blob_radius_min: 5.0, blob_radius_max: 1.0, ..small() }),
            Err(GeodataError::ConfigInvalid(_))
        ));
    }
}
