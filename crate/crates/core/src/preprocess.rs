//! Band equalization to `[-1, 1]`, band selection and histogram reports.
//!
//! Equalization is the empirical-CDF map: each value is replaced by its
//! (mid)rank position scaled onto `[-1, 1]`, so the output of any band with
//! few ties is close to uniform.

use std::cmp::Ordering;
use std::fmt::Write as _;

use thiserror::Error;

use crate::geodata::{Band, BandedRaster, GeodataError, SceneBundle, CANONICAL_BANDS};

/// Bands kept for the model, in channel order.
pub const MODEL_BANDS: [&str; 9] = ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "elevation", "slope"];

/// Bands removed before modeling.
pub const DROPPED_BANDS: [&str; 4] = ["BQA", "NDSI", "NDVI", "NDWI"];

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("non-finite input value at index {0}")]
    NonFiniteInput(usize),
    #[error("cannot equalize an empty band")]
    EmptyInput,
    #[error("missing band {0:?}")]
    MissingBand(String),
    #[error("invalid histogram range ({lo}, {hi}) with {nbins} bins")]
    RangeInvalid { lo: f64, hi: f64, nbins: usize },
    #[error(transparent)]
    Geodata(#[from] GeodataError),
}

/// Maps every value to `2·F − 1`, where `F` is the value's midrank divided
/// by `N − 1`. Ties share one output; a single value maps to 0.
pub fn equalize_band(values: &[f32]) -> Result<Vec<f32>, PreprocessError> {
    if values.is_empty() {
        return Err(PreprocessError::EmptyInput);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(PreprocessError::NonFiniteInput(i));
    }
    let n = values.len();
    if n == 1 {
        return Ok(vec![0.0]);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let denom = (n - 1) as f64;
    let mut out = vec![0.0f32; n];
    let mut start = 0;
    while start < n {
        let v = values[order[start]];
        let mut end = start + 1;
        while end < n && values[order[end]] == v {
            end += 1;
        }
        // Mean of zero-based indices start..end.
        let midrank = (start + end - 1) as f64 / 2.0;
        let mapped = (2.0 * midrank / denom - 1.0) as f32;
        for &i in &order[start..end] {
            out[i] = mapped;
        }
        start = end;
    }
    Ok(out)
}

/// Keeps `names` in the given order.
pub fn select_bands(raster: &BandedRaster, names: &[&str]) -> Result<BandedRaster, PreprocessError> {
    let bands = names
        .iter()
        .map(|name| raster.band(name).cloned().ok_or_else(|| PreprocessError::MissingBand(name.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BandedRaster::new(raster.width(), raster.height(), bands, raster.geotransform())?)
}

/// Reduces a canonical 13-band raster to the nine model bands.
pub fn drop_bands(raster: &BandedRaster) -> Result<BandedRaster, PreprocessError> {
    if let Some(missing) = CANONICAL_BANDS.iter().find(|name| raster.band(name).is_none()) {
        return Err(PreprocessError::MissingBand(missing.to_string()));
    }
    select_bands(raster, &MODEL_BANDS)
}

/// Equalizes every band of `raster` over the whole grid.
pub fn equalize_raster(raster: &BandedRaster) -> Result<BandedRaster, PreprocessError> {
    let bands = raster
        .bands()
        .iter()
        .map(|b| Ok(Band { name: b.name.clone(), values: equalize_band(&b.values)? }))
        .collect::<Result<Vec<_>, PreprocessError>>()?;
    Ok(BandedRaster::new(raster.width(), raster.height(), bands, raster.geotransform())?)
}

/// Drops the unused bands, then equalizes each remaining band scene-wide.
pub fn preprocess_scene(bundle: &SceneBundle) -> Result<SceneBundle, PreprocessError> {
    let raster = equalize_raster(&drop_bands(&bundle.raster)?)?;
    Ok(SceneBundle { raster, polygons: bundle.polygons.clone(), mask: bundle.mask.clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramReport {
    pub band: String,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Equal-width histogram over `[lo, hi]`. Values on an interior edge go to
/// the right bin, `hi` itself to the last bin; values outside are dropped.
pub fn histogram(
    band: &str,
    values: &[f32],
    nbins: usize,
    (lo, hi): (f64, f64),
) -> Result<HistogramReport, PreprocessError> {
    if nbins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(PreprocessError::RangeInvalid { lo, hi, nbins });
    }
    let width = hi - lo;
    let edges: Vec<f64> =
        (0..=nbins).map(|k| if k == nbins { hi } else { lo + width * k as f64 / nbins as f64 }).collect();
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(PreprocessError::RangeInvalid { lo, hi, nbins });
    }
    let mut counts = vec![0u64; nbins];
    for &v in values {
        let v = v as f64;
        if !(v >= lo && v <= hi) {
            continue;
        }
        let mut idx = (((v - lo) / width) * nbins as f64).floor() as usize;
        idx = idx.min(nbins - 1);
        if v < edges[idx] {
            idx -= 1;
        } else if idx + 1 < nbins && v >= edges[idx + 1] {
            idx += 1;
        }
        counts[idx] += 1;
    }
    Ok(HistogramReport { band: band.to_string(), edges, counts })
}

/// One histogram per band. With `range = None` each band uses its own
/// min/max (a constant band is widened by ±0.5).
pub fn raster_histograms(
    raster: &BandedRaster,
    nbins: usize,
    range: Option<(f64, f64)>,
) -> Result<Vec<HistogramReport>, PreprocessError> {
    raster
        .bands()
        .iter()
        .map(|b| {
            let r = range.unwrap_or_else(|| {
                let (lo, hi) = b
                    .values
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
                if lo < hi {
                    (lo, hi)
                } else {
                    (lo - 0.5, lo + 0.5)
                }
            });
            histogram(&b.name, &b.values, nbins, r)
        })
        .collect()
}

/// CSV with header `band,bin_lo,bin_hi,count`.
pub fn histograms_to_csv(reports: &[HistogramReport]) -> String {
    let mut out = String::from("band,bin_lo,bin_hi,count\n");
    for r in reports {
        for (i, count) in r.counts.iter().enumerate() {
            writeln!(out, "{},{},{},{}", r.band, r.edges[i], r.edges[i + 1], count).unwrap();
        }
    }
    out
}
