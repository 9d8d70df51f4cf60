//! `BandedRaster` and the GLRD1 container.
//!
//! Layout: the six bytes `GLRD1\n`, a little-endian `u32` header length, a
//! UTF-8 JSON header, then band-sequential row-major little-endian `f32`
//! samples.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GeodataError;

pub const RASTER_MAGIC: &[u8; 6] = b"GLRD1\n";
const DTYPE: &str = "f32le";

/// Affine map from pixel `(col, row)` to `(lon, lat)`:
/// `lon = a + b·col + c·row`, `lat = d + e·col + f·row`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GeoTransform(pub [f64; 6]);

impl GeoTransform {
    pub const IDENTITY: GeoTransform = GeoTransform([0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    /// North-up transform with square pixels; rows run south.
    pub fn north_up(origin_lon: f64, origin_lat: f64, pixel_size: f64) -> Self {
        GeoTransform([origin_lon, pixel_size, 0.0, origin_lat, 0.0, -pixel_size])
    }

    pub fn apply(&self, col: f64, row: f64) -> (f64, f64) {
        let [a, b, c, d, e, f] = self.0;
        (a + b * col + c * row, d + e * col + f * row)
    }

    /// Geographic position of the center of pixel `(col, row)`.
    pub fn pixel_center(&self, col: usize, row: usize) -> (f64, f64) {
        self.apply(col as f64 + 0.5, row as f64 + 0.5)
    }

    pub fn determinant(&self) -> f64 {
        let [_, b, c, _, e, f] = self.0;
        b * f - c * e
    }

    pub fn is_invertible(&self) -> bool {
        let det = self.determinant();
        det != 0.0 && det.is_finite()
    }

    /// Maps `(lon, lat)` back to fractional pixel coordinates.
    pub fn invert(&self, lon: f64, lat: f64) -> Option<(f64, f64)> {
        if !self.is_invertible() {
            return None;
        }
        let [a, b, c, d, e, f] = self.0;
        let det = self.determinant();
        let (dx, dy) = (lon - a, lat - d);
        Some(((f * dx - c * dy) / det, (b * dy - e * dx) / det))
    }

    /// Transform of a sub-window whose top-left pixel is `(col, row)`.
    pub fn shifted(&self, col: usize, row: usize) -> Self {
        let [_, b, c, _, e, f] = self.0;
        let (lon, lat) = self.apply(col as f64, row as f64);
        GeoTransform([lon, b, c, lat, e, f])
    }
}

impl Default for GeoTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub name: String,
    pub values: Vec<f32>,
}

/// Named multi-band grid of `f32` samples sharing one geotransform.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedRaster {
    width: usize,
    height: usize,
    bands: Vec<Band>,
    geotransform: GeoTransform,
}

impl BandedRaster {
    /// Validates grid sizes, name uniqueness and finiteness.
    pub fn new(
        width: usize,
        height: usize,
        bands: Vec<Band>,
        geotransform: GeoTransform,
    ) -> Result<Self, GeodataError> {
        let mut seen = HashSet::new();
        for band in &bands {
            if !seen.insert(band.name.as_str()) {
                return Err(GeodataError::InvalidRaster(format!("duplicate band name {:?}", band.name)));
            }
            if band.values.len() != width * height {
                return Err(GeodataError::InvalidRaster(format!(
                    "band {:?} has {} values, expected {}x{}",
                    band.name,
                    band.values.len(),
                    width,
                    height
                )));
            }
            if let Some(i) = band.values.iter().position(|v| !v.is_finite()) {
                return Err(GeodataError::InvalidRaster(format!(
                    "band {:?} has non-finite value at index {}",
                    band.name, i
                )));
            }
        }
        Ok(Self { width, height, bands, geotransform })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn geotransform(&self) -> GeoTransform {
        self.geotransform
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn band_names(&self) -> Vec<&str> {
        self.bands.iter().map(|b| b.name.as_str()).collect()
    }

    pub fn band(&self, name: &str) -> Option<&Band> {
        self.bands.iter().find(|b| b.name == name)
    }

    pub fn band_values(&self, name: &str) -> Result<&[f32], GeodataError> {
        self.band(name).map(|b| b.values.as_slice()).ok_or_else(|| GeodataError::UnknownBand(name.to_string()))
    }

    pub fn into_bands(self) -> Vec<Band> {
        self.bands
    }

    /// Copies the window `[col, col + w) × [row, row + h)` of every band.
    pub fn crop(&self, col: usize, row: usize, w: usize, h: usize) -> Result<Self, GeodataError> {
        if col + w > self.width || row + h > self.height {
            return Err(GeodataError::InvalidRaster(format!(
                "window {}x{} at ({}, {}) exceeds {}x{} raster",
                w, h, col, row, self.width, self.height
            )));
        }
        let bands = self
            .bands
            .iter()
            .map(|b| Band {
                name: b.name.clone(),
                values: (row..row + h)
                    .flat_map(|y| b.values[y * self.width + col..y * self.width + col + w].iter().copied())
                    .collect(),
            })
            .collect();
        Ok(Self { width: w, height: h, bands, geotransform: self.geotransform.shifted(col, row) })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    width: usize,
    height: usize,
    bands: Vec<String>,
    dtype: String,
    geotransform: [f64; 6],
}

/// Serializes a raster into GLRD1 bytes.
pub fn encode_raster(raster: &BandedRaster) -> Result<Vec<u8>, GeodataError> {
    if raster.bands.is_empty() {
        return Err(GeodataError::HeaderInvalid { offset: RASTER_MAGIC.len() + 4, reason: "empty band list".into() });
    }
    let header = Header {
        width: raster.width,
        height: raster.height,
        bands: raster.bands.iter().map(|b| b.name.clone()).collect(),
        dtype: DTYPE.into(),
        geotransform: raster.geotransform.0,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload = raster.width * raster.height * raster.bands.len() * 4;
    let mut out = Vec::with_capacity(RASTER_MAGIC.len() + 4 + json.len() + payload);
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for band in &raster.bands {
        for v in &band.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses GLRD1 bytes. Errors carry the byte offset where parsing failed.
pub fn decode_raster(bytes: &[u8]) -> Result<BandedRaster, GeodataError> {
    let magic_len = RASTER_MAGIC.len();
    if bytes.len() < magic_len || &bytes[..magic_len] != RASTER_MAGIC {
        let offset = bytes.iter().zip(RASTER_MAGIC).take_while(|(a, b)| a == b).count();
        return Err(GeodataError::MagicMismatch { offset });
    }
    let len_bytes = bytes
        .get(magic_len..magic_len + 4)
        .ok_or(GeodataError::HeaderInvalid { offset: magic_len, reason: "missing header length".into() })?;
    let header_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let header_start = magic_len + 4;
    let header_end =
        header_start.checked_add(header_len).filter(|&end| end <= bytes.len()).ok_or(GeodataError::HeaderInvalid {
            offset: header_start,
            reason: format!("header length {} exceeds file size {}", header_len, bytes.len()),
        })?;
    let header: Header = serde_json::from_slice(&bytes[header_start..header_end])
        .map_err(|e| GeodataError::HeaderInvalid { offset: header_start, reason: e.to_string() })?;
    if header.dtype != DTYPE {
        return Err(GeodataError::HeaderInvalid {
            offset: header_start,
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    if header.bands.is_empty() {
        return Err(GeodataError::HeaderInvalid { offset: header_start, reason: "empty band list".into() });
    }
    let plane = header.width.checked_mul(header.height);
    let payload_len = plane
        .and_then(|p| p.checked_mul(header.bands.len()))
        .and_then(|p| p.checked_mul(4))
        .ok_or(GeodataError::HeaderInvalid { offset: header_start, reason: "raster dimensions overflow".into() })?;
    let available = bytes.len() - header_end;
    if available < payload_len {
        return Err(GeodataError::TruncatedPayload { offset: bytes.len(), expected: payload_len, found: available });
    }
    if available > payload_len {
        return Err(GeodataError::TrailingBytes { offset: header_end + payload_len });
    }
    let plane = plane.unwrap();
    let mut bands = Vec::with_capacity(header.bands.len());
    for (bi, name) in header.bands.into_iter().enumerate() {
        let start = header_end + bi * plane * 4;
        let values: Vec<f32> = bytes[start..start + plane * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GeodataError::NonFiniteValue { offset: start + i * 4 });
        }
        bands.push(Band { name, values });
    }
    BandedRaster::new(header.width, header.height, bands, GeoTransform(header.geotransform))
        .map_err(|e| GeodataError::HeaderInvalid { offset: header_start, reason: e.to_string() })
}

pub fn write_raster(raster: &BandedRaster, path: impl AsRef<Path>) -> Result<(), GeodataError> {
    let bytes = encode_raster(raster)?;
    fs::write(path.as_ref(), bytes).map_err(|e| GeodataError::io(path.as_ref(), e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<BandedRaster, GeodataError> {
    let bytes = fs::read(path.as_ref()).map_err(|e| GeodataError::io(path.as_ref(), e))?;
    decode_raster(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_band(w: usize, h: usize, values: Vec<f32>) -> BandedRaster {
        BandedRaster::new(w, h, vec![Band { name: "b".into(), values }], GeoTransform::IDENTITY).unwrap()
    }

    #[test]
    fn payload_is_band_sequential_row_major() {
        let mut bytes = Vec::new();
        let header = br#"{"width":2,"height":2,"bands":["x"],"dtype":"f32le","geotransform":[0,1,0,0,0,1]}"#;
        bytes.extend_from_slice(RASTER_MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let r = decode_raster(&bytes).unwrap();
        let grid = r.band_values("x").unwrap();
        assert_eq!(&grid[0..2], &[1.0, 2.0]);
        assert_eq!(&grid[2..4], &[3.0, 4.0]);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let r = single_band(1, 1, vec![0.0]);
        let mut bytes = encode_raster(&r).unwrap();
        bytes[4] = b'0';
        assert!(matches!(decode_raster(&bytes), Err(GeodataError::MagicMismatch { offset: 4 })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let r = single_band(2, 2, vec![1.0; 4]);
        let bytes = encode_raster(&r).unwrap();
        let err = decode_raster(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, GeodataError::TruncatedPayload { expected: 16, found: 13, .. }), "{err}");
    }

    #[test]
    fn garbage_header_is_rejected() {
        let mut bytes = RASTER_MAGIC.to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(b"{]x");
        assert!(matches!(decode_raster(&bytes), Err(GeodataError::HeaderInvalid { offset: 10, .. })));
        let mut huge = RASTER_MAGIC.to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_raster(&huge), Err(GeodataError::HeaderInvalid { .. })));
    }

    #[test]
    fn nan_payload_is_rejected() {
        let mut bytes = encode_raster(&single_band(1, 2, vec![0.0, 1.0])).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_raster(&bytes), Err(GeodataError::NonFiniteValue { .. })));
    }

    #[test]
    fn empty_band_list_is_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.grd");
        let r = BandedRaster::new(4, 4, vec![], GeoTransform::IDENTITY).unwrap();
        assert!(matches!(write_raster(&r, &path), Err(GeodataError::HeaderInvalid { .. })));
        assert!(!path.exists());
    }

    #[test]
    fn thirteen_band_payload_length() {
        let bands = (0..13).map(|i| Band { name: format!("b{i}"), values: vec![i as f32; 64 * 64] }).collect();
        let r = BandedRaster::new(64, 64, bands, GeoTransform::IDENTITY).unwrap();
        let bytes = encode_raster(&r).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 10 - header_len, 13 * 64 * 64 * 4);
    }

    #[test]
    fn writes_are_deterministic_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let r = BandedRaster::new(
            3,
            2,
            vec![
                Band { name: "a".into(), values: vec![0.1, -2.5, 3.0, 1e-30, 7.0, 8.0] },
                Band { name: "b".into(), values: vec![1.0; 6] },
            ],
            GeoTransform([85.1, 0.00027, 1e-9, 28.3, 0.0, -0.00027]),
        )
        .unwrap();
        let (p1, p2) = (dir.path().join("1.grd"), dir.path().join("2.grd"));
        write_raster(&r, &p1).unwrap();
        write_raster(&r, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(read_raster(&p1).unwrap(), r);
    }

    #[test]
    fn geotransform_inverse() {
        let gt = GeoTransform([85.0, 0.5, 0.1, 28.0, -0.2, -0.5]);
        let (lon, lat) = gt.apply(3.25, 7.5);
        let (c, r) = gt.invert(lon, lat).unwrap();
        assert!((c - 3.25).abs() < 1e-9 && (r - 7.5).abs() < 1e-9);
        assert!(GeoTransform([0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).invert(0.0, 0.0).is_none());
    }

    fn raster_strategy() -> impl Strategy<Value = BandedRaster> {
        (1usize..6, 1usize..6, 1usize..4, proptest::array::uniform6(-1e3f64..1e3)).prop_flat_map(|(w, h, nb, gt)| {
            proptest::collection::vec(
                proptest::collection::vec(
                    proptest::num::f32::NORMAL | proptest::num::f32::ZERO | proptest::num::f32::SUBNORMAL,
                    w * h,
                ),
                nb,
            )
            .prop_map(move |grids| {
                let bands = grids
                    .into_iter()
                    .enumerate()
                    .map(|(i, values)| Band { name: format!("band_{i}"), values })
                    .collect();
                BandedRaster::new(w, h, bands, GeoTransform(gt)).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(r in raster_strategy()) {
            let decoded = decode_raster(&encode_raster(&r).unwrap()).unwrap();
            prop_assert_eq!(decoded.geotransform().0.map(f64::to_bits), r.geotransform().0.map(f64::to_bits));
            for (a, b) in decoded.bands().iter().zip(r.bands()) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }
}
