//! Glacier outlines and their GeoJSON encoding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::GeodataError;

/// The two positive classes. Background is the absence of any polygon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlacierClass {
    CleanIce,
    Debris,
}

impl GlacierClass {
    pub const fn code(self) -> u8 {
        match self {
            GlacierClass::CleanIce => 1,
            GlacierClass::Debris => 2,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            GlacierClass::CleanIce => "clean_ice",
            GlacierClass::Debris => "debris",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clean_ice" => Some(GlacierClass::CleanIce),
            "debris" => Some(GlacierClass::Debris),
            _ => None,
        }
    }
}

/// Closed ring of `(lon, lat)` vertices; the first vertex is repeated last.
#[derive(Debug, Clone, PartialEq)]
pub struct Ring(Vec<(f64, f64)>);

impl Ring {
    pub fn new(vertices: Vec<(f64, f64)>) -> Result<Self, GeodataError> {
        if vertices.len() < 4 {
            return Err(GeodataError::PolygonInvalid(format!("ring has {} vertices, need at least 4", vertices.len())));
        }
        if vertices.first() != vertices.last() {
            return Err(GeodataError::PolygonInvalid("ring is not closed".into()));
        }
        if vertices.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(GeodataError::PolygonInvalid("ring has non-finite coordinate".into()));
        }
        Ok(Ring(vertices))
    }

    /// Builds a ring from an open vertex list by repeating the first vertex.
    pub fn closed(mut open: Vec<(f64, f64)>) -> Result<Self, GeodataError> {
        if let Some(&first) = open.first() {
            open.push(first);
        }
        Ring::new(open)
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.0
    }

    /// `(min_lon, min_lat, max_lon, max_lat)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        self.0
            .iter()
            .fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |(a, b, c, d), &(x, y)| {
                (a.min(x), b.min(y), c.max(x), d.max(y))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolygonFeature {
    pub rings: Vec<Ring>,
    pub label: GlacierClass,
}

impl PolygonFeature {
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        self.rings
            .iter()
            .map(Ring::bbox)
            .fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |(a, b, c, d), (e, f, g, h)| {
                (a.min(e), b.min(f), c.max(g), d.max(h))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolygonLayer {
    pub features: Vec<PolygonFeature>,
}

impl PolygonLayer {
    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .features
            .iter()
            .map(|f| {
                let rings: Vec<Vec<[f64; 2]>> =
                    f.rings.iter().map(|r| r.vertices().iter().map(|&(x, y)| [x, y]).collect()).collect();
                json!({
                    "type": "Feature",
                    "properties": { "label": f.label.as_str() },
                    "geometry": { "type": "Polygon", "coordinates": rings },
                })
            })
            .collect();
        json!({ "type": "FeatureCollection", "features": features })
    }

    pub fn to_geojson_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_geojson()).expect("geojson serializes")
    }

    /// Parses a FeatureCollection of Polygon features labeled
    /// `clean_ice` or `debris`.
    pub fn from_geojson_str(text: &str) -> Result<Self, GeodataError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| GeodataError::PolygonInvalid(e.to_string()))?;
        Self::from_geojson(&doc)
    }

    pub fn from_geojson(doc: &Value) -> Result<Self, GeodataError> {
        let invalid = |msg: String| GeodataError::PolygonInvalid(msg);
        if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
            return Err(invalid("expected a FeatureCollection".into()));
        }
        let features =
            doc.get("features").and_then(Value::as_array).ok_or_else(|| invalid("missing features array".into()))?;
        let mut out = Vec::with_capacity(features.len());
        for (i, feature) in features.iter().enumerate() {
            let label = feature
                .pointer("/properties/label")
                .and_then(Value::as_str)
                .and_then(GlacierClass::parse)
                .ok_or_else(|| invalid(format!("feature {i}: label must be \"clean_ice\" or \"debris\"")))?;
            let geometry = feature.get("geometry").ok_or_else(|| invalid(format!("feature {i}: missing geometry")))?;
            if geometry.get("type").and_then(Value::as_str) != Some("Polygon") {
                return Err(invalid(format!("feature {i}: geometry type must be Polygon")));
            }
            let coords = geometry
                .get("coordinates")
                .and_then(Value::as_array)
                .ok_or_else(|| invalid(format!("feature {i}: missing coordinates")))?;
            if coords.is_empty() {
                return Err(invalid(format!("feature {i}: polygon has no rings")));
            }
            let mut rings = Vec::with_capacity(coords.len());
            for ring in coords {
                let points = ring
                    .as_array()
                    .ok_or_else(|| invalid(format!("feature {i}: ring is not an array")))?
                    .iter()
                    .map(|p| match p.as_array().map(Vec::as_slice) {
                        Some([x, y, ..]) => match (x.as_f64(), y.as_f64()) {
                            (Some(x), Some(y)) => Ok((x, y)),
                            _ => Err(invalid(format!("feature {i}: non-numeric coordinate"))),
                        },
                        _ => Err(invalid(format!("feature {i}: position needs two numbers"))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                rings.push(Ring::new(points).map_err(|e| invalid(format!("feature {i}: {e}")))?);
            }
            out.push(PolygonFeature { rings, label });
        }
        Ok(PolygonLayer { features: out })
    }
}

pub fn write_polygons(layer: &PolygonLayer, path: impl AsRef<Path>) -> Result<(), GeodataError> {
    fs::write(path.as_ref(), layer.to_geojson_string()).map_err(|e| GeodataError::io(path.as_ref(), e))
}

pub fn read_polygons(path: impl AsRef<Path>) -> Result<PolygonLayer, GeodataError> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| GeodataError::io(path.as_ref(), e))?;
    PolygonLayer::from_geojson_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, s: f64) -> Ring {
        Ring::closed(vec![(x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s)]).unwrap()
    }

    #[test]
    fn ring_must_be_closed_with_four_vertices() {
        assert!(Ring::new(vec![(0.0, 0.0), (1.0, 0.0), (0.0, 0.0)]).is_err());
        assert!(Ring::new(vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]).is_err());
        assert!(Ring::new(vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 0.0)]).is_ok());
    }

    #[test]
    fn geojson_roundtrip() {
        let layer = PolygonLayer {
            features: vec![
                PolygonFeature {
                    rings: vec![square(85.0, 28.0, 0.1), square(85.02, 28.02, 0.01)],
                    label: GlacierClass::CleanIce,
                },
                PolygonFeature { rings: vec![square(85.3, 28.1, 0.05)], label: GlacierClass::Debris },
            ],
        };
        let back = PolygonLayer::from_geojson_str(&layer.to_geojson_string()).unwrap();
        assert_eq!(back, layer);
    }

    #[test]
    fn rejects_unknown_label_and_geometry() {
        let bad_label = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{"label":"rock"},
            "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,0]]]}}]}"#;
        assert!(PolygonLayer::from_geojson_str(bad_label).is_err());
        let bad_geom = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{"label":"debris"},
            "geometry":{"type":"Point","coordinates":[0,0]}}]}"#;
        assert!(PolygonLayer::from_geojson_str(bad_geom).is_err());
        assert!(PolygonLayer::from_geojson_str("[]").is_err());
    }
}
