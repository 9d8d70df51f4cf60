#![no_main]

use glacier_core::geodata::PolygonLayer;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(layer) = PolygonLayer::from_geojson_str(text) {
        let again = PolygonLayer::from_geojson_str(&layer.to_geojson_string()).expect("written layer parses");
        assert_eq!(again, layer);
    }
});
