#![no_main]

use glacier_core::geodata::{decode_raster, encode_raster};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(raster) = decode_raster(data) {
        let bytes = encode_raster(&raster).expect("decoded raster re-encodes");
        assert_eq!(decode_raster(&bytes).expect("re-encoded raster decodes"), raster);
    }
});
