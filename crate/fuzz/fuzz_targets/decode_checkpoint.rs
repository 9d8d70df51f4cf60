#![no_main]

use glacier_core::unet::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((config, params)) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&config, &params).expect("decoded checkpoint re-encodes");
        assert_eq!(decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes"), (config, params));
    }
});
