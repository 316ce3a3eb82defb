#![no_main]

use gaze_core::data::raster::decode_png;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(raster) = decode_png(data) {
        assert_eq!(raster.data.len(), 3 * raster.width * raster.height);
        assert!(raster.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
