#![no_main]

use libfuzzer_sys::fuzz_target;
use mpgen_io::Raster;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = Raster::from_bytes(data) {
        assert_eq!(r.to_bytes(), data);
    }
});
