#![no_main]

use libfuzzer_sys::fuzz_target;
use mpgen_io::CodebookBlob;

fuzz_target!(|data: &[u8]| {
    if let Ok(b) = CodebookBlob::from_bytes(data) {
        assert_eq!(b.to_bytes(), data);
        assert_eq!(b.data.len(), b.k * b.n_z);
    }
});
