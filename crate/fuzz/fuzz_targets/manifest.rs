#![no_main]

use libfuzzer_sys::fuzz_target;
use mpgen_io::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DatasetManifest::parse(text) {
        let again = DatasetManifest::parse(&m.to_json().unwrap()).unwrap();
        let ids = |m: &DatasetManifest| m.snapshots.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&m), ids(&again));
        let _ = m.condition_groups();
    }
});
