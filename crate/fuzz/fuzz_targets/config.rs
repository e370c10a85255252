#![no_main]

use libfuzzer_sys::fuzz_target;
use mpgen_core::model::Stage2Config;
use mpgen_core::tokenizer::TokenizerConfig;
use mpgen_core::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = serde_json::from_slice::<TrainConfig>(data) {
        let _ = c.validate();
    }
    if let Ok(c) = serde_json::from_slice::<TokenizerConfig>(data) {
        let _ = c.validate();
    }
    if let Ok(c) = serde_json::from_slice::<Stage2Config>(data) {
        let _ = c.validate();
    }
});
