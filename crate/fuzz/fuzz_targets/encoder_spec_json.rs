#![no_main]

use hyperdiv::encoder::{EncoderSpec, Tap};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = EncoderSpec::from_json(text) {
        for tap in Tap::ALL {
            assert!(spec.tap_dim(tap) > 0);
        }
    }
});
