#![no_main]

use hyperdiv::tensor::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // anything that decodes must encode back to the same bytes
    if let Ok(entries) = decode_checkpoint(data) {
        let again = encode_checkpoint(entries.iter().map(|e| (e.name.as_str(), &e.tensor)));
        assert_eq!(again, data);
    }
});
