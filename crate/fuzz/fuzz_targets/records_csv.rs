#![no_main]

use hyperdiv::experiments::RecordSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = RecordSet::from_csv(text) {
        let csv = set.to_csv().expect("loaded records serialize");
        let back = RecordSet::from_csv(&csv).expect("serialized records parse");
        assert_eq!(back.len(), set.len());
    }
});
