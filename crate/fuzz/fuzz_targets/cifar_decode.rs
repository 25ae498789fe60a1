#![no_main]

use hyperdiv::data::{decode_cifar, CifarVariant, Split};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for variant in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
        if let Ok(set) = decode_cifar(data, variant, Split::Train) {
            assert_eq!(set.len() * variant.record_len(), data.len());
            assert!(set.labels().iter().all(|&l| l < variant.num_classes()));
        }
    }
});
