//! CIFAR-10/100 binary format.
//!
//! CIFAR-10 record: 1 label byte + 3072 pixel bytes.
//! CIFAR-100 record: coarse label byte + fine label byte + 3072 pixel bytes.
//! Pixels are stored as the full R plane, then G, then B, each 32×32 row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{DatasetSplits, LabeledImageSet, Split};

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

pub fn decode_cifar(bytes: &[u8], variant: CifarVariant, split: Split) -> Result<LabeledImageSet> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::Truncated("empty CIFAR file".into()));
    }
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::BadLength(format!(
            "{} bytes is not a multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let classes = variant.num_classes();
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for record in bytes.chunks_exact(rec) {
        // CIFAR-100 keeps the fine label in the second byte
        let (label, px) = match variant {
            CifarVariant::Cifar10 => (record[0], &record[1..]),
            CifarVariant::Cifar100 => (record[1], &record[2..]),
        };
        if label as usize >= classes {
            return Err(Error::LabelOutOfRange {
                label: label as usize,
                classes,
            });
        }
        labels.push(label as usize);
        pixels.extend(px.iter().map(|&b| f64::from(b) / 255.0));
    }
    LabeledImageSet::new((3, 32, 32), pixels, labels, classes, split)
}

pub fn load_cifar_binary(path: &Path, variant: CifarVariant, split: Split) -> Result<LabeledImageSet> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_cifar(&bytes, variant, split).map_err(|e| match e {
        Error::Truncated(m) => Error::Truncated(format!("{}: {m}", path.display())),
        Error::BadLength(m) => Error::BadLength(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads the standard file names of an extracted CIFAR binary archive:
/// `data_batch_{1..5}.bin` / `test_batch.bin` for CIFAR-10 and
/// `train.bin` / `test.bin` for CIFAR-100.
pub fn load_cifar_dir(dir: &Path, variant: CifarVariant) -> Result<DatasetSplits> {
    let (train_files, test_file): (Vec<String>, &str) = match variant {
        CifarVariant::Cifar10 => (
            (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            "test_batch.bin",
        ),
        CifarVariant::Cifar100 => (vec!["train.bin".into()], "test.bin"),
    };
    let mut bytes = Vec::new();
    for f in &train_files {
        let p = dir.join(f);
        bytes.extend(fs::read(&p).map_err(|e| Error::file(&p, e))?);
    }
    let train = decode_cifar(&bytes, variant, Split::Train)?;
    let test = load_cifar_binary(&dir.join(test_file), variant, Split::Test)?;
    Ok(DatasetSplits { train, test })
}
