use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::{DatasetSplits, LabeledImageSet, Split};

const CHANNELS: usize = 3;
const NOISE_STD: f64 = 0.05;
const ORIENT_JITTER: f64 = 0.15;
const CLASS_TINT: f64 = 0.04;
const IMAGE_TINT: f64 = 0.15;

/// Procedural oriented-grating textures.
///
/// Class `k` fixes a grating orientation in `[0, π/2)` (so that a horizontal
/// flip never maps one class onto another), a spatial frequency and a weak
/// colour offset. Every image draws its own base colour, a small
/// orientation/frequency perturbation, a random phase and amplitude, and
/// pixel noise. The first 80% of each class goes to the train split, the
/// rest to the test split.
pub fn gen_synthetic(num_classes: usize, n_per_class: usize, side: usize, seed: u64) -> Result<DatasetSplits> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs at least 2 classes, got {num_classes}"
        )));
    }
    if side == 0 {
        return Err(Error::InvalidArgument("image side must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let n_train = n_per_class * 4 / 5;
    let per = CHANNELS * side * side;

    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for k in 0..num_classes {
        let theta_k = (k as f64 + 0.5) * PI / (2.0 * num_classes as f64);
        let freq_k = 2.0 + 1.5 * (k % 3) as f64;
        let colour: Vec<f64> = (0..CHANNELS)
            .map(|c| CLASS_TINT * (2.0 * PI * (k as f64 / num_classes as f64 + c as f64 / 3.0)).cos())
            .collect();
        for i in 0..n_per_class {
            let theta = theta_k + ORIENT_JITTER * rng.random_range(-1.0..1.0);
            let freq = freq_k * (1.0 + 0.1 * rng.random_range(-1.0..1.0));
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.2..0.35);
            let base: Vec<f64> = colour
                .iter()
                .map(|t| 0.5 + t + rng.random_range(-IMAGE_TINT..IMAGE_TINT))
                .collect();
            let (dx, dy) = (theta.cos(), theta.sin());
            let mut img = Vec::with_capacity(per);
            for c in 0..CHANNELS {
                let weight = 1.0 - 0.2 * c as f64;
                for y in 0..side {
                    for x in 0..side {
                        let u = (x as f64 * dx + y as f64 * dy) / side as f64;
                        let wave = (2.0 * PI * freq * u + phase).sin();
                        let v = base[c] + amp * weight * wave + noise.sample(&mut rng);
                        img.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            let dst = if i < n_train { &mut train } else { &mut test };
            dst.0.extend(img);
            dst.1.push(k);
        }
    }
    let shape = (CHANNELS, side, side);
    Ok(DatasetSplits {
        train: LabeledImageSet::new(shape, train.0, train.1, num_classes, Split::Train)?,
        test: LabeledImageSet::new(shape, test.0, test.1, num_classes, Split::Test)?,
    })
}
