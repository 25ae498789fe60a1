//! Hyperspherical energy of a set of vectors projected onto the unit sphere.
//!
//! For unit vectors `v̂_1..v̂_N` and `d_ij = ‖v̂_i − v̂_j‖`,
//!
//! ```text
//! E_s = Σ_{i≠j} d_ij^(−s)     s > 0
//! E_0 = Σ_{i≠j} ln(1 / d_ij)
//! ```
//!
//! summed over ordered pairs. Lower energy means more diverse vectors; the
//! reported diversity is `−E_s`.

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, Tap, TapSet};
use crate::error::{Error, Result};
use crate::tensor::{l2_normalize_rows, Tensor};

/// Lower bound applied to pairwise distances.
pub const DISTANCE_CLAMP: f64 = 1e-12;

const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub layer: String,
    pub s: f64,
    pub n: usize,
    pub d: usize,
    pub raw_energy: f64,
    /// `raw_energy / (N·(N−1))`, zero for `N = 1`.
    pub pair_mean_energy: f64,
    pub diversity: f64,
    /// Set when two projected vectors coincide (distance below the clamp).
    pub duplicate_warning: bool,
}

impl EnergyReport {
    pub const CSV_HEADER: &'static str = "layer,s,N,D,raw_energy,pair_mean_energy,diversity,duplicate_warning";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.layer,
            self.s,
            self.n,
            self.d,
            self.raw_energy,
            self.pair_mean_energy,
            self.diversity,
            self.duplicate_warning
        )
    }

    pub fn with_layer(mut self, layer: impl Into<String>) -> Self {
        self.layer = layer.into();
        self
    }
}

fn check_s(s: f64) -> Result<()> {
    if s.is_finite() && s >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "power factor s must be a finite value ≥ 0, got {s}"
        )))
    }
}

/// Energy of the rows of an `[N×D]` matrix.
///
/// The unordered pair terms are sorted before summation, so the result is
/// independent of row order bit for bit.
pub fn hyperspherical_energy(vectors: &Tensor, s: f64) -> Result<EnergyReport> {
    check_s(s)?;
    if vectors.rank() != 2 || vectors.shape()[0] == 0 {
        return Err(Error::Shape(format!(
            "energy needs an N×D matrix with N ≥ 1, got {:?}",
            vectors.shape()
        )));
    }
    if !vectors.is_finite() {
        return Err(Error::NonFinite("energy input"));
    }
    let (n, d) = (vectors.shape()[0], vectors.shape()[1]);
    let (unit, _) = l2_normalize_rows(vectors.data(), n, d, NORMALIZE_EPS);

    let mut terms = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    let mut duplicate = false;
    for i in 0..n {
        let a = &unit[i * d..(i + 1) * d];
        for j in i + 1..n {
            let b = &unit[j * d..(j + 1) * d];
            let dist = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if dist < DISTANCE_CLAMP {
                duplicate = true;
            }
            let dist = dist.max(DISTANCE_CLAMP);
            terms.push(if s == 0.0 { -dist.ln() } else { dist.powf(-s) });
        }
    }
    terms.sort_by(f64::total_cmp);
    // each unordered pair stands for (i, j) and (j, i)
    let raw = 2.0 * terms.iter().fold(0.0, |acc, t| acc + t);
    let pairs = n * (n - 1);
    Ok(EnergyReport {
        layer: String::new(),
        s,
        n,
        d,
        raw_energy: raw,
        pair_mean_energy: if pairs == 0 { 0.0 } else { raw / pairs as f64 },
        diversity: -raw,
        duplicate_warning: duplicate,
    })
}

/// One report per tap, in tap order.
pub fn layer_diversity(taps: &TapSet, s: f64) -> Result<Vec<EnergyReport>> {
    let n = taps.n();
    taps.iter()
        .map(|b| {
            if b.n() != n {
                return Err(Error::Shape(format!("tap {} has {} rows, expected {n}", b.tap, b.n())));
            }
            Ok(hyperspherical_energy(&b.features, s)?.with_layer(b.tap.name()))
        })
        .collect()
}

/// Neuron weight vectors of a parameter: one row per conv filter, or one
/// row per output unit of an `[in×out]` linear weight.
fn neuron_rows(name: &str, w: &Tensor) -> Result<Tensor> {
    match w.rank() {
        4 => {
            let f = w.shape()[0];
            Tensor::new(vec![f, w.numel() / f], w.data().to_vec())
        }
        2 => {
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let mut t = vec![0.0; w.numel()];
            for i in 0..fan_in {
                for o in 0..fan_out {
                    t[o * fan_in + i] = w.data()[i * fan_out + o];
                }
            }
            Tensor::new(vec![fan_out, fan_in], t)
        }
        _ => Err(Error::NoWeights(name.to_string())),
    }
}

/// Energy over the neuron weights of the layer a tap reads from.
pub fn weight_energy(encoder: &Encoder, tap: Tap, s: f64) -> Result<EnergyReport> {
    let rows = neuron_rows(encoder.tap_weight_name(tap), encoder.tap_weight(tap))?;
    Ok(hyperspherical_energy(&rows, s)?.with_layer(tap.name()))
}

/// Energy over the neuron weights of a parameter addressed by name, e.g.
/// `stage2.block1.conv1.weight`.
pub fn weight_energy_by_name(encoder: &Encoder, param: &str, s: f64) -> Result<EnergyReport> {
    let i = encoder
        .params()
        .find(param)
        .ok_or_else(|| Error::NoWeights(param.to_string()))?;
    if !param.ends_with(".weight") {
        return Err(Error::NoWeights(param.to_string()));
    }
    let rows = neuron_rows(param, &encoder.params().get(i).tensor)?;
    Ok(hyperspherical_energy(&rows, s)?.with_layer(param))
}
