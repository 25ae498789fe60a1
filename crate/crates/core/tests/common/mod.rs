//! Independent reference implementations used as test oracles. Nothing in
//! here calls into the code paths it checks.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Triple-loop `[m×k]·[k×n]`.
pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Direct cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    w: &[f64],
    (b, c, h, wd): (usize, usize, usize, usize),
    (f, k): (usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * f * ho * wo];
    for bi in 0..b {
        for fi in 0..f {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ih = (oh * stride + ki) as isize - pad as isize;
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ci) * h + ih as usize) * wd + iw as usize]
                                    * w[((fi * c + ci) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((bi * f + fi) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

/// Hyperspherical energy by a plain double loop over ordered pairs.
pub fn energy_oracle(rows: &[Vec<f64>], s: f64) -> f64 {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut total = 0.0;
    for i in 0..unit.len() {
        for j in 0..unit.len() {
            if i == j {
                continue;
            }
            let d = unit[i]
                .iter()
                .zip(&unit[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            total += if s == 0.0 { (1.0 / d).ln() } else { d.powf(-s) };
        }
    }
    total
}

/// NT-Xent evaluated straight from its definition for pair layout (2m, 2m+1).
pub fn nt_xent_oracle(rows: &[Vec<f64>], tau: f64) -> f64 {
    let norm = |r: &Vec<f64>| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
    let n2 = rows.len();
    let mut total = 0.0;
    for i in 0..n2 {
        let j = i ^ 1;
        let num = (cos(&rows[i], &rows[j]) / tau).exp();
        let den: f64 = (0..n2)
            .filter(|&k| k != i)
            .map(|k| (cos(&rows[i], &rows[k]) / tau).exp())
            .sum();
        total += -(num / den).ln();
    }
    total / n2 as f64
}
