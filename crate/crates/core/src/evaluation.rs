//! Frozen-trunk linear probe and top-1 error.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::encoder::{Encoder, FeatureBatch, Tap, TapSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Sgd, Tensor};

const EXTRACT_CHUNK: usize = 64;
const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Features the probe reads; headline numbers use `head`.
    pub tap: Tap,
    /// Standardize each feature with train-set mean and deviation.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            seed: 0,
            tap: Tap::Head,
            standardize: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("probe.batch_size must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "probe.lr, probe.momentum and probe.weight_decay must be ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// `1 − top-1 accuracy` on the test set.
    pub test_error: f64,
    pub train_error: f64,
    pub epochs: usize,
    pub num_classes: usize,
}

impl ProbeResult {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.test_error
    }
}

/// A linear classifier over (optionally standardized) features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub tap: Tap,
    /// `[D×K]`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub epochs: usize,
    pub train_error: f64,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let d = self.mean.len();
        if features.rank() != 2 || features.shape()[1] != d {
            return Err(Error::Shape(format!(
                "probe expects N×{d} features, got {:?}",
                features.shape()
            )));
        }
        let k = self.num_classes();
        let w = self.weight.data();
        Ok(features
            .data()
            .chunks(d)
            .map(|row| {
                let mut logits = self.bias.clone();
                for (j, &x) in row.iter().enumerate() {
                    let x = (x - self.mean[j]) * self.scale[j];
                    logits
                        .iter_mut()
                        .zip(&w[j * k..(j + 1) * k])
                        .for_each(|(l, w)| *l += x * w);
                }
                argmax(&logits)
            })
            .collect())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of predictions that differ from the labels.
pub fn error_rate(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("error rate over an empty set".into()));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Eval-mode pooled features of every image at every tap.
pub fn extract_taps(encoder: &Encoder, images: &LabeledImageSet) -> Result<TapSet> {
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); Tap::ALL.len()];
    let indices: Vec<usize> = (0..images.len()).collect();
    for part in indices.chunks(EXTRACT_CHUNK) {
        let (taps, _) = encoder.forward_eval(&images.batch(part))?;
        for (dst, b) in rows.iter_mut().zip(taps.iter()) {
            dst.extend_from_slice(b.features.data());
        }
    }
    let batches = Tap::ALL
        .iter()
        .zip(rows)
        .map(|(&tap, r)| FeatureBatch::new(tap, Tensor::new(vec![images.len(), encoder.spec().tap_dim(tap)], r)?))
        .collect::<Result<Vec<_>>>()?;
    TapSet::new(batches)
}

/// Eval-mode pooled features of every image at `tap`.
pub fn extract_features(encoder: &Encoder, images: &LabeledImageSet, tap: Tap) -> Result<FeatureBatch> {
    let d = encoder.spec().tap_dim(tap);
    let mut rows = Vec::with_capacity(images.len() * d);
    let indices: Vec<usize> = (0..images.len()).collect();
    for part in indices.chunks(EXTRACT_CHUNK) {
        let (taps, _) = encoder.forward_eval(&images.batch(part))?;
        rows.extend_from_slice(taps.get(tap).features.data());
    }
    FeatureBatch::new(tap, Tensor::new(vec![images.len(), d], rows)?)
}

/// Softmax regression on fixed features with mini-batch SGD.
pub fn fit_probe_on_features(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    tap: Tap,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    cfg.validate()?;
    if features.rank() != 2 || features.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "probe needs N×D features with N = {} labels, got {:?}",
            labels.len(),
            features.shape()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: num_classes,
        });
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let (mean, scale) = if cfg.standardize {
        let mut mean = vec![0.0; d];
        for row in features.data().chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n as f64);
        }
        let mut var = vec![0.0; d];
        for row in features.data().chunks(d) {
            var.iter_mut()
                .zip(row.iter().zip(&mean))
                .for_each(|(v, (x, m))| *v += (x - m) * (x - m) / n as f64);
        }
        let scale = var
            .iter()
            .map(|v| if v.sqrt() < STD_FLOOR { 1.0 } else { 1.0 / v.sqrt() })
            .collect();
        (mean, scale)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let x: Vec<f64> = features
        .data()
        .chunks(d)
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean[j]) * scale[j])
                .collect::<Vec<_>>()
        })
        .collect();

    let mut params = ParamStore::new();
    params.add("probe.weight", Tensor::zeros(&[d, num_classes]));
    params.add("probe.bias", Tensor::zeros(&[num_classes]));
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let mut xb = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                xb.extend_from_slice(&x[i * d..(i + 1) * d]);
            }
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let xv = g.constant(Tensor::new(vec![idx.len(), d], xb)?);
            let logits = g.matmul(xv, vars[0])?;
            let logits = g.add_bias(logits, vars[1])?;
            let logp = g.log_softmax(logits)?;
            let loss = g.cross_entropy(logp, &yb)?;
            g.backward(loss)?;
            params.zero_grad();
            params.absorb_grads(&g, &vars)?;
            sgd.step(&mut params)?;
        }
    }
    let mut probe = LinearProbe {
        tap,
        weight: params.get(0).tensor.clone().with_requires_grad(false),
        bias: params.get(1).tensor.data().to_vec(),
        mean,
        scale,
        epochs: cfg.epochs,
        train_error: 0.0,
    };
    probe.weight.clear_grad();
    probe.train_error = error_rate(&probe.predict(features)?, labels)?;
    Ok(probe)
}

/// Trains a probe on frozen trunk features of `train`. The trunk digest is
/// compared before and after.
pub fn fit_linear_probe(encoder: &Encoder, train: &LabeledImageSet, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let before = encoder.digest();
    let feats = extract_features(encoder, train, cfg.tap)?;
    let probe = fit_probe_on_features(&feats.features, train.labels(), train.num_classes(), cfg.tap, cfg)?;
    assert_eq!(before, encoder.digest(), "linear probe modified the trunk");
    Ok(probe)
}

pub fn top1_error(probe: &LinearProbe, encoder: &Encoder, test: &LabeledImageSet) -> Result<ProbeResult> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("top-1 error over an empty test set".into()));
    }
    if test.num_classes() != probe.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "test set has {} classes, probe has {}",
            test.num_classes(),
            probe.num_classes()
        )));
    }
    let feats = extract_features(encoder, test, probe.tap)?;
    let test_error = error_rate(&probe.predict(&feats.features)?, test.labels())?;
    Ok(ProbeResult {
        test_error,
        train_error: probe.train_error,
        epochs: probe.epochs,
        num_classes: probe.num_classes(),
    })
}

/// Fits on `train` and reports top-1 error on `test`.
pub fn evaluate_probe(
    encoder: &Encoder,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let probe = fit_linear_probe(encoder, train, cfg)?;
    top1_error(&probe, encoder, test)
}
