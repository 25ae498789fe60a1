//! Self-supervised objectives and the training loop.

mod kmeans;
mod losses;

pub use kmeans::{kmeans, KMeans};
pub use losses::{nt_xent, rotnet_loss};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_pair, augment_view, rotate4, stack_images, AugmentConfig, Image, LabeledImageSet};
use crate::encoder::{Encoder, Mode, Tap};
use crate::error::{Error, Result};
use crate::evaluation::extract_features;
use crate::tensor::{l2_normalize_rows, Graph, ParamStore, Sgd, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "simclr")]
    SimClr,
    #[serde(rename = "rotnet")]
    RotNet,
    #[serde(rename = "deepcluster", alias = "deepcluster-lite")]
    DeepCluster,
    #[serde(rename = "supervised")]
    Supervised,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::SimClr,
        Algorithm::RotNet,
        Algorithm::DeepCluster,
        Algorithm::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SimClr => "simclr",
            Algorithm::RotNet => "rotnet",
            Algorithm::DeepCluster => "deepcluster-lite",
            Algorithm::Supervised => "supervised",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simclr" => Ok(Algorithm::SimClr),
            "rotnet" => Ok(Algorithm::RotNet),
            "deepcluster" | "deepcluster-lite" => Ok(Algorithm::DeepCluster),
            "supervised" => Ok(Algorithm::Supervised),
            _ => Err(Error::InvalidArgument(format!(
                "unknown algorithm {s:?} (simclr|rotnet|deepcluster|supervised)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub algorithm: Algorithm,
    /// NT-Xent temperature.
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub kmeans_k: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            algorithm: Algorithm::SimClr,
            temperature: 0.5,
            batch_size: 8,
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            kmeans_k: 10,
            kmeans_iters: 20,
            seed: 0,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("ssl.temperature must be positive, got {}", self.temperature));
        }
        if self.batch_size < 2 {
            return bad(format!("ssl.batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return bad("ssl.lr, ssl.momentum and ssl.weight_decay must be ≥ 0".into());
        }
        if self.algorithm == Algorithm::DeepCluster && self.kmeans_k < 2 {
            return bad(format!("ssl.kmeans_k must be ≥ 2, got {}", self.kmeans_k));
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based epoch index.
    pub epoch: usize,
    pub loss: f64,
    pub wall_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Called after every completed epoch.
pub trait TrainObserver {
    fn on_epoch_end(&mut self, stats: &EpochStats, encoder: &Encoder) -> Result<Control>;
}

impl<F> TrainObserver for F
where
    F: FnMut(&EpochStats, &Encoder) -> Result<Control>,
{
    fn on_epoch_end(&mut self, stats: &EpochStats, encoder: &Encoder) -> Result<Control> {
        self(stats, encoder)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub stats: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
    /// True when an observer ended training before `epochs`.
    pub stopped_early: bool,
}

/// Independent stream per `(seed, epoch, item)`.
fn stream(seed: u64, epoch: usize, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) ^ item);
    rng
}

const SHUFFLE_STREAM: u64 = u64::MAX;
const HEAD_STREAM: u64 = u64::MAX - 1;
const KMEANS_STREAM: u64 = u64::MAX - 2;

/// Linear classifier trained jointly with the encoder for the
/// classification-style objectives.
struct Head {
    params: ParamStore,
    sgd: Sgd,
}

impl Head {
    fn new(fan_in: usize, classes: usize, cfg: &SslConfig, rng: &mut ChaCha8Rng) -> Head {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * classes)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let mut params = ParamStore::new();
        params.add("head.weight", Tensor::new(vec![fan_in, classes], w).expect("shape"));
        params.add("head.bias", Tensor::zeros(&[classes]));
        Head {
            params,
            sgd: Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay),
        }
    }
}

/// Trains `encoder` in place. Checkpoints go to `checkpoint_dir` as
/// `epoch_NNNN.hdv` when `checkpoint_every > 0`.
pub fn train(
    encoder: &mut Encoder,
    data: &LabeledImageSet,
    cfg: &SslConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_observed(
        encoder,
        data,
        cfg,
        checkpoint_dir,
        &mut |_: &EpochStats, _: &Encoder| Ok(Control::Continue),
    )
}

pub fn train_observed(
    encoder: &mut Encoder,
    data: &LabeledImageSet,
    cfg: &SslConfig,
    checkpoint_dir: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::BatchTooSmall {
            got: data.len(),
            need: 2,
        });
    }
    let mut outcome = TrainOutcome::default();
    if cfg.epochs == 0 {
        return Ok(outcome);
    }
    let embed = encoder.spec().embed_dim;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut head = match cfg.algorithm {
        Algorithm::SimClr | Algorithm::DeepCluster => None,
        Algorithm::RotNet => Some(Head::new(embed, 4, cfg, &mut stream(cfg.seed, 0, HEAD_STREAM))),
        Algorithm::Supervised => Some(Head::new(
            embed,
            data.num_classes(),
            cfg,
            &mut stream(cfg.seed, 0, HEAD_STREAM),
        )),
    };

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut targets: Vec<usize> = data.labels().to_vec();
        if cfg.algorithm == Algorithm::DeepCluster {
            let mut feats = extract_features(encoder, data, Tap::Head)?.features;
            let (unit, _) = l2_normalize_rows(feats.data(), data.len(), embed, 1e-12);
            feats.data_mut().copy_from_slice(&unit);
            let k = cfg.kmeans_k.min(data.len());
            let seed = stream(cfg.seed, epoch, KMEANS_STREAM).random();
            targets = kmeans(&feats, k, cfg.kmeans_iters, seed)?.assignments;
            head = Some(Head::new(embed, k, cfg, &mut stream(cfg.seed, epoch, HEAD_STREAM)));
        }

        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(cfg.seed, epoch, SHUFFLE_STREAM));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        // a trailing single image cannot form a batch-norm or contrastive batch
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let loss = step(encoder, head.as_mut(), &mut sgd, data, &targets, idx, cfg, epoch)?;
            loss_sum += loss;
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            wall_s: start.elapsed().as_secs_f64(),
        };
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite("epoch loss"));
        }
        log::debug!("{} epoch {epoch}: loss {:.6}", cfg.algorithm, stats.loss);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("epoch_{epoch:04}.hdv"));
                encoder.save(&path)?;
                outcome.checkpoints.push(path);
            }
        }
        let control = observer.on_epoch_end(&stats, encoder)?;
        outcome.stats.push(stats);
        if control == Control::Stop {
            outcome.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn step(
    encoder: &mut Encoder,
    head: Option<&mut Head>,
    sgd: &mut Sgd,
    data: &LabeledImageSet,
    targets: &[usize],
    idx: &[usize],
    cfg: &SslConfig,
    epoch: usize,
) -> Result<f64> {
    let mut images: Vec<Image> = Vec::with_capacity(2 * idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut rng = stream(cfg.seed, epoch, i as u64);
        let img = data.image(i);
        match cfg.algorithm {
            Algorithm::SimClr => {
                let pair = augment_pair(&img, i, &cfg.augment, &mut rng)?;
                images.push(pair.view_a);
                images.push(pair.view_b);
            }
            Algorithm::RotNet => {
                let k = rng.random_range(0..4);
                images.push(rotate4(&img, k)?);
                labels.push(k);
            }
            Algorithm::DeepCluster | Algorithm::Supervised => {
                images.push(augment_view(&img, &cfg.augment, &mut rng)?);
                labels.push(targets[i]);
            }
        }
    }
    let batch = stack_images(&images)?;

    let mut g = Graph::new();
    let vars = encoder.params().bind(&mut g);
    let head_vars: Vec<Var> = head.as_ref().map_or_else(Vec::new, |h| h.params.bind(&mut g));
    let x = g.constant(batch);
    let fw = encoder.forward_graph(&mut g, &vars, x, Mode::Train)?;
    let loss = match cfg.algorithm {
        Algorithm::SimClr => nt_xent(&mut g, fw.z, cfg.temperature)?,
        _ => {
            let y = g.matmul(fw.h(), head_vars[0])?;
            let logits = g.add_bias(y, head_vars[1])?;
            if cfg.algorithm == Algorithm::RotNet {
                rotnet_loss(&mut g, logits, &labels)?
            } else {
                let logp = g.log_softmax(logits)?;
                g.cross_entropy(logp, &labels)?
            }
        }
    };
    let value = g.value(loss).data()[0];
    g.backward(loss)?;
    let params = encoder.params_mut();
    params.zero_grad();
    params.absorb_grads(&g, &vars)?;
    sgd.step(params)?;
    if let Some(h) = head {
        h.params.zero_grad();
        h.params.absorb_grads(&g, &head_vars)?;
        h.sgd.step(&mut h.params)?;
    }
    Ok(value)
}
