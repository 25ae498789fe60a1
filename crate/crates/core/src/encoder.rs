//! Small residual convolutional encoder with four named taps.
//!
//! ```text
//! stem:    conv k4 s2 p1 → norm → relu                       (tap conv1)
//! stage s: blocks of relu(norm(conv3(relu(norm(conv(x))))) + shortcut(x))
//!          the first block of a stage halves the resolution while it is > 1
//!          (k4 s2 p1 conv, k2 s2 shortcut)                   (tap res2, res4)
//! head:    global average pool → linear → h                  (tap head)
//! proj:    linear → relu → linear → z
//! ```
//!
//! Stage `s` has `base_channels · width_mult · 2^s` channels.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, BatchNormMode, Graph, ParamStore, RunningStats, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Layer,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormKind::Batch),
            "layer" => Ok(NormKind::Layer),
            _ => Err(Error::InvalidArgument(format!("unknown norm kind {s:?} (batch|layer)"))),
        }
    }
}

/// Named probe points, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    Conv1,
    Res2,
    Res4,
    Head,
}

impl Tap {
    pub const ALL: [Tap; 4] = [Tap::Conv1, Tap::Res2, Tap::Res4, Tap::Head];

    pub fn name(self) -> &'static str {
        match self {
            Tap::Conv1 => "conv1",
            Tap::Res2 => "res2",
            Tap::Res4 => "res4",
            Tap::Head => "head",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Tap::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTap(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Residual blocks per stage; at least four stages.
    pub stage_blocks: Vec<usize>,
    pub width_mult: usize,
    pub base_channels: usize,
    pub norm: NormKind,
    /// Dimension of the trunk embedding `h`.
    pub embed_dim: usize,
    /// Output dimension of the projection head.
    pub proj_dim: usize,
    /// Side of the square input images.
    #[serde(default = "default_image_side")]
    pub image_side: usize,
}

fn default_image_side() -> usize {
    32
}

/// Upper bounds accepted by [`EncoderSpec::validate`].
const MAX_STAGES: usize = 16;
const MAX_BLOCKS: usize = 64;
const MAX_CHANNELS: usize = 1 << 16;
const MAX_SIDE: usize = 4096;

impl EncoderSpec {
    /// Depth presets `d1`..`d4`.
    pub fn preset_blocks(name: &str) -> Result<Vec<usize>> {
        match name {
            "d1" => Ok(vec![1, 1, 1, 1]),
            "d2" => Ok(vec![2, 2, 2, 2]),
            "d3" => Ok(vec![3, 4, 3, 2]),
            "d4" => Ok(vec![3, 4, 6, 3]),
            _ => Err(Error::InvalidArgument(format!(
                "unknown depth preset {name:?} (d1..d4)"
            ))),
        }
    }

    pub fn preset(depth: &str, width_mult: usize, norm: NormKind) -> Result<Self> {
        Ok(EncoderSpec {
            stage_blocks: Self::preset_blocks(depth)?,
            width_mult,
            base_channels: 16,
            norm,
            embed_dim: 128,
            proj_dim: 64,
            image_side: 32,
        })
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        (self.base_channels * self.width_mult) << stage
    }

    pub fn tap_dim(&self, tap: Tap) -> usize {
        match tap {
            Tap::Conv1 => self.stage_channels(0),
            Tap::Res2 => self.stage_channels(1),
            Tap::Res4 => self.stage_channels(3),
            Tap::Head => self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("invalid encoder spec: {m}")));
        if self.stage_blocks.len() < 4 {
            return bad(format!("need at least 4 stages, got {}", self.stage_blocks.len()));
        }
        if self.stage_blocks.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.width_mult < 1 {
            return bad("width_mult must be ≥ 1".into());
        }
        if self.base_channels == 0 || self.embed_dim == 0 || self.proj_dim == 0 {
            return bad("channel and embedding sizes must be positive".into());
        }
        if self.stage_blocks.len() > MAX_STAGES || self.stage_blocks.iter().any(|&b| b > MAX_BLOCKS) {
            return bad(format!("at most {MAX_STAGES} stages of {MAX_BLOCKS} blocks"));
        }
        let widest = self
            .base_channels
            .checked_mul(self.width_mult)
            .and_then(|c| c.checked_mul(1 << (self.stage_blocks.len() - 1)));
        if widest.is_none_or(|c| c > MAX_CHANNELS) || self.embed_dim > MAX_CHANNELS || self.proj_dim > MAX_CHANNELS {
            return bad(format!("channel counts are limited to {MAX_CHANNELS}"));
        }
        if self.image_side > MAX_SIDE {
            return bad(format!("image_side is limited to {MAX_SIDE}"));
        }
        self.resolutions().map(|_| ())
    }

    /// Parses and validates a JSON sidecar.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: EncoderSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Spatial side after the stem and after each stage.
    fn resolutions(&self) -> Result<(usize, Vec<usize>)> {
        let half = |side: usize| {
            if side.is_multiple_of(2) {
                Ok(side / 2)
            } else {
                Err(Error::InvalidArgument(format!(
                    "invalid encoder spec: image side {} cannot be halved down to 1",
                    self.image_side
                )))
            }
        };
        if self.image_side < 2 {
            return Err(Error::InvalidArgument(
                "invalid encoder spec: image_side must be ≥ 2".into(),
            ));
        }
        let stem = half(self.image_side)?;
        let mut side = stem;
        let mut out = Vec::with_capacity(self.stage_blocks.len());
        for _ in &self.stage_blocks {
            if side > 1 {
                side = half(side)?;
            }
            out.push(side);
        }
        Ok((stem, out))
    }
}

/// Pooled feature vectors of one tap, `[N×D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub tap: Tap,
    pub features: Tensor,
}

impl FeatureBatch {
    pub fn new(tap: Tap, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "feature batch must be N×D with N ≥ 1, got {:?}",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature batch"));
        }
        Ok(FeatureBatch { tap, features })
    }

    pub fn n(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.features.shape()[1]
    }
}

/// One [`FeatureBatch`] per tap, in [`Tap::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct TapSet {
    batches: Vec<FeatureBatch>,
}

impl TapSet {
    pub fn new(batches: Vec<FeatureBatch>) -> Result<Self> {
        let order: Vec<Tap> = batches.iter().map(|b| b.tap).collect();
        if order != Tap::ALL {
            return Err(Error::InvalidArgument(format!(
                "tap set must be conv1, res2, res4, head; got {order:?}"
            )));
        }
        let n = batches[0].n();
        if batches.iter().any(|b| b.n() != n) {
            return Err(Error::Shape("tap batches differ in N".into()));
        }
        Ok(TapSet { batches })
    }

    pub fn get(&self, tap: Tap) -> &FeatureBatch {
        &self.batches[tap.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureBatch> {
        self.batches.iter()
    }

    pub fn n(&self) -> usize {
        self.batches[0].n()
    }
}

/// Global average over the spatial dims: `[B×C×H×W]` → `[B×C]`.
pub fn pool_spatial(fmap: &Tensor) -> Result<Tensor> {
    if fmap.rank() != 4 {
        return Err(Error::Shape(format!(
            "pool_spatial expects rank 4, got {:?}",
            fmap.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(fmap.clone());
    let p = g.global_avg_pool(x)?;
    Ok(g.value(p).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    weight: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormRef {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct LinearRef {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: ConvRef,
    norm1: NormRef,
    conv2: ConvRef,
    norm2: NormRef,
    shortcut: Option<(ConvRef, NormRef)>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvRef,
    stem_norm: NormRef,
    stages: Vec<Vec<Block>>,
    head: LinearRef,
    proj1: LinearRef,
    proj2: LinearRef,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Pooled tap features in [`Tap::ALL`] order; `taps[3]` is `h`.
    pub taps: [Var; 4],
    pub z: Var,
}

impl ForwardVars {
    pub fn tap(&self, tap: Tap) -> Var {
        self.taps[tap.index()]
    }

    pub fn h(&self) -> Var {
        self.taps[3]
    }
}

enum StatsAccess<'a> {
    Train(&'a mut [RunningStats]),
    Eval(&'a [RunningStats]),
}

impl StatsAccess<'_> {
    fn mode(&mut self, i: usize) -> BatchNormMode<'_> {
        match self {
            StatsAccess::Train(s) => BatchNormMode::Train(&mut s[i]),
            StatsAccess::Eval(s) => BatchNormMode::Eval(&s[i]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    params: ParamStore,
    stats_names: Vec<String>,
    stats: Vec<RunningStats>,
    layout: Layout,
    /// Parameter name of the weight each tap reads from.
    tap_weights: [String; 4],
}

struct Builder {
    params: ParamStore,
    stats_names: Vec<String>,
    stats: Vec<RunningStats>,
    rng: ChaCha8Rng,
    norm: NormKind,
    last_conv: String,
}

impl Builder {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches count")
    }

    /// He-uniform filters `[F×C×k×k]`.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvRef {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = self.uniform(&[cout, cin, k, k], bound);
        let weight_name = format!("{name}.weight");
        self.last_conv = weight_name.clone();
        ConvRef {
            weight: self.params.add(weight_name, w),
            stride,
            pad,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormRef {
        let gamma = self.params.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        let stats = self.stats.len();
        if self.norm == NormKind::Batch {
            self.stats_names.push(name.to_string());
            self.stats.push(RunningStats::new(c));
        }
        NormRef { gamma, beta, stats }
    }

    /// `[in×out]` weight drawn from U(±1/√in), zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearRef {
        let w = self.uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        LinearRef {
            weight: self.params.add(format!("{name}.weight"), w),
            bias: self.params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }
}

/// Builds an encoder with parameters drawn deterministically from `seed`.
pub fn build_encoder(spec: &EncoderSpec, seed: u64) -> Result<Encoder> {
    spec.validate()?;
    let (_, resolutions) = spec.resolutions()?;
    let mut b = Builder {
        params: ParamStore::new(),
        stats_names: Vec::new(),
        stats: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        norm: spec.norm,
        last_conv: String::new(),
    };
    let c0 = spec.stage_channels(0);
    let stem = b.conv("stem.conv", 3, c0, 4, 2, 1);
    let stem_norm = b.norm("stem.norm", c0);
    let mut tap_weights: [String; 4] = Default::default();
    tap_weights[0] = b.last_conv.clone();

    let mut stages = Vec::with_capacity(spec.stage_blocks.len());
    let mut cin = c0;
    let mut side_in = spec.image_side / 2;
    for (s, &blocks) in spec.stage_blocks.iter().enumerate() {
        let cout = spec.stage_channels(s);
        let downsample = resolutions[s] < side_in;
        let mut stage = Vec::with_capacity(blocks);
        for k in 0..blocks {
            let p = format!("stage{}.block{}", s + 1, k + 1);
            let first = k == 0;
            let (bin, (ks, st, pd)) = if first && downsample {
                (cin, (4, 2, 1))
            } else if first {
                (cin, (3, 1, 1))
            } else {
                (cout, (3, 1, 1))
            };
            let shortcut = if first && downsample {
                let c = b.conv(&format!("{p}.shortcut.conv"), bin, cout, 2, 2, 0);
                Some((c, b.norm(&format!("{p}.shortcut.norm"), cout)))
            } else if bin != cout {
                let c = b.conv(&format!("{p}.shortcut.conv"), bin, cout, 1, 1, 0);
                Some((c, b.norm(&format!("{p}.shortcut.norm"), cout)))
            } else {
                None
            };
            let conv1 = b.conv(&format!("{p}.conv1"), bin, cout, ks, st, pd);
            let norm1 = b.norm(&format!("{p}.norm1"), cout);
            let conv2 = b.conv(&format!("{p}.conv2"), cout, cout, 3, 1, 1);
            let norm2 = b.norm(&format!("{p}.norm2"), cout);
            stage.push(Block {
                conv1,
                norm1,
                conv2,
                norm2,
                shortcut,
            });
        }
        if s == 1 {
            tap_weights[1] = b.last_conv.clone();
        }
        if s == 3 {
            tap_weights[2] = b.last_conv.clone();
        }
        stages.push(stage);
        cin = cout;
        side_in = resolutions[s];
    }
    let head = b.linear("head.fc", cin, spec.embed_dim);
    tap_weights[3] = "head.fc.weight".into();
    let proj1 = b.linear("proj.fc1", spec.embed_dim, spec.embed_dim);
    let proj2 = b.linear("proj.fc2", spec.embed_dim, spec.proj_dim);

    Ok(Encoder {
        spec: spec.clone(),
        params: b.params,
        stats_names: b.stats_names,
        stats: b.stats,
        layout: Layout {
            stem,
            stem_norm,
            stages,
            head,
            proj1,
            proj2,
        },
        tap_weights,
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Encoder {
    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Total number of trainable scalars (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    /// Digest of parameters and running statistics.
    pub fn digest(&self) -> String {
        let mut store = self.params.clone();
        for (name, t) in self.stats_tensors() {
            store.add(name, t);
        }
        store.digest()
    }

    /// Filters (or `[in×out]` weight matrix for `head`) the tap reads from.
    pub fn tap_weight(&self, tap: Tap) -> &Tensor {
        let name = &self.tap_weights[tap.index()];
        let i = self.params.find(name).expect("tap weight registered at build");
        &self.params.get(i).tensor
    }

    pub fn tap_weight_name(&self, tap: Tap) -> &str {
        &self.tap_weights[tap.index()]
    }

    /// Records a forward pass on `g`. `vars` are the handles returned by
    /// binding [`Encoder::params`] on the same graph. Train mode updates the
    /// batch-norm running statistics.
    pub fn forward_graph(&mut self, g: &mut Graph, vars: &[Var], x: Var, mode: Mode) -> Result<ForwardVars> {
        let stats = match mode {
            Mode::Train => StatsAccess::Train(&mut self.stats),
            Mode::Eval => StatsAccess::Eval(&self.stats),
        };
        run(&self.spec, &self.layout, stats, g, vars, x)
    }

    /// Eval-mode forward that leaves the encoder untouched.
    pub fn forward_graph_eval(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<ForwardVars> {
        run(&self.spec, &self.layout, StatsAccess::Eval(&self.stats), g, vars, x)
    }

    /// Pooled taps and projection output `z` (not normalized) for a batch.
    pub fn forward_with_taps(&mut self, batch: &Tensor, mode: Mode) -> Result<(TapSet, Tensor)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.tensor.clone())).collect();
        let x = g.constant(batch.clone());
        let fw = self.forward_graph(&mut g, &vars, x, mode)?;
        collect(&g, &fw)
    }

    /// [`Encoder::forward_with_taps`] in eval mode through a shared reference.
    pub fn forward_eval(&self, batch: &Tensor) -> Result<(TapSet, Tensor)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.tensor.clone())).collect();
        let x = g.constant(batch.clone());
        let fw = self.forward_graph_eval(&mut g, &vars, x)?;
        collect(&g, &fw)
    }

    fn stats_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.stats.len());
        for (name, st) in self.stats_names.iter().zip(&self.stats) {
            let c = st.mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(vec![c], st.mean.clone()).expect("1-d"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(vec![c], st.var.clone()).expect("1-d"),
            ));
        }
        out
    }

    /// Writes parameters and running statistics to `path` and the spec as
    /// JSON to `path` + `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let stats = self.stats_tensors();
        let entries = self
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.tensor))
            .chain(stats.iter().map(|(n, t)| (n.as_str(), t)));
        save_checkpoint(path, entries)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.spec)?;
        fs::write(&side, json + "\n").map_err(|e| Error::file(&side, e))
    }

    pub fn load(path: &Path) -> Result<Encoder> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::file(&side, e))?;
        let spec = EncoderSpec::from_json(&text)?;
        let mut enc = build_encoder(&spec, 0)?;
        let mut records = load_checkpoint(path)?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let i = records
                .iter()
                .position(|r| r.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing tensor {name:?}", path.display())))?;
            let r = records.swap_remove(i);
            if r.tensor.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor {name:?} has shape {:?}, expected {shape:?}",
                    path.display(),
                    r.tensor.shape()
                )));
            }
            Ok(r.tensor.into_data())
        };
        for p in enc.params.iter_mut() {
            let data = take(&p.name, p.tensor.shape())?;
            p.tensor.data_mut().copy_from_slice(&data);
        }
        for (name, st) in enc.stats_names.iter().zip(enc.stats.iter_mut()) {
            let c = st.mean.len();
            st.mean = take(&format!("{name}.running_mean"), &[c])?;
            st.var = take(&format!("{name}.running_var"), &[c])?;
        }
        if let Some(extra) = records.first() {
            return Err(Error::Checkpoint(format!(
                "{}: unexpected tensor {:?}",
                path.display(),
                extra.name
            )));
        }
        Ok(enc)
    }
}

fn collect(g: &Graph, fw: &ForwardVars) -> Result<(TapSet, Tensor)> {
    let batches = Tap::ALL
        .into_iter()
        .map(|t| FeatureBatch::new(t, g.value(fw.tap(t)).clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok((TapSet::new(batches)?, g.value(fw.z).clone()))
}

fn norm(
    spec: &EncoderSpec,
    stats: &mut StatsAccess<'_>,
    g: &mut Graph,
    vars: &[Var],
    x: Var,
    n: NormRef,
) -> Result<Var> {
    match spec.norm {
        NormKind::Batch => g.batch_norm(x, vars[n.gamma], vars[n.beta], NORM_EPS, stats.mode(n.stats)),
        NormKind::Layer => g.layer_norm(x, vars[n.gamma], vars[n.beta], NORM_EPS),
    }
}

fn conv(g: &mut Graph, vars: &[Var], x: Var, c: ConvRef) -> Result<Var> {
    g.conv2d(x, vars[c.weight], c.stride, c.pad)
}

fn linear(g: &mut Graph, vars: &[Var], x: Var, l: LinearRef) -> Result<Var> {
    let y = g.matmul(x, vars[l.weight])?;
    g.add_bias(y, vars[l.bias])
}

fn run(
    spec: &EncoderSpec,
    layout: &Layout,
    mut stats: StatsAccess<'_>,
    g: &mut Graph,
    vars: &[Var],
    x: Var,
) -> Result<ForwardVars> {
    let shape = g.value(x).shape();
    let side = spec.image_side;
    if shape.len() != 4 || shape[1] != 3 || shape[2] != side || shape[3] != side {
        return Err(Error::Shape(format!(
            "encoder expects B×3×{side}×{side}, got {shape:?}"
        )));
    }
    let y = conv(g, vars, x, layout.stem)?;
    let y = norm(spec, &mut stats, g, vars, y, layout.stem_norm)?;
    let mut y = g.relu(y)?;
    let conv1 = g.global_avg_pool(y)?;
    let (mut res2, mut res4) = (None, None);
    for (s, stage) in layout.stages.iter().enumerate() {
        for block in stage {
            let a = conv(g, vars, y, block.conv1)?;
            let a = norm(spec, &mut stats, g, vars, a, block.norm1)?;
            let a = g.relu(a)?;
            let a = conv(g, vars, a, block.conv2)?;
            let a = norm(spec, &mut stats, g, vars, a, block.norm2)?;
            let skip = match block.shortcut {
                Some((c, n)) => {
                    let sc = conv(g, vars, y, c)?;
                    norm(spec, &mut stats, g, vars, sc, n)?
                }
                None => y,
            };
            let sum = g.add(a, skip)?;
            y = g.relu(sum)?;
        }
        if s == 1 {
            res2 = Some(g.global_avg_pool(y)?);
        }
        if s == 3 {
            res4 = Some(g.global_avg_pool(y)?);
        }
    }
    let pooled = match res4 {
        Some(p) if layout.stages.len() == 4 => p,
        _ => g.global_avg_pool(y)?,
    };
    let h = linear(g, vars, pooled, layout.head)?;
    let p = linear(g, vars, h, layout.proj1)?;
    let p = g.relu(p)?;
    let z = linear(g, vars, p, layout.proj2)?;
    Ok(ForwardVars {
        taps: [
            conv1,
            res2.expect("validated ≥ 4 stages"),
            res4.expect("validated ≥ 4 stages"),
            h,
        ],
        z,
    })
}
