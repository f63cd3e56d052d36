//! Slow-fusion and early-fusion encoder-decoder networks.
//!
//! Every network has one or more VGG-style encoders, a bottleneck of 3×3
//! convolutions followed by dropout, and a decoder of five transpose-conv
//! levels. Each level concatenates the upsampled features with the last
//! activation of the matching block of every encoder. A 1×1 head and a
//! softmax produce three class probabilities per pixel.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use strokeseg_nn::{
    concat_channels, inflate_kernel, load_archive, mean_over_time, mean_over_time_backward, save_archive,
    softmax_channels, softmax_channels_backward, split_channels, stack_time, Activation, Archive, Conv2d, Conv3d,
    ConvTranspose2d, Dense, Dropout, HasParams, MaxPool2, NamedArray, NnError, Param, Tensor,
};
use thiserror::Error;

use crate::dataset::MAX_NIHSS;

pub const NUM_CLASSES: usize = 3;
pub const VGG16_BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];
pub const MAP_NAMES: [&str; 4] = ["cbf", "cbv", "ttp", "tmax"];
/// Temporal kernel extent of inflated filters.
pub const INFLATED_DEPTH: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("model expects NIHSS input but it is absent")]
    MissingNihss,
    #[error("model expects a MIP input but it is absent")]
    MissingMip,
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("pretrained weights incompatible: {0}")]
    PretrainedIncompatible(String),
    #[error("pretrained weights not found: {0}")]
    MissingWeights(PathBuf),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fusion {
    SlowFusion,
    EarlyFusion,
    EarlyFusionInflated,
}

impl Fusion {
    pub fn short(self) -> &'static str {
        match self {
            Fusion::SlowFusion => "SF",
            Fusion::EarlyFusion => "EF",
            Fusion::EarlyFusionInflated => "EFI",
        }
    }
}

/// Optional inputs on top of the four perfusion maps, which are always used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InputSet {
    pub mip: bool,
    pub nihss: bool,
}

impl InputSet {
    pub const PMS: InputSet = InputSet { mip: false, nihss: false };
    pub const PMS_MIP: InputSet = InputSet { mip: true, nihss: false };
    pub const PMS_NIHSS: InputSet = InputSet { mip: false, nihss: true };
    pub const ALL: InputSet = InputSet { mip: true, nihss: true };

    pub fn image_count(self) -> usize {
        4 + usize::from(self.mip)
    }
}

impl fmt::Display for InputSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PMs")?;
        if self.mip {
            f.write_str(",M")?;
        }
        if self.nihss {
            f.write_str(",N")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FreezeMode {
    Frozen,
    Unfrozen,
    Gradual,
}

impl FreezeMode {
    pub fn letter(self) -> &'static str {
        match self {
            FreezeMode::Frozen => "F",
            FreezeMode::Unfrozen => "U",
            FreezeMode::Gradual => "G",
        }
    }

    pub fn initial_stage(self) -> FreezeStage {
        match self {
            FreezeMode::Frozen | FreezeMode::Gradual => FreezeStage::AllFrozen,
            FreezeMode::Unfrozen => FreezeStage::AllUnfrozen,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FreezeStage {
    AllFrozen,
    BottomHalfUnfrozen,
    AllUnfrozen,
}

impl FreezeStage {
    pub fn next(self) -> Option<FreezeStage> {
        match self {
            FreezeStage::AllFrozen => Some(FreezeStage::BottomHalfUnfrozen),
            FreezeStage::BottomHalfUnfrozen => Some(FreezeStage::AllUnfrozen),
            FreezeStage::AllUnfrozen => None,
        }
    }
}

/// Which encoder half becomes trainable at [`FreezeStage::BottomHalfUnfrozen`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainableHalf {
    /// Blocks nearest the bottleneck.
    #[default]
    Deeper,
    /// Blocks nearest the input.
    Shallower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// `(conv_count, channel_width)` per block.
    pub blocks: Vec<(usize, usize)>,
    pub width_multiplier: f64,
    #[serde(default)]
    pub pretrained: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec { blocks: VGG16_BLOCKS.to_vec(), width_multiplier: 1.0, pretrained: false }
    }
}

impl EncoderSpec {
    pub fn scaled(width_multiplier: f64) -> Self {
        EncoderSpec { width_multiplier, ..Default::default() }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|&(_, w)| ((w as f64 * self.width_multiplier).round() as usize).max(1))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.blocks.len() != 5 {
            return Err(ModelError::InvalidConfig(format!("{} encoder blocks, need 5", self.blocks.len())));
        }
        if self.blocks.iter().any(|&(n, w)| n == 0 || w == 0) {
            return Err(ModelError::InvalidConfig("empty encoder block".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "width multiplier {} outside (0, 1]",
                self.width_multiplier
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub conv_count: usize,
    pub dropout_rate: f64,
}

impl Default for BottleneckSpec {
    fn default() -> Self {
        BottleneckSpec { conv_count: 2, dropout_rate: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: Fusion,
    pub inputs: InputSet,
    pub encoder: EncoderSpec,
    pub freeze_mode: FreezeMode,
    pub input_size: (usize, usize),
    #[serde(default)]
    pub bottleneck: BottleneckSpec,
    /// Width of the dense NIHSS projection.
    #[serde(default = "default_nihss_features")]
    pub nihss_features: usize,
    #[serde(default)]
    pub trainable_half: TrainableHalf,
    /// Seeds weight initialisation and dropout masks.
    #[serde(default)]
    pub seed: u64,
}

fn default_nihss_features() -> usize {
    8
}

impl ModelConfig {
    pub fn new(fusion: Fusion, inputs: InputSet, freeze_mode: FreezeMode) -> Self {
        ModelConfig {
            fusion,
            inputs,
            encoder: EncoderSpec::default(),
            freeze_mode,
            input_size: (512, 512),
            bottleneck: BottleneckSpec::default(),
            nihss_features: default_nihss_features(),
            trainable_half: TrainableHalf::default(),
            seed: 0,
        }
    }

    /// Small network for CPU runs: 64×64 inputs, widths scaled by `width`.
    pub fn desk(fusion: Fusion, inputs: InputSet, freeze_mode: FreezeMode, width: f64) -> Self {
        let mut c = ModelConfig::new(fusion, inputs, freeze_mode);
        c.encoder = EncoderSpec::scaled(width);
        c.input_size = (64, 64);
        c
    }

    /// Short label such as `SF_G(PMs,N)`.
    pub fn label(&self) -> String {
        format!("{}_{}({})", self.fusion.short(), self.freeze_mode.letter(), self.inputs)
    }

    pub fn encoder_count(&self) -> usize {
        match self.fusion {
            Fusion::SlowFusion => self.inputs.image_count(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let factor = 1 << self.encoder.blocks.len();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(ModelError::InvalidConfig(format!("input size {h}x{w} not divisible by {factor}")));
        }
        if self.bottleneck.conv_count == 0 {
            return Err(ModelError::InvalidConfig("bottleneck needs at least one conv".into()));
        }
        if !(0.0..1.0).contains(&self.bottleneck.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!("dropout {} outside [0, 1)", self.bottleneck.dropout_rate)));
        }
        if self.inputs.nihss && self.nihss_features == 0 {
            return Err(ModelError::InvalidConfig("NIHSS projection width is zero".into()));
        }
        Ok(())
    }
}

/// Replicates a `(cout, cin, k, k)` filter bank along a new temporal axis of
/// extent `depth` and divides by `depth`; the result is `(cout, cin, depth, k, k)`.
pub fn inflate_weights(w2d: &Tensor, depth: usize) -> Result<Tensor> {
    if w2d.rank() != 4 || w2d.dim(2) != w2d.dim(3) {
        return Err(ModelError::Shape(format!("expected (cout, cin, k, k) filters, got {:?}", w2d.shape())));
    }
    let (cout, cin, k) = (w2d.dim(0), w2d.dim(1), w2d.dim(2));
    let data = inflate_kernel(w2d.data(), cout, cin, k, depth)?;
    Ok(Tensor::from_vec(&[cout, cin, depth, k, k], data)?)
}

/// Convolution layers usable inside an [`Encoder`].
pub trait EncoderLayer: HasParams {
    fn forward(&mut self, x: &Tensor, train: bool) -> strokeseg_nn::Result<Tensor>;
    fn backward(&mut self, dy: Tensor, need_dx: bool) -> strokeseg_nn::Result<Option<Tensor>>;
    fn set_frozen(&mut self, frozen: bool);
    fn is_frozen(&self) -> bool;
    fn weight(&self) -> &Param;
}

impl EncoderLayer for Conv2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> strokeseg_nn::Result<Tensor> {
        Conv2d::forward(self, x, train)
    }
    fn backward(&mut self, dy: Tensor, need_dx: bool) -> strokeseg_nn::Result<Option<Tensor>> {
        Conv2d::backward(self, dy, need_dx)
    }
    fn set_frozen(&mut self, frozen: bool) {
        Conv2d::set_frozen(self, frozen)
    }
    fn is_frozen(&self) -> bool {
        Conv2d::is_frozen(self)
    }
    fn weight(&self) -> &Param {
        &self.weight
    }
}

impl EncoderLayer for Conv3d {
    fn forward(&mut self, x: &Tensor, train: bool) -> strokeseg_nn::Result<Tensor> {
        Conv3d::forward(self, x, train)
    }
    fn backward(&mut self, dy: Tensor, need_dx: bool) -> strokeseg_nn::Result<Option<Tensor>> {
        Conv3d::backward(self, dy, need_dx)
    }
    fn set_frozen(&mut self, frozen: bool) {
        Conv3d::set_frozen(self, frozen)
    }
    fn is_frozen(&self) -> bool {
        Conv3d::is_frozen(self)
    }
    fn weight(&self) -> &Param {
        &self.weight
    }
}

/// Five blocks of ReLU convolutions, each followed by 2×2 max pooling.
///
/// Layers that cannot receive a gradient (frozen, with nothing trainable
/// before them) skip their caches and their backward pass.
#[derive(Clone, Debug)]
pub struct Encoder<L> {
    pub blocks: Vec<Vec<L>>,
    pools: Vec<MaxPool2>,
    active: Vec<Vec<bool>>,
    pool_active: Vec<bool>,
    need_dx: bool,
}

impl<L: EncoderLayer> Encoder<L> {
    fn from_blocks(blocks: Vec<Vec<L>>) -> Self {
        let n = blocks.len();
        Encoder { blocks, pools: vec![MaxPool2::new(); n], active: Vec::new(), pool_active: Vec::new(), need_dx: false }
    }

    pub fn layers(&self) -> impl Iterator<Item = &L> {
        self.blocks.iter().flatten()
    }

    pub fn any_trainable(&self) -> bool {
        self.layers().any(|l| !l.is_frozen())
    }

    /// Returns the last activation of every block and the pooled output of
    /// the final block.
    pub fn forward(&mut self, x: &Tensor, train: bool, need_dx: bool) -> Result<(Vec<Tensor>, Tensor)> {
        self.need_dx = need_dx;
        self.active.clear();
        self.pool_active.clear();
        let mut seen_trainable = false;
        let mut skips = Vec::with_capacity(self.blocks.len());
        let mut h: Option<Tensor> = None;
        for (block, pool) in self.blocks.iter_mut().zip(self.pools.iter_mut()) {
            let mut flags = Vec::with_capacity(block.len());
            for layer in block.iter_mut() {
                seen_trainable |= !layer.is_frozen();
                let act = train && (need_dx || seen_trainable);
                flags.push(act);
                let input = h.as_ref().unwrap_or(x);
                h = Some(layer.forward(input, act)?);
            }
            let out = h.take().expect("blocks are nonempty");
            let pact = train && (need_dx || seen_trainable);
            self.pool_active.push(pact);
            self.active.push(flags);
            h = Some(pool.forward(&out, pact)?);
            skips.push(out);
        }
        Ok((skips, h.expect("five blocks")))
    }

    /// Backpropagates block-skip and final-feature gradients; returns the
    /// input gradient when it was requested at forward time.
    pub fn backward(&mut self, d_skips: Vec<Tensor>, d_final: Tensor) -> Result<Option<Tensor>> {
        let frozen: Vec<Vec<bool>> = self.blocks.iter().map(|b| b.iter().map(|l| l.is_frozen()).collect()).collect();
        let mut g = d_final;
        for (b, d_skip) in d_skips.into_iter().enumerate().rev() {
            if !self.pool_active[b] {
                return Ok(None);
            }
            g = self.pools[b].backward(&g)?;
            g.add_assign(&d_skip)?;
            for i in (0..self.blocks[b].len()).rev() {
                if !self.active[b][i] {
                    return Ok(None);
                }
                let before = frozen[..b].iter().flatten().chain(&frozen[b][..i]).any(|f| !f);
                match self.blocks[b][i].backward(g, self.need_dx || before)? {
                    Some(d) => g = d,
                    None => return Ok(None),
                }
            }
        }
        Ok(Some(g))
    }
}

impl<L: EncoderLayer> HasParams for Encoder<L> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for l in self.layers() {
            l.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in self.blocks.iter_mut().flatten() {
            l.visit_params_mut(f);
        }
    }
}

fn build_encoder2d(prefix: &str, cin: usize, spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Encoder<Conv2d> {
    let mut c = cin;
    let blocks = spec
        .blocks
        .iter()
        .zip(spec.widths())
        .enumerate()
        .map(|(b, (&(n, _), w))| {
            (0..n)
                .map(|i| {
                    let conv = Conv2d::new(&format!("{prefix}.block{}_conv{}", b + 1, i + 1), c, w, 3, Activation::Relu, rng);
                    c = w;
                    conv
                })
                .collect()
        })
        .collect();
    Encoder::from_blocks(blocks)
}

fn inflate_encoder(enc: &Encoder<Conv2d>, depth: usize) -> Result<Encoder<Conv3d>> {
    let blocks = enc
        .blocks
        .iter()
        .map(|b| b.iter().map(|c| Conv3d::inflated_from(c, depth)).collect::<strokeseg_nn::Result<Vec<_>>>())
        .collect::<strokeseg_nn::Result<Vec<_>>>()?;
    Ok(Encoder::from_blocks(blocks))
}

/// Where a layer sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerTag {
    Stem,
    Encoder { id: usize, block: usize },
    Nihss,
    Bottleneck,
    Decoder { level: usize },
    Head,
}

impl LayerTag {
    pub fn is_encoder(self) -> bool {
        matches!(self, LayerTag::Encoder { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub tag: LayerTag,
}

/// Inputs for one batch, channel-first.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// CBF, CBV, TTP and TMax, each `(N, 3, H, W)`.
    pub maps: [Tensor; 4],
    /// MIP replicated to three channels, `(N, 3, H, W)`.
    pub mip: Option<Tensor>,
    /// Raw NIHSS scores, one per sample.
    pub nihss: Option<Vec<f32>>,
}

impl ModelInput {
    pub fn batch_size(&self) -> usize {
        self.maps[0].dim(0)
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.maps[0].dim(2), self.maps[0].dim(3))
    }
}

#[derive(Clone, Debug, Default)]
struct ForwardCache {
    skip_channels: Vec<usize>,
    final_channels: Vec<usize>,
    nihss_hw: Option<(usize, usize)>,
    temporal: usize,
    stem_used: bool,
    probs: Option<Tensor>,
}

/// A realized network with its layer registry and freeze state.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    config: ModelConfig,
    stem: Option<Conv2d>,
    encoders: Vec<Encoder<Conv2d>>,
    encoder3d: Option<Encoder<Conv3d>>,
    nihss: Option<Dense>,
    bottleneck: Vec<Conv2d>,
    dropout: Dropout,
    ups: Vec<ConvTranspose2d>,
    decoder: Vec<Conv2d>,
    head: Conv2d,
    stage: FreezeStage,
    dropout_rng: ChaCha8Rng,
    cache: ForwardCache,
}

pub fn build_model(config: &ModelConfig) -> Result<ModelGraph> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spec = &config.encoder;
    let widths = spec.widths();
    let n_images = config.inputs.image_count();
    let mut stem = None;
    let mut encoders = Vec::new();
    let mut encoder3d = None;
    match config.fusion {
        Fusion::SlowFusion => {
            let names = MAP_NAMES.iter().copied().chain(config.inputs.mip.then_some("mip"));
            for name in names {
                encoders.push(build_encoder2d(&format!("enc_{name}"), 3, spec, &mut rng));
            }
        }
        Fusion::EarlyFusion => {
            stem = Some(Conv2d::new("stem", 3 * n_images, 3, 3, Activation::Relu, &mut rng));
            encoders.push(build_encoder2d("enc", 3, spec, &mut rng));
        }
        Fusion::EarlyFusionInflated => {
            let flat = build_encoder2d("enc", 3, spec, &mut rng);
            encoder3d = Some(inflate_encoder(&flat, INFLATED_DEPTH)?);
        }
    }
    let e = config.encoder_count();
    let top = *widths.last().expect("five blocks");
    let nihss = config
        .inputs
        .nihss
        .then(|| Dense::new("nihss", 1, config.nihss_features, Activation::Relu, &mut rng));
    let mut c = e * top + if config.inputs.nihss { config.nihss_features } else { 0 };
    let mut bottleneck = Vec::new();
    for i in 0..config.bottleneck.conv_count {
        bottleneck.push(Conv2d::new(&format!("bottleneck.conv{}", i + 1), c, top, 3, Activation::Relu, &mut rng));
        c = top;
    }
    let mut ups = Vec::new();
    let mut decoder = Vec::new();
    for level in (0..widths.len()).rev() {
        let w = widths[level];
        ups.push(ConvTranspose2d::new(&format!("decoder.level{}.up", level + 1), c, w, Activation::Relu, &mut rng));
        decoder.push(Conv2d::new(&format!("decoder.level{}.conv", level + 1), w + e * w, w, 3, Activation::Relu, &mut rng));
        c = w;
    }
    let head = Conv2d::new("head", c, NUM_CLASSES, 1, Activation::Identity, &mut rng);
    let mut model = ModelGraph {
        config: config.clone(),
        stem,
        encoders,
        encoder3d,
        nihss,
        bottleneck,
        dropout: Dropout::new(config.bottleneck.dropout_rate as f32),
        ups,
        decoder,
        head,
        stage: config.freeze_mode.initial_stage(),
        dropout_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xD00D_F00D),
        cache: ForwardCache::default(),
    };
    model.set_freeze_stage(model.stage);
    Ok(model)
}

impl ModelGraph {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stage(&self) -> FreezeStage {
        self.stage
    }

    pub fn encoder_count(&self) -> usize {
        self.encoders.len() + usize::from(self.encoder3d.is_some())
    }

    /// Reseeds the dropout mask generator.
    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn set_freeze_stage(&mut self, stage: FreezeStage) {
        self.stage = stage;
        let split = self.config.encoder.blocks.len() / 2;
        let half = self.config.trainable_half;
        let frozen = |b: usize| match stage {
            FreezeStage::AllFrozen => true,
            FreezeStage::AllUnfrozen => false,
            FreezeStage::BottomHalfUnfrozen => match half {
                TrainableHalf::Deeper => b < split,
                TrainableHalf::Shallower => b >= split,
            },
        };
        for enc in &mut self.encoders {
            for (b, block) in enc.blocks.iter_mut().enumerate() {
                block.iter_mut().for_each(|l| EncoderLayer::set_frozen(l, frozen(b)));
            }
        }
        if let Some(enc) = &mut self.encoder3d {
            for (b, block) in enc.blocks.iter_mut().enumerate() {
                block.iter_mut().for_each(|l| EncoderLayer::set_frozen(l, frozen(b)));
            }
        }
    }

    /// Every weighted layer in forward order.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut push = |p: &Param, frozen: bool, tag: LayerTag| {
            out.push(LayerInfo {
                name: p.name.trim_end_matches(".weight").to_string(),
                shape: p.shape.clone(),
                frozen,
                tag,
            })
        };
        if let Some(s) = &self.stem {
            push(&s.weight, s.is_frozen(), LayerTag::Stem);
        }
        for (id, enc) in self.encoders.iter().enumerate() {
            for (block, layers) in enc.blocks.iter().enumerate() {
                for l in layers {
                    push(&l.weight, l.is_frozen(), LayerTag::Encoder { id, block: block + 1 });
                }
            }
        }
        if let Some(enc) = &self.encoder3d {
            for (block, layers) in enc.blocks.iter().enumerate() {
                for l in layers {
                    push(&l.weight, l.is_frozen(), LayerTag::Encoder { id: 0, block: block + 1 });
                }
            }
        }
        if let Some(d) = &self.nihss {
            push(&d.weight, false, LayerTag::Nihss);
        }
        for c in &self.bottleneck {
            push(&c.weight, c.is_frozen(), LayerTag::Bottleneck);
        }
        let levels = self.ups.len();
        for (i, (u, c)) in self.ups.iter().zip(&self.decoder).enumerate() {
            let level = levels - i;
            push(&u.weight, false, LayerTag::Decoder { level });
            push(&c.weight, c.is_frozen(), LayerTag::Decoder { level });
        }
        push(&self.head.weight, self.head.is_frozen(), LayerTag::Head);
        out
    }

    fn images<'a>(&self, input: &'a ModelInput) -> Result<Vec<&'a Tensor>> {
        let n = input.batch_size();
        let (h, w) = input.spatial();
        let factor = 1 << self.config.encoder.blocks.len();
        if h % factor != 0 || w % factor != 0 {
            return Err(ModelError::Shape(format!("spatial size {h}x{w} not divisible by {factor}")));
        }
        let mut imgs: Vec<&Tensor> = input.maps.iter().collect();
        if self.config.inputs.mip {
            imgs.push(input.mip.as_ref().ok_or(ModelError::MissingMip)?);
        }
        for t in &imgs {
            if t.shape() != [n, 3, h, w] {
                return Err(ModelError::Shape(format!("expected {:?}, got {:?}", [n, 3, h, w], t.shape())));
            }
        }
        if self.config.inputs.nihss {
            let scores = input.nihss.as_ref().ok_or(ModelError::MissingNihss)?;
            if scores.len() != n {
                return Err(ModelError::Shape(format!("{} NIHSS scores for batch of {n}", scores.len())));
            }
        }
        Ok(imgs)
    }

    /// Encoder features: per-encoder block skips and final pooled features.
    fn encode(&mut self, input: &ModelInput, train: bool) -> Result<(Vec<Vec<Tensor>>, Vec<Tensor>)> {
        let imgs = self.images(input)?;
        let mut skips = Vec::new();
        let mut finals = Vec::new();
        self.cache.stem_used = false;
        self.cache.temporal = 0;
        match self.config.fusion {
            Fusion::SlowFusion => {
                for (enc, img) in self.encoders.iter_mut().zip(&imgs) {
                    let (s, f) = enc.forward(img, train, false)?;
                    skips.push(s);
                    finals.push(f);
                }
            }
            Fusion::EarlyFusion => {
                let stem = self.stem.as_mut().expect("early fusion has a stem");
                let x = stem.forward(&concat_channels(&imgs)?, train)?;
                let (s, f) = self.encoders[0].forward(&x, train, true)?;
                self.cache.stem_used = true;
                skips.push(s);
                finals.push(f);
            }
            Fusion::EarlyFusionInflated => {
                let x = stack_time(&imgs)?;
                let enc = self.encoder3d.as_mut().expect("inflated encoder");
                let (s, f) = enc.forward(&x, train, false)?;
                self.cache.temporal = imgs.len();
                skips.push(s.iter().map(mean_over_time).collect());
                finals.push(mean_over_time(&f));
            }
        }
        Ok((skips, finals))
    }

    /// Final encoder features before the bottleneck, concatenated over
    /// encoders (NIHSS not included).
    pub fn encoder_features(&mut self, input: &ModelInput) -> Result<Tensor> {
        let (_, finals) = self.encode(input, false)?;
        let refs: Vec<&Tensor> = finals.iter().collect();
        Ok(concat_channels(&refs)?)
    }

    fn needs_bottleneck_dx(&self) -> bool {
        self.nihss.is_some()
            || self.stem.is_some()
            || self.encoders.iter().any(|e| e.any_trainable())
            || self.encoder3d.as_ref().is_some_and(|e| e.any_trainable())
    }

    /// Class probabilities `(N, 3, H, W)`. With `train` set, dropout is
    /// active and activations are cached for [`ModelGraph::backward`].
    pub fn forward_nchw(&mut self, input: &ModelInput, train: bool) -> Result<Tensor> {
        let (skips, finals) = self.encode(input, train)?;
        self.cache.skip_channels = skips[0].iter().map(|t| t.dim(1)).collect();
        self.cache.final_channels = finals.iter().map(|t| t.dim(1)).collect();
        let mut parts: Vec<Tensor> = finals;
        self.cache.nihss_hw = None;
        if let Some(dense) = self.nihss.as_mut() {
            let scores = input.nihss.as_ref().ok_or(ModelError::MissingNihss)?;
            let n = scores.len();
            let x = Tensor::from_vec(&[n, 1], scores.iter().map(|s| s / MAX_NIHSS as f32).collect())?;
            let proj = dense.forward(&x, train)?;
            let (h, w) = (parts[0].dim(2), parts[0].dim(3));
            let k = proj.dim(1);
            let mut map = vec![0.0; n * k * h * w];
            for (plane, &v) in proj.data().iter().enumerate() {
                map[plane * h * w..(plane + 1) * h * w].iter_mut().for_each(|m| *m = v);
            }
            parts.push(Tensor::from_vec(&[n, k, h, w], map)?);
            self.cache.nihss_hw = Some((h, w));
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let mut x = concat_channels(&refs)?;
        for conv in &mut self.bottleneck {
            x = conv.forward(&x, train)?;
        }
        x = self.dropout.forward(x, train, &mut self.dropout_rng);
        let levels = self.ups.len();
        for i in 0..levels {
            let l = levels - 1 - i;
            let up = self.ups[i].forward(&x, train)?;
            let mut cat: Vec<&Tensor> = vec![&up];
            cat.extend(skips.iter().map(|s| &s[l]));
            x = self.decoder[i].forward(&concat_channels(&cat)?, train)?;
        }
        let logits = self.head.forward(&x, train)?;
        let probs = softmax_channels(&logits);
        self.cache.probs = train.then(|| probs.clone());
        Ok(probs)
    }

    /// Class probabilities as `(N, H, W, 3)`.
    pub fn forward(&mut self, input: &ModelInput, train: bool) -> Result<Array4<f32>> {
        let p = self.forward_nchw(input, train)?;
        let (n, c, h, w) = (p.dim(0), p.dim(1), p.dim(2), p.dim(3));
        let data = p.data();
        Ok(Array4::from_shape_fn((n, h, w, c), |(b, y, x, k)| data[((b * c + k) * h + y) * w + x]))
    }

    /// Accumulates parameter gradients from `dL/dprobs` of the last training
    /// forward pass.
    pub fn backward(&mut self, dprobs: &Tensor) -> Result<()> {
        let probs = self
            .cache
            .probs
            .take()
            .ok_or_else(|| ModelError::Shape("backward without a training forward pass".into()))?;
        dprobs.expect_shape("model backward", probs.shape())?;
        let dlogits = softmax_channels_backward(&probs, dprobs);
        let mut g = self.head.backward(dlogits, true)?.expect("dx requested");
        let e = self.cache.final_channels.len();
        let levels = self.ups.len();
        let mut d_skips: Vec<Vec<Option<Tensor>>> = vec![vec![None; levels]; e];
        for i in (0..levels).rev() {
            let l = levels - 1 - i;
            let d_cat = self.decoder[i].backward(g, true)?.expect("dx requested");
            let mut sizes = vec![self.ups[i].out_channels()];
            sizes.extend(std::iter::repeat_n(self.cache.skip_channels[l], e));
            let mut parts = split_channels(&d_cat, &sizes)?.into_iter();
            let d_up = parts.next().expect("upsampled part");
            for (enc, d) in parts.enumerate() {
                d_skips[enc][l] = Some(d);
            }
            g = self.ups[i].backward(d_up, true)?.expect("dx requested");
        }
        g = self.dropout.backward(g);
        let need = self.needs_bottleneck_dx();
        let nb = self.bottleneck.len();
        for (i, conv) in self.bottleneck.iter_mut().enumerate().rev() {
            match conv.backward(g, i > 0 || need)? {
                Some(d) => g = d,
                None => return Ok(()),
            }
            if i == 0 {
                break;
            }
        }
        debug_assert!(nb > 0);
        let mut sizes = self.cache.final_channels.clone();
        if let Some(dense) = &self.nihss {
            sizes.push(dense.outputs());
        }
        let mut parts = split_channels(&g, &sizes)?;
        if let (Some(dense), Some((h, w))) = (self.nihss.as_mut(), self.cache.nihss_hw) {
            let d_map = parts.pop().expect("nihss part");
            let (n, k) = (d_map.dim(0), d_map.dim(1));
            let summed: Vec<f32> = d_map.data().chunks(h * w).map(|c| c.iter().sum()).collect();
            dense.backward(Tensor::from_vec(&[n, k], summed)?, false)?;
        }
        let skips_of = |d: Vec<Option<Tensor>>| -> Vec<Tensor> { d.into_iter().map(|t| t.expect("all levels")).collect() };
        match self.config.fusion {
            Fusion::SlowFusion => {
                for ((enc, d_final), ds) in self.encoders.iter_mut().zip(parts).zip(d_skips) {
                    enc.backward(skips_of(ds), d_final)?;
                }
            }
            Fusion::EarlyFusion => {
                let ds = skips_of(d_skips.pop().expect("one encoder"));
                let d_final = parts.pop().expect("one encoder");
                if let Some(dx) = self.encoders[0].backward(ds, d_final)? {
                    if self.cache.stem_used {
                        self.stem.as_mut().expect("stem").backward(dx, false)?;
                    }
                }
            }
            Fusion::EarlyFusionInflated => {
                let t = self.cache.temporal;
                let ds: Vec<Tensor> = skips_of(d_skips.pop().expect("one encoder"))
                    .iter()
                    .map(|d| mean_over_time_backward(d, t))
                    .collect();
                let d_final = mean_over_time_backward(&parts.pop().expect("one encoder"), t);
                self.encoder3d.as_mut().expect("inflated encoder").backward(ds, d_final)?;
            }
        }
        Ok(())
    }

    /// Snapshot of every parameter value.
    pub fn weights(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            out.push(NamedArray { name: p.name.clone(), shape: p.shape.clone(), data: p.value.clone() })
        });
        out
    }

    /// Restores parameter values by name; every parameter must be present.
    pub fn set_weights(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let by_name: BTreeMap<&str, &NamedArray> = arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut err = None;
        self.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match by_name.get(p.name.as_str()) {
                Some(a) if a.shape == p.shape => p.value.clone_from(&a.data),
                Some(a) => err = Some(format!("{}: shape {:?} vs {:?}", p.name, a.shape, p.shape)),
                None => err = Some(format!("missing array {}", p.name)),
            }
        });
        err.map_or(Ok(()), |e| Err(ModelError::Checkpoint(e)))
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let mut metadata = BTreeMap::new();
        let cfg = serde_json::to_string(&self.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        metadata.insert("model_config".to_string(), cfg);
        metadata.insert("freeze_stage".to_string(), format!("{:?}", self.stage));
        metadata.insert("val_loss".to_string(), format!("{:e}", meta.val_loss));
        metadata.insert("epoch".to_string(), meta.epoch.to_string());
        save_archive(path, &Archive { arrays: self.weights(), metadata })?;
        Ok(())
    }

    /// Initialises every encoder convolution from a VGG-16 weight file with
    /// arrays `block{b}_conv{i}.weight` / `.bias`. Returns the number of
    /// convolutions loaded per encoder.
    pub fn load_pretrained(&mut self, source: &Path) -> Result<usize> {
        let spec = &self.config.encoder;
        if spec.width_multiplier != 1.0 || spec.blocks != VGG16_BLOCKS {
            return Err(ModelError::PretrainedIncompatible(format!(
                "pretrained weights need the full VGG-16 layout at width 1, got multiplier {}",
                spec.width_multiplier
            )));
        }
        if !source.is_file() {
            return Err(ModelError::MissingWeights(source.to_path_buf()));
        }
        let archive = load_archive(source)?;
        let fetch = |b: usize, i: usize, conv: &Param| -> Result<(Tensor, Vec<f32>)> {
            let key = format!("block{b}_conv{i}");
            let w = archive.get(&format!("{key}.weight")).ok_or_else(|| {
                ModelError::PretrainedIncompatible(format!("{} has no {key}.weight", source.display()))
            })?;
            let bias = archive.get(&format!("{key}.bias")).ok_or_else(|| {
                ModelError::PretrainedIncompatible(format!("{} has no {key}.bias", source.display()))
            })?;
            let expect = &conv.shape;
            let flat = [expect[0], expect[1], expect[expect.len() - 2], expect[expect.len() - 1]];
            if w.shape != flat || bias.shape != [expect[0]] {
                return Err(ModelError::PretrainedIncompatible(format!(
                    "{key}: file shape {:?}, layer expects {:?}",
                    w.shape, flat
                )));
            }
            Ok((Tensor::from_vec(&w.shape, w.data.clone())?, bias.data.clone()))
        };
        let mut loaded = 0;
        for enc in &mut self.encoders {
            loaded = 0;
            for (b, block) in enc.blocks.iter_mut().enumerate() {
                for (i, conv) in block.iter_mut().enumerate() {
                    let (w, bias) = fetch(b + 1, i + 1, &conv.weight)?;
                    conv.weight.value = w.into_data();
                    conv.bias.value = bias;
                    loaded += 1;
                }
            }
        }
        if let Some(enc) = &mut self.encoder3d {
            for (b, block) in enc.blocks.iter_mut().enumerate() {
                for (i, conv) in block.iter_mut().enumerate() {
                    let (w, bias) = fetch(b + 1, i + 1, &conv.weight)?;
                    conv.weight.value = inflate_weights(&w, conv.temporal_extent())?.into_data();
                    conv.bias.value = bias;
                    loaded += 1;
                }
            }
        }
        Ok(loaded)
    }

    /// Copies the weights of a 2D early-fusion encoder into this model's
    /// inflated encoder.
    pub fn inflate_from(&mut self, source: &ModelGraph) -> Result<()> {
        let src = source
            .encoders
            .first()
            .ok_or_else(|| ModelError::InvalidConfig("source model has no 2D encoder".into()))?;
        let dst = self
            .encoder3d
            .as_mut()
            .ok_or_else(|| ModelError::InvalidConfig("target model has no inflated encoder".into()))?;
        for (sb, db) in src.blocks.iter().zip(dst.blocks.iter_mut()) {
            for (s, d) in sb.iter().zip(db.iter_mut()) {
                let inflated = Conv3d::inflated_from(s, d.temporal_extent())?;
                if inflated.weight.shape != d.weight.shape {
                    return Err(ModelError::Shape(format!("{:?} vs {:?}", inflated.weight.shape, d.weight.shape)));
                }
                d.weight.value = inflated.weight.value;
                d.bias.value = inflated.bias.value;
            }
        }
        Ok(())
    }

    /// The 2D encoder of an SF or EF model, e.g. for inspection.
    pub fn encoder2d(&self, id: usize) -> Option<&Encoder<Conv2d>> {
        self.encoders.get(id)
    }

    pub fn encoder3d(&self) -> Option<&Encoder<Conv3d>> {
        self.encoder3d.as_ref()
    }

    /// Runs only the (2D or inflated) encoder on a prepared tensor and
    /// returns its final features, averaged over time for the inflated case.
    pub fn encode_tensor(&mut self, x: &Tensor) -> Result<Tensor> {
        if let Some(enc) = self.encoder3d.as_mut() {
            let (_, f) = enc.forward(x, false, false)?;
            return Ok(mean_over_time(&f));
        }
        let enc = self.encoders.first_mut().ok_or_else(|| ModelError::InvalidConfig("no encoder".into()))?;
        Ok(enc.forward(x, false, false)?.1)
    }
}

impl HasParams for ModelGraph {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(s) = &self.stem {
            s.visit_params(f);
        }
        for e in &self.encoders {
            e.visit_params(f);
        }
        if let Some(e) = &self.encoder3d {
            e.visit_params(f);
        }
        if let Some(d) = &self.nihss {
            d.visit_params(f);
        }
        for c in &self.bottleneck {
            c.visit_params(f);
        }
        for (u, c) in self.ups.iter().zip(&self.decoder) {
            u.visit_params(f);
            c.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(s) = &mut self.stem {
            s.visit_params_mut(f);
        }
        for e in &mut self.encoders {
            e.visit_params_mut(f);
        }
        if let Some(e) = &mut self.encoder3d {
            e.visit_params_mut(f);
        }
        if let Some(d) = &mut self.nihss {
            d.visit_params_mut(f);
        }
        for c in &mut self.bottleneck {
            c.visit_params_mut(f);
        }
        for (u, c) in self.ups.iter_mut().zip(&mut self.decoder) {
            u.visit_params_mut(f);
            c.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub val_loss: f64,
    pub epoch: usize,
}

/// Rebuilds a model from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, CheckpointMeta)> {
    if !path.is_file() {
        return Err(ModelError::Checkpoint(format!("{} not found", path.display())));
    }
    let archive = load_archive(path)?;
    let get = |k: &str| {
        archive
            .metadata
            .get(k)
            .ok_or_else(|| ModelError::Checkpoint(format!("metadata `{k}` missing")))
    };
    let config: ModelConfig =
        serde_json::from_str(get("model_config")?).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let stage = match get("freeze_stage")?.as_str() {
        "AllFrozen" => FreezeStage::AllFrozen,
        "BottomHalfUnfrozen" => FreezeStage::BottomHalfUnfrozen,
        "AllUnfrozen" => FreezeStage::AllUnfrozen,
        other => return Err(ModelError::Checkpoint(format!("unknown freeze stage `{other}`"))),
    };
    let val_loss = get("val_loss")?.parse().map_err(|e| ModelError::Checkpoint(format!("val_loss: {e}")))?;
    let epoch = get("epoch")?.parse().map_err(|e| ModelError::Checkpoint(format!("epoch: {e}")))?;
    let mut model = build_model(&config)?;
    model.set_weights(&archive.arrays)?;
    model.set_freeze_stage(stage);
    Ok((model, CheckpointMeta { val_loss, epoch }))
}
