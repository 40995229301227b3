//! Segmentation backbone and the feature taps that make it usable as a
//! frozen feature extractor.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{OptimizerConfig, ParamInfo, ParamStore, Rmsprop, Tape, Tensor, Var};
use crate::patch::{extract_patch, sample_patch_starts};
use crate::real::Real;
use crate::rng;
use crate::unet::{level_widths, DecoderMode, Norm, UNet, UNetLayout};
use crate::volume::{LabelVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub channel_growth: f64,
    pub norm: Norm,
    pub out_labels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            base_channels: 8,
            depth: 3,
            channel_growth: 2.0,
            norm: Norm::Instance,
            out_labels: 2,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.base_channels < 4 || self.out_labels < 2 || self.in_channels < 1 {
            return Err(Error::InvalidConfig(format!(
                "segmenter needs depth >= 2, base_channels >= 4, out_labels >= 2 (got {self:?})"
            )));
        }
        if !(self.channel_growth.is_finite() && self.channel_growth > 0.0) {
            return Err(Error::InvalidConfig(
                "channel_growth must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub(crate) fn layout(&self, out: usize, decoder: DecoderMode) -> UNetLayout {
        UNetLayout {
            in_channels: self.in_channels,
            out_channels: out,
            widths: level_widths(self.base_channels, self.depth, self.channel_growth),
            norm: self.norm,
            decoder,
        }
    }
}

/// Which block outputs feed the feature loss. Taps are always taken after
/// the block's ReLU. Ids are `block1 ..= block{2*depth-1}` in execution
/// order; `include_prefinal` appends the map that enters the final 1×1×1
/// convolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureTapConfig {
    pub tap_ids: Vec<String>,
    pub include_prefinal: bool,
}

impl Default for FeatureTapConfig {
    fn default() -> Self {
        FeatureTapConfig::default_for_depth(3)
    }
}

impl FeatureTapConfig {
    /// Every encoder and decoder block except the last, plus the pre-final map.
    pub fn default_for_depth(depth: usize) -> Self {
        FeatureTapConfig {
            tap_ids: (1..2 * depth - 1).map(|i| format!("block{i}")).collect(),
            include_prefinal: true,
        }
    }

    pub fn single(id: &str) -> Self {
        FeatureTapConfig {
            tap_ids: vec![id.to_string()],
            include_prefinal: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tap_ids.len() + self.include_prefinal as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 0-based block indices, in output order.
    pub(crate) fn resolve(&self, blocks: usize) -> Result<Vec<usize>> {
        if self.tap_ids.is_empty() && !self.include_prefinal {
            return Err(Error::InvalidConfig("feature tap list is empty".into()));
        }
        let mut out = Vec::with_capacity(self.len());
        for id in &self.tap_ids {
            let k = id
                .strip_prefix("block")
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&k| k >= 1 && k <= blocks)
                .ok_or_else(|| Error::UnknownTapId(id.clone()))?;
            out.push(k - 1);
        }
        if self.include_prefinal {
            out.push(blocks - 1);
        }
        Ok(out)
    }
}

/// Provenance of trained weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub dataset_hash: String,
    pub seed: u64,
    pub epoch: usize,
}

/// Serializable weights + config + provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint<C> {
    pub config: C,
    pub param_info: Vec<ParamInfo>,
    #[serde(skip)]
    pub weights: Vec<f32>,
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<T: Real = f32> {
    config: UNetConfig,
    net: UNet,
    params: ParamStore<T>,
    frozen: bool,
}

/// Builds a segmenter with seeded He initialisation.
pub fn build_segmenter<T: Real>(cfg: &UNetConfig, seed: u64) -> Result<SegModel<T>> {
    cfg.validate()?;
    let net = UNet::new(cfg.layout(cfg.out_labels, DecoderMode::Transposed));
    let params = net.init(seed);
    Ok(SegModel {
        config: cfg.clone(),
        net,
        params,
        frozen: false,
    })
}

/// Marks the model immutable; idempotent.
pub fn freeze<T: Real>(mut model: SegModel<T>) -> SegModel<T> {
    model.frozen = true;
    model
}

impl<T: Real> SegModel<T> {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn block_count(&self) -> usize {
        self.net.block_count()
    }

    /// `(channels, downsampling factor)` of 0-based block `i`.
    pub fn block_geometry(&self, i: usize) -> (usize, usize) {
        self.net.block_geometry(i)
    }

    pub fn params_mut(&mut self) -> Result<&mut ParamStore<T>> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn cast<U: Real>(&self) -> SegModel<U> {
        SegModel {
            config: self.config.clone(),
            net: self.net.clone(),
            params: self.params.cast(),
            frozen: self.frozen,
        }
    }

    pub(crate) fn bind(&self, tape: &mut Tape<T>, train: bool) -> Vec<Var> {
        self.params.bind(tape, train && !self.frozen)
    }

    /// Block outputs for the requested taps, computed on `tape`.
    pub fn tap(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        x: Var,
        taps: &FeatureTapConfig,
    ) -> Result<Vec<Var>> {
        let idx = taps.resolve(self.net.block_count())?;
        let upto = idx.iter().copied().max().unwrap_or(0);
        let pass = self.net.forward(tape, bound, x, Some(upto))?;
        Ok(idx.iter().map(|&i| pass.blocks[i]).collect())
    }

    /// Raw class scores for a `(N, in_channels, D, H, W)` batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let pass = self.net.forward(&mut tape, &bound, xv, None)?;
        Ok(tape.value(pass.output.expect("full pass")).clone())
    }

    /// Applies the final 1×1×1 convolution to a pre-final feature map.
    pub fn head(&self, prefinal: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(prefinal.clone());
        let out = self.net.head(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }

    /// Arg-max segmentation of a whole volume. Axes that are not a multiple
    /// of the network's size multiple are edge-padded and cropped back.
    pub fn segment(&self, v: &Volume) -> Result<LabelVolume> {
        let m = self.config.size_multiple();
        let shape = v.shape();
        let padded: [usize; 3] = core::array::from_fn(|a| shape[a].div_ceil(m) * m);
        let mut data = Vec::with_capacity(padded.iter().product());
        for z in 0..padded[0] {
            for y in 0..padded[1] {
                for x in 0..padded[2] {
                    data.push(v.get(
                        z.min(shape[0] - 1),
                        y.min(shape[1] - 1),
                        x.min(shape[2] - 1),
                    ));
                }
            }
        }
        let logits = self.predict(&Tensor::from_volume(padded, &data)?)?;
        let full = logits.argmax_channels().pop().expect("batch of one");
        let labels = extract_patch(&full, padded, [0, 0, 0], shape);
        let names: BTreeMap<u32, String> = (1..self.config.out_labels as u32)
            .map(|k| (k, format!("label{k}")))
            .collect();
        LabelVolume::new(labels, shape, *v.geometry(), names)
    }

    pub fn checkpoint(&self, fingerprint: Fingerprint) -> ModelCheckpoint<UNetConfig> {
        ModelCheckpoint {
            config: self.config.clone(),
            param_info: self.params.info(),
            weights: self
                .params
                .flatten()
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect(),
            fingerprint,
        }
    }

    /// Rebuilds an (unfrozen) model, validating every parameter shape.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint<UNetConfig>) -> Result<Self> {
        let mut model = build_segmenter::<T>(&ckpt.config, 0)?;
        load_weights(&mut model.params, ckpt)?;
        Ok(model)
    }
}

pub(crate) fn load_weights<T: Real, C>(
    params: &mut ParamStore<T>,
    ckpt: &ModelCheckpoint<C>,
) -> Result<()> {
    let expected = params.info();
    if expected != ckpt.param_info {
        return Err(Error::CheckpointMismatch(format!(
            "parameter layout differs ({} tensors expected, {} stored)",
            expected.len(),
            ckpt.param_info.len()
        )));
    }
    let flat: Vec<T> = ckpt.weights.iter().map(|&v| T::of(v as f64)).collect();
    if !params.load_flat(&flat) {
        return Err(Error::CheckpointMismatch(format!(
            "weight blob holds {} values, model needs {}",
            ckpt.weights.len(),
            params.count()
        )));
    }
    Ok(())
}

/// Ordered post-ReLU feature maps of a frozen model for input `x`.
pub fn extract_features<T: Real>(
    model: &SegModel<T>,
    x: &Tensor<T>,
    taps: &FeatureTapConfig,
) -> Result<Vec<Tensor<T>>> {
    if !model.is_frozen() {
        return Err(Error::ExtractorNotFrozen);
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let maps = model.tap(&mut tape, &bound, xv, taps)?;
    Ok(maps.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Anything that maps an input on a tape to a list of feature maps.
pub trait FeatureExtractor<T: Real> {
    fn is_frozen(&self) -> bool;
    fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>>;
}

/// A frozen segmenter restricted to a tap set.
pub struct TappedSegmenter<'a, T: Real> {
    pub model: &'a SegModel<T>,
    pub taps: &'a FeatureTapConfig,
}

impl<T: Real> FeatureExtractor<T> for TappedSegmenter<'_, T> {
    fn is_frozen(&self) -> bool {
        self.model.is_frozen()
    }

    fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let bound = self.model.bind(tape, false);
        self.model.tap(tape, &bound, x, self.taps)
    }
}

/// Degenerate extractor returning its input as the single feature map.
pub struct IdentityExtractor;

impl<T: Real> FeatureExtractor<T> for IdentityExtractor {
    fn is_frozen(&self) -> bool {
        true
    }

    fn features(&self, _tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        Ok(vec![x])
    }
}

/// One training/validation image with its labels (already mapped to
/// `0..out_labels`).
#[derive(Debug, Clone)]
pub struct SegCase {
    pub image: Volume,
    pub labels: LabelVolume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainOptions {
    pub epochs: usize,
    pub patches_per_case: usize,
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub fg_bias: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for SegTrainOptions {
    fn default() -> Self {
        SegTrainOptions {
            epochs: 30,
            patches_per_case: 2,
            patch_size: [32; 3],
            batch_size: 2,
            fg_bias: 0.67,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean foreground Dice on the validation cases (NaN without validation data).
    pub val_dice: f64,
}

#[derive(Debug, Clone)]
pub struct SegTraining {
    pub model: SegModel<f32>,
    pub checkpoint: ModelCheckpoint<UNetConfig>,
    pub curve: Vec<SegEpochLog>,
}

/// Short SHA-256 over every voxel and label of the cases, in order.
pub fn dataset_hash<'a>(
    volumes: impl IntoIterator<Item = (&'a [f32], Option<&'a [u32]>)>,
) -> String {
    let mut h = Sha256::new();
    for (data, labels) in volumes {
        for v in data {
            h.update(v.to_le_bytes());
        }
        if let Some(l) = labels {
            for v in l {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex16(&h.finalize())
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    use core::fmt::Write;
    let mut s = String::with_capacity(32);
    for b in bytes.iter().take(16) {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn mean_dice(pred: &LabelVolume, truth: &LabelVolume, out_labels: usize) -> f64 {
    let mut total = 0.0;
    for k in 1..out_labels as u32 {
        total += crate::metrics::dice(pred, truth, k).unwrap_or(0.0);
    }
    total / (out_labels - 1) as f64
}

/// Optimises cross-entropy + soft Dice on sampled patches and returns the
/// checkpoint with the best mean validation Dice (the last epoch when no
/// validation cases are given).
pub fn train_segmentation(
    mut model: SegModel<f32>,
    train: &[SegCase],
    val: &[SegCase],
    opts: &SegTrainOptions,
) -> Result<SegTraining> {
    if model.is_frozen() {
        return Err(Error::Frozen);
    }
    let out_labels = model.config.out_labels;
    for case in train.iter().chain(val) {
        if let Some(&bad) = case
            .labels
            .labels()
            .iter()
            .find(|&&l| l as usize >= out_labels)
        {
            return Err(Error::LabelOutOfRange {
                label: bad,
                out_labels,
            });
        }
        if case.labels.shape() != case.image.shape() {
            return Err(Error::Misaligned("image and labels differ in shape".into()));
        }
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    model.net.check_input([
        1,
        model.config.in_channels,
        opts.patch_size[0],
        opts.patch_size[1],
        opts.patch_size[2],
    ])?;
    let hash = dataset_hash(
        train
            .iter()
            .map(|c| (c.image.data(), Some(c.labels.labels()))),
    );
    let mut opt = Rmsprop::new(opts.optimizer);
    let mut curve = Vec::new();
    let mut best: (f64, ParamStore<f32>, usize) = (f64::NEG_INFINITY, model.params.clone(), 0);
    let mut r = rng::seeded(rng::derive_seed(opts.seed, 0x5E6));
    for epoch in 1..=opts.epochs {
        let mut samples = Vec::new();
        for (ci, case) in train.iter().enumerate() {
            let starts = sample_patch_starts(
                case.image.shape(),
                Some(case.labels.labels()),
                opts.patch_size,
                opts.patches_per_case,
                rng::derive_seed(opts.seed, ((epoch as u64) << 32) | ci as u64),
                opts.fg_bias,
            )?;
            samples.extend(starts.into_iter().map(|s| (ci, s)));
        }
        samples.shuffle(&mut r);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in samples.chunks(opts.batch_size) {
            let images: Vec<Vec<f32>> = batch
                .iter()
                .map(|&(ci, s)| {
                    extract_patch(
                        train[ci].image.data(),
                        train[ci].image.shape(),
                        s,
                        opts.patch_size,
                    )
                })
                .collect();
            let labels: Vec<u32> = batch
                .iter()
                .flat_map(|&(ci, s)| {
                    extract_patch(
                        train[ci].labels.labels(),
                        train[ci].labels.shape(),
                        s,
                        opts.patch_size,
                    )
                })
                .collect();
            let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
            let x = Tensor::<f32>::stack_volumes(opts.patch_size, &refs)?;
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let xv = tape.constant(x);
            let pass = model.net.forward(&mut tape, &bound, xv, None)?;
            let loss = tape.segmentation_loss(pass.output.expect("full pass"), &labels)?;
            let value = tape.value(loss).item_value() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("segmentation loss became {value} after {batches} batches"),
                });
            }
            let mut grads = tape.backward(loss);
            let g = model.params.collect_grads(&mut grads, &bound);
            opt.step(&mut model.params, &g);
            loss_sum += value;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val_dice = if val.is_empty() {
            f64::NAN
        } else {
            let mut s = 0.0;
            for case in val {
                s += mean_dice(&model.segment(&case.image)?, &case.labels, out_labels);
            }
            s / val.len() as f64
        };
        curve.push(SegEpochLog {
            epoch,
            train_loss,
            val_dice,
        });
        let score = if val.is_empty() {
            epoch as f64
        } else {
            val_dice
        };
        if score > best.0 {
            best = (score, model.params.clone(), epoch);
        }
    }
    model.params = best.1;
    let checkpoint = model.checkpoint(Fingerprint {
        dataset_hash: hash,
        seed: opts.seed,
        epoch: best.2,
    });
    Ok(SegTraining {
        model,
        checkpoint,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_taps_mirror_seven_layer_layout() {
        let t = FeatureTapConfig::default_for_depth(4);
        assert_eq!(t.len(), 7);
        assert_eq!(t.resolve(7).unwrap(), [0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn unknown_tap_is_rejected() {
        let t = FeatureTapConfig::single("block9");
        assert_eq!(t.resolve(5), Err(Error::UnknownTapId("block9".into())));
        assert!(FeatureTapConfig::single("enc1").resolve(5).is_err());
    }

    #[test]
    fn config_guards() {
        let bad = UNetConfig {
            depth: 1,
            ..Default::default()
        };
        assert!(build_segmenter::<f32>(&bad, 0).is_err());
        let bad = UNetConfig {
            base_channels: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
