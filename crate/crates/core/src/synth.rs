//! Translation network, its losses and the staged training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{OptimizerConfig, Param, ParamStore, Reduction, Rmsprop, Tape, Tensor, Var};
use crate::patch::{extract_patch, mean_blend, median_blend, sample_patch_starts, tile_volume};
use crate::real::Real;
use crate::rng;
use crate::segnet::{dataset_hash, load_weights, FeatureExtractor, Fingerprint, ModelCheckpoint};
use crate::unet::{level_widths, DecoderMode, Norm, UNet, UNetLayout};
use crate::volume::{Modality, Shape3, Volume, VolumePair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub channel_growth: f64,
    pub norm: Norm,
    pub out_channels: usize,
    pub decoder_mode: DecoderMode,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            in_channels: 1,
            base_channels: 8,
            depth: 3,
            channel_growth: 2.0,
            norm: Norm::Instance,
            out_channels: 1,
            decoder_mode: DecoderMode::Transposed,
        }
    }
}

impl TranslatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels != 1 {
            return Err(Error::InvalidConfig(format!(
                "translator has one output channel, got {}",
                self.out_channels
            )));
        }
        if self.depth < 2 || self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::InvalidConfig(format!(
                "translator needs depth >= 2 and positive widths (got {self:?})"
            )));
        }
        if !(self.channel_growth.is_finite() && self.channel_growth > 0.0) {
            return Err(Error::InvalidConfig(
                "channel_growth must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn layout(&self) -> UNetLayout {
        UNetLayout {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            widths: level_widths(self.base_channels, self.depth, self.channel_growth),
            norm: self.norm,
            decoder: self.decoder_mode,
        }
    }
}

/// U-Net translator with a linear single-channel head.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthModel<T: Real = f32> {
    config: TranslatorConfig,
    net: UNet,
    params: ParamStore<T>,
}

pub fn build_translator<T: Real>(cfg: &TranslatorConfig, seed: u64) -> Result<SynthModel<T>> {
    cfg.validate()?;
    let net = UNet::new(cfg.layout());
    let params = net.init(seed);
    Ok(SynthModel {
        config: cfg.clone(),
        net,
        params,
    })
}

impl<T: Real> SynthModel<T> {
    pub fn config(&self) -> &TranslatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Real>(&self) -> SynthModel<U> {
        SynthModel {
            config: self.config.clone(),
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_input(&self, shape: [usize; 5]) -> Result<()> {
        self.net.check_input(shape)
    }

    /// Forward pass with parameters previously bound on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Var> {
        Ok(self
            .net
            .forward(tape, bound, x, None)?
            .output
            .expect("full pass"))
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.bind(tape, requires_grad)
    }

    /// Inference on a `(N, 1, D, H, W)` batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn checkpoint(&self, fingerprint: Fingerprint) -> ModelCheckpoint<TranslatorConfig> {
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

    pub fn from_checkpoint(ckpt: &ModelCheckpoint<TranslatorConfig>) -> Result<Self> {
        let mut model = build_translator::<T>(&ckpt.config, 0)?;
        load_weights(&mut model.params, ckpt)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AfpReduction {
    #[default]
    MeanPerLayer,
    SumPerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_l1: f64,
    pub w_afp: f64,
    pub w_adv: f64,
    pub w_fm: f64,
    /// Per-tap weights; uniform when absent.
    pub afp_layer_weights: Option<Vec<f64>>,
    pub afp_reduction: AfpReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::l1()
    }
}

impl LossConfig {
    fn weights(w_l1: f64, w_afp: f64, w_adv: f64, w_fm: f64) -> Self {
        LossConfig {
            w_l1,
            w_afp,
            w_adv,
            w_fm,
            afp_layer_weights: None,
            afp_reduction: AfpReduction::MeanPerLayer,
        }
    }

    pub fn l1() -> Self {
        Self::weights(1.0, 0.0, 0.0, 0.0)
    }

    pub fn afp() -> Self {
        Self::weights(0.0, 1.0, 0.0, 0.0)
    }

    pub fn l1_plus_afp() -> Self {
        Self::weights(1.0, 1.0, 0.0, 0.0)
    }

    pub fn gan_afp() -> Self {
        Self::weights(0.0, 1.0, 0.1, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.w_l1, self.w_afp, self.w_adv, self.w_fm];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be >= 0 with at least one > 0, got {w:?}"
            )));
        }
        if let Some(lw) = &self.afp_layer_weights {
            if lw.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidConfig(
                    "afp_layer_weights must be finite and >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn uses_discriminator(&self) -> bool {
        self.w_adv > 0.0 || self.w_fm > 0.0
    }
}

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Feature maps of `y` computed on a private tape, i.e. without gradient.
fn reference_features<T: Real>(
    y: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut ref_tape = Tape::new();
    let yv = ref_tape.constant(y.clone());
    let maps = extractor.features(&mut ref_tape, yv)?;
    Ok(maps
        .into_iter()
        .map(|v| ref_tape.value(v).clone())
        .collect())
}

/// Adds the feature loss between `x` (on `tape`) and the reference `y` to
/// the tape: `(1/N) Σ_i w_i · reduce|φ_i(x) − φ_i(y)|`.
pub fn afp_term<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    y: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    check_same_shape(tape.value(x), y)?;
    if !extractor.is_frozen() {
        return Err(Error::ExtractorNotFrozen);
    }
    let reference = reference_features(y, extractor)?;
    let fx = extractor.features(tape, x)?;
    let n = fx.len();
    let layer_w: Vec<f64> = match &cfg.afp_layer_weights {
        Some(w) if w.len() != n => return Err(Error::LengthMismatch(n, w.len())),
        Some(w) => w.clone(),
        None => vec![1.0; n],
    };
    let reduction = match cfg.afp_reduction {
        AfpReduction::MeanPerLayer => Reduction::Mean,
        AfpReduction::SumPerLayer => Reduction::Sum,
    };
    let mut terms = Vec::with_capacity(n);
    for ((f, r), w) in fx.into_iter().zip(reference).zip(layer_w) {
        let rv = tape.constant(r);
        let d = tape.l1(f, rv, reduction)?;
        terms.push((d, w / n as f64));
    }
    tape.weighted_sum(&terms)
}

/// Value of the feature loss.
pub fn afp_loss<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let l = afp_term(&mut tape, xv, y, extractor, cfg)?;
    Ok(tape.value(l).item_value().as_f64())
}

/// Value and gradient with respect to `x` of the feature loss.
pub fn afp_loss_grad<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
    cfg: &LossConfig,
) -> Result<(f64, Tensor<T>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let l = afp_term(&mut tape, xv, y, extractor, cfg)?;
    let value = tape.value(l).item_value().as_f64();
    let mut grads = tape.backward(l);
    let g = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((value, g))
}

/// Mean absolute voxel difference.
pub fn l1_loss<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_same_shape(x, y)?;
    let n = x.numel().max(1) as f64;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum::<f64>()
        / n)
}

/// Hinge GAN objectives: `(loss_D, loss_G)`.
pub fn hinge_adv_losses<T: Real>(real: &Tensor<T>, fake: &Tensor<T>) -> (f64, f64) {
    let mean = |t: &Tensor<T>, f: &dyn Fn(f64) -> f64| {
        t.data().iter().map(|v| f(v.as_f64())).sum::<f64>() / t.numel().max(1) as f64
    };
    let d = mean(real, &|s| (1.0 - s).max(0.0)) + mean(fake, &|s| (1.0 + s).max(0.0));
    let g = -mean(fake, &|s| s);
    (d, g)
}

/// Mean over layers of the per-layer mean absolute difference.
pub fn feature_matching_loss<T: Real>(real: &[Tensor<T>], fake: &[Tensor<T>]) -> Result<f64> {
    if real.len() != fake.len() {
        return Err(Error::LengthMismatch(real.len(), fake.len()));
    }
    if real.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, f) in real.iter().zip(fake) {
        total += l1_loss(f, r)?;
    }
    Ok(total / real.len() as f64)
}

fn feature_matching_term<T: Real>(
    tape: &mut Tape<T>,
    real: Vec<Tensor<T>>,
    fake: &[Var],
) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::LengthMismatch(real.len(), fake.len()));
    }
    let n = fake.len() as f64;
    let mut terms = Vec::with_capacity(fake.len());
    for (r, &f) in real.into_iter().zip(fake) {
        let rv = tape.constant(r);
        terms.push((tape.l1(f, rv, Reduction::Mean)?, 1.0 / n));
    }
    tape.weighted_sum(&terms)
}

const DISC_WIDTHS: [usize; 3] = [8, 16, 32];
const DISC_SLOPE: f64 = 0.2;

/// Conditional single-scale patch discriminator: three stride-2 conv +
/// LeakyReLU levels followed by a conv to one score channel. Input is the
/// source stacked with a (real or synthesized) target.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Real = f32> {
    params: ParamStore<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut params = Vec::new();
        let mut cin = 2;
        let widths = DISC_WIDTHS.iter().copied().chain([1]);
        for (l, cout) in widths.enumerate() {
            let fan_in = cin * 27;
            let dist = Normal::new(0.0, libm::sqrt(2.0 / fan_in as f64)).expect("positive std");
            let w: Vec<T> = (0..cout * fan_in)
                .map(|_| T::of(dist.sample(&mut r)))
                .collect();
            params.push(Param {
                name: format!("disc{l}.weight"),
                tensor: Tensor::from_vec([cout, cin, 3, 3, 3], w).expect("shape product"),
            });
            params.push(Param {
                name: format!("disc{l}.bias"),
                tensor: Tensor::zeros([1, cout, 1, 1, 1]),
            });
            cin = cout;
        }
        Discriminator {
            params: ParamStore::new(params),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Intermediate activations and the score map.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<(Vec<Var>, Var)> {
        let mut h = x;
        let mut feats = Vec::with_capacity(DISC_WIDTHS.len());
        for l in 0..DISC_WIDTHS.len() {
            let c = tape.conv3d(h, bound[2 * l], Some(bound[2 * l + 1]), 2, 1)?;
            h = tape.leaky_relu(c, DISC_SLOPE);
            feats.push(h);
        }
        let l = DISC_WIDTHS.len();
        let scores = tape.conv3d(h, bound[2 * l], Some(bound[2 * l + 1]), 1, 1)?;
        Ok((feats, scores))
    }

    fn features_of(&self, x: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let (feats, _) = self.forward(&mut tape, &bound, xv)?;
        Ok(feats.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub loss: LossConfig,
    pub epochs: usize,
    pub lr: f64,
}

/// Training modes exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMode {
    L1,
    Afp,
    L1PlusAfp,
    L1ThenAfp,
    GanAfp,
}

impl TrainMode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "L1" => TrainMode::L1,
            "AFP" => TrainMode::Afp,
            "L1_PLUS_AFP" | "L1+AFP" => TrainMode::L1PlusAfp,
            "L1_THEN_AFP" | "L1->AFP" => TrainMode::L1ThenAfp,
            "GAN_AFP" => TrainMode::GanAfp,
            _ => return None,
        })
    }

    pub fn needs_extractor(self) -> bool {
        self != TrainMode::L1
    }
}

pub const STAGE1_LR: f64 = 1e-3;
pub const STAGE2_LR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub stage1: Option<Stage>,
    pub stage2: Stage,
    pub patch_size: Shape3,
    pub batch_size: usize,
    pub patches_per_case: usize,
    pub val_patches_per_case: usize,
    pub fg_bias: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan::for_mode(TrainMode::L1, 10, 10)
    }
}

impl TrainPlan {
    /// Single-stage modes train `stage1_epochs + stage2_epochs` epochs at the
    /// stage-1 rate; `L1_THEN_AFP` pretrains with L1 and fine-tunes with AFP
    /// at the smaller stage-2 rate.
    pub fn for_mode(mode: TrainMode, stage1_epochs: usize, stage2_epochs: usize) -> Self {
        let single = |loss: LossConfig| Stage {
            loss,
            epochs: stage1_epochs + stage2_epochs,
            lr: STAGE1_LR,
        };
        let (stage1, stage2) = match mode {
            TrainMode::L1 => (None, single(LossConfig::l1())),
            TrainMode::Afp => (None, single(LossConfig::afp())),
            TrainMode::L1PlusAfp => (None, single(LossConfig::l1_plus_afp())),
            TrainMode::GanAfp => (None, single(LossConfig::gan_afp())),
            TrainMode::L1ThenAfp => (
                Some(Stage {
                    loss: LossConfig::l1(),
                    epochs: stage1_epochs,
                    lr: STAGE1_LR,
                }),
                Stage {
                    loss: LossConfig::afp(),
                    epochs: stage2_epochs,
                    lr: STAGE2_LR,
                },
            ),
        };
        TrainPlan {
            stage1,
            stage2,
            patch_size: [32; 3],
            batch_size: 2,
            patches_per_case: 2,
            val_patches_per_case: 2,
            fg_bias: 0.67,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }

    pub fn stages(&self) -> impl Iterator<Item = &Stage> {
        self.stage1.iter().chain(core::iter::once(&self.stage2))
    }

    pub fn validate(&self, extractor_present: bool) -> Result<()> {
        if self.batch_size == 0 || self.patches_per_case == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and patches_per_case must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return Err(Error::InvalidConfig(format!(
                "fg_bias must lie in [0, 1], got {}",
                self.fg_bias
            )));
        }
        for s in self.stages() {
            s.loss.validate()?;
            if !(s.lr.is_finite() && s.lr > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "learning rate must be > 0, got {}",
                    s.lr
                )));
            }
            if s.loss.w_afp > 0.0 && !extractor_present {
                return Err(Error::ConfigConflict(
                    "w_afp > 0 requires a frozen feature extractor".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-epoch losses. Training columns are means over batches of the
/// unweighted components (0 for components outside the stage's objective);
/// `train_total` is the weighted objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    pub w_l1: f64,
    pub w_afp: f64,
    pub w_adv: f64,
    pub w_fm: f64,
    pub train_total: f64,
    pub train_l1: f64,
    pub train_afp: f64,
    pub train_adv: f64,
    pub train_fm: f64,
    pub train_disc: f64,
    /// `w_l1·l1 + w_afp·afp` on fixed validation patches (plain L1 when
    /// both weights are zero); NaN without validation data.
    pub val_total: f64,
    pub val_l1: f64,
    pub val_afp: f64,
}

#[derive(Debug, Clone)]
pub struct SynthTraining {
    pub model: SynthModel<f32>,
    pub checkpoint: ModelCheckpoint<TranslatorConfig>,
    /// Best stage-1 weights when the plan has two stages.
    pub stage1_checkpoint: Option<ModelCheckpoint<TranslatorConfig>>,
    pub log: Vec<EpochLog>,
}

#[derive(Default, Clone, Copy)]
struct Components {
    total: f64,
    l1: f64,
    afp: f64,
    adv: f64,
    fm: f64,
    disc: f64,
}

impl Components {
    fn add(&mut self, o: &Components) {
        self.total += o.total;
        self.l1 += o.l1;
        self.afp += o.afp;
        self.adv += o.adv;
        self.fm += o.fm;
        self.disc += o.disc;
    }

    fn scaled(&self, s: f64) -> Components {
        Components {
            total: self.total * s,
            l1: self.l1 * s,
            afp: self.afp * s,
            adv: self.adv * s,
            fm: self.fm * s,
            disc: self.disc * s,
        }
    }
}

fn stack_pair(source: &Tensor<f32>, target: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let a = tape.constant(source.clone());
    let b = tape.constant(target.clone());
    let c = tape.concat(a, b)?;
    Ok(tape.value(c).clone())
}

fn batch_tensors(
    cases: &[VolumePair],
    batch: &[(usize, [usize; 3])],
    patch: Shape3,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut src = Vec::with_capacity(batch.len());
    let mut tgt = Vec::with_capacity(batch.len());
    for &(ci, s) in batch {
        let c = &cases[ci];
        src.push(extract_patch(c.source.data(), c.shape(), s, patch));
        tgt.push(extract_patch(c.target.data(), c.shape(), s, patch));
    }
    let sr: Vec<&[f32]> = src.iter().map(Vec::as_slice).collect();
    let tr: Vec<&[f32]> = tgt.iter().map(Vec::as_slice).collect();
    Ok((
        Tensor::stack_volumes(patch, &sr)?,
        Tensor::stack_volumes(patch, &tr)?,
    ))
}

fn diverged(epoch: usize, what: &str, v: f64) -> Error {
    Error::Divergence {
        epoch,
        detail: format!("{what} became {v}"),
    }
}

struct Trainer<'a> {
    model: SynthModel<f32>,
    extractor: Option<&'a dyn FeatureExtractor<f32>>,
    disc: Option<(Discriminator<f32>, Rmsprop)>,
}

impl Trainer<'_> {
    fn generator_step(
        &mut self,
        opt: &mut Rmsprop,
        loss: &LossConfig,
        src: &Tensor<f32>,
        tgt: &Tensor<f32>,
        epoch: usize,
    ) -> Result<(Components, Tensor<f32>)> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let x = tape.constant(src.clone());
        let out = self.model.forward(&mut tape, &bound, x)?;
        let mut c = Components::default();
        let mut terms = Vec::new();
        if loss.w_l1 > 0.0 {
            let y = tape.constant(tgt.clone());
            let l = tape.l1(out, y, Reduction::Mean)?;
            c.l1 = tape.value(l).item_value() as f64;
            terms.push((l, loss.w_l1));
        }
        if loss.w_afp > 0.0 {
            let ext = self.extractor.expect("validated");
            let l = afp_term(&mut tape, out, tgt, ext, loss)?;
            c.afp = tape.value(l).item_value() as f64;
            terms.push((l, loss.w_afp));
        }
        if let Some((disc, _)) = &self.disc {
            let dbound = disc.params.bind(&mut tape, false);
            let cat = tape.concat(x, out)?;
            let (feats, scores) = disc.forward(&mut tape, &dbound, cat)?;
            if loss.w_adv > 0.0 {
                let m = tape.mean(scores);
                let g = tape.weighted_sum(&[(m, -1.0)])?;
                c.adv = tape.value(g).item_value() as f64;
                terms.push((g, loss.w_adv));
            }
            if loss.w_fm > 0.0 {
                let real = disc.features_of(stack_pair(src, tgt)?)?;
                let fm = feature_matching_term(&mut tape, real, &feats)?;
                c.fm = tape.value(fm).item_value() as f64;
                terms.push((fm, loss.w_fm));
            }
        }
        let total = tape.weighted_sum(&terms)?;
        c.total = tape.value(total).item_value() as f64;
        if !c.total.is_finite() {
            return Err(diverged(epoch, "generator loss", c.total));
        }
        let fake = tape.value(out).clone();
        let mut grads = tape.backward(total);
        let g = self.model.params.collect_grads(&mut grads, &bound);
        opt.step(&mut self.model.params, &g);
        Ok((c, fake))
    }

    fn discriminator_step(
        &mut self,
        src: &Tensor<f32>,
        tgt: &Tensor<f32>,
        fake: Tensor<f32>,
        epoch: usize,
    ) -> Result<f64> {
        let Some((disc, opt)) = &mut self.disc else {
            return Ok(0.0);
        };
        let mut tape = Tape::new();
        let bound = disc.params.bind(&mut tape, true);
        let real_in = tape.constant(stack_pair(src, tgt)?);
        let fake_in = tape.constant(stack_pair(src, &fake)?);
        let (_, s_real) = disc.forward(&mut tape, &bound, real_in)?;
        let (_, s_fake) = disc.forward(&mut tape, &bound, fake_in)?;
        let a = tape.hinge(s_real, 1.0, 1.0);
        let b = tape.hinge(s_fake, -1.0, 1.0);
        let loss = tape.weighted_sum(&[(a, 1.0), (b, 1.0)])?;
        let v = tape.value(loss).item_value() as f64;
        if !v.is_finite() {
            return Err(diverged(epoch, "discriminator loss", v));
        }
        let mut grads = tape.backward(loss);
        let g = disc.params.collect_grads(&mut grads, &bound);
        opt.step(&mut disc.params, &g);
        Ok(v)
    }

    fn validate(
        &self,
        loss: &LossConfig,
        val: &[(Tensor<f32>, Tensor<f32>)],
    ) -> Result<(f64, f64, f64)> {
        if val.is_empty() {
            return Ok((f64::NAN, f64::NAN, f64::NAN));
        }
        let (mut l1, mut afp) = (0.0, 0.0);
        for (src, tgt) in val {
            let out = self.model.predict(src)?;
            l1 += l1_loss(&out, tgt)?;
            if loss.w_afp > 0.0 {
                afp += afp_loss(&out, tgt, self.extractor.expect("validated"), loss)?;
            }
        }
        let n = val.len() as f64;
        let (l1, afp) = (l1 / n, afp / n);
        let total = if loss.w_l1 == 0.0 && loss.w_afp == 0.0 {
            l1
        } else {
            loss.w_l1 * l1 + loss.w_afp * afp
        };
        Ok((total, l1, if loss.w_afp > 0.0 { afp } else { f64::NAN }))
    }
}

/// Runs the plan's stages in order. Each stage keeps its own best
/// parameters by validation total (its last epoch without validation data);
/// the returned model is the best of the final stage, which starts from the
/// best of the previous one.
pub fn train_translation(
    model: SynthModel<f32>,
    train: &[VolumePair],
    val: &[VolumePair],
    plan: &TrainPlan,
    extractor: Option<&dyn FeatureExtractor<f32>>,
) -> Result<SynthTraining> {
    plan.validate(extractor.is_some())?;
    if let Some(e) = extractor {
        if plan.stages().any(|s| s.loss.w_afp > 0.0) && !e.is_frozen() {
            return Err(Error::ExtractorNotFrozen);
        }
    }
    if train.is_empty() {
        return Err(Error::InvalidConfig("no training cases".into()));
    }
    let p = plan.patch_size;
    model.check_input([1, model.config.in_channels, p[0], p[1], p[2]])?;
    let hash = dataset_hash(
        train
            .iter()
            .flat_map(|c| [(c.source.data(), None), (c.target.data(), None)]),
    );

    let mut val_batches = Vec::new();
    for (ci, case) in val.iter().enumerate() {
        let starts = sample_patch_starts(
            case.shape(),
            case.labels.as_ref().map(|l| l.labels()),
            p,
            plan.val_patches_per_case,
            rng::derive_seed(plan.seed, 0xA1_0000 + ci as u64),
            plan.fg_bias,
        )?;
        for s in starts {
            val_batches.push(batch_tensors(val, &[(ci, s)], p)?);
        }
    }

    let needs_disc = plan.stages().any(|s| s.loss.uses_discriminator());
    let mut trainer = Trainer {
        model,
        extractor,
        disc: needs_disc.then(|| {
            (
                Discriminator::new(rng::derive_seed(plan.seed, 0xD15C)),
                Rmsprop::new(OptimizerConfig { ..plan.optimizer }),
            )
        }),
    };
    let mut shuffle_rng = rng::seeded(rng::derive_seed(plan.seed, 0x5A7));
    let mut log = Vec::new();
    let mut stage1_checkpoint = None;
    let mut global_epoch = 0usize;
    let stages: Vec<&Stage> = plan.stages().collect();
    let mut best_ckpt = None;
    for (si, stage) in stages.iter().enumerate() {
        let stage_no = if plan.stage1.is_some() { si + 1 } else { 2 };
        let mut opt = Rmsprop::new(OptimizerConfig {
            lr: stage.lr,
            ..plan.optimizer
        });
        if let Some((_, dopt)) = &mut trainer.disc {
            dopt.set_lr(stage.lr);
        }
        let mut best: Option<(f64, ParamStore<f32>, usize)> = None;
        for _ in 0..stage.epochs {
            global_epoch += 1;
            let mut samples = Vec::new();
            for (ci, case) in train.iter().enumerate() {
                let starts = sample_patch_starts(
                    case.shape(),
                    case.labels.as_ref().map(|l| l.labels()),
                    p,
                    plan.patches_per_case,
                    rng::derive_seed(plan.seed, ((global_epoch as u64) << 32) | ci as u64),
                    plan.fg_bias,
                )?;
                samples.extend(starts.into_iter().map(|s| (ci, s)));
            }
            samples.shuffle(&mut shuffle_rng);
            let mut acc = Components::default();
            let mut batches = 0usize;
            for batch in samples.chunks(plan.batch_size) {
                let (src, tgt) = batch_tensors(train, batch, p)?;
                let (mut c, fake) =
                    trainer.generator_step(&mut opt, &stage.loss, &src, &tgt, global_epoch)?;
                if stage.loss.uses_discriminator() {
                    c.disc = trainer.discriminator_step(&src, &tgt, fake, global_epoch)?;
                }
                acc.add(&c);
                batches += 1;
            }
            let m = acc.scaled(1.0 / batches.max(1) as f64);
            let (val_total, val_l1, val_afp) = trainer.validate(&stage.loss, &val_batches)?;
            if val_total.is_nan() && !val_batches.is_empty() {
                return Err(diverged(global_epoch, "validation loss", val_total));
            }
            log.push(EpochLog {
                stage: stage_no,
                epoch: global_epoch,
                lr: stage.lr,
                w_l1: stage.loss.w_l1,
                w_afp: stage.loss.w_afp,
                w_adv: stage.loss.w_adv,
                w_fm: stage.loss.w_fm,
                train_total: m.total,
                train_l1: m.l1,
                train_afp: m.afp,
                train_adv: m.adv,
                train_fm: m.fm,
                train_disc: m.disc,
                val_total,
                val_l1,
                val_afp,
            });
            let score = if val_batches.is_empty() {
                -(global_epoch as f64)
            } else {
                val_total
            };
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, trainer.model.params.clone(), global_epoch));
            }
        }
        if let Some((_, params, epoch)) = best {
            trainer.model.params = params;
            let ckpt = trainer.model.checkpoint(Fingerprint {
                dataset_hash: hash.clone(),
                seed: plan.seed,
                epoch,
            });
            if si + 1 < stages.len() {
                stage1_checkpoint = Some(ckpt.clone());
            }
            best_ckpt = Some(ckpt);
        }
    }
    let checkpoint = best_ckpt.unwrap_or_else(|| {
        trainer.model.checkpoint(Fingerprint {
            dataset_hash: hash,
            seed: plan.seed,
            epoch: 0,
        })
    });
    Ok(SynthTraining {
        model: trainer.model,
        checkpoint,
        stage1_checkpoint,
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Blend {
    #[default]
    Median,
    Mean,
}

/// Sliding-window inference over a whole source volume.
pub fn synthesize_volume(
    model: &SynthModel<f32>,
    source: &Volume,
    patch: Shape3,
    tiling: f64,
    blend: Blend,
) -> Result<Volume> {
    model.check_input([1, model.config.in_channels, patch[0], patch[1], patch[2]])?;
    let grid = tile_volume(source.shape(), patch, tiling)?;
    let mut outputs = Vec::with_capacity(grid.len());
    for w in &grid.windows {
        let x = Tensor::from_volume(
            patch,
            &extract_patch(source.data(), source.shape(), w.start, patch),
        )?;
        outputs.push(model.predict(&x)?.into_data());
    }
    let data = match blend {
        Blend::Median => median_blend(&grid, &outputs)?,
        Blend::Mean => mean_blend(&grid, &outputs)?,
    };
    Ok(source.with_data(data)?.with_modality(Modality::SynthCt))
}

/// Dataset hash helper for callers that only hold volume pairs.
pub fn pairs_hash(pairs: &[VolumePair]) -> String {
    dataset_hash(
        pairs
            .iter()
            .flat_map(|c| [(c.source.data(), None), (c.target.data(), None)]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::IdentityExtractor;

    fn rand_tensor(seed: u64, shape: [usize; 5]) -> Tensor<f64> {
        use rand::Rng as _;
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_extractor_reduces_to_l1() {
        let x = rand_tensor(1, [1, 1, 8, 8, 8]);
        let y = rand_tensor(2, [1, 1, 8, 8, 8]);
        let afp = afp_loss(&x, &y, &IdentityExtractor, &LossConfig::afp()).unwrap();
        assert!((afp - l1_loss(&x, &y).unwrap()).abs() < 1e-12);
        assert_eq!(
            afp_loss(&x, &x, &IdentityExtractor, &LossConfig::afp()).unwrap(),
            0.0
        );
    }

    #[test]
    fn shape_mismatch() {
        let x = rand_tensor(1, [1, 1, 8, 8, 8]);
        let y = rand_tensor(2, [1, 1, 8, 8, 4]);
        assert!(matches!(
            afp_loss(&x, &y, &IdentityExtractor, &LossConfig::afp()),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(l1_loss(&x, &y), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn hinge_cases() {
        let ones = Tensor::<f64>::full([1, 1, 2, 2, 2], 1.0);
        let neg = Tensor::<f64>::full([1, 1, 2, 2, 2], -1.0);
        assert_eq!(hinge_adv_losses(&ones, &neg).0, 0.0);
        assert_eq!(
            hinge_adv_losses(&ones, &Tensor::zeros([1, 1, 2, 2, 2])).1,
            0.0
        );
    }

    #[test]
    fn fm_layers_average() {
        let z = Tensor::<f64>::zeros([1, 1, 2, 2, 2]);
        let a = Tensor::<f64>::full([1, 1, 2, 2, 2], 0.2);
        let b = Tensor::<f64>::full([1, 1, 2, 2, 2], 0.4);
        let v = feature_matching_loss(&[z.clone(), z.clone()], &[a, b]).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        assert_eq!(
            feature_matching_loss(core::slice::from_ref(&z), &[]),
            Err(Error::LengthMismatch(1, 0))
        );
    }

    #[test]
    fn translator_shapes() {
        for mode in [DecoderMode::Transposed, DecoderMode::UpsampleConv] {
            let cfg = TranslatorConfig {
                decoder_mode: mode,
                base_channels: 4,
                ..Default::default()
            };
            let m = build_translator::<f32>(&cfg, 0).unwrap();
            let out = m.predict(&Tensor::zeros([1, 1, 8, 8, 8])).unwrap();
            assert_eq!(out.shape(), [1, 1, 8, 8, 8]);
            assert!(matches!(
                m.predict(&Tensor::zeros([1, 1, 8, 8, 6])),
                Err(Error::ShapeIncompatible { .. })
            ));
        }
        let bad = TranslatorConfig {
            out_channels: 2,
            ..Default::default()
        };
        assert!(build_translator::<f32>(&bad, 0).is_err());
    }

    #[test]
    fn afp_needs_extractor() {
        let plan = TrainPlan::for_mode(TrainMode::Afp, 1, 1);
        assert!(matches!(
            plan.validate(false),
            Err(Error::ConfigConflict(_))
        ));
        assert!(TrainPlan::for_mode(TrainMode::L1, 1, 1)
            .validate(false)
            .is_ok());
    }
}
