//! 3D U-Net shared by the segmentation backbone and the translator.
//!
//! Layout for `depth = d` with per-level widths `c_0 .. c_{d-1}`:
//!
//! * encoder block `l`: conv3 (stride 1 at level 0, stride 2 below) → norm →
//!   ReLU → conv3 → norm → ReLU
//! * decoder level `l` (from `d-2` down to 0): upsample `c_{l+1} → c_l`
//!   (stride-2 transposed conv, or nearest ×2 followed by conv3), concat with
//!   the encoder skip, then two conv3 → norm → ReLU
//! * head: 1×1×1 conv `c_0 → out`
//!
//! Conv blocks are numbered `block1 ..= block{2d-1}` in execution order; the
//! output of the last block is the map that feeds the head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, ParamStore, Tape, Tensor, Var};
use crate::real::Real;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Norm {
    #[default]
    Instance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DecoderMode {
    #[default]
    Transposed,
    UpsampleConv,
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct UNetLayout {
    pub in_channels: usize,
    pub out_channels: usize,
    pub widths: Vec<usize>,
    pub norm: Norm,
    pub decoder: DecoderMode,
}

pub(crate) fn level_widths(base: usize, depth: usize, growth: f64) -> Vec<usize> {
    (0..depth)
        .map(|l| (libm::round(base as f64 * libm::pow(growth, l as f64)) as usize).max(1))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvIdx {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct NormIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Unit {
    conv: ConvIdx,
    norm: Option<NormIdx>,
}

#[derive(Debug, Clone, PartialEq)]
enum Up {
    Transposed { w: usize, b: usize },
    UpsampleConv(ConvIdx),
}

/// Parameter index table plus the shapes needed to initialise them.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct UNet {
    layout: UNetLayout,
    encoder: Vec<[Unit; 2]>,
    ups: Vec<Up>,
    decoder: Vec<[Unit; 2]>,
    head: ConvIdx,
    shapes: Vec<(String, [usize; 5], Init)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    He { fan_in: usize },
    Zero,
    One,
}

/// Forward results: every block output (post-ReLU) in execution order and
/// the head output when requested.
pub(crate) struct UNetPass {
    pub blocks: Vec<Var>,
    pub output: Option<Var>,
}

impl UNet {
    pub fn new(layout: UNetLayout) -> Self {
        let mut net = UNet {
            layout: layout.clone(),
            encoder: Vec::new(),
            ups: Vec::new(),
            decoder: Vec::new(),
            head: ConvIdx {
                w: 0,
                b: 0,
                stride: 1,
                pad: 0,
            },
            shapes: Vec::new(),
        };
        let w = &layout.widths;
        let depth = w.len();
        for l in 0..depth {
            let cin = if l == 0 { layout.in_channels } else { w[l - 1] };
            let stride = if l == 0 { 1 } else { 2 };
            let a = net.unit(&format!("enc{l}.0"), cin, w[l], 3, stride, 1);
            let b = net.unit(&format!("enc{l}.1"), w[l], w[l], 3, 1, 1);
            net.encoder.push([a, b]);
        }
        for l in (0..depth.saturating_sub(1)).rev() {
            let up = match layout.decoder {
                DecoderMode::Transposed => {
                    let wi = net.param(
                        &format!("up{l}.weight"),
                        [w[l + 1], w[l], 2, 2, 2],
                        Init::He { fan_in: w[l + 1] },
                    );
                    let bi = net.param(&format!("up{l}.bias"), [w[l], 1, 1, 1, 1], Init::Zero);
                    Up::Transposed { w: wi, b: bi }
                }
                DecoderMode::UpsampleConv => {
                    Up::UpsampleConv(net.conv(&format!("up{l}"), w[l + 1], w[l], 3, 1, 1))
                }
            };
            net.ups.push(up);
            let a = net.unit(&format!("dec{l}.0"), 2 * w[l], w[l], 3, 1, 1);
            let b = net.unit(&format!("dec{l}.1"), w[l], w[l], 3, 1, 1);
            net.decoder.push([a, b]);
        }
        net.head = net.conv("head", w[0], layout.out_channels, 1, 1, 0);
        net
    }

    fn param(&mut self, name: &str, shape: [usize; 5], init: Init) -> usize {
        self.shapes.push((name.into(), shape, init));
        self.shapes.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvIdx {
        let w = self.param(
            &format!("{name}.weight"),
            [cout, cin, k, k, k],
            Init::He {
                fan_in: cin * k * k * k,
            },
        );
        let b = self.param(&format!("{name}.bias"), [cout, 1, 1, 1, 1], Init::Zero);
        ConvIdx { w, b, stride, pad }
    }

    fn unit(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Unit {
        let conv = self.conv(name, cin, cout, k, stride, pad);
        let norm = match self.layout.norm {
            Norm::Instance => Some(NormIdx {
                gamma: self.param(&format!("{name}.norm.gamma"), [cout, 1, 1, 1, 1], Init::One),
                beta: self.param(&format!("{name}.norm.beta"), [cout, 1, 1, 1, 1], Init::Zero),
            }),
            Norm::None => None,
        };
        Unit { conv, norm }
    }

    pub fn depth(&self) -> usize {
        self.layout.widths.len()
    }

    pub fn block_count(&self) -> usize {
        2 * self.depth() - 1
    }

    /// Channel width and downsampling factor of block `i` (0-based).
    pub fn block_geometry(&self, i: usize) -> (usize, usize) {
        let d = self.depth();
        let level = if i < d { i } else { 2 * d - 2 - i };
        (self.layout.widths[level], 1 << level)
    }

    /// Seeded He-normal initialisation (zero biases, unit norm scales).
    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut r = rng::seeded(seed);
        let params = self
            .shapes
            .iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = match init {
                    Init::He { fan_in } => {
                        let dist = Normal::new(0.0, libm::sqrt(2.0 / *fan_in as f64))
                            .expect("positive std");
                        (0..n).map(|_| T::of(dist.sample(&mut r))).collect()
                    }
                    Init::Zero => alloc::vec![T::zero(); n],
                    Init::One => alloc::vec![T::one(); n],
                };
                Param {
                    name: name.clone(),
                    tensor: Tensor::from_vec(*shape, data).expect("shape product"),
                }
            })
            .collect();
        ParamStore::new(params)
    }

    pub fn check_input(&self, shape: [usize; 5]) -> Result<()> {
        let sp = [shape[2], shape[3], shape[4]];
        if shape[1] != self.layout.in_channels {
            return Err(Error::ShapeIncompatible {
                shape: sp,
                reason: format!(
                    "expected {} input channels, got {}",
                    self.layout.in_channels, shape[1]
                ),
            });
        }
        let f = 1usize << (self.depth() - 1);
        if sp.iter().any(|&s| s == 0 || s % f != 0) {
            return Err(Error::ShapeIncompatible {
                shape: sp,
                reason: format!("every spatial axis must be a positive multiple of {f}"),
            });
        }
        Ok(())
    }

    fn apply_unit<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], u: &Unit, x: Var) -> Result<Var> {
        let c = tape.conv3d(x, p[u.conv.w], Some(p[u.conv.b]), u.conv.stride, u.conv.pad)?;
        let n = match u.norm {
            Some(n) => tape.instance_norm(c, p[n.gamma], p[n.beta], NORM_EPS),
            None => c,
        };
        Ok(tape.relu(n))
    }

    /// Runs the network on `x` (bound parameters in `p`). Stops after block
    /// `upto` (0-based) when given; the head only runs for a full pass.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        upto: Option<usize>,
    ) -> Result<UNetPass> {
        self.check_input(tape.value(x).shape())?;
        let last = upto
            .unwrap_or(self.block_count() - 1)
            .min(self.block_count() - 1);
        let mut blocks = Vec::with_capacity(last + 1);
        let mut skips = Vec::with_capacity(self.depth());
        let mut h = x;
        for units in &self.encoder {
            h = self.apply_unit(tape, p, &units[0], h)?;
            h = self.apply_unit(tape, p, &units[1], h)?;
            blocks.push(h);
            skips.push(h);
            if blocks.len() > last {
                return Ok(UNetPass {
                    blocks,
                    output: None,
                });
            }
        }
        skips.pop();
        for (up, units) in self.ups.iter().zip(&self.decoder) {
            let u = match up {
                Up::Transposed { w, b } => tape.conv_transpose2(h, p[*w], Some(p[*b]))?,
                Up::UpsampleConv(c) => {
                    let up = tape.upsample2(h);
                    tape.conv3d(up, p[c.w], Some(p[c.b]), c.stride, c.pad)?
                }
            };
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = tape.concat(u, skip)?;
            h = self.apply_unit(tape, p, &units[0], cat)?;
            h = self.apply_unit(tape, p, &units[1], h)?;
            blocks.push(h);
            if blocks.len() > last {
                break;
            }
        }
        let output = if upto.is_none() {
            Some(self.head(tape, p, h)?)
        } else {
            None
        };
        Ok(UNetPass { blocks, output })
    }

    /// The final 1×1×1 convolution applied to the last block's output.
    pub fn head<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], prefinal: Var) -> Result<Var> {
        tape.conv3d(prefinal, p[self.head.w], Some(p[self.head.b]), 1, 0)
    }
}
