//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A fresh [`Tape`] is built for every forward pass. Nodes are appended in
//! execution order, so the reverse sweep in [`Tape::backward`] is a plain
//! descending loop. Nodes that do not depend on any leaf created with
//! `requires_grad = true` are skipped during the sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// How an elementwise distance is collapsed to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Upsample2 {
        x: Var,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// (mean, 1/std) per (batch, channel)
        stats: Vec<(T, T)>,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Concat {
        a: Var,
        b: Var,
    },
    /// Scalar whose partial derivatives w.r.t. its inputs were computed
    /// during the forward pass.
    Fused {
        partials: Vec<(Var, Tensor<T>)>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients of a scalar root w.r.t. every leaf that requested them.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Copy of `v`'s value with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// 3D convolution with a cubic kernel, weight `(cout, cin, k, k, k)`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::ShapeMismatch(format!(
                "conv weight {ws:?} for input {xs:?}"
            )));
        }
        let geom = ConvGeom::new(xs[1], ws[0], ws[2], stride, pad, [xs[2], xs[3], xs[4]])
            .ok_or_else(|| {
                Error::ShapeMismatch(format!("kernel {} larger than padded input {xs:?}", ws[2]))
            })?;
        let [od, oh, ow] = geom.output;
        let mut out = Tensor::zeros([xs[0], ws[0], od, oh, ow]);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for n in 0..xs[0] {
                kernels::conv3d_forward(xv.item(n), wv, bv, &geom, out.item_mut(n));
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, needs))
    }

    /// Kernel-2, stride-2 transposed convolution, weight `(cin, cout, 2, 2, 2)`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if ws[0] != xs[1] || ws[2..] != [2, 2, 2] {
            return Err(Error::ShapeMismatch(format!(
                "transposed weight {ws:?} for input {xs:?}"
            )));
        }
        let cout = ws[1];
        let sp = [xs[2], xs[3], xs[4]];
        let mut out = Tensor::zeros([xs[0], cout, 2 * sp[0], 2 * sp[1], 2 * sp[2]]);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for n in 0..xs[0] {
                kernels::conv_transpose2_forward(
                    xv.item(n),
                    wv,
                    bv,
                    xs[1],
                    cout,
                    sp,
                    out.item_mut(n),
                );
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::ConvTranspose2 { x, w, b }, needs))
    }

    /// Nearest-neighbour upsampling by 2 along every spatial axis.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [nb, c, d, h, w] = xv.shape();
        let mut out = Tensor::zeros([nb, c, 2 * d, 2 * h, 2 * w]);
        let src = xv.data();
        let dst = out.data_mut();
        let (oh, ow) = (2 * h, 2 * w);
        for nc in 0..nb * c {
            let s = &src[nc * d * h * w..(nc + 1) * d * h * w];
            let o = &mut dst[nc * 8 * d * h * w..(nc + 1) * 8 * d * h * w];
            for z in 0..2 * d {
                for y in 0..oh {
                    let srow = ((z / 2) * h + y / 2) * w;
                    let orow = (z * oh + y) * ow;
                    for xx in 0..ow {
                        o[orow + xx] = s[srow + xx / 2];
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample2 { x }, needs)
    }

    /// Per-instance, per-channel normalization with affine `(C,1,1,1,1)` scale/shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let [nb, c, ..] = xv.shape();
        let v = xv.voxels();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = Tensor::zeros(xv.shape());
        let mut stats = Vec::with_capacity(nb * c);
        let eps = T::of(eps);
        let inv_n = T::one() / T::of(v as f64);
        for n in 0..nb {
            for ch in 0..c {
                let off = (n * c + ch) * v;
                let src = &xv.data()[off..off + v];
                let mean = src.iter().copied().sum::<T>() * inv_n;
                let var = src.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() * inv_n;
                let inv = T::one() / (var + eps).sqrt();
                let dst = &mut out.data_mut()[off..off + v];
                for (o, &a) in dst.iter_mut().zip(src) {
                    *o = g[ch] * (a - mean) * inv + be[ch];
                }
                stats.push((mean, inv));
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::of(slope);
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v *= slope;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope }, needs)
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch(format!("concat {sa:?} with {sb:?}")));
        }
        let mut out = Tensor::zeros([sa[0], sa[1] + sb[1], sa[2], sa[3], sa[4]]);
        for n in 0..sa[0] {
            let (ia, ib) = (av.item(n), bv.item(n));
            let o = out.item_mut(n);
            o[..ia.len()].copy_from_slice(ia);
            o[ia.len()..].copy_from_slice(ib);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    /// Scalar `reduce(|a - b|)`.
    pub fn l1(&mut self, a: Var, b: Var, reduction: Reduction) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "l1")?;
        let scale = match reduction {
            Reduction::Mean => T::one() / T::of(av.numel() as f64),
            Reduction::Sum => T::one(),
        };
        // f64 accumulation keeps the value independent of tensor precision quirks.
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y).abs().as_f64())
            .sum();
        let value = T::of(total) * scale;
        let sign = |x: T, y: T| {
            if x > y {
                scale
            } else if x < y {
                -scale
            } else {
                T::zero()
            }
        };
        let mut partials = Vec::new();
        if self.needs(a) {
            let g: Vec<T> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| sign(x, y))
                .collect();
            partials.push((a, Tensor::from_vec(av.shape(), g)?));
        }
        if self.needs(b) {
            let g: Vec<T> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| sign(y, x))
                .collect();
            partials.push((b, Tensor::from_vec(av.shape(), g)?));
        }
        let needs = !partials.is_empty();
        Ok(self.push(Tensor::scalar(value), Op::Fused { partials }, needs))
    }

    /// Scalar mean of all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.numel() as f64;
        let value = T::of(xv.data().iter().map(|v| v.as_f64()).sum::<f64>() / n);
        let mut partials = Vec::new();
        if self.needs(x) {
            partials.push((x, Tensor::full(xv.shape(), T::of(1.0 / n))));
        }
        let needs = !partials.is_empty();
        self.push(Tensor::scalar(value), Op::Fused { partials }, needs)
    }

    /// Scalar `mean(relu(margin - sign * x))`, the hinge penalty on scores.
    pub fn hinge(&mut self, x: Var, sign: f64, margin: f64) -> Var {
        let xv = self.value(x);
        let n = xv.numel() as f64;
        let (s, m) = (T::of(sign), T::of(margin));
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(xv.numel());
        for &v in xv.data() {
            let h = m - s * v;
            if h > T::zero() {
                total += h.as_f64();
                grad.push(-s * T::of(1.0 / n));
            } else {
                grad.push(T::zero());
            }
        }
        let mut partials = Vec::new();
        if self.needs(x) {
            partials.push((x, Tensor::from_vec(xv.shape(), grad).expect("same size")));
        }
        let needs = !partials.is_empty();
        self.push(
            Tensor::scalar(T::of(total / n)),
            Op::Fused { partials },
            needs,
        )
    }

    /// Softmax cross-entropy plus soft Dice (foreground classes) against
    /// integer labels laid out as `(batch, z, y, x)`.
    pub fn segmentation_loss(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let lv = self.value(logits);
        let [nb, c, ..] = lv.shape();
        let v = lv.voxels();
        if labels.len() != nb * v {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for logits {:?}",
                labels.len(),
                lv.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                out_labels: c,
            });
        }
        let m = (nb * v) as f64;
        let mut probs = vec![0.0f64; nb * c * v];
        let mut ce = 0.0f64;
        for n in 0..nb {
            let item = lv.item(n);
            for i in 0..v {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(item[ch * v + i].as_f64());
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = libm::exp(item[ch * v + i].as_f64() - mx);
                    probs[(n * c + ch) * v + i] = e;
                    z += e;
                }
                for ch in 0..c {
                    probs[(n * c + ch) * v + i] /= z;
                }
                let t = labels[n * v + i] as usize;
                ce -= libm::log(probs[(n * c + t) * v + i].max(1e-300));
            }
        }
        ce /= m;
        // soft Dice over classes 1..c, pooled across the batch
        let smooth = 1e-5;
        let fg = (c - 1).max(1) as f64;
        let mut dice_sum = 0.0;
        let mut dprob = vec![0.0f64; nb * c * v];
        for ch in 1..c {
            let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
            for n in 0..nb {
                for i in 0..v {
                    let p = probs[(n * c + ch) * v + i];
                    let g = (labels[n * v + i] as usize == ch) as u8 as f64;
                    inter += p * g;
                    psum += p;
                    gsum += g;
                }
            }
            let num = 2.0 * inter + smooth;
            let den = psum + gsum + smooth;
            dice_sum += num / den;
            // d(1 - mean dice)/dp = -(1/fg) * (2g*den - num) / den^2
            for n in 0..nb {
                for i in 0..v {
                    let g = (labels[n * v + i] as usize == ch) as u8 as f64;
                    dprob[(n * c + ch) * v + i] = -(2.0 * g * den - num) / (den * den) / fg;
                }
            }
        }
        let dice_loss = if c > 1 { 1.0 - dice_sum / fg } else { 0.0 };
        let value = ce + dice_loss;
        let mut partials = Vec::new();
        if self.needs(logits) {
            let mut grad = vec![T::zero(); nb * c * v];
            for n in 0..nb {
                for i in 0..v {
                    let t = labels[n * v + i] as usize;
                    let mut dot = 0.0;
                    for ch in 0..c {
                        let idx = (n * c + ch) * v + i;
                        dot += probs[idx] * dprob[idx];
                    }
                    for ch in 0..c {
                        let idx = (n * c + ch) * v + i;
                        let p = probs[idx];
                        let d_ce = (p - (ch == t) as u8 as f64) / m;
                        let d_dice = p * (dprob[idx] - dot);
                        grad[idx] = T::of(d_ce + d_dice);
                    }
                }
            }
            partials.push((logits, Tensor::from_vec(lv.shape(), grad)?));
        }
        let needs = !partials.is_empty();
        Ok(self.push(Tensor::scalar(T::of(value)), Op::Fused { partials }, needs))
    }

    /// `sum_k w_k * s_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "weighted_sum term {:?} is not scalar",
                    t.shape()
                )));
            }
            total += w * t.item_value().as_f64();
        }
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, w)| (v, T::of(w))).collect();
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor::scalar(T::of(total)),
            Op::WeightedSum { terms },
            needs,
        ))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every leaf
    /// that requires them (intermediate gradients are dropped as soon as
    /// they have been propagated).
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        if !self.needs(root) {
            return Grads { grads };
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> &'a mut Tensor<T> {
        let shape = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let nb = xv.batch();
                let mut dw = self.needs(*w).then(|| Tensor::zeros(wv.shape()));
                let mut dx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                for n in 0..nb {
                    kernels::conv3d_backward(
                        xv.item(n),
                        wv.data(),
                        g.item(n),
                        geom,
                        dw.as_mut().map(|t| t.data_mut()),
                        dx.as_mut().map(|t| t.item_mut(n)),
                    );
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let vout: usize = geom.output.iter().product();
                    let db = self.slot(grads, b);
                    for n in 0..nb {
                        let item = g.item(n);
                        for (c, d) in db.data_mut().iter_mut().enumerate() {
                            *d += item[c * vout..(c + 1) * vout].iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConvTranspose2 { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let [nb, cin, d, h, wd] = xv.shape();
                let cout = wv.shape()[1];
                let mut dw = self.needs(*w).then(|| Tensor::zeros(wv.shape()));
                let mut dx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                for n in 0..nb {
                    kernels::conv_transpose2_backward(
                        xv.item(n),
                        wv.data(),
                        g.item(n),
                        cin,
                        cout,
                        [d, h, wd],
                        dw.as_mut().map(|t| t.data_mut()),
                        dx.as_mut().map(|t| t.item_mut(n)),
                    );
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let vout = g.voxels();
                    let db = self.slot(grads, b);
                    for n in 0..nb {
                        let item = g.item(n);
                        for (c, dd) in db.data_mut().iter_mut().enumerate() {
                            *dd += item[c * vout..(c + 1) * vout].iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Upsample2 { x } => {
                let [nb, c, d, h, w] = self.value(*x).shape();
                let mut dx = Tensor::zeros([nb, c, d, h, w]);
                let (oh, ow) = (2 * h, 2 * w);
                let gd = g.data();
                let dd = dx.data_mut();
                for nc in 0..nb * c {
                    let o = &gd[nc * 8 * d * h * w..(nc + 1) * 8 * d * h * w];
                    let s = &mut dd[nc * d * h * w..(nc + 1) * d * h * w];
                    for z in 0..2 * d {
                        for y in 0..oh {
                            let srow = ((z / 2) * h + y / 2) * w;
                            let orow = (z * oh + y) * ow;
                            for xx in 0..ow {
                                s[srow + xx / 2] += o[orow + xx];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xv = self.value(*x);
                let [nb, c, ..] = xv.shape();
                let v = xv.voxels();
                let gam = self.value(*gamma).data();
                let inv_n = T::one() / T::of(v as f64);
                let mut dx = self.needs(*x).then(|| Tensor::zeros(xv.shape()));
                let mut dgam = alloc::vec![T::zero(); c];
                let mut dbet = alloc::vec![T::zero(); c];
                for n in 0..nb {
                    for ch in 0..c {
                        let off = (n * c + ch) * v;
                        let (mean, inv) = stats[n * c + ch];
                        let src = &xv.data()[off..off + v];
                        let gy = &g.data()[off..off + v];
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for (&a, &dy) in src.iter().zip(gy) {
                            let xhat = (a - mean) * inv;
                            sum_g += dy;
                            sum_gx += dy * xhat;
                        }
                        dgam[ch] += sum_gx;
                        dbet[ch] += sum_g;
                        if let Some(dx) = dx.as_mut() {
                            let dst = &mut dx.data_mut()[off..off + v];
                            let k = gam[ch] * inv;
                            for ((o, &a), &dy) in dst.iter_mut().zip(src).zip(gy) {
                                let xhat = (a - mean) * inv;
                                *o = k * (dy - sum_g * inv_n - xhat * sum_gx * inv_n);
                            }
                        }
                    }
                }
                if self.needs(*gamma) {
                    let shape = self.value(*gamma).shape();
                    self.accumulate(
                        grads,
                        *gamma,
                        Tensor::from_vec(shape, dgam).expect("c values"),
                    );
                }
                if self.needs(*beta) {
                    let shape = self.value(*beta).shape();
                    self.accumulate(
                        grads,
                        *beta,
                        Tensor::from_vec(shape, dbet).expect("c values"),
                    );
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Relu { x } => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let mut dx = g.clone();
                for (d, &a) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if a < T::zero() {
                        *d *= *slope;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let la = sa[1..].iter().product::<usize>();
                if self.needs(*a) {
                    let mut da = Tensor::zeros(sa);
                    for n in 0..sa[0] {
                        da.item_mut(n).copy_from_slice(&g.item(n)[..la]);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(sb);
                    for n in 0..sb[0] {
                        db.item_mut(n).copy_from_slice(&g.item(n)[la..]);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Fused { partials } => {
                let s = g.item_value();
                for (v, p) in partials {
                    let dst = self.slot(grads, *v);
                    for (d, &pv) in dst.data_mut().iter_mut().zip(p.data()) {
                        *d += s * pv;
                    }
                }
            }
            Op::WeightedSum { terms } => {
                let s = g.item_value();
                for &(v, w) in terms {
                    if self.needs(v) {
                        self.accumulate(grads, v, Tensor::scalar(s * w));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: [usize; 5], seed: u64) -> Tensor<f64> {
        let mut r = crate::rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(input) for a small graph built by `f`.
    fn check_grad(shape: [usize; 5], f: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let x0 = rand_tensor(shape, 11);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let loss = f(&mut tape, x);
        let grads = tape.backward(loss);
        let g = grads.get(x).unwrap().clone();
        let eval = |t: Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(t, false);
            let l = f(&mut tape, x);
            tape.value(l).item_value()
        };
        let h = 1e-6;
        for i in (0..x0.numel()).step_by((x0.numel() / 12).max(1)) {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "index {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn conv_norm_relu_chain_gradient() {
        let w = rand_tensor([3, 2, 3, 3, 3], 1);
        let b = rand_tensor([3, 1, 1, 1, 1], 2);
        let gamma = rand_tensor([3, 1, 1, 1, 1], 3);
        let beta = rand_tensor([3, 1, 1, 1, 1], 4);
        let target = rand_tensor([2, 3, 2, 2, 3], 5);
        check_grad([2, 2, 4, 4, 6], |t, x| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            let c = t.conv3d(x, w, Some(b), 2, 1).unwrap();
            let ga = t.constant(gamma.clone());
            let be = t.constant(beta.clone());
            let n = t.instance_norm(c, ga, be, 1e-5);
            let r = t.leaky_relu(n, 0.2);
            let y = t.constant(target.clone());
            // squared-ish smooth loss via mean of hinge keeps kinks away from samples
            let d = t.l1(r, y, Reduction::Mean).unwrap();
            let m = t.mean(r);
            t.weighted_sum(&[(d, 1.0), (m, 0.5)]).unwrap()
        });
    }

    #[test]
    fn transposed_upsample_concat_gradient() {
        let w = rand_tensor([2, 3, 2, 2, 2], 6);
        let w2 = rand_tensor([2, 5, 3, 3, 3], 7);
        check_grad([1, 2, 2, 3, 2], |t, x| {
            let w = t.constant(w.clone());
            let a = t.conv_transpose2(x, w, None).unwrap();
            let u = t.upsample2(x);
            let u = t.relu(u);
            let c = t.concat(a, u).unwrap();
            let w2 = t.constant(w2.clone());
            let o = t.conv3d(c, w2, None, 1, 1).unwrap();
            t.hinge(o, 1.0, 0.3)
        });
    }

    #[test]
    fn segmentation_loss_gradient() {
        let labels: Vec<u32> = (0..2 * 27).map(|i| (i * 7 % 3) as u32).collect();
        check_grad([2, 3, 3, 3, 3], |t, x| {
            t.segmentation_loss(x, &labels).unwrap()
        });
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // gradient w.r.t. a conv weight leaf, checked the same way
        let x = rand_tensor([1, 2, 4, 4, 4], 8);
        let y = rand_tensor([1, 2, 4, 4, 4], 9);
        check_grad([2, 2, 3, 3, 3], |t, w| {
            let x = t.constant(x.clone());
            let c = t.conv3d(x, w, None, 1, 1).unwrap();
            let y = t.constant(y.clone());
            t.l1(c, y, Reduction::Sum).unwrap()
        });
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::zeros([1, 2, 1, 1, 2]), true);
        assert!(matches!(
            t.segmentation_loss(x, &[0, 2]),
            Err(Error::LabelOutOfRange {
                label: 2,
                out_labels: 2
            })
        ));
    }
}
