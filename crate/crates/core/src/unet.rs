//! Encoder-decoder segmentation network with skip concatenations and
//! hand-written backward pass.
//!
//! Layout for `levels = L`: `L - 1` encoder stages of two same-padded 3x3
//! convolutions followed by 2x2 max pooling, a bottleneck of two 3x3
//! convolutions, `L - 1` decoder stages of a learned 2x2 stride-2
//! transposed convolution, concatenation `[skip, upsampled]` and two 3x3
//! convolutions, then a 1x1 convolution with a sigmoid. Every 3x3
//! convolution is followed by ReLU; the transposed convolutions are linear.
//!
//! Convolutions run as im2col followed by a matrix product. Samples of a
//! batch are processed independently and their gradients are reduced in
//! batch order, so results do not depend on thread scheduling.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Real, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    /// Resolution levels including the bottleneck, so `levels - 1` poolings.
    pub levels: usize,
    pub channel_cap: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl UNetConfig {
    /// Full-size network: 32 base channels, five levels, capped at 512.
    pub fn full() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_channels: 32,
            levels: 5,
            channel_cap: 512,
        }
    }

    /// Small network used for tests and the phantom experiments.
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            levels: 3,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.base_channels == 0
            || self.channel_cap == 0
        {
            return Err(Error::InvalidParam(
                "network channel counts must be positive".into(),
            ));
        }
        if !(1..=12).contains(&self.levels) {
            return Err(Error::InvalidParam(format!(
                "levels must be in 1..=12, got {}",
                self.levels
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.channel_cap)
    }

    /// Channel count at every level, top to bottleneck.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.channels(l)).collect()
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_spatial(&self, height: usize, width: usize) -> Result<()> {
        let divisor = self.divisor();
        if height == 0 || width == 0 || height % divisor != 0 || width % divisor != 0 {
            return Err(Error::Indivisible {
                height,
                width,
                divisor,
            });
        }
        Ok(())
    }

    /// Layers in parameter order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let l = self.levels;
        let mut specs = Vec::new();
        let mut push = |name: String, kind, cin, cout| {
            specs.push(LayerSpec {
                name,
                kind,
                cin,
                cout,
            })
        };
        let mut cin = self.in_channels;
        for lvl in 0..l - 1 {
            let c = self.channels(lvl);
            push(format!("enc{lvl}.conv1"), LayerKind::Conv3x3, cin, c);
            push(format!("enc{lvl}.conv2"), LayerKind::Conv3x3, c, c);
            cin = c;
        }
        let cb = self.channels(l - 1);
        push("bottleneck.conv1".into(), LayerKind::Conv3x3, cin, cb);
        push("bottleneck.conv2".into(), LayerKind::Conv3x3, cb, cb);
        let mut below = cb;
        for lvl in (0..l - 1).rev() {
            let c = self.channels(lvl);
            push(format!("dec{lvl}.up"), LayerKind::UpConv2x2, below, c);
            push(format!("dec{lvl}.conv1"), LayerKind::Conv3x3, 2 * c, c);
            push(format!("dec{lvl}.conv2"), LayerKind::Conv3x3, c, c);
            below = c;
        }
        push("head".into(), LayerKind::Conv1x1, below, self.out_channels);
        specs
    }

    /// 3x3 convolutions, transposed convolutions and the 1x1 head.
    pub fn conv_layer_count(&self) -> usize {
        self.layer_specs().len()
    }

    fn enc(&self, lvl: usize) -> usize {
        2 * lvl
    }

    fn bottleneck(&self) -> usize {
        2 * (self.levels - 1)
    }

    fn dec_up(&self, lvl: usize) -> usize {
        2 * self.levels + 3 * (self.levels - 2 - lvl)
    }

    fn head(&self) -> usize {
        2 * self.levels + 3 * (self.levels - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    /// Kernel stored `[cin, cout, 2, 2]`.
    UpConv2x2,
    Conv1x1,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::UpConv2x2 => "upconv2x2",
            LayerKind::Conv1x1 => "conv1x1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv3x3" => Some(LayerKind::Conv3x3),
            "upconv2x2" => Some(LayerKind::UpConv2x2),
            "conv1x1" => Some(LayerKind::Conv1x1),
            _ => None,
        }
    }

    fn taps(&self) -> usize {
        match self {
            LayerKind::Conv3x3 => 9,
            LayerKind::UpConv2x2 => 4,
            LayerKind::Conv1x1 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        self.cin * self.cout * self.kind.taps()
    }

    /// Inputs feeding one output value.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            // stride equals kernel size, so each output sees one tap per channel
            LayerKind::UpConv2x2 => self.cin,
            _ => self.cin * self.kind.taps(),
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv3x3 => vec![self.cout, self.cin, 3, 3],
            LayerKind::UpConv2x2 => vec![self.cin, self.cout, 2, 2],
            LayerKind::Conv1x1 => vec![self.cout, self.cin, 1, 1],
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.name,
            self.kind.as_str(),
            self.cin,
            self.cout
        )
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Network weights. Tensors are stored per layer as weight then bias.
#[derive(Clone, Debug)]
pub struct UNetParams<T> {
    cfg: UNetConfig,
    specs: Vec<LayerSpec>,
    tensors: Vec<Vec<T>>,
    // changes on every mutable access; ties caches to the weights they saw
    stamp: u64,
}

impl<T: Real> PartialEq for UNetParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.tensors == other.tensors
    }
}

impl<T: Real> UNetParams<T> {
    pub fn zeros(cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.layer_specs();
        let tensors = specs
            .iter()
            .flat_map(|s| [vec![T::zero(); s.weight_len()], vec![T::zero(); s.cout]])
            .collect();
        Ok(Self {
            cfg: *cfg,
            specs,
            tensors,
            stamp: fresh_stamp(),
        })
    }

    /// He-normal kernels, zero biases.
    pub fn init(cfg: &UNetConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        for (i, spec) in p.specs.iter().enumerate() {
            let std = (2.0 / spec.fan_in() as f64).sqrt();
            for w in p.tensors[2 * i].iter_mut() {
                *w = T::from_f64_lossy(std * rng.normal());
            }
        }
        Ok(p)
    }

    pub fn cfg(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<T>] {
        self.stamp = fresh_stamp();
        &mut self.tensors
    }

    pub fn weight(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer + 1]
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.concat()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(&[self.param_count()], &[values.len()]));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> UNetParams<U> {
        UNetParams {
            cfg: self.cfg,
            specs: self.specs.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect())
                .collect(),
            stamp: fresh_stamp(),
        }
    }
}

/// Parameter gradients in the same layout as [`UNetParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct UNetGrads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> UNetGrads<T> {
    fn zeros_like(p: &UNetParams<T>) -> Self {
        Self {
            tensors: p.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    fn accumulate(&mut self, other: &UNetGrads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.concat()
    }
}

#[derive(Clone, Debug)]
struct Act<T> {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Real> Act<T> {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Records of one sample's forward pass.
#[derive(Clone, Debug)]
struct SampleCache<T> {
    /// Input of every layer, indexed like the layer specs.
    inputs: Vec<Act<T>>,
    /// Output of every layer (after ReLU where one is applied).
    outputs: Vec<Act<T>>,
    /// Flat input index of the maximum for each pooled value, per level.
    argmax: Vec<Vec<u32>>,
}

/// Everything [`backward`] needs from the matching [`forward`] call.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    stamp: u64,
    shape: Vec<usize>,
    samples: Vec<SampleCache<T>>,
}

impl<T> ForwardCache<T> {
    /// Number of recorded layers per sample.
    pub fn entries_per_sample(&self) -> usize {
        self.samples.first().map_or(0, |s| s.inputs.len())
    }

    pub fn batch_shape(&self) -> &[usize] {
        &self.shape
    }
}

fn im2col3<T: Real>(x: &Act<T>) -> Vec<T> {
    let (h, w, hw) = (x.h, x.w, x.hw());
    let mut cols = vec![T::zero(); x.c * 9 * hw];
    for c in 0..x.c {
        let src = &x.data[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                let x_lo = usize::from(kx == 0);
                let x_hi = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    for xx in x_lo..x_hi {
                        row[y * w + xx] = src[sy * w + xx + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

fn col2im3<T: Real>(cols: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for ch in 0..c {
        let dst = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                let x_lo = usize::from(kx == 0);
                let x_hi = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    for xx in x_lo..x_hi {
                        let d = &mut dst[sy * w + xx + kx - 1];
                        *d = *d + row[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], hw: usize) {
    for (row, &b) in out.chunks_mut(hw).zip(bias) {
        for v in row {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Real>(db: &mut [T], dz: &[T], hw: usize) {
    for (g, row) in db.iter_mut().zip(dz.chunks(hw)) {
        *g = *g + row.iter().copied().sum::<T>();
    }
}

fn conv3_forward<T: Real>(spec: &LayerSpec, w: &[T], b: &[T], x: &Act<T>) -> Act<T> {
    let hw = x.hw();
    let cols = im2col3(x);
    let mut out = Act::zeros(spec.cout, x.h, x.w);
    T::gemm(
        false,
        false,
        spec.cout,
        hw,
        spec.cin * 9,
        T::one(),
        w,
        &cols,
        T::zero(),
        &mut out.data,
    );
    add_bias(&mut out.data, b, hw);
    for v in out.data.iter_mut() {
        *v = v.max(T::zero());
    }
    out
}

/// Returns the input gradient when `need_dx`.
fn conv3_backward<T: Real>(
    spec: &LayerSpec,
    w: &[T],
    x: &Act<T>,
    y: &Act<T>,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    let hw = x.hw();
    let dz: Vec<T> = dy
        .iter()
        .zip(&y.data)
        .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
        .collect();
    bias_grad(db, &dz, hw);
    let cols = im2col3(x);
    let k = spec.cin * 9;
    T::gemm(
        false,
        true,
        spec.cout,
        k,
        hw,
        T::one(),
        &dz,
        &cols,
        T::one(),
        dw,
    );
    if !need_dx {
        return Vec::new();
    }
    let mut dcols = vec![T::zero(); k * hw];
    T::gemm(
        true,
        false,
        k,
        hw,
        spec.cout,
        T::one(),
        w,
        &dz,
        T::zero(),
        &mut dcols,
    );
    col2im3(&dcols, spec.cin, x.h, x.w)
}

fn maxpool<T: Real>(x: &Act<T>) -> (Act<T>, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, h2, w2);
    let mut arg = vec![0u32; x.c * h2 * w2];
    for c in 0..x.c {
        for y in 0..h2 {
            for xx in 0..w2 {
                let base = c * x.hw() + 2 * y * x.w + 2 * xx;
                let mut best = base;
                // first maximum in raster order wins ties
                for idx in [base + 1, base + x.w, base + x.w + 1] {
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = (c * h2 + y) * w2 + xx;
                out.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

fn upconv_forward<T: Real>(spec: &LayerSpec, w: &[T], b: &[T], x: &Act<T>) -> Act<T> {
    let hw = x.hw();
    let k4 = spec.cout * 4;
    let mut z = vec![T::zero(); k4 * hw];
    T::gemm(
        true,
        false,
        k4,
        hw,
        spec.cin,
        T::one(),
        w,
        &x.data,
        T::zero(),
        &mut z,
    );
    let (h2, w2) = (2 * x.h, 2 * x.w);
    let mut out = Act::zeros(spec.cout, h2, w2);
    for co in 0..spec.cout {
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let row = &z[(co * 4 + d) * hw..][..hw];
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.data[(co * h2 + 2 * y + dy) * w2 + 2 * xx + dx] = row[y * x.w + xx] + b[co];
                }
            }
        }
    }
    out
}

fn upconv_backward<T: Real>(
    spec: &LayerSpec,
    w: &[T],
    x: &Act<T>,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let hw = x.hw();
    let (h2, w2) = (2 * x.h, 2 * x.w);
    bias_grad(db, dy, h2 * w2);
    let k4 = spec.cout * 4;
    let mut dz = vec![T::zero(); k4 * hw];
    for co in 0..spec.cout {
        for d in 0..4 {
            let (oy, ox) = (d / 2, d % 2);
            let row = &mut dz[(co * 4 + d) * hw..][..hw];
            for y in 0..x.h {
                for xx in 0..x.w {
                    row[y * x.w + xx] = dy[(co * h2 + 2 * y + oy) * w2 + 2 * xx + ox];
                }
            }
        }
    }
    T::gemm(
        false,
        true,
        spec.cin,
        k4,
        hw,
        T::one(),
        &x.data,
        &dz,
        T::one(),
        dw,
    );
    let mut dx = vec![T::zero(); spec.cin * hw];
    T::gemm(
        false,
        false,
        spec.cin,
        hw,
        k4,
        T::one(),
        w,
        &dz,
        T::zero(),
        &mut dx,
    );
    dx
}

fn head_forward<T: Real>(spec: &LayerSpec, w: &[T], b: &[T], x: &Act<T>) -> Act<T> {
    let hw = x.hw();
    let mut out = Act::zeros(spec.cout, x.h, x.w);
    T::gemm(
        false,
        false,
        spec.cout,
        hw,
        spec.cin,
        T::one(),
        w,
        &x.data,
        T::zero(),
        &mut out.data,
    );
    add_bias(&mut out.data, b, hw);
    for v in out.data.iter_mut() {
        *v = sigmoid(*v);
    }
    out
}

fn concat<T: Real>(a: &Act<T>, b: &Act<T>) -> Act<T> {
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Act {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

fn forward_sample<T: Real>(p: &UNetParams<T>, x: Act<T>, record: bool) -> (Act<T>, SampleCache<T>) {
    let cfg = &p.cfg;
    let l = cfg.levels;
    let mut cache = SampleCache {
        inputs: Vec::new(),
        outputs: Vec::new(),
        argmax: Vec::new(),
    };
    let run = |li: usize, x: Act<T>, cache: &mut SampleCache<T>| -> Act<T> {
        let spec = &p.specs[li];
        let (w, b) = (p.weight(li), p.bias(li));
        let y = match spec.kind {
            LayerKind::Conv3x3 => conv3_forward(spec, w, b, &x),
            LayerKind::UpConv2x2 => upconv_forward(spec, w, b, &x),
            LayerKind::Conv1x1 => head_forward(spec, w, b, &x),
        };
        if record {
            cache.inputs.push(x);
            cache.outputs.push(y.clone());
        }
        y
    };

    let mut skips = Vec::with_capacity(l - 1);
    let mut cur = x;
    for lvl in 0..l - 1 {
        let li = cfg.enc(lvl);
        cur = run(li, cur, &mut cache);
        cur = run(li + 1, cur, &mut cache);
        let (pooled, arg) = maxpool(&cur);
        skips.push(cur);
        if record {
            cache.argmax.push(arg);
        }
        cur = pooled;
    }
    let li = cfg.bottleneck();
    cur = run(li, cur, &mut cache);
    cur = run(li + 1, cur, &mut cache);
    for lvl in (0..l - 1).rev() {
        let li = cfg.dec_up(lvl);
        let up = run(li, cur, &mut cache);
        cur = concat(&skips[lvl], &up);
        cur = run(li + 1, cur, &mut cache);
        cur = run(li + 2, cur, &mut cache);
    }
    let probs = run(cfg.head(), cur, &mut cache);
    (probs, cache)
}

fn backward_sample<T: Real>(p: &UNetParams<T>, c: &SampleCache<T>, dprobs: &[T]) -> UNetGrads<T> {
    let cfg = &p.cfg;
    let l = cfg.levels;
    let mut g = UNetGrads::zeros_like(p);

    let head = cfg.head();
    let (x, probs) = (&c.inputs[head], &c.outputs[head]);
    let dz: Vec<T> = dprobs
        .iter()
        .zip(&probs.data)
        .map(|(&d, &s)| d * s * (T::one() - s))
        .collect();
    let spec = &p.specs[head];
    let hw = x.hw();
    {
        let (dw, rest) = g.tensors[2 * head..].split_at_mut(1);
        bias_grad(&mut rest[0], &dz, hw);
        T::gemm(
            false,
            true,
            spec.cout,
            spec.cin,
            hw,
            T::one(),
            &dz,
            &x.data,
            T::one(),
            &mut dw[0],
        );
    }
    let mut d = vec![T::zero(); spec.cin * hw];
    T::gemm(
        true,
        false,
        spec.cin,
        hw,
        spec.cout,
        T::one(),
        p.weight(head),
        &dz,
        T::zero(),
        &mut d,
    );

    let conv = |li: usize, dy: &[T], g: &mut UNetGrads<T>, need_dx: bool| -> Vec<T> {
        let (dw, rest) = g.tensors[2 * li..].split_at_mut(1);
        conv3_backward(
            &p.specs[li],
            p.weight(li),
            &c.inputs[li],
            &c.outputs[li],
            dy,
            &mut dw[0],
            &mut rest[0],
            need_dx,
        )
    };

    let mut dskips: Vec<Vec<T>> = vec![Vec::new(); l - 1];
    for lvl in 0..l - 1 {
        let li = cfg.dec_up(lvl);
        d = conv(li + 2, &d, &mut g, true);
        let dcat = conv(li + 1, &d, &mut g, true);
        let skip_len = c.inputs[li + 1].data.len() / 2;
        let (dskip, dup) = dcat.split_at(skip_len);
        dskips[lvl] = dskip.to_vec();
        let (dw, rest) = g.tensors[2 * li..].split_at_mut(1);
        d = upconv_backward(
            &p.specs[li],
            p.weight(li),
            &c.inputs[li],
            dup,
            &mut dw[0],
            &mut rest[0],
        );
    }
    let li = cfg.bottleneck();
    d = conv(li + 1, &d, &mut g, true);
    d = conv(li, &d, &mut g, l > 1);
    for lvl in (0..l - 1).rev() {
        let li = cfg.enc(lvl);
        let mut dlevel = std::mem::take(&mut dskips[lvl]);
        for (&idx, &v) in c.argmax[lvl].iter().zip(&d) {
            dlevel[idx as usize] = dlevel[idx as usize] + v;
        }
        d = conv(li + 1, &dlevel, &mut g, true);
        d = conv(li, &d, &mut g, lvl > 0);
    }
    g
}

fn split_batch<T: Real>(cfg: &UNetConfig, batch: &Tensor<T>) -> Result<Vec<Act<T>>> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != cfg.in_channels {
        return Err(Error::shape(&[0, cfg.in_channels, 0, 0], s));
    }
    cfg.check_spatial(s[2], s[3])?;
    let per = s[1] * s[2] * s[3];
    Ok(batch
        .data()
        .chunks(per)
        .map(|d| Act {
            c: s[1],
            h: s[2],
            w: s[3],
            data: d.to_vec(),
        })
        .collect())
}

fn run_batch<T: Real>(
    params: &UNetParams<T>,
    batch: &Tensor<T>,
    record: bool,
) -> Result<(Tensor<T>, Vec<SampleCache<T>>)> {
    let samples = split_batch(&params.cfg, batch)?;
    let results: Vec<(Act<T>, SampleCache<T>)> = samples
        .into_par_iter()
        .map(|x| forward_sample(params, x, record))
        .collect();
    let s = batch.shape();
    let mut data = Vec::with_capacity(s[0] * params.cfg.out_channels * s[2] * s[3]);
    let mut caches = Vec::with_capacity(results.len());
    for (out, cache) in results {
        data.extend_from_slice(&out.data);
        caches.push(cache);
    }
    let probs = Tensor::new(vec![s[0], params.cfg.out_channels, s[2], s[3]], data)?;
    Ok((probs, caches))
}

/// Probabilities `[N, out, H, W]` for a batch `[N, in, H, W]`, plus the
/// records needed for [`backward`].
pub fn forward<T: Real>(
    params: &UNetParams<T>,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let (probs, samples) = run_batch(params, batch, true)?;
    Ok((
        probs,
        ForwardCache {
            stamp: params.stamp,
            shape: batch.shape().to_vec(),
            samples,
        },
    ))
}

/// Forward pass without keeping intermediate activations.
pub fn predict<T: Real>(params: &UNetParams<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(run_batch(params, batch, false)?.0)
}

/// Gradients of every parameter given the gradient w.r.t. the
/// probabilities, summed over the batch.
pub fn backward<T: Real>(
    params: &UNetParams<T>,
    cache: &ForwardCache<T>,
    d_probs: &Tensor<T>,
) -> Result<UNetGrads<T>> {
    if cache.stamp != params.stamp {
        return Err(Error::StaleCache(
            "parameters changed since the forward pass".into(),
        ));
    }
    let s = &cache.shape;
    let expected = [s[0], params.cfg.out_channels, s[2], s[3]];
    if d_probs.shape() != expected {
        return Err(Error::shape(&expected, d_probs.shape()));
    }
    let per = d_probs.len() / s[0];
    let parts: Vec<UNetGrads<T>> = cache
        .samples
        .par_iter()
        .zip(d_probs.data().par_chunks(per))
        .map(|(c, d)| backward_sample(params, c, d))
        .collect();
    let mut total = UNetGrads::zeros_like(params);
    for part in &parts {
        total.accumulate(part);
    }
    Ok(total)
}

/// Settings stored alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    /// Preprocessing the network was trained on, in pipeline syntax.
    pub pipeline: String,
    pub threshold: f64,
}

const MAGIC: &str = "liverseg-unet 1";
const SEPARATOR: &[u8] = b"\n---\n";

/// Header lines, `---`, then every parameter as little-endian `f32`.
pub fn checkpoint_bytes<T: Real>(params: &UNetParams<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let c = &params.cfg;
    let mut head = format!(
        "{MAGIC}\nin_channels={}\nout_channels={}\nbase_channels={}\nlevels={}\nchannel_cap={}\npipeline={}\nthreshold={}\n",
        c.in_channels, c.out_channels, c.base_channels, c.levels, c.channel_cap, meta.pipeline, meta.threshold
    );
    for spec in &params.specs {
        head.push_str(&format!("layer={spec}\n"));
    }
    head.pop();
    let mut bytes = head.into_bytes();
    bytes.extend_from_slice(SEPARATOR);
    for v in params.tensors.iter().flatten() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    bytes
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    params: &UNetParams<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    fs::write(path, checkpoint_bytes(params, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(UNetParams<T>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path, msg);
    let split = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| bad("missing header separator".into()))?;
    let head =
        std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
    let body = &bytes[split + SEPARATOR.len()..];

    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a network checkpoint".into()));
    }
    let mut cfg = UNetConfig::desk();
    let mut meta = CheckpointMeta {
        pipeline: String::new(),
        threshold: 0.5,
    };
    let mut manifest = Vec::new();
    for line in lines {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
        let num = || {
            value
                .parse::<usize>()
                .map_err(|_| bad(format!("{key}: expected an integer, got {value:?}")))
        };
        match key {
            "in_channels" => cfg.in_channels = num()?,
            "out_channels" => cfg.out_channels = num()?,
            "base_channels" => cfg.base_channels = num()?,
            "levels" => cfg.levels = num()?,
            "channel_cap" => cfg.channel_cap = num()?,
            "pipeline" => meta.pipeline = value.to_string(),
            "threshold" => {
                meta.threshold = value
                    .parse()
                    .map_err(|_| bad(format!("threshold: expected a number, got {value:?}")))?
            }
            "layer" => manifest.push(value.to_string()),
            _ => return Err(bad(format!("unknown header key {key:?}"))),
        }
    }
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    let mut params = UNetParams::<T>::zeros(&cfg)?;
    let expected: Vec<String> = params.specs.iter().map(|s| s.to_string()).collect();
    if manifest != expected {
        return Err(bad("layer manifest does not match the configuration".into()));
    }
    let n = params.param_count();
    if body.len() != 4 * n {
        return Err(bad(format!(
            "expected {} parameter bytes, found {}",
            4 * n,
            body.len()
        )));
    }
    let values: Vec<T> = body
        .chunks_exact(4)
        .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("parameter in {}", path.display())));
    }
    params.set_flat(&values)?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let data = (0..n * h * w).map(|_| rng.uniform()).collect();
        Tensor::new(vec![n, 1, h, w], data).unwrap()
    }

    #[test]
    fn full_layer_count_and_channels() {
        let cfg = UNetConfig::full();
        assert_eq!(cfg.conv_layer_count(), 23);
        assert_eq!(cfg.encoder_channels(), vec![32, 64, 128, 256, 512]);
        let capped = UNetConfig { levels: 6, ..cfg };
        assert_eq!(*capped.encoder_channels().last().unwrap(), 512);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = UNetConfig::desk();
        let a = UNetParams::<f64>::init(&cfg, &mut Rng::new(3)).unwrap();
        let b = UNetParams::<f64>::init(&cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        for i in 0..a.specs().len() {
            assert!(a.bias(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn he_scale_matches_fan_in() {
        let cfg = UNetConfig::desk();
        let p = UNetParams::<f64>::init(&cfg, &mut Rng::new(11)).unwrap();
        // dec0.conv1: 16 -> 8 channels, 1152 weights, fan-in 144
        let li = p
            .specs()
            .iter()
            .position(|s| s.name == "dec0.conv1")
            .unwrap();
        let w = p.weight(li);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 144.0;
        assert!(
            (var / target - 1.0).abs() < 0.15,
            "variance {var} vs {target}"
        );
    }

    #[test]
    fn zero_network_outputs_half() {
        let p = UNetParams::<f64>::zeros(&UNetConfig::desk()).unwrap();
        let probs = predict(&p, &random_batch(2, 16, 16, 1)).unwrap();
        assert_eq!(probs.shape(), &[2, 1, 16, 16]);
        assert!(probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn desk_output_shape_and_range() {
        let p = UNetParams::<f32>::init(&UNetConfig::desk(), &mut Rng::new(0)).unwrap();
        let x: Tensor<f32> = random_batch(1, 64, 64, 2).cast();
        let probs = predict(&p, &x).unwrap();
        assert_eq!(probs.shape(), &[1, 1, 64, 64]);
        assert!(probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn indivisible_input_names_divisor() {
        let p = UNetParams::<f64>::zeros(&UNetConfig::desk()).unwrap();
        let err = predict(&p, &random_batch(1, 50, 50, 0)).unwrap_err();
        assert!(matches!(err, Error::Indivisible { divisor: 4, .. }));
        assert!(err.to_string().contains("divisible by 4"));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = UNetParams::<f64>::init(&UNetConfig::desk(), &mut Rng::new(0)).unwrap();
        let x = random_batch(1, 8, 8, 0);
        let (probs, cache) = forward(&p, &x).unwrap();
        p.tensors_mut()[0][0] += 1.0;
        let d = Tensor::zeros(probs.shape());
        assert!(matches!(
            backward(&p, &cache, &d),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn cache_has_one_entry_per_layer() {
        let cfg = UNetConfig::desk();
        let p = UNetParams::<f64>::zeros(&cfg).unwrap();
        let (_, cache) = forward(&p, &random_batch(2, 8, 8, 0)).unwrap();
        assert_eq!(cache.entries_per_sample(), cfg.conv_layer_count());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = UNetParams::<f64>::init(&UNetConfig::desk(), &mut Rng::new(5)).unwrap();
        let x = random_batch(2, 8, 8, 5);
        let (probs, cache) = forward(&p, &x).unwrap();
        let g = backward(&p, &cache, &Tensor::zeros(probs.shape())).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_sample_doubles_gradient() {
        let p = UNetParams::<f64>::init(&UNetConfig::desk(), &mut Rng::new(6)).unwrap();
        let one = random_batch(1, 8, 8, 6);
        let two = Tensor::new(vec![2, 1, 8, 8], [one.data(), one.data()].concat()).unwrap();
        let grad_of = |x: &Tensor<f64>| {
            let (probs, cache) = forward(&p, x).unwrap();
            let d = probs.map(|v| v - 0.3);
            backward(&p, &cache, &d).unwrap().flatten()
        };
        let g1 = grad_of(&one);
        let g2 = grad_of(&two);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn levels_one_is_a_plain_conv_stack() {
        let cfg = UNetConfig {
            levels: 1,
            ..UNetConfig::desk()
        };
        assert_eq!(cfg.conv_layer_count(), 3);
        let p = UNetParams::<f64>::init(&cfg, &mut Rng::new(1)).unwrap();
        let probs = predict(&p, &random_batch(1, 5, 7, 1)).unwrap();
        assert_eq!(probs.shape(), &[1, 1, 5, 7]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = UNetParams::<f32>::init(&UNetConfig::desk(), &mut Rng::new(9)).unwrap();
        let meta = CheckpointMeta {
            pipeline: "hu(-100,400)|median(3)|zscore".into(),
            threshold: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &p, &meta).unwrap();
        let (q, m) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta, m);
        assert_eq!(checkpoint_bytes(&q, &m), fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let p = UNetParams::<f32>::zeros(&UNetConfig::desk()).unwrap();
        let meta = CheckpointMeta {
            pipeline: String::new(),
            threshold: 0.5,
        };
        let mut bytes = checkpoint_bytes(&p, &meta);
        bytes.truncate(bytes.len() - 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Format { .. })
        ));
    }

    // Output-sum objective; exercises every layer without the loss module.
    #[test]
    fn gradient_matches_finite_differences_on_every_parameter() {
        let p = UNetParams::<f64>::init(&UNetConfig::desk(), &mut Rng::new(21)).unwrap();
        let x = random_batch(1, 8, 8, 21);
        let weights: Vec<f64> = (0..64)
            .map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4)
            .collect();
        let objective = |probs: &Tensor<f64>| -> f64 {
            probs.data().iter().zip(&weights).map(|(p, w)| p * w).sum()
        };
        let (probs, cache) = forward(&p, &x).unwrap();
        let d = Tensor::from_f64(probs.shape(), &weights).unwrap();
        let analytic = backward(&p, &cache, &d).unwrap().flatten();

        let flat = Tensor::new(vec![p.param_count()], p.flatten()).unwrap();
        let mut probe = p.clone();
        let numeric = crate::numerics::finite_diff_grad(
            |theta| {
                probe.set_flat(theta.data()).unwrap();
                objective(&predict(&probe, &x).unwrap())
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let mut worst = 0.0f64;
        for (a, n) in analytic.iter().zip(numeric.data()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            worst = worst.max(rel);
        }

        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
