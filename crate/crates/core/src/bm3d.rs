//! Two-stage BM3D denoising of single slices.
//!
//! Both stages share the same skeleton: for every reference block on the
//! step grid, gather similar blocks into a stack, move the stack into the
//! separable 3D transform domain (orthonormal 2D DCT-II per block, then a
//! 1D Haar transform across the stack), shrink, transform back and
//! accumulate the block estimates with a per-stack weight. The first stage
//! shrinks by hard thresholding; the second uses the first stage's output
//! as a pilot for empirical Wiener shrinkage.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::preprocess::Image2D;

#[derive(Clone, Debug, PartialEq)]
pub struct Bm3dParams {
    /// Block edge length in pixels.
    pub block: usize,
    /// Spacing of reference and candidate positions.
    pub step: usize,
    pub search_radius: usize,
    /// Upper bound on stack depth; must be a power of two.
    pub max_matches: usize,
    /// Largest accepted mean squared per-pixel distance between blocks.
    pub match_threshold: f64,
    pub lambda_hard: f64,
    /// Noise standard deviation on the `[0, 1]` intensity scale.
    pub sigma: f64,
}

impl Default for Bm3dParams {
    fn default() -> Self {
        Self {
            block: 8,
            step: 3,
            search_radius: 16,
            max_matches: 16,
            // 2500 on the 0..255 scale
            match_threshold: 2500.0 / (255.0 * 255.0),
            lambda_hard: 2.7,
            sigma: 0.05,
        }
    }
}

impl Bm3dParams {
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || self.step == 0 || self.search_radius == 0 || self.max_matches == 0 {
            return Err(Error::InvalidParam(
                "bm3d block, step, radius and matches must be positive".into(),
            ));
        }
        if !self.max_matches.is_power_of_two() {
            return Err(Error::InvalidParam(format!(
                "bm3d matches must be a power of two, got {}",
                self.max_matches
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "bm3d sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.lambda_hard >= 0.0) || !(self.match_threshold >= 0.0) {
            return Err(Error::InvalidParam(
                "bm3d lambda and threshold must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Orthonormal DCT-II basis, row `k` holds frequency `k`.
#[derive(Clone, Debug)]
pub struct Dct2 {
    n: usize,
    basis: Vec<f64>,
}

impl Dct2 {
    pub fn new(n: usize) -> Self {
        let mut basis = vec![0.0; n * n];
        for k in 0..n {
            let alpha = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            for i in 0..n {
                basis[k * n + i] =
                    alpha * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
            }
        }
        Self { n, basis }
    }

    /// In-place `C X C^T` on an `n x n` block.
    pub fn forward(&self, block: &mut [f64]) {
        self.apply(block, false);
    }

    /// In-place `C^T X C`.
    pub fn inverse(&self, block: &mut [f64]) {
        self.apply(block, true);
    }

    fn apply(&self, block: &mut [f64], transpose: bool) {
        let n = self.n;
        let c = |k: usize, i: usize| {
            if transpose {
                self.basis[i * n + k]
            } else {
                self.basis[k * n + i]
            }
        };
        let mut tmp = vec![0.0; n * n];
        // rows
        for r in 0..n {
            for k in 0..n {
                tmp[r * n + k] = (0..n).map(|i| c(k, i) * block[r * n + i]).sum();
            }
        }
        // columns
        for col in 0..n {
            for k in 0..n {
                block[k * n + col] = (0..n).map(|i| c(k, i) * tmp[i * n + col]).sum();
            }
        }
    }
}

/// Full-depth orthonormal Haar transform; `x.len()` must be a power of two.
pub fn haar_forward(x: &mut [f64]) {
    let mut len = x.len();
    let mut tmp = vec![0.0; len];
    while len > 1 {
        let half = len / 2;
        for i in 0..half {
            tmp[i] = (x[2 * i] + x[2 * i + 1]) * std::f64::consts::FRAC_1_SQRT_2;
            tmp[half + i] = (x[2 * i] - x[2 * i + 1]) * std::f64::consts::FRAC_1_SQRT_2;
        }
        x[..len].copy_from_slice(&tmp[..len]);
        len = half;
    }
}

pub fn haar_inverse(x: &mut [f64]) {
    let n = x.len();
    let mut tmp = vec![0.0; n];
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for i in 0..half {
            let (a, d) = (x[i], x[half + i]);
            tmp[2 * i] = (a + d) * std::f64::consts::FRAC_1_SQRT_2;
            tmp[2 * i + 1] = (a - d) * std::f64::consts::FRAC_1_SQRT_2;
        }
        x[..len].copy_from_slice(&tmp[..len]);
        len *= 2;
    }
}

/// Reference and candidate coordinates along one axis, ending flush with the border.
pub fn grid_positions(extent: usize, block: usize, step: usize) -> Vec<usize> {
    let last = extent - block;
    let mut v: Vec<usize> = (0..=last).step_by(step).collect();
    if *v.last().unwrap() != last {
        v.push(last);
    }
    v
}

/// Group of similar blocks around one reference.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStack {
    pub reference: (usize, usize),
    /// Top-left corners, ascending by distance; the reference comes first.
    pub positions: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
    pub block: usize,
    /// `positions.len()` blocks of `block * block` values each.
    pub coeffs: Vec<f64>,
}

impl BlockStack {
    pub fn depth(&self) -> usize {
        self.positions.len()
    }
}

struct Workspace {
    block: usize,
    dct: Dct2,
    ys: Vec<usize>,
    xs: Vec<usize>,
}

impl Workspace {
    fn new(img: &Image2D, p: &Bm3dParams) -> Self {
        let block = p.block.min(img.height()).min(img.width());
        Self {
            block,
            dct: Dct2::new(block),
            ys: grid_positions(img.height(), block, p.step),
            xs: grid_positions(img.width(), block, p.step),
        }
    }
}

fn extract(img: &Image2D, (y, x): (usize, usize), b: usize, out: &mut [f64]) {
    for r in 0..b {
        let row = (y + r) * img.width() + x;
        out[r * b..(r + 1) * b].copy_from_slice(&img.data()[row..row + b]);
    }
}

fn block_distance(img: &Image2D, a: (usize, usize), c: (usize, usize), b: usize) -> f64 {
    let w = img.width();
    let d = img.data();
    let mut sum = 0.0;
    for r in 0..b {
        let ra = (a.0 + r) * w + a.1;
        let rc = (c.0 + r) * w + c.1;
        for i in 0..b {
            let diff = d[ra + i] - d[rc + i];
            sum += diff * diff;
        }
    }
    sum / (b * b) as f64
}

fn match_positions(
    img: &Image2D,
    reference: (usize, usize),
    ws: &Workspace,
    p: &Bm3dParams,
) -> (Vec<(usize, usize)>, Vec<f64>) {
    let r = p.search_radius;
    let near = |a: usize, b: usize| a.abs_diff(b) <= r;
    let mut found: Vec<(f64, usize, (usize, usize))> = Vec::new();
    for &y in ws.ys.iter().filter(|&&y| near(y, reference.0)) {
        for &x in ws.xs.iter().filter(|&&x| near(x, reference.1)) {
            let d = if (y, x) == reference {
                0.0
            } else {
                block_distance(img, reference, (y, x), ws.block)
            };
            if d <= p.match_threshold || (y, x) == reference {
                let dy = y.abs_diff(reference.0);
                let dx = x.abs_diff(reference.1);
                found.push((d, dy * dy + dx * dx, (y, x)));
            }
        }
    }
    // ties broken by spatial proximity, then raster order
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let count = found.len().min(p.max_matches).max(1);
    let keep = 1usize << (usize::BITS - 1 - count.leading_zeros());
    found.truncate(keep);
    found.into_iter().map(|(d, _, pos)| (pos, d)).unzip()
}

fn stack_coeffs(img: &Image2D, positions: &[(usize, usize)], ws: &Workspace) -> Vec<f64> {
    let b2 = ws.block * ws.block;
    let n = positions.len();
    let mut c = vec![0.0; b2 * n];
    for (k, &pos) in positions.iter().enumerate() {
        let blk = &mut c[k * b2..(k + 1) * b2];
        extract(img, pos, ws.block, blk);
        ws.dct.forward(blk);
    }
    let mut fiber = vec![0.0; n];
    for i in 0..b2 {
        for k in 0..n {
            fiber[k] = c[k * b2 + i];
        }
        haar_forward(&mut fiber);
        for k in 0..n {
            c[k * b2 + i] = fiber[k];
        }
    }
    c
}

fn invert_coeffs(c: &mut [f64], n: usize, ws: &Workspace) {
    let b2 = ws.block * ws.block;
    let mut fiber = vec![0.0; n];
    for i in 0..b2 {
        for k in 0..n {
            fiber[k] = c[k * b2 + i];
        }
        haar_inverse(&mut fiber);
        for k in 0..n {
            c[k * b2 + i] = fiber[k];
        }
    }
    for k in 0..n {
        ws.dct.inverse(&mut c[k * b2..(k + 1) * b2]);
    }
}

/// Gathers blocks similar to the one at `reference` and transforms the stack.
pub fn block_match(img: &Image2D, reference: (usize, usize), p: &Bm3dParams) -> Result<BlockStack> {
    p.validate()?;
    let ws = Workspace::new(img, p);
    if reference.0 + ws.block > img.height() || reference.1 + ws.block > img.width() {
        return Err(Error::InvalidParam(format!(
            "reference block at {reference:?} leaves the image"
        )));
    }
    let (positions, distances) = match_positions(img, reference, &ws, p);
    let coeffs = stack_coeffs(img, &positions, &ws);
    Ok(BlockStack {
        reference,
        positions,
        distances,
        block: ws.block,
        coeffs,
    })
}

struct Aggregator {
    width: usize,
    num: Vec<f64>,
    den: Vec<f64>,
}

impl Aggregator {
    fn new(img: &Image2D) -> Self {
        let n = img.data().len();
        Self {
            width: img.width(),
            num: vec![0.0; n],
            den: vec![0.0; n],
        }
    }

    fn add(&mut self, blocks: &[f64], positions: &[(usize, usize)], b: usize, weight: f64) {
        for (k, &(y, x)) in positions.iter().enumerate() {
            for r in 0..b {
                let row = (y + r) * self.width + x;
                for i in 0..b {
                    self.num[row + i] += weight * blocks[k * b * b + r * b + i];
                    self.den[row + i] += weight;
                }
            }
        }
    }

    fn finish(self, height: usize) -> Result<(Image2D, Vec<f64>)> {
        let data = self.num.iter().zip(&self.den).map(|(n, d)| n / d).collect();
        Ok((Image2D::new(height, self.width, data)?, self.den))
    }
}

fn check_unit(img: &Image2D) -> Result<()> {
    if !img.is_unit() {
        return Err(Error::InvalidParam("BM3D input must lie in [0,1]".into()));
    }
    Ok(())
}

/// First stage; also returns the accumulated weight per pixel.
pub fn hard_threshold_with_weights(img: &Image2D, p: &Bm3dParams) -> Result<(Image2D, Vec<f64>)> {
    p.validate()?;
    check_unit(img)?;
    let ws = Workspace::new(img, p);
    let b2 = ws.block * ws.block;
    let threshold = p.lambda_hard * p.sigma;
    let mut agg = Aggregator::new(img);
    for &y in &ws.ys {
        for &x in &ws.xs {
            let (positions, _) = match_positions(img, (y, x), &ws, p);
            let n = positions.len();
            let mut c = stack_coeffs(img, &positions, &ws);
            let mut retained = 0usize;
            for (idx, v) in c.iter_mut().enumerate() {
                // coefficient 0 of each block is its DC term
                if idx % b2 != 0 && v.abs() < threshold {
                    *v = 0.0;
                }
                if *v != 0.0 {
                    retained += 1;
                }
            }
            invert_coeffs(&mut c, n, &ws);
            agg.add(&c, &positions, ws.block, 1.0 / retained.max(1) as f64);
        }
    }
    agg.finish(img.height())
}

pub fn hard_threshold_stage(img: &Image2D, p: &Bm3dParams) -> Result<Image2D> {
    hard_threshold_with_weights(img, p).map(|(out, _)| out)
}

/// Second stage: grouping on `pilot`, Wiener shrinkage of `noisy`.
pub fn wiener_stage(noisy: &Image2D, pilot: &Image2D, p: &Bm3dParams) -> Result<Image2D> {
    p.validate()?;
    if (noisy.height(), noisy.width()) != (pilot.height(), pilot.width()) {
        return Err(Error::shape(
            &[noisy.height(), noisy.width()],
            &[pilot.height(), pilot.width()],
        ));
    }
    let ws = Workspace::new(noisy, p);
    let s2 = p.sigma * p.sigma;
    let mut agg = Aggregator::new(noisy);
    for &y in &ws.ys {
        for &x in &ws.xs {
            let (positions, _) = match_positions(pilot, (y, x), &ws, p);
            let n = positions.len();
            let pc = stack_coeffs(pilot, &positions, &ws);
            let mut nc = stack_coeffs(noisy, &positions, &ws);
            let mut energy = 0.0;
            for (v, &pv) in nc.iter_mut().zip(&pc) {
                let w = pv * pv / (pv * pv + s2);
                *v *= w;
                energy += w * w;
            }
            invert_coeffs(&mut nc, n, &ws);
            // an all-zero shrinkage stack counts as one unit coefficient
            let weight = 1.0 / (s2 * if energy > 0.0 { energy } else { 1.0 });
            agg.add(&nc, &positions, ws.block, weight);
        }
    }
    agg.finish(noisy.height()).map(|(out, _)| out)
}

/// Hard-threshold stage followed by the Wiener stage, clamped to `[0, 1]`.
pub fn bm3d_denoise(img: &Image2D, p: &Bm3dParams) -> Result<Image2D> {
    let pilot = hard_threshold_stage(img, p)?;
    let mut out = wiener_stage(img, &pilot, p)?;
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr(estimate: &Image2D, reference: &Image2D) -> f64 {
    let mse = estimate
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / reference.data().len() as f64;
    10.0 * (1.0 / mse).log10()
}
