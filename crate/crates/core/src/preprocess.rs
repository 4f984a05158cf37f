//! Slice and volume preprocessing: HU windowing, CLAHE, z-score
//! normalization, median filtering, and the ordered pipeline that chains
//! them (with BM3D from [`crate::bm3d`]).

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::bm3d::{bm3d_denoise, Bm3dParams};
use crate::error::{Error, Result};
use crate::volume_io::{Dims, HuVolume, Spacing};

pub const DEFAULT_HU_WINDOW: (f64, f64) = (-100.0, 400.0);

/// Value range a float volume is known to live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Raw Hounsfield units.
    Hu,
    /// Every value in `[0, 1]`.
    Unit,
    /// Zero mean, unit variance, unbounded.
    Zscored,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Hu => "hu",
            Domain::Unit => "unit",
            Domain::Zscored => "zscored",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hu" => Some(Domain::Hu),
            "unit" => Some(Domain::Unit),
            "zscored" => Some(Domain::Zscored),
            _ => None,
        }
    }
}

/// Single real-valued slice, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParam(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::shape(&[height, width], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixel".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_unit(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Rescales to `[0, 1]`; a constant image maps to zeros.
    pub fn min_max_normalized(&self) -> Image2D {
        Image2D {
            height: self.height,
            width: self.width,
            data: min_max(&self.data),
        }
    }
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    values
        .iter()
        .map(|&v| if range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect()
}

/// Stack of slices flowing through the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatVolume {
    dims: Dims,
    spacing: Spacing,
    voxels: Vec<f64>,
    domain: Domain,
}

impl FloatVolume {
    pub fn new(dims: Dims, spacing: Spacing, voxels: Vec<f64>, domain: Domain) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidParam(format!(
                "dims must be >= 1, got {dims:?}"
            )));
        }
        if voxels.len() != dims.len() {
            return Err(Error::shape(
                &[dims.depth, dims.height, dims.width],
                &[voxels.len()],
            ));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume voxel".into()));
        }
        if domain == Domain::Unit && voxels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParam(
                "unit-domain volume has values outside [0,1]".into(),
            ));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
            domain,
        })
    }

    pub fn from_hu(v: &HuVolume) -> Self {
        Self {
            dims: v.dims(),
            spacing: v.spacing(),
            voxels: v.voxels().iter().map(|&x| x as f64).collect(),
            domain: Domain::Hu,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn slice(&self, z: usize) -> Image2D {
        let n = self.dims.slice_len();
        Image2D {
            height: self.dims.height,
            width: self.dims.width,
            data: self.voxels[z * n..(z + 1) * n].to_vec(),
        }
    }

    fn with_voxels(&self, voxels: Vec<f64>, domain: Domain) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            voxels,
            domain,
        }
    }

    /// Applies `f` to every axial slice independently.
    pub fn map_slices(
        &self,
        domain: Domain,
        f: impl Fn(Image2D) -> Result<Image2D> + Sync,
    ) -> Result<Self> {
        let slices: Vec<Image2D> = (0..self.dims.depth)
            .into_par_iter()
            .map(|z| f(self.slice(z)))
            .collect::<Result<_>>()?;
        let voxels = slices.into_iter().flat_map(Image2D::into_data).collect();
        Ok(self.with_voxels(voxels, domain))
    }

    pub fn min_max_normalized(&self) -> Self {
        self.with_voxels(min_max(&self.voxels), Domain::Unit)
    }
}

/// Clamps to `[lo, hi]` and rescales linearly to `[0, 1]`.
pub fn hu_window(v: &FloatVolume, lo: f64, hi: f64) -> Result<FloatVolume> {
    if !(lo < hi) {
        return Err(Error::InvalidParam(format!(
            "HU window needs lo < hi, got [{lo}, {hi}]"
        )));
    }
    let span = hi - lo;
    let voxels = v
        .voxels
        .iter()
        .map(|&x| (x.clamp(lo, hi) - lo) / span)
        .collect();
    Ok(v.with_voxels(voxels, Domain::Unit))
}

pub fn hu_window_volume(v: &HuVolume, lo: f64, hi: f64) -> Result<FloatVolume> {
    hu_window(&FloatVolume::from_hu(v), lo, hi)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClaheParams {
    /// Clip limit as a multiple of the mean bin count of a tile.
    pub clip: f64,
    /// Number of tiles along y and x.
    pub grid: (usize, usize),
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            clip: 4.0,
            grid: (8, 8),
            bins: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "CLAHE clip must be positive, got {}",
                self.clip
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::InvalidParam(
                "CLAHE grid needs at least one tile per axis".into(),
            ));
        }
        if self.bins < 2 {
            return Err(Error::InvalidParam("CLAHE needs at least 2 bins".into()));
        }
        Ok(())
    }
}

/// Tile layout: `count` tiles of `size` pixels, the last one possibly cut short.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TileAxis {
    pub size: usize,
    pub count: usize,
}

impl TileAxis {
    pub(crate) fn new(extent: usize, tiles: usize) -> Self {
        let size = extent.div_ceil(tiles.min(extent));
        Self {
            size,
            count: extent.div_ceil(size),
        }
    }

    /// Neighbouring tile indices and the weight of the second one.
    pub(crate) fn blend(&self, pos: usize) -> (usize, usize, f64) {
        let f = (pos as f64 + 0.5) / self.size as f64 - 0.5;
        if f <= 0.0 {
            return (0, 0, 0.0);
        }
        let i0 = f.floor() as usize;
        if i0 + 1 >= self.count {
            return (self.count - 1, self.count - 1, 0.0);
        }
        (i0, i0 + 1, f - i0 as f64)
    }
}

#[inline]
pub(crate) fn quantize(v: f64, bins: usize) -> usize {
    ((v * (bins - 1) as f64).round() as usize).min(bins - 1)
}

/// Clipped-histogram equalization lookup for one tile, in bin units.
pub(crate) fn tile_lut(pixels: impl Iterator<Item = usize>, bins: usize, clip: f64) -> Vec<f64> {
    let mut hist = vec![0.0f64; bins];
    let mut n = 0usize;
    for b in pixels {
        hist[b] += 1.0;
        n += 1;
    }
    let cap = clip * n as f64 / bins as f64;
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > cap {
            excess += *h - cap;
            *h = cap;
        }
    }
    let share = excess / bins as f64;
    let scale = (bins - 1) as f64 / n as f64;
    let mut cdf = 0.0;
    hist.iter()
        .map(|h| {
            cdf += h + share;
            cdf * scale
        })
        .collect()
}

/// Contrast-limited adaptive histogram equalization of a unit-range slice.
pub fn clahe_slice(img: &Image2D, p: &ClaheParams) -> Result<Image2D> {
    p.validate()?;
    if !img.is_unit() {
        return Err(Error::InvalidParam("CLAHE input must lie in [0,1]".into()));
    }
    let (h, w) = (img.height, img.width);
    let ay = TileAxis::new(h, p.grid.0);
    let ax = TileAxis::new(w, p.grid.1);
    let levels: Vec<usize> = img.data.iter().map(|&v| quantize(v, p.bins)).collect();

    let mut luts = Vec::with_capacity(ay.count * ax.count);
    for ty in 0..ay.count {
        for tx in 0..ax.count {
            let rows = ty * ay.size..((ty + 1) * ay.size).min(h);
            let cols = tx * ax.size..((tx + 1) * ax.size).min(w);
            let px = rows.flat_map(|y| cols.clone().map(move |x| (y, x)));
            luts.push(tile_lut(px.map(|(y, x)| levels[y * w + x]), p.bins, p.clip));
        }
    }

    let top = (p.bins - 1) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, wy) = ay.blend(y);
        for x in 0..w {
            let (x0, x1, wx) = ax.blend(x);
            let q = levels[y * w + x];
            let lut = |ty: usize, tx: usize| luts[ty * ax.count + tx][q];
            let upper = (1.0 - wx) * lut(y0, x0) + wx * lut(y0, x1);
            let lower = (1.0 - wx) * lut(y1, x0) + wx * lut(y1, x1);
            let v = (1.0 - wy) * upper + wy * lower;
            out.push((v / top).clamp(0.0, 1.0));
        }
    }
    Ok(Image2D {
        height: h,
        width: w,
        data: out,
    })
}

/// Population statistics of a set of voxels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceStats {
    pub mu: f64,
    pub sigma: f64,
}

impl SliceStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        Self {
            mu,
            sigma: var.sqrt(),
        }
    }
}

/// Standardizes with the mean and population deviation of the whole volume.
pub fn zscore(v: &FloatVolume) -> Result<FloatVolume> {
    let stats = SliceStats::of(&v.voxels);
    if stats.sigma < 1e-12 {
        return Err(Error::ConstantVolume);
    }
    let voxels = v
        .voxels
        .iter()
        .map(|&x| (x - stats.mu) / stats.sigma)
        .collect();
    Ok(v.with_voxels(voxels, Domain::Zscored))
}

/// `k x k` median filter with replicate padding; `k` must be odd.
pub fn median_filter(img: &Image2D, k: usize) -> Result<Image2D> {
    if k % 2 == 0 {
        return Err(Error::InvalidParam(format!(
            "median kernel must be odd, got {k}"
        )));
    }
    let r = (k / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut window = Vec::with_capacity(k * k);
    let mut out = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            window.clear();
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w - 1) as usize;
                    window.push(img.data[yy * img.width + xx]);
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
            out.push(*m);
        }
    }
    Ok(Image2D {
        height: img.height,
        width: img.width,
        data: out,
    })
}

pub fn median3x3(img: &Image2D) -> Image2D {
    median_filter(img, 3).expect("3 is odd")
}

/// One parameterized operator of a pipeline.
#[derive(Clone, Debug, PartialEq)]
pub enum OpStep {
    HuWindow { lo: f64, hi: f64 },
    Clahe(ClaheParams),
    Median { k: usize },
    Bm3d(Bm3dParams),
    ZScore,
}

impl OpStep {
    pub fn hu_default() -> Self {
        OpStep::HuWindow {
            lo: DEFAULT_HU_WINDOW.0,
            hi: DEFAULT_HU_WINDOW.1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpStep::HuWindow { .. } => "hu",
            OpStep::Clahe(_) => "clahe",
            OpStep::Median { .. } => "median",
            OpStep::Bm3d(_) => "bm3d",
            OpStep::ZScore => "zscore",
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            OpStep::HuWindow { lo, hi } if !(lo < hi) => Err(Error::InvalidParam(format!(
                "HU window needs lo < hi, got [{lo}, {hi}]"
            ))),
            OpStep::Clahe(p) => p.validate(),
            OpStep::Median { k } if k % 2 == 0 => {
                Err(Error::InvalidParam(format!("kernel must be odd, got {k}")))
            }
            OpStep::Bm3d(p) => p.validate(),
            _ => Ok(()),
        }
    }

    fn apply(&self, v: &FloatVolume) -> Result<FloatVolume> {
        self.validate()?;
        let unit = |img: Image2D| {
            if img.is_unit() {
                img
            } else {
                img.min_max_normalized()
            }
        };
        match self {
            OpStep::HuWindow { lo, hi } => hu_window(v, *lo, *hi),
            OpStep::Clahe(p) => v.map_slices(Domain::Unit, |img| clahe_slice(&unit(img), p)),
            OpStep::Median { k } => v.map_slices(v.domain, |img| median_filter(&img, *k)),
            OpStep::Bm3d(p) => v.map_slices(Domain::Unit, |img| bm3d_denoise(&unit(img), p)),
            OpStep::ZScore => zscore(v),
        }
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

impl fmt::Display for OpStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpStep::HuWindow { lo, hi } => write!(f, "hu({},{})", fmt_num(*lo), fmt_num(*hi)),
            OpStep::Clahe(p) => write!(
                f,
                "clahe(clip={},grid={}x{},bins={})",
                fmt_num(p.clip),
                p.grid.0,
                p.grid.1,
                p.bins
            ),
            OpStep::Median { k } => write!(f, "median({k})"),
            OpStep::Bm3d(p) => {
                let d = Bm3dParams::default();
                write!(f, "bm3d(sigma={}", fmt_num(p.sigma))?;
                if p.block != d.block {
                    write!(f, ",block={}", p.block)?;
                }
                if p.step != d.step {
                    write!(f, ",step={}", p.step)?;
                }
                if p.search_radius != d.search_radius {
                    write!(f, ",radius={}", p.search_radius)?;
                }
                if p.max_matches != d.max_matches {
                    write!(f, ",matches={}", p.max_matches)?;
                }
                if p.match_threshold != d.match_threshold {
                    write!(f, ",threshold={}", fmt_num(p.match_threshold))?;
                }
                if p.lambda_hard != d.lambda_hard {
                    write!(f, ",lambda={}", fmt_num(p.lambda_hard))?;
                }
                write!(f, ")")
            }
            OpStep::ZScore => write!(f, "zscore"),
        }
    }
}

/// Which of the five techniques a pipeline uses, in table column order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SequenceFlags {
    pub hu: bool,
    pub clahe: bool,
    pub bm3d: bool,
    pub median: bool,
    pub zscore: bool,
}

impl SequenceFlags {
    pub const fn new(hu: bool, clahe: bool, bm3d: bool, median: bool, zscore: bool) -> Self {
        Self {
            hu,
            clahe,
            bm3d,
            median,
            zscore,
        }
    }

    pub fn as_array(&self) -> [bool; 5] {
        [self.hu, self.clahe, self.bm3d, self.median, self.zscore]
    }

    /// Pipeline in canonical order with default parameters.
    pub fn to_pipeline(&self) -> PipelineSpec {
        let mut steps = Vec::new();
        if self.hu {
            steps.push(OpStep::hu_default());
        }
        if self.clahe {
            steps.push(OpStep::Clahe(ClaheParams::default()));
        }
        if self.bm3d {
            steps.push(OpStep::Bm3d(Bm3dParams::default()));
        }
        if self.median {
            steps.push(OpStep::Median { k: 3 });
        }
        if self.zscore {
            steps.push(OpStep::ZScore);
        }
        PipelineSpec { steps }
    }
}

/// The twelve combined sequences, columns HU, CLAHE, BM3D, median, z-score.
pub const SEQUENCE_FLAGS: [SequenceFlags; 12] = [
    SequenceFlags::new(true, true, false, false, false),
    SequenceFlags::new(true, false, false, true, false),
    SequenceFlags::new(true, true, false, true, false),
    SequenceFlags::new(true, true, false, false, true),
    SequenceFlags::new(true, false, false, false, true),
    SequenceFlags::new(false, true, false, false, true),
    SequenceFlags::new(true, false, false, true, true),
    SequenceFlags::new(false, false, false, true, true),
    SequenceFlags::new(true, false, true, false, false),
    SequenceFlags::new(true, true, true, false, false),
    SequenceFlags::new(true, true, true, false, true),
    SequenceFlags::new(true, false, true, false, true),
];

/// Single-technique rows: HU windowing, CLAHE, z-score, median, BM3D.
pub const SINGLE_FLAGS: [SequenceFlags; 5] = [
    SequenceFlags::new(true, false, false, false, false),
    SequenceFlags::new(false, true, false, false, false),
    SequenceFlags::new(false, false, false, false, true),
    SequenceFlags::new(false, false, false, true, false),
    SequenceFlags::new(false, false, true, false, false),
];

pub const SINGLE_NAMES: [&str; 5] = [
    "HU windowing",
    "CLAHE",
    "z-score",
    "Median filter",
    "BM3D filtering",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalSequences {
    pub sequences: Vec<PipelineSpec>,
    pub singles: Vec<PipelineSpec>,
}

pub fn canonical_sequences() -> CanonicalSequences {
    CanonicalSequences {
        sequences: SEQUENCE_FLAGS
            .iter()
            .map(SequenceFlags::to_pipeline)
            .collect(),
        singles: SINGLE_FLAGS
            .iter()
            .map(SequenceFlags::to_pipeline)
            .collect(),
    }
}

/// Ordered operator list, written as e.g. `hu(-100,400)|median(3)|zscore`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineSpec {
    pub steps: Vec<OpStep>,
}

impl PipelineSpec {
    pub fn new(steps: Vec<OpStep>) -> Self {
        Self { steps }
    }

    pub fn flags(&self) -> SequenceFlags {
        let mut f = SequenceFlags::default();
        for s in &self.steps {
            match s {
                OpStep::HuWindow { .. } => f.hu = true,
                OpStep::Clahe(_) => f.clahe = true,
                OpStep::Bm3d(_) => f.bm3d = true,
                OpStep::Median { .. } => f.median = true,
                OpStep::ZScore => f.zscore = true,
            }
        }
        f
    }
}

impl fmt::Display for PipelineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

struct Arg<'a> {
    key: Option<&'a str>,
    value: &'a str,
    column: usize,
}

fn parse_err(column: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        column,
        msg: msg.into(),
    }
}

fn parse_value<T: FromStr>(arg: &Arg<'_>, what: &str) -> Result<T> {
    arg.value
        .parse()
        .map_err(|_| parse_err(arg.column, format!("invalid {what} `{}`", arg.value)))
}

/// Assigns positional or `key=value` arguments to the named slots.
fn bind<'a>(args: Vec<Arg<'a>>, slots: &[&str], op: &str) -> Result<Vec<Option<Arg<'a>>>> {
    let mut out: Vec<Option<Arg<'a>>> = slots.iter().map(|_| None).collect();
    for (pos, arg) in args.into_iter().enumerate() {
        let idx = match arg.key {
            Some(k) => slots
                .iter()
                .position(|s| *s == k)
                .ok_or_else(|| parse_err(arg.column, format!("{op} has no parameter `{k}`")))?,
            None if pos < slots.len() => pos,
            None => {
                return Err(parse_err(
                    arg.column,
                    format!("too many arguments for {op}"),
                ))
            }
        };
        if out[idx].is_some() {
            return Err(parse_err(
                arg.column,
                format!("{op} parameter `{}` given twice", slots[idx]),
            ));
        }
        out[idx] = Some(arg);
    }
    Ok(out)
}

fn parse_step(text: &str, column: usize) -> Result<OpStep> {
    let lead = text.len() - text.trim_start().len();
    let text = text.trim();
    let column = column + lead;
    if text.is_empty() {
        return Err(parse_err(column, "empty pipeline step"));
    }
    let (name, args) = match text.find('(') {
        Some(open) => {
            if !text.ends_with(')') {
                return Err(parse_err(column + text.len(), "missing `)`"));
            }
            let inner = &text[open + 1..text.len() - 1];
            let mut args = Vec::new();
            let mut offset = column + open + 1;
            if !inner.trim().is_empty() {
                for part in inner.split(',') {
                    let lead = part.len() - part.trim_start().len();
                    let col = offset + lead;
                    let part_t = part.trim();
                    if part_t.is_empty() {
                        return Err(parse_err(col, "empty argument"));
                    }
                    let (key, value) = match part_t.split_once('=') {
                        Some((k, v)) => (Some(k.trim()), v.trim()),
                        None => (None, part_t),
                    };
                    args.push(Arg {
                        key,
                        value,
                        column: col,
                    });
                    offset += part.len() + 1;
                }
            }
            (text[..open].trim(), args)
        }
        None => (text, Vec::new()),
    };

    let step = match name {
        "hu" => {
            let a = bind(args, &["lo", "hi"], "hu")?;
            let (lo, hi) = match (&a[0], &a[1]) {
                (None, None) => DEFAULT_HU_WINDOW,
                (Some(lo), Some(hi)) => {
                    (parse_value(lo, "HU bound")?, parse_value(hi, "HU bound")?)
                }
                _ => return Err(parse_err(column, "hu needs both bounds")),
            };
            if !(lo < hi) {
                return Err(parse_err(
                    column,
                    format!("HU window needs lo < hi, got [{lo}, {hi}]"),
                ));
            }
            OpStep::HuWindow { lo, hi }
        }
        "clahe" => {
            let a = bind(args, &["clip", "grid", "bins"], "clahe")?;
            let mut p = ClaheParams::default();
            if let Some(arg) = &a[0] {
                p.clip = parse_value(arg, "clip limit")?;
            }
            if let Some(arg) = &a[1] {
                let (gy, gx) = arg
                    .value
                    .split_once('x')
                    .ok_or_else(|| parse_err(arg.column, "grid must look like 8x8"))?;
                let gy = gy
                    .parse()
                    .map_err(|_| parse_err(arg.column, "bad grid rows"))?;
                let gx = gx
                    .parse()
                    .map_err(|_| parse_err(arg.column, "bad grid columns"))?;
                p.grid = (gy, gx);
            }
            if let Some(arg) = &a[2] {
                p.bins = parse_value(arg, "bin count")?;
            }
            p.validate().map_err(|e| parse_err(column, e.to_string()))?;
            OpStep::Clahe(p)
        }
        "median" => {
            let a = bind(args, &["k"], "median")?;
            let k = match &a[0] {
                Some(arg) => parse_value::<usize>(arg, "kernel size")?,
                None => 3,
            };
            if k % 2 == 0 {
                let col = a[0].as_ref().map_or(column, |arg| arg.column);
                return Err(parse_err(col, format!("kernel must be odd, got {k}")));
            }
            OpStep::Median { k }
        }
        "bm3d" => {
            let slots = [
                "sigma",
                "block",
                "step",
                "radius",
                "matches",
                "threshold",
                "lambda",
            ];
            let a = bind(args, &slots, "bm3d")?;
            let mut p = Bm3dParams::default();
            if let Some(arg) = &a[0] {
                p.sigma = parse_value(arg, "sigma")?;
            }
            if let Some(arg) = &a[1] {
                p.block = parse_value(arg, "block size")?;
            }
            if let Some(arg) = &a[2] {
                p.step = parse_value(arg, "step")?;
            }
            if let Some(arg) = &a[3] {
                p.search_radius = parse_value(arg, "search radius")?;
            }
            if let Some(arg) = &a[4] {
                p.max_matches = parse_value(arg, "match count")?;
            }
            if let Some(arg) = &a[5] {
                p.match_threshold = parse_value(arg, "match threshold")?;
            }
            if let Some(arg) = &a[6] {
                p.lambda_hard = parse_value(arg, "lambda")?;
            }
            p.validate().map_err(|e| parse_err(column, e.to_string()))?;
            OpStep::Bm3d(p)
        }
        "zscore" => {
            if let Some(arg) = args.first() {
                return Err(parse_err(arg.column, "zscore takes no arguments"));
            }
            OpStep::ZScore
        }
        other => return Err(parse_err(column, format!("unknown operator `{other}`"))),
    };
    Ok(step)
}

impl FromStr for PipelineSpec {
    type Err = Error;

    /// Columns in parse errors are 1-based.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(PipelineSpec::default());
        }
        let mut steps = Vec::new();
        let mut column = 1;
        for part in s.split('|') {
            steps.push(parse_step(part, column)?);
            column += part.len() + 1;
        }
        Ok(PipelineSpec { steps })
    }
}

/// Runs the steps left to right; 2D operators act on each axial slice.
///
/// A result still in raw HU (including the empty pipeline) is min-max
/// normalized over the volume so the network always sees bounded input.
pub fn apply_pipeline(v: &HuVolume, spec: &PipelineSpec) -> Result<FloatVolume> {
    let mut current = FloatVolume::from_hu(v);
    for (index, step) in spec.steps.iter().enumerate() {
        current = step.apply(&current).map_err(|e| Error::Step {
            index,
            step: step.to_string(),
            source: Box::new(e),
        })?;
    }
    if current.domain == Domain::Hu {
        current = current.min_max_normalized();
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn vol(values: &[f64]) -> FloatVolume {
        FloatVolume::new(
            Dims::new(1, 1, values.len()),
            Spacing::default(),
            values.to_vec(),
            Domain::Hu,
        )
        .unwrap()
    }

    fn random_image(h: usize, w: usize, rng: &mut Rng) -> Image2D {
        Image2D::new(h, w, (0..h * w).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn hu_window_examples() {
        let out = hu_window(&vol(&[-1000.0, 400.0, 150.0]), -100.0, 400.0).unwrap();
        assert_eq!(out.voxels(), &[0.0, 1.0, 0.5]);
        assert_eq!(out.domain(), Domain::Unit);
        assert!(hu_window(&vol(&[0.0]), 10.0, 10.0).is_err());
    }

    #[test]
    fn zscore_examples() {
        let out = zscore(&vol(&[1.0, 2.0, 3.0])).unwrap();
        let expect = [-1.224745, 0.0, 1.224745];
        for (a, b) in out.voxels().iter().zip(expect) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(matches!(
            zscore(&vol(&[4.0, 4.0])),
            Err(Error::ConstantVolume)
        ));
    }

    #[test]
    fn median_examples() {
        let c = Image2D::filled(4, 5, 0.3);
        assert_eq!(median3x3(&c), c);

        let img = Image2D::new(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        assert_eq!(median3x3(&img).get(1, 1), 5.0);

        let mut imp = Image2D::filled(5, 5, 0.0);
        imp.set(2, 2, 1.0);
        assert!(median3x3(&imp).data().iter().all(|&v| v == 0.0));

        assert!(median_filter(&c, 4).is_err());
    }

    #[test]
    fn median_on_1x1() {
        let img = Image2D::new(1, 1, vec![0.7]).unwrap();
        assert_eq!(median3x3(&img).data(), &[0.7]);
    }

    #[test]
    fn clahe_constant_image_stays_constant() {
        let img = Image2D::filled(16, 16, 0.5);
        let out = clahe_slice(&img, &ClaheParams::default()).unwrap();
        let first = out.data()[0];
        assert!(out.data().iter().all(|&v| v == first));
    }

    #[test]
    fn clahe_uniform_tiles_are_near_identity() {
        // every 16x16 tile holds each of the 256 levels exactly once
        let mut rng = Rng::new(4);
        let mut data = vec![0.0; 32 * 32];
        for (ty, tx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let mut levels: Vec<usize> = (0..256).collect();
            rng.shuffle(&mut levels);
            for (i, l) in levels.into_iter().enumerate() {
                data[(ty * 16 + i / 16) * 32 + tx * 16 + i % 16] = l as f64 / 255.0;
            }
        }
        let img = Image2D::new(32, 32, data).unwrap();
        let p = ClaheParams {
            grid: (2, 2),
            ..Default::default()
        };
        let out = clahe_slice(&img, &p).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn clahe_tile_luts_are_monotone() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let n = 1 + rng.below(300);
            let pixels: Vec<usize> = (0..n).map(|_| rng.below(256)).collect();
            let lut = tile_lut(pixels.into_iter(), 256, 4.0);
            assert!(lut.windows(2).all(|w| w[0] <= w[1]));
            assert!((lut[255] - 255.0).abs() < 1e-9);
        }
    }

    #[test]
    fn clahe_rejects_non_unit_input() {
        let img = Image2D::new(1, 2, vec![-0.5, 2.0]).unwrap();
        assert!(clahe_slice(&img, &ClaheParams::default()).is_err());
    }

    #[test]
    fn clahe_handles_images_smaller_than_grid() {
        let mut rng = Rng::new(2);
        let img = random_image(5, 3, &mut rng);
        let out = clahe_slice(&img, &ClaheParams::default()).unwrap();
        assert_eq!((out.height(), out.width()), (5, 3));
        assert!(out.is_unit());
    }

    #[test]
    fn tile_axis_uses_ceiling_tiles() {
        let a = TileAxis::new(64, 8);
        assert_eq!((a.size, a.count), (8, 8));
        let a = TileAxis::new(30, 8);
        assert_eq!((a.size, a.count), (4, 8));
        let a = TileAxis::new(10, 8);
        assert_eq!((a.size, a.count), (2, 5));
    }

    #[test]
    fn pipeline_strings_parse() {
        let p: PipelineSpec = "hu(-100,400)|median(3)|zscore".parse().unwrap();
        assert_eq!(p, SEQUENCE_FLAGS[6].to_pipeline());
        assert_eq!(p.to_string(), "hu(-100,400)|median(3)|zscore");

        let p: PipelineSpec = " hu | clahe(4, grid=8x8) | bm3d(sigma=0.1) "
            .parse()
            .unwrap();
        assert_eq!(p.steps.len(), 3);
        assert!(matches!(&p.steps[2], OpStep::Bm3d(b) if b.sigma == 0.1));

        assert_eq!("".parse::<PipelineSpec>().unwrap(), PipelineSpec::default());
    }

    #[test]
    fn pipeline_parse_errors_carry_columns() {
        match "median(4)".parse::<PipelineSpec>() {
            Err(Error::Parse { column, msg }) => {
                assert_eq!(column, 8);
                assert!(msg.contains("kernel must be odd"));
            }
            other => panic!("{other:?}"),
        }
        match "hu|foo".parse::<PipelineSpec>() {
            Err(Error::Parse { column, .. }) => assert_eq!(column, 4),
            other => panic!("{other:?}"),
        }
        assert!("hu(400,-100)".parse::<PipelineSpec>().is_err());
        assert!("zscore(1)".parse::<PipelineSpec>().is_err());
        assert!("hu(1,2".parse::<PipelineSpec>().is_err());
        assert!("bm3d(matches=12)".parse::<PipelineSpec>().is_err());
        assert!("hu||zscore".parse::<PipelineSpec>().is_err());
    }

    #[test]
    fn canonical_rows() {
        let c = canonical_sequences();
        assert_eq!(c.sequences.len(), 12);
        assert_eq!(c.singles.len(), 5);
        assert_eq!(
            c.sequences[6].flags(),
            SequenceFlags::new(true, false, false, true, true)
        );
        assert_eq!(
            c.sequences[10].flags(),
            SequenceFlags::new(true, true, true, false, true)
        );
        assert_eq!(
            c.sequences[2].to_string(),
            "hu(-100,400)|clahe(clip=4,grid=8x8,bins=256)|median(3)"
        );
        assert_eq!(c.singles[0], PipelineSpec::new(vec![OpStep::hu_default()]));
        for s in c.sequences.iter().chain(&c.singles) {
            assert_eq!(&s.to_string().parse::<PipelineSpec>().unwrap(), s);
        }
    }

    fn hu_volume(seed: u64) -> HuVolume {
        let mut rng = Rng::new(seed);
        let dims = Dims::new(3, 16, 16);
        let v = (0..dims.len())
            .map(|_| rng.uniform_range(-1000.0, 1000.0) as i16)
            .collect();
        HuVolume::new(dims, Spacing::default(), v).unwrap()
    }

    #[test]
    fn empty_pipeline_min_max_normalizes() {
        let v = hu_volume(1);
        let out = apply_pipeline(&v, &PipelineSpec::default()).unwrap();
        assert_eq!(out.domain(), Domain::Unit);
        let expect = FloatVolume::from_hu(&v).min_max_normalized();
        assert_eq!(out, expect);
    }

    #[test]
    fn every_canonical_pipeline_preserves_dims() {
        let v = hu_volume(2);
        let c = canonical_sequences();
        for spec in c.sequences.iter().chain(&c.singles) {
            let out = apply_pipeline(&v, spec).unwrap();
            assert_eq!(out.dims(), v.dims(), "{spec}");
            let expect = if spec.flags().zscore {
                Domain::Zscored
            } else {
                Domain::Unit
            };
            assert_eq!(out.domain(), expect, "{spec}");
        }
    }

    #[test]
    fn pipeline_errors_name_the_step() {
        let dims = Dims::new(1, 4, 4);
        let v = HuVolume::new(dims, Spacing::default(), vec![30; 16]).unwrap();
        let spec: PipelineSpec = "median(3)|zscore".parse().unwrap();
        match apply_pipeline(&v, &spec) {
            Err(Error::Step { index, step, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(step, "zscore");
            }
            other => panic!("{other:?}"),
        }
    }

    mod props {
        use super::*;
        use crate::numerics::Rng;
        use proptest::prelude::*;

        fn unit_volume(values: Vec<f64>) -> FloatVolume {
            let n = values.len();
            FloatVolume::new(Dims::new(1, 1, n), Spacing::default(), values, Domain::Unit).unwrap()
        }

        proptest! {
            #[test]
            fn hu_window_lands_in_unit_range(values in prop::collection::vec(-1024.0f64..3071.0, 1..64)) {
                let out = hu_window(&vol(&values), -100.0, 400.0).unwrap();
                prop_assert!(out.voxels().iter().all(|v| (0.0..=1.0).contains(v)));
            }

            #[test]
            fn unit_window_is_identity_on_windowed_output(values in prop::collection::vec(-1024.0f64..3071.0, 1..64)) {
                let once = hu_window(&vol(&values), -100.0, 400.0).unwrap();
                let twice = hu_window(&once, 0.0, 1.0).unwrap();
                prop_assert_eq!(once.voxels(), twice.voxels());
            }

            #[test]
            fn zscore_is_affine_invariant(
                values in prop::collection::vec(0.0f64..1.0, 4..64),
                a in 0.01f64..100.0,
                b in -100.0f64..100.0,
            ) {
                let v = unit_volume(values.clone());
                prop_assume!(SliceStats::of(&values).sigma > 1e-3);
                let shifted = vol(&values.iter().map(|x| a * x + b).collect::<Vec<_>>());
                let z1 = zscore(&v).unwrap();
                let z2 = zscore(&shifted).unwrap();
                for (p, q) in z1.voxels().iter().zip(z2.voxels()) {
                    prop_assert!((p - q).abs() < 1e-5);
                }
            }

            #[test]
            fn median_output_values_come_from_input(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
                let mut rng = Rng::new(seed);
                let img = random_image(h, w, &mut rng);
                let out = median3x3(&img);
                prop_assert!(out.data().iter().all(|v| img.data().contains(v)));
            }
        }
    }
}
