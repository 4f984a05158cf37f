//! Volume and mask storage, synthetic liver phantoms and the
//! volume-level train/validation/test split.
//!
//! On disk a volume is a pair of files: `<name>.hdr`, a small text header
//!
//! ```text
//! dims=D,H,W
//! dtype=i16
//! spacing=Z,Y,X
//! ```
//!
//! and `<name>.raw`, the little-endian row-major payload with z outermost.
//! `dtype` is `i16` for CT volumes, `u8` for masks and `f32` for
//! preprocessed float volumes, which also carry a `domain=` line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::preprocess::{Domain, FloatVolume};

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidParam(format!(
                "dims must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Voxel spacing in millimetres, `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spacing(pub [f64; 3]);

impl Default for Spacing {
    fn default() -> Self {
        Spacing([1.0, 1.0, 1.0])
    }
}

impl Spacing {
    fn validate(&self) -> Result<()> {
        if self.0.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidParam(format!(
                "spacing must be positive, got {:?}",
                self.0
            )));
        }
        Ok(())
    }
}

/// CT volume in Hounsfield units, clamped to the 12-bit range on ingest.
#[derive(Clone, Debug, PartialEq)]
pub struct HuVolume {
    dims: Dims,
    spacing: Spacing,
    voxels: Vec<i16>,
}

impl HuVolume {
    pub fn new(dims: Dims, spacing: Spacing, voxels: Vec<i16>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if voxels.len() != dims.len() {
            return Err(Error::InvalidParam(format!(
                "{dims:?} needs {} voxels, got {}",
                dims.len(),
                voxels.len()
            )));
        }
        let voxels = voxels
            .into_iter()
            .map(|v| v.clamp(HU_MIN, HU_MAX))
            .collect();
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn slice(&self, z: usize) -> &[i16] {
        let n = self.dims.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }
}

/// Binary ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    dims: Dims,
    spacing: Spacing,
    voxels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: Dims, spacing: Spacing, voxels: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if voxels.len() != dims.len() {
            return Err(Error::InvalidParam(format!(
                "{dims:?} needs {} voxels, got {}",
                dims.len(),
                voxels.len()
            )));
        }
        if let Some(v) = voxels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidParam(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.dims.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.voxels.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.voxels.len() as f64
    }
}

/// Anything that can be read back from a header/payload pair.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Hu(HuVolume),
    Mask(MaskVolume),
    Float(FloatVolume),
}

/// Strips a `.hdr`/`.raw` extension so either file names the pair.
pub fn volume_base(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("hdr") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_pair(path: &Path, header: String, payload: Vec<u8>) -> Result<()> {
    let base = volume_base(path);
    let hdr = with_ext(&base, "hdr");
    let raw = with_ext(&base, "raw");
    fs::write(&hdr, header).map_err(|e| Error::io(&hdr, e))?;
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

fn header(dims: Dims, dtype: &str, spacing: Spacing, extra: &[(&str, String)]) -> String {
    let [sz, sy, sx] = spacing.0;
    let mut h = format!(
        "dims={},{},{}\ndtype={dtype}\nspacing={sz},{sy},{sx}\n",
        dims.depth, dims.height, dims.width
    );
    for (k, v) in extra {
        h.push_str(&format!("{k}={v}\n"));
    }
    h
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    match v {
        Volume::Hu(v) => write_hu(v, path),
        Volume::Mask(m) => write_mask(m, path),
        Volume::Float(f) => write_float(f, path),
    }
}

pub fn write_hu(v: &HuVolume, path: &Path) -> Result<()> {
    let payload = v.voxels.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_pair(path, header(v.dims, "i16", v.spacing, &[]), payload)
}

pub fn write_mask(m: &MaskVolume, path: &Path) -> Result<()> {
    write_pair(path, header(m.dims, "u8", m.spacing, &[]), m.voxels.clone())
}

pub fn write_float(f: &FloatVolume, path: &Path) -> Result<()> {
    let payload = f
        .voxels()
        .iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect();
    let extra = [("domain", f.domain().as_str().to_string())];
    write_pair(path, header(f.dims(), "f32", f.spacing(), &extra), payload)
}

struct Header {
    dims: Dims,
    dtype: String,
    spacing: Spacing,
    domain: Option<Domain>,
}

fn parse_triple<T: std::str::FromStr>(hdr: &Path, key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::format(
            hdr,
            format!("{key} needs three values, got `{value}`"),
        ));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::format(hdr, format!("bad {key} component `{p}`")))?,
        );
    }
    out.try_into()
        .map_err(|_| Error::format(hdr, format!("bad {key}")))
}

fn read_header(hdr: &Path) -> Result<Header> {
    let text = fs::read_to_string(hdr).map_err(|e| Error::io(hdr, e))?;
    let (mut dims, mut dtype, mut spacing, mut domain) = (None, None, None, None);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(hdr, format!("expected key=value, got `{line}`")))?;
        match key.trim() {
            "dims" => {
                let [d, h, w] = parse_triple::<usize>(hdr, "dims", value)?;
                dims = Some(Dims::new(d, h, w));
            }
            "dtype" => dtype = Some(value.trim().to_string()),
            "spacing" => spacing = Some(Spacing(parse_triple::<f64>(hdr, "spacing", value)?)),
            "domain" => {
                domain = Some(
                    Domain::parse(value.trim())
                        .ok_or_else(|| Error::format(hdr, format!("unknown domain `{value}`")))?,
                )
            }
            // unknown keys are tolerated for forward compatibility
            _ => {}
        }
    }
    Ok(Header {
        dims: dims.ok_or_else(|| Error::format(hdr, "missing dims"))?,
        dtype: dtype.ok_or_else(|| Error::format(hdr, "missing dtype"))?,
        spacing: spacing.unwrap_or_default(),
        domain,
    })
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let base = volume_base(path);
    let hdr_path = with_ext(&base, "hdr");
    let raw_path = with_ext(&base, "raw");
    let hdr = read_header(&hdr_path)?;
    let payload = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let width = match hdr.dtype.as_str() {
        "i16" => 2,
        "u8" => 1,
        "f32" => 4,
        other => return Err(Error::format(&hdr_path, format!("unknown dtype `{other}`"))),
    };
    let n = hdr.dims.len();
    if payload.len() != n * width {
        return Err(Error::format(
            &raw_path,
            format!(
                "size mismatch: header {:?} needs {} {} values, payload holds {} bytes",
                hdr.dims,
                n,
                hdr.dtype,
                payload.len()
            ),
        ));
    }
    let wrap = |e: Error| Error::format(&hdr_path, e.to_string());
    match hdr.dtype.as_str() {
        "i16" => {
            let voxels = payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect();
            HuVolume::new(hdr.dims, hdr.spacing, voxels)
                .map(Volume::Hu)
                .map_err(wrap)
        }
        "u8" => MaskVolume::new(hdr.dims, hdr.spacing, payload)
            .map(Volume::Mask)
            .map_err(wrap),
        _ => {
            let voxels = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            FloatVolume::new(
                hdr.dims,
                hdr.spacing,
                voxels,
                hdr.domain.unwrap_or(Domain::Zscored),
            )
            .map(Volume::Float)
            .map_err(wrap)
        }
    }
}

pub fn read_hu(path: &Path) -> Result<HuVolume> {
    match read_volume(path)? {
        Volume::Hu(v) => Ok(v),
        _ => Err(Error::format(path, "expected an i16 CT volume")),
    }
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    match read_volume(path)? {
        Volume::Mask(m) => Ok(m),
        _ => Err(Error::format(path, "expected a u8 mask volume")),
    }
}

/// Writes a binary 8-bit PGM (P5), min-max scaling `values` to 0..=255.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape(&[height, width], &[values.len()]));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Exports one axial slice of a CT volume as PGM.
pub fn write_slice_pgm(v: &HuVolume, z: usize, path: &Path) -> Result<()> {
    if z >= v.dims.depth {
        return Err(Error::InvalidParam(format!(
            "slice {z} out of range for depth {}",
            v.dims.depth
        )));
    }
    let values: Vec<f64> = v.slice(z).iter().map(|&x| x as f64).collect();
    write_pgm(path, v.dims.width, v.dims.height, &values)
}

/// Axis-aligned ellipsoid in fractional volume coordinates `(z, y, x)`,
/// each component in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    pub fn volume_fraction(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.iter().product::<f64>()
    }
}

/// Synthetic abdominal CT: air, an elliptic body cylinder, a spine disc,
/// an adjacent organ with liver-like attenuation, and the liver itself.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing: Spacing,
    pub liver_mean: f64,
    /// Per-voxel tissue texture inside the liver.
    pub liver_std: f64,
    pub organ_mean: f64,
    pub body_mean: f64,
    pub bone_mean: f64,
    pub air_hu: f64,
    pub noise_std: f64,
    pub liver: Ellipsoid,
    pub organ: Ellipsoid,
    /// Relative jitter of liver and organ centres and radii, per seed.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: Dims::new(16, 64, 64),
            spacing: Spacing([2.5, 0.8, 0.8]),
            liver_mean: 60.0,
            liver_std: 5.0,
            organ_mean: 50.0,
            body_mean: -60.0,
            bone_mean: 700.0,
            air_hu: -1000.0,
            noise_std: 15.0,
            liver: Ellipsoid {
                center: [0.5, 0.45, 0.35],
                radii: [0.38, 0.22, 0.24],
            },
            organ: Ellipsoid {
                center: [0.5, 0.47, 0.70],
                radii: [0.30, 0.15, 0.14],
            },
            jitter: 0.1,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.spacing.validate()?;
        if (self.liver_mean - self.organ_mean).abs() <= 0.0 {
            return Err(Error::InvalidParam(
                "liver and adjacent organ need different mean HU".into(),
            ));
        }
        if self.noise_std < 0.0 || self.liver_std < 0.0 || !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::InvalidParam(
                "noise, texture and jitter must be non-negative (jitter < 0.5)".into(),
            ));
        }
        for (name, e) in [("liver", &self.liver), ("organ", &self.organ)] {
            let reach = 1.0 + 2.0 * self.jitter;
            for axis in 0..3 {
                let r = e.radii[axis];
                let (lo, hi) = (e.center[axis] - reach * r, e.center[axis] + reach * r);
                if !(r > 0.0) || lo < 0.0 || hi > 1.0 {
                    return Err(Error::InvalidParam(format!(
                        "{name} ellipsoid exceeds volume bounds on axis {axis}: [{lo:.3}, {hi:.3}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn jittered(e: &Ellipsoid, jitter: f64, rng: &mut Rng) -> Ellipsoid {
    let mut out = *e;
    for i in 0..3 {
        out.center[i] += rng.uniform_range(-jitter, jitter) * e.radii[i];
        out.radii[i] *= 1.0 + rng.uniform_range(-jitter, jitter);
    }
    out
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(HuVolume, MaskVolume)> {
    cfg.validate()?;
    let Dims {
        depth,
        height,
        width,
    } = cfg.dims;
    let mut geometry = Rng::new(cfg.seed).derive(0);
    let mut noise = Rng::new(cfg.seed).derive(1);
    let liver = jittered(&cfg.liver, cfg.jitter, &mut geometry);
    let organ = jittered(&cfg.organ, cfg.jitter, &mut geometry);

    let mut hu = Vec::with_capacity(cfg.dims.len());
    let mut mask = Vec::with_capacity(cfg.dims.len());
    for z in 0..depth {
        for y in 0..height {
            for x in 0..width {
                let p = [
                    (z as f64 + 0.5) / depth as f64,
                    (y as f64 + 0.5) / height as f64,
                    (x as f64 + 0.5) / width as f64,
                ];
                let body = ((p[1] - 0.5) / 0.44).powi(2) + ((p[2] - 0.5) / 0.47).powi(2) <= 1.0;
                let spine = ((p[1] - 0.78) / 0.07).powi(2) + ((p[2] - 0.5) / 0.07).powi(2) <= 1.0;
                let in_liver = liver.contains(p);
                let mut value = if in_liver {
                    cfg.liver_mean + cfg.liver_std * noise.normal()
                } else if organ.contains(p) {
                    cfg.organ_mean
                } else if spine {
                    cfg.bone_mean
                } else if body {
                    cfg.body_mean
                } else {
                    cfg.air_hu
                };
                if cfg.noise_std > 0.0 {
                    value += cfg.noise_std * noise.normal();
                }
                hu.push(value.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16);
                mask.push(in_liver as u8);
            }
        }
    }
    Ok((
        HuVolume::new(cfg.dims, cfg.spacing, hu)?,
        MaskVolume::new(cfg.dims, cfg.spacing, mask)?,
    ))
}

/// Shuffles `ids` and cuts it into train/validation/test sets.
///
/// Sizes are `floor(r0 * N)`, `floor(r1 * N)` and the remainder. When `N`
/// is so small that a floor comes out zero, one item is moved from the
/// largest set so every split is populated.
pub fn split_dataset<T: Clone>(
    ids: &[T],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let n = ids.len();
    if n < 3 {
        return Err(Error::InvalidParam(format!(
            "need at least 3 items to populate train/val/test, got {n}"
        )));
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    // the epsilon absorbs representation error, e.g. 0.7 * 30 = 20.999...
    let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let mut sizes = [floor(a), floor(b), 0];
    sizes[2] = n - sizes[0] - sizes[1];
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let largest = (0..3).max_by_key(|&i| (sizes[i], usize::MAX - i)).unwrap();
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let take = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range].iter().map(|&i| ids[i].clone()).collect()
    };
    Ok((
        take(0..sizes[0]),
        take(sizes[0]..sizes[0] + sizes[1]),
        take(sizes[0] + sizes[1]..n),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn sample_volume(dims: Dims, seed: u64) -> HuVolume {
        let mut rng = Rng::new(seed);
        let voxels = (0..dims.len())
            .map(|_| rng.uniform_range(-1024.0, 3071.0) as i16)
            .collect();
        HuVolume::new(dims, Spacing([2.0, 0.7, 0.7]), voxels).unwrap()
    }

    #[test]
    fn round_trip_hu_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_volume(Dims::new(4, 8, 8), 1);
        write_hu(&v, &dir.path().join("a")).unwrap();
        assert_eq!(read_hu(&dir.path().join("a.hdr")).unwrap(), v);

        let m = MaskVolume::new(
            Dims::new(4, 8, 8),
            Spacing::default(),
            (0..256).map(|i| (i % 3 == 0) as u8).collect(),
        )
        .unwrap();
        write_mask(&m, &dir.path().join("m")).unwrap();
        assert_eq!(read_mask(&dir.path().join("m.raw")).unwrap(), m);
    }

    #[test]
    fn header_lines_are_as_documented() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_volume(Dims::new(2, 3, 4), 2);
        write_hu(&v, &dir.path().join("v")).unwrap();
        let text = fs::read_to_string(dir.path().join("v.hdr")).unwrap();
        assert_eq!(text, "dims=2,3,4\ndtype=i16\nspacing=2,0.7,0.7\n");
        assert_eq!(fs::read(dir.path().join("v.raw")).unwrap().len(), 2 * 24);
    }

    #[test]
    fn size_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("s.hdr"),
            "dims=2,3,3\ndtype=i16\nspacing=1,1,1\n",
        )
        .unwrap();
        fs::write(dir.path().join("s.raw"), vec![0u8; 17 * 2]).unwrap();
        let err = read_volume(&dir.path().join("s")).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("s.hdr"), "dims=1,1,1\ndtype=c64\n").unwrap();
        fs::write(dir.path().join("s.raw"), vec![0u8; 8]).unwrap();
        let err = read_volume(&dir.path().join("s")).unwrap_err();
        assert!(err.to_string().contains("unknown dtype"), "{err}");
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        assert!(MaskVolume::new(Dims::new(1, 1, 3), Spacing::default(), vec![0, 2, 1]).is_err());
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.hdr"), "dims=1,1,3\ndtype=u8\n").unwrap();
        fs::write(dir.path().join("m.raw"), [0u8, 2, 1]).unwrap();
        assert!(read_volume(&dir.path().join("m")).is_err());
    }

    #[test]
    fn ingest_clamps_hu() {
        let v = HuVolume::new(Dims::new(1, 1, 2), Spacing::default(), vec![-2000, 4000]).unwrap();
        assert_eq!(v.voxels(), &[HU_MIN, HU_MAX]);
    }

    #[test]
    fn float_round_trip_keeps_domain() {
        let dir = tempfile::tempdir().unwrap();
        let f = FloatVolume::new(
            Dims::new(1, 2, 2),
            Spacing::default(),
            vec![0.0, 0.25, 0.5, 1.0],
            Domain::Unit,
        )
        .unwrap();
        write_float(&f, &dir.path().join("f")).unwrap();
        assert_eq!(
            read_volume(&dir.path().join("f")).unwrap(),
            Volume::Float(f)
        );
    }

    #[test]
    fn pgm_is_min_max_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, 2, 1, &[-5.0, 5.0]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 2..], &[0, 255]);
    }

    #[test]
    fn phantom_air_is_configured_constant() {
        let cfg = PhantomConfig {
            noise_std: 0.0,
            ..Default::default()
        };
        let (v, _) = generate_phantom(&cfg).unwrap();
        // corner voxel lies outside the body ellipse
        assert_eq!(v.voxels()[0], -1000);
    }

    #[test]
    fn phantom_is_deterministic() {
        let cfg = PhantomConfig {
            seed: 17,
            ..Default::default()
        };
        assert_eq!(
            generate_phantom(&cfg).unwrap(),
            generate_phantom(&cfg).unwrap()
        );
        let other = PhantomConfig { seed: 18, ..cfg };
        assert_ne!(
            generate_phantom(&other).unwrap().0,
            generate_phantom(&cfg).unwrap().0
        );
    }

    #[test]
    fn phantom_foreground_fraction_matches_ellipsoid_volume() {
        let cfg = PhantomConfig::default();
        // analytic fraction of the un-jittered ellipsoid: 4/3 pi * 0.38 * 0.22 * 0.24
        let analytic = cfg.liver.volume_fraction();
        assert!((analytic - 0.08404).abs() < 1e-4);
        for seed in 0..5 {
            let (_, m) = generate_phantom(&PhantomConfig {
                seed,
                ..cfg.clone()
            })
            .unwrap();
            let f = m.foreground_fraction();
            assert!((0.05..=0.40).contains(&f), "seed {seed}: {f}");
            // jitter scales each radius by at most 10%
            assert!(f > analytic * 0.9f64.powi(3) * 0.9 && f < analytic * 1.1f64.powi(3) * 1.1);
        }
    }

    #[test]
    fn phantom_out_of_bounds_is_rejected() {
        let mut cfg = PhantomConfig::default();
        cfg.liver.center[2] = 0.1;
        assert!(generate_phantom(&cfg).is_err());
        let same = PhantomConfig {
            organ_mean: 60.0,
            ..Default::default()
        };
        assert!(same.validate().is_err());
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let ids: Vec<usize> = (0..130).collect();
        let (a, b, c) = split_dataset(&ids, (0.70, 0.15, 0.15), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (91, 19, 20));
        let ids: Vec<usize> = (0..10).collect();
        let (a, b, c) = split_dataset(&ids, (0.70, 0.15, 0.15), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
        let ids: Vec<usize> = (0..40).collect();
        let (a, b, c) = split_dataset(&ids, (0.70, 0.15, 0.15), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (28, 6, 6));
    }

    #[test]
    fn split_is_seeded_and_rejects_tiny_inputs() {
        let ids: Vec<usize> = (0..30).collect();
        let s1 = split_dataset(&ids, (0.7, 0.15, 0.15), 5).unwrap();
        assert_eq!(s1, split_dataset(&ids, (0.7, 0.15, 0.15), 5).unwrap());
        assert_ne!(s1, split_dataset(&ids, (0.7, 0.15, 0.15), 6).unwrap());
        assert!(split_dataset(&[1, 2], (0.7, 0.15, 0.15), 0).is_err());
        assert!(split_dataset(&[1, 2, 3], (0.7, 0.2, 0.2), 0).is_err());
        let (a, b, c) = split_dataset(&[1, 2, 3], (0.7, 0.15, 0.15), 0).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1, 1, 1));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_is_a_disjoint_cover(n in 3usize..200, seed in any::<u64>()) {
                let ids: Vec<usize> = (0..n).collect();
                let (a, b, c) = split_dataset(&ids, (0.70, 0.15, 0.15), seed).unwrap();
                prop_assert!(!a.is_empty() && !b.is_empty() && !c.is_empty());
                let all: HashSet<usize> = a.iter().chain(&b).chain(&c).copied().collect();
                prop_assert_eq!(all.len(), n);
                prop_assert_eq!(a.len() + b.len() + c.len(), n);
            }

            #[test]
            fn hu_round_trip(d in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
                let dir = tempfile::tempdir().unwrap();
                let v = sample_volume(Dims::new(d, h, w), seed);
                write_hu(&v, &dir.path().join("p")).unwrap();
                prop_assert_eq!(read_hu(&dir.path().join("p")).unwrap(), v);
            }
        }
    }
}
