//! Phantom corpora, single preprocessing experiments and the comparison
//! grid with its CSV and markdown renderings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Real, Rng};
use crate::preprocess::{
    apply_pipeline, PipelineSpec, SequenceFlags, SEQUENCE_FLAGS, SINGLE_FLAGS, SINGLE_NAMES,
};
use crate::train::{evaluate, train, Dataset, EpochLog, Predictor, Sample, TrainConfig};
use crate::unet::{UNetConfig, UNetParams};
use crate::volume_io::{
    generate_phantom, read_hu, read_mask, split_dataset, write_hu, write_mask, write_pgm, HuVolume,
    MaskVolume, PhantomConfig,
};

/// Ground-truth-labelled CT volume before preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: HuVolume,
    pub mask: MaskVolume,
}

/// `count` phantoms whose per-volume seeds derive from `seed`.
pub fn phantom_corpus(count: usize, base: &PhantomConfig, seed: u64) -> Result<Vec<Case>> {
    let root = Rng::new(seed);
    (0..count)
        .into_par_iter()
        .map(|i| {
            let cfg = PhantomConfig {
                seed: root.derive(i as u64).next_u64(),
                ..base.clone()
            };
            let (volume, mask) = generate_phantom(&cfg)?;
            Ok(Case {
                id: format!("case{i:03}"),
                volume,
                mask,
            })
        })
        .collect()
}

const MASK_SUFFIX: &str = "_mask";

/// Writes `<id>.hdr/.raw` and `<id>_mask.hdr/.raw` for every case.
pub fn save_cases(dir: &Path, cases: &[Case]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for c in cases {
        let v = dir.join(&c.id);
        let m = dir.join(format!("{}{MASK_SUFFIX}", c.id));
        write_hu(&c.volume, &v)?;
        write_mask(&c.mask, &m)?;
        written.extend([v, m]);
    }
    Ok(written)
}

/// Reads every volume/mask pair in `dir`, ordered by id.
pub fn load_cases(dir: &Path) -> Result<Vec<Case>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("hdr") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        if !stem.ends_with(MASK_SUFFIX) {
            ids.push(stem.to_string());
        }
    }
    ids.sort();
    ids.iter()
        .map(|id| {
            let volume = read_hu(&dir.join(id))?;
            let mask = read_mask(&dir.join(format!("{id}{MASK_SUFFIX}")))?;
            if volume.dims() != mask.dims() {
                return Err(Error::format(
                    dir.join(id),
                    format!(
                        "volume dims {:?} differ from mask dims {:?}",
                        volume.dims(),
                        mask.dims()
                    ),
                ));
            }
            Ok(Case {
                id: id.clone(),
                volume,
                mask,
            })
        })
        .collect()
}

/// Side-by-side PGM of one slice: preprocessed input, ground truth, and
/// the prediction binarized at `threshold`.
pub fn write_overlay(
    path: &Path,
    model: &dyn Predictor,
    sample: &Sample,
    z: usize,
    threshold: f64,
) -> Result<()> {
    let d = sample.dims;
    if z >= d.depth {
        return Err(Error::InvalidParam(format!(
            "slice {z} out of range for depth {}",
            d.depth
        )));
    }
    let n = d.slice_len();
    let probs = model.probabilities(sample)?;
    let input: Vec<f64> = sample.image[z * n..(z + 1) * n].to_vec();
    let (lo, hi) = input
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let scaled = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let mut pixels = Vec::with_capacity(3 * n);
    for y in 0..d.height {
        let row = z * n + y * d.width;
        pixels.extend(
            input[y * d.width..(y + 1) * d.width]
                .iter()
                .map(|&v| scaled(v)),
        );
        pixels.extend(sample.mask[row..row + d.width].iter().map(|&m| m as f64));
        pixels.extend(
            probs[row..row + d.width]
                .iter()
                .map(|&p| if p >= threshold { 1.0 } else { 0.0 }),
        );
    }
    write_pgm(path, 3 * d.width, d.height, &pixels)
}

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.70, 0.15, 0.15);

/// Volume-level train/validation/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseSplit {
    pub train: Vec<Case>,
    pub val: Vec<Case>,
    pub test: Vec<Case>,
}

pub fn split_cases(cases: &[Case], seed: u64) -> Result<CaseSplit> {
    let (train, val, test) = split_dataset(cases, SPLIT_RATIOS, seed)?;
    Ok(CaseSplit { train, val, test })
}

pub fn preprocess_cases(cases: &[Case], spec: &PipelineSpec) -> Result<Vec<Sample>> {
    cases
        .iter()
        .map(|c| {
            let v = apply_pipeline(&c.volume, spec)?;
            Sample::new(
                c.id.clone(),
                v.dims(),
                v.voxels().to_vec(),
                c.mask.voxels().to_vec(),
            )
        })
        .collect()
}

pub fn build_dataset(split: &CaseSplit, spec: &PipelineSpec) -> Result<Dataset> {
    Ok(Dataset {
        train: preprocess_cases(&split.train, spec)?,
        val: preprocess_cases(&split.val, spec)?,
        test: preprocess_cases(&split.test, spec)?,
    })
}

/// Mean per-volume Dice on each split, in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceScores {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

/// Result of training on one preprocessing pipeline.
#[derive(Clone, Debug)]
pub struct Experiment<T> {
    pub scores: DiceScores,
    pub logs: Vec<EpochLog>,
    pub params: UNetParams<T>,
    pub best_epoch: usize,
}

/// Preprocesses, trains, and scores the best-validation network.
pub fn run_experiment<T: Real>(
    split: &CaseSplit,
    spec: &PipelineSpec,
    train_cfg: &TrainConfig,
    net: &UNetConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Experiment<T>> {
    let data = build_dataset(split, spec)?;
    let out = train::<T>(train_cfg, net, &data, on_epoch)?;
    let t = train_cfg.threshold;
    let scores = DiceScores {
        train: 100.0 * evaluate(&out.params, &data.train, t)?,
        val: 100.0 * evaluate(&out.params, &data.val, t)?,
        test: 100.0 * evaluate(&out.params, &data.test, t)?,
    };
    Ok(Experiment {
        scores,
        logs: out.logs,
        params: out.params,
        best_epoch: out.best_epoch,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridMode {
    /// Each technique on its own.
    Singles,
    /// The twelve ordered combinations.
    Sequences,
}

impl GridMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GridMode::Singles => "singles",
            GridMode::Sequences => "sequences",
        }
    }

    /// Sequence id, display label and flags of every row.
    pub fn rows(&self) -> Vec<(usize, String, SequenceFlags)> {
        match self {
            GridMode::Singles => SINGLE_FLAGS
                .iter()
                .zip(SINGLE_NAMES)
                .enumerate()
                .map(|(i, (f, name))| (i + 1, name.to_string(), *f))
                .collect(),
            GridMode::Sequences => SEQUENCE_FLAGS
                .iter()
                .enumerate()
                .map(|(i, f)| (i + 1, format!("Seq {}", i + 1), *f))
                .collect(),
        }
    }
}

/// One grid row.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub seq: usize,
    pub label: String,
    pub flags: SequenceFlags,
    pub pipeline: String,
    /// Dice percentages, or the error that stopped the experiment.
    pub outcome: std::result::Result<DiceScores, String>,
    pub seconds: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub mode: GridMode,
    pub rows: Vec<ExperimentResult>,
    pub precision: &'static str,
    pub net: UNetConfig,
    pub train: TrainConfig,
}

pub const CSV_HEADER: &str =
    "seq,hu,clahe,bm3d,median,zscore,train_dice,val_dice,test_dice,seconds,seed";

/// Published Dice percentages (train, val, test) used as context in reports.
pub const REFERENCE_SEQ7: (f64, f64, f64) = (96.93, 90.77, 90.84);

/// Runs every row of `mode` on a shared split, seed and network.
///
/// Rows run one after another; a failing row is recorded and the grid
/// continues.
pub fn run_grid<T: Real>(
    mode: GridMode,
    split: &CaseSplit,
    train_cfg: &TrainConfig,
    net: &UNetConfig,
    mut progress: impl FnMut(&ExperimentResult),
) -> GridReport {
    let mut rows = Vec::new();
    for (seq, label, flags) in mode.rows() {
        let spec = flags.to_pipeline();
        let start = Instant::now();
        let outcome = run_experiment::<T>(split, &spec, train_cfg, net, |_| {})
            .map(|e| e.scores)
            .map_err(|e| e.to_string());
        let row = ExperimentResult {
            seq,
            label,
            flags,
            pipeline: spec.to_string(),
            outcome,
            seconds: start.elapsed().as_secs_f64(),
            seed: train_cfg.seed,
        };
        progress(&row);
        rows.push(row);
    }
    GridReport {
        mode,
        rows,
        precision: T::NAME,
        net: *net,
        train: train_cfg.clone(),
    }
}

fn yn(b: bool) -> &'static str {
    if b {
        "Y"
    } else {
        "N"
    }
}

impl GridReport {
    pub fn check(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.seq) {
                return Err(Error::InvalidParam(format!(
                    "duplicate sequence id {}",
                    r.seq
                )));
            }
            let parsed: PipelineSpec = r.pipeline.parse()?;
            if parsed.flags() != r.flags {
                return Err(Error::InvalidParam(format!(
                    "row {} flags disagree with its pipeline",
                    r.seq
                )));
            }
            if let Ok(s) = &r.outcome {
                if [s.train, s.val, s.test]
                    .iter()
                    .any(|d| !(0.0..=100.0).contains(d))
                {
                    return Err(Error::InvalidParam(format!(
                        "row {} has Dice outside [0, 100]",
                        r.seq
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let f = r
                .flags
                .as_array()
                .map(|b| u8::from(b).to_string())
                .join(",");
            let dice = match &r.outcome {
                Ok(s) => format!("{:.2},{:.2},{:.2}", s.train, s.val, s.test),
                Err(_) => "ERROR,ERROR,ERROR".into(),
            };
            let _ = writeln!(out, "{},{f},{dice},{:.1},{}", r.seq, r.seconds, r.seed);
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# Preprocessing grid ({})\n\nnetwork: base {} channels, {} levels, cap {}; precision {}; \
             lr {}, {} epochs, batch {}, seed {}; Dice averaged per volume, best-validation checkpoint.\n",
            self.mode.as_str(),
            self.net.base_channels,
            self.net.levels,
            self.net.channel_cap,
            self.precision,
            self.train.learning_rate,
            self.train.epochs,
            self.train.batch_size,
            self.train.seed,
        );
        out.push_str("| Seq | HU windowing | CLAHE | BM3D filtering | Median filtering | z-score | Training % | Validation % | Testing % |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let f = r.flags;
            let dice = match &r.outcome {
                Ok(s) => format!("{:.2} | {:.2} | {:.2}", s.train, s.val, s.test),
                Err(_) => "ERROR | ERROR | ERROR".into(),
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {dice} |",
                r.label,
                yn(f.hu),
                yn(f.clahe),
                yn(f.bm3d),
                yn(f.median),
                yn(f.zscore)
            );
        }
        let errors: Vec<_> = self
            .rows
            .iter()
            .filter_map(|r| r.outcome.as_ref().err().map(|e| (r.seq, e)))
            .collect();
        if !errors.is_empty() {
            out.push_str("\nFailed rows:\n\n");
            for (seq, e) in errors {
                let _ = writeln!(out, "- {seq}: {e}");
            }
        }
        let (a, b, c) = REFERENCE_SEQ7;
        let _ = writeln!(
            out,
            "\nReference (paper-reported, LiTS, full scale; not comparable to phantom runs): \
             Seq 7 (HU windowing, median, z-score) train/val/test = {a:.2}/{b:.2}/{c:.2}."
        );
        out
    }
}
