use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use liverseg::error::{Error, Result};
use liverseg::numerics::Real;
use liverseg::preprocess::{apply_pipeline, PipelineSpec};
use liverseg::report::{
    build_dataset, load_cases, phantom_corpus, preprocess_cases, run_grid, save_cases, split_cases,
    write_overlay, Case, GridMode,
};
use liverseg::train::{evaluate, train, volume_dice, EpochLog, TrainConfig};
use liverseg::unet::{load_checkpoint, save_checkpoint, CheckpointMeta, UNetConfig};
use liverseg::volume_io::{
    read_hu, read_mask, volume_base, write_float, write_mask, Dims, PhantomConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "liverseg",
    version,
    about = "CT preprocessing and liver segmentation experiments"
)]
struct Cli {
    /// Seed for phantoms, splits, weight init and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Arithmetic used for training and inference.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Singles,
    Sequences,
}

#[derive(clap::Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 512)]
    channel_cap: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

impl TrainArgs {
    fn configs(&self, seed: u64) -> (TrainConfig, UNetConfig) {
        let cfg = TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            threshold: self.threshold,
            seed,
            ..TrainConfig::default()
        };
        let net = UNetConfig {
            base_channels: self.base_channels,
            levels: self.levels,
            channel_cap: self.channel_cap,
            ..UNetConfig::desk()
        };
        (cfg, net)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic CT volumes with liver masks.
    Phantom {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        depth: usize,
        /// Height and width of each slice.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Scanner noise in HU.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Apply a preprocessing pipeline to every volume in a directory.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// e.g. `hu(-100,400)|median(3)|zscore`; empty for min-max only.
        #[arg(long, default_value = "")]
        pipeline: String,
    },
    /// Train a network on one pipeline and save the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "hu(-100,400)|median(3)|zscore")]
        pipeline: String,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Dice of a checkpoint on every volume in a directory.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one network per pipeline on a shared split.
    Grid {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Sequences)]
        mode: Mode,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Write an input | ground truth | prediction PGM for one slice.
    Overlay {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Volume path without extension; its mask is `<volume>_mask`.
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        slice: usize,
        /// Output file name inside `--out`.
        #[arg(long, default_value = "overlay.pgm")]
        name: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match cli.precision {
        Precision::F32 => dispatch::<f32>(cli),
        Precision::F64 => dispatch::<f64>(cli),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn dispatch<T: Real>(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom {
            count,
            depth,
            size,
            noise,
        } => {
            let mut base = PhantomConfig {
                dims: Dims::new(*depth, *size, *size),
                ..PhantomConfig::default()
            };
            if let Some(n) = noise {
                base.noise_std = *n;
            }
            let cases = phantom_corpus(*count, &base, cli.seed)?;
            if cases.is_empty() {
                return Ok(());
            }
            save_cases(&cli.out, &cases)?;
            println!("wrote {} phantoms to {}", cases.len(), cli.out.display());
            Ok(())
        }
        Command::Preprocess { input, pipeline } => {
            let spec: PipelineSpec = pipeline.parse()?;
            let cases = load_cases(input)?;
            create_dir(&cli.out)?;
            for c in &cases {
                let v = apply_pipeline(&c.volume, &spec)?;
                write_float(&v, &cli.out.join(&c.id))?;
                write_mask(&c.mask, &cli.out.join(format!("{}_mask", c.id)))?;
            }
            println!("preprocessed {} volumes with `{spec}`", cases.len());
            Ok(())
        }
        Command::Train {
            data,
            pipeline,
            args,
        } => {
            let spec: PipelineSpec = pipeline.parse()?;
            let (cfg, net) = args.configs(cli.seed);
            let cases = load_cases(data)?;
            let split = split_cases(&cases, cli.seed)?;
            let dataset = build_dataset(&split, &spec)?;
            create_dir(&cli.out)?;
            let log_path = cli.out.join("epochs.csv");
            let mut log = fs::File::create(&log_path).map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            let _ = writeln!(log, "{}", EpochLog::CSV_HEADER);
            println!("{}", EpochLog::CSV_HEADER);
            let out = train::<T>(&cfg, &net, &dataset, |l| {
                let _ = writeln!(log, "{l}");
                println!("{l}");
            })?;
            let meta = CheckpointMeta {
                pipeline: spec.to_string(),
                threshold: cfg.threshold,
            };
            save_checkpoint(&cli.out.join("model.ckpt"), &out.params, &meta)?;
            let t = cfg.threshold;
            println!(
                "best epoch {}: train {:.2}% val {:.2}% test {:.2}%",
                out.best_epoch,
                100.0 * evaluate(&out.params, &dataset.train, t)?,
                100.0 * evaluate(&out.params, &dataset.val, t)?,
                100.0 * evaluate(&out.params, &dataset.test, t)?,
            );
            Ok(())
        }
        Command::Evaluate { checkpoint, data } => {
            let (params, meta) = load_checkpoint::<T>(checkpoint)?;
            let spec: PipelineSpec = meta.pipeline.parse()?;
            let samples = preprocess_cases(&load_cases(data)?, &spec)?;
            let mean = evaluate(&params, &samples, meta.threshold)?;
            let scores = volume_dice(&params, &samples, meta.threshold)?;
            println!("case,dice");
            for (s, d) in samples.iter().zip(&scores) {
                println!("{},{:.2}", s.id, 100.0 * d);
            }
            println!("mean,{:.2}", 100.0 * mean);
            Ok(())
        }
        Command::Grid { data, mode, args } => {
            let (cfg, net) = args.configs(cli.seed);
            let mode = match mode {
                Mode::Singles => GridMode::Singles,
                Mode::Sequences => GridMode::Sequences,
            };
            let split = split_cases(&load_cases(data)?, cli.seed)?;
            let report = run_grid::<T>(mode, &split, &cfg, &net, |r| match &r.outcome {
                Ok(s) => eprintln!(
                    "{} {:<40} {:.2} {:.2} {:.2} ({:.0}s)",
                    r.seq, r.pipeline, s.train, s.val, s.test, r.seconds
                ),
                Err(e) => eprintln!("{} {:<40} ERROR {e}", r.seq, r.pipeline),
            });
            report.check()?;
            create_dir(&cli.out)?;
            let name = mode.as_str();
            write_text(&cli.out.join(format!("grid_{name}.csv")), &report.to_csv())?;
            write_text(
                &cli.out.join(format!("grid_{name}.md")),
                &report.to_markdown(),
            )?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Overlay {
            checkpoint,
            volume,
            slice,
            name,
        } => {
            let (params, meta) = load_checkpoint::<T>(checkpoint)?;
            let spec: PipelineSpec = meta.pipeline.parse()?;
            let base = volume_base(volume);
            let mut mask_path = base.clone().into_os_string();
            mask_path.push("_mask");
            let case = Case {
                id: base
                    .file_name()
                    .and_then(|s| s.to_str())
                    .unwrap_or("volume")
                    .to_string(),
                volume: read_hu(&base)?,
                mask: read_mask(Path::new(&mask_path))?,
            };
            let dims = case.volume.dims();
            params.cfg().check_spatial(dims.height, dims.width)?;
            let sample = preprocess_cases(std::slice::from_ref(&case), &spec)?.remove(0);
            create_dir(&cli.out)?;
            let path = cli.out.join(name);
            write_overlay(&path, &params, &sample, *slice, meta.threshold)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}
