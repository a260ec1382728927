//! `duonet` command line: train, evaluate, predict, augment, gradcheck, and
//! synthetic dataset generation.
//!
//! Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use duonet::augment::{augment_sample, AugmentationSpec};
use duonet::data::{load_dataset, synthetic_dataset, write_dataset};
use duonet::error::Error;
use duonet::suite::run_standard_suite;
use duonet::train::{parse_config, run_evaluate, run_predict, run_train, SplitSelect, TrainConfig};

#[derive(Parser)]
#[command(name = "duonet", version, about = "DoubleU-Net semantic segmentation on CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct TrainOverrides {
    /// Random seed (initialization, split, shuffling, augmentation)
    #[arg(long)]
    seed: Option<u64>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size
    #[arg(long)]
    batch: Option<usize>,
    /// Architecture: doubleunet or unet
    #[arg(long)]
    model: Option<String>,
    /// Number of epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer: adam or nadam
    #[arg(long)]
    optimizer: Option<String>,
    /// Loss: bce or dice
    #[arg(long)]
    loss: Option<String>,
    /// Input size as HxW (divisible by 16)
    #[arg(long)]
    input_size: Option<String>,
    /// Uniform width scale in (0,1]
    #[arg(long)]
    width_multiplier: Option<f64>,
    /// Augmentation: off, train, or all
    #[arg(long)]
    augment: Option<String>,
    /// Converted VGG-19 weights for the first encoder (doubleunet only)
    #[arg(long)]
    encoder1_weights: Option<PathBuf>,
    /// Train and validate on the whole set (skip the 80/10/10 split)
    #[arg(long)]
    no_split: bool,
    /// Force fully serial execution (always on in this build)
    #[arg(long)]
    deterministic: bool,
}

impl TrainOverrides {
    fn apply(&self, config: &mut TrainConfig) -> duonet::Result<()> {
        let pairs: Vec<(&str, Option<String>)> = vec![
            ("seed", self.seed.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| format!("{v:?}"))),
            ("batch_size", self.batch.map(|v| v.to_string())),
            ("model", self.model.clone()),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("optimizer", self.optimizer.clone()),
            ("loss", self.loss.clone()),
            ("input_size", self.input_size.clone()),
            ("width_multiplier", self.width_multiplier.map(|v| format!("{v:?}"))),
            ("augment", self.augment.clone()),
            (
                "encoder1_weights",
                self.encoder1_weights.as_ref().map(|p| p.display().to_string()),
            ),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        if self.no_split {
            config.set("no_split", "true")?;
        }
        if self.deterministic {
            config.set("deterministic", "true")?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train a model and write checkpoints plus a per-epoch CSV log
    Train {
        /// Flat key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root (images/ + masks/)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and the log
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint directory written by a previous run
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint on a dataset split; prints the metrics CSV
    Evaluate {
        /// Checkpoint directory (model.duow + meta.txt)
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, val, test, or all
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also write the CSV here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment images: writes out1/out2 masks and an input|out1|out2 panel
    Predict {
        #[arg(long)]
        weights: PathBuf,
        /// PNG file or directory of PNGs
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Fan a dataset out 26x with the deterministic augmentation roster
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Finite-difference checks over every primitive and block (f64)
    Gradcheck {
        /// Random seeds per operation
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Generate a synthetic ellipse dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Image size as HxW
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Data(_) | Error::Io(_) | Error::Image(_) | Error::Format { .. } | Error::Shape(_) => 2,
        Error::Numeric(_) | Error::Autodiff(_) => 3,
    }
}

fn parse_hw(value: &str) -> duonet::Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("size: expected HxW, found '{value}'")))?;
    let h = h.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad height '{h}'")))?;
    let w = w.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad width '{w}'")))?;
    Ok((h, w))
}

fn collect_pngs(input: &Path) -> duonet::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("no PNG files under {}", input.display())));
        }
        return Ok(files);
    }
    Err(Error::Data(format!("input {} does not exist", input.display())))
}

fn run(cli: Cli) -> duonet::Result<u8> {
    match cli.command {
        Command::Train { config, data, out, resume, overrides } => {
            let mut cfg = match &config {
                Some(path) => parse_config(path)?,
                None => TrainConfig::default(),
            };
            if let Some(data) = data {
                cfg.data_root = data;
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            overrides.apply(&mut cfg)?;
            if cfg.data_root.as_os_str().is_empty() {
                return Err(Error::Config("no dataset: pass --data or set data_root".into()));
            }
            let summary = run_train(&cfg, resume.as_deref())?;
            println!(
                "trained {} for {} epoch(s), {} optimizer step(s){}",
                cfg.model.as_str(),
                summary.epochs_run,
                summary.steps,
                if summary.stopped_early { " (early stop)" } else { "" }
            );
            println!("best val DSC {:.4}", summary.best_val_dsc);
            println!("log: {}", summary.log_path.display());
            println!("checkpoints: {} and {}", summary.best_dir.display(), summary.last_dir.display());
            Ok(0)
        }
        Command::Evaluate { weights, data, split, threshold, out } => {
            let split = SplitSelect::parse(&split)?;
            let report = run_evaluate(&weights, &data, split, threshold)?;
            let csv = report.to_csv();
            print!("{csv}");
            if let Some(path) = out {
                std::fs::write(&path, &csv)?;
            }
            Ok(0)
        }
        Command::Predict { weights, input, out, threshold } => {
            let inputs = collect_pngs(&input)?;
            let written = run_predict(&weights, &inputs, &out, threshold)?;
            for w in &written {
                println!("{}", w.panel.display());
            }
            println!("wrote {} prediction(s) to {}", written.len(), out.display());
            Ok(0)
        }
        Command::Augment { data, out, seed } => {
            let samples = load_dataset(&data)?;
            let spec = AugmentationSpec::standard(seed);
            let mut augmented = Vec::with_capacity(samples.len() * 26);
            for s in &samples {
                augmented.extend(augment_sample(s, &spec)?);
            }
            write_dataset(&augmented, &out)?;
            println!(
                "augmented {} image(s) into {} (seed {seed}) under {}",
                samples.len(),
                augmented.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Gradcheck { seeds } => {
            if seeds == 0 {
                return Err(Error::Config("gradcheck needs at least one seed".into()));
            }
            let reports = run_standard_suite(seeds)?;
            let mut failures = 0;
            println!("{:<28} {:>12} {:>8} {:>8}", "operation", "max_rel_err", "coords", "status");
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                if !r.passed() {
                    failures += 1;
                }
                println!("{:<28} {:>12.3e} {:>8} {:>8}", r.name, r.max_rel_err, r.coords, status);
            }
            if failures > 0 {
                return Err(Error::Numeric(format!("{failures} gradient check(s) failed")));
            }
            println!("all {} checks passed ({seeds} seed(s) each)", reports.len());
            Ok(0)
        }
        Command::Synth { out, count, size, seed } => {
            let (h, w) = parse_hw(&size)?;
            let samples = synthetic_dataset(count, h, w, seed);
            write_dataset(&samples, &out)?;
            println!("wrote {count} synthetic {h}x{w} sample(s) to {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; keep help/version on stdout, code 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
