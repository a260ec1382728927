//! Training orchestration: configuration, the epoch loop with plateau
//! scheduling and early stopping, checkpointing with exact resume, and the
//! evaluate/predict entry points.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_sample, AugmentationSpec};
use crate::data::{derive_seed, load_dataset, resize_nearest_tensor, resize_sample, split_dataset, Sample, SplitSpec};
use crate::error::{Error, Result};
use crate::layers::absorb_grads;
use crate::metrics::MetricsReport;
use crate::models::{build_model, DoubleUNet, ModelConfig, ModelKind, SegModel, SegOutput, UNet};
use crate::optim::{EarlyStopping, OptimKind, Optimizer, ReduceOnPlateau};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Element, Shape, Tensor};
use crate::weights;

pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Dice,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Dice => "dice",
        }
    }

    pub fn parse(s: &str) -> Result<LossKind> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "dice" => Ok(LossKind::Dice),
            other => Err(Error::Config(format!(
                "unknown loss '{other}', expected one of: bce, dice"
            ))),
        }
    }
}

/// Which splits receive augmentation. `Train` is the honest default
/// recommendation; `All` replicates protocols that augment every split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    Off,
    Train,
    All,
}

impl AugmentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AugmentMode::Off => "off",
            AugmentMode::Train => "train",
            AugmentMode::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<AugmentMode> {
        match s {
            "off" => Ok(AugmentMode::Off),
            "train" => Ok(AugmentMode::Train),
            "all" => Ok(AugmentMode::All),
            other => Err(Error::Config(format!(
                "unknown augment mode '{other}', expected one of: off, train, all"
            ))),
        }
    }
}

/// Full training configuration; file keys and CLI flags share the same
/// names.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub input_size: (usize, usize),
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimKind,
    pub loss: LossKind,
    pub epochs: usize,
    pub seed: u64,
    pub width_multiplier: f64,
    pub augment: AugmentMode,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    /// Skip the 80/10/10 split and use the whole set for both training and
    /// validation (smoke tests on tiny datasets).
    pub no_split: bool,
    /// Converted VGG-19 weights to import into the first encoder before a
    /// fresh training run (doubleunet only).
    pub encoder1_weights: Option<PathBuf>,
    pub threshold: f64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::DoubleUNet,
            input_size: (256, 256),
            batch_size: 16,
            lr: 1e-5,
            optimizer: OptimKind::Nadam,
            loss: LossKind::Bce,
            epochs: 300,
            seed: 42,
            width_multiplier: 1.0,
            augment: AugmentMode::Off,
            data_root: PathBuf::new(),
            out_dir: PathBuf::from("out"),
            no_split: false,
            encoder1_weights: None,
            threshold: 0.5,
            deterministic: true,
        }
    }
}

fn parse_typed<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: expected {expected}, found '{value}'")))
}

fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("{key}: expected HxW, found '{value}'")))?;
    Ok((
        parse_typed::<usize>(key, h.trim(), "integer height")?,
        parse_typed::<usize>(key, w.trim(), "integer width")?,
    ))
}

impl TrainConfig {
    /// Applies one `key = value` assignment; rejects unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.model = ModelKind::parse(value)?,
            "input_size" => self.input_size = parse_size(key, value)?,
            "batch_size" => self.batch_size = parse_typed(key, value, "positive integer")?,
            "lr" => self.lr = parse_typed(key, value, "real")?,
            "optimizer" => self.optimizer = OptimKind::parse(value)?,
            "loss" => self.loss = LossKind::parse(value)?,
            "epochs" => self.epochs = parse_typed(key, value, "positive integer")?,
            "seed" => self.seed = parse_typed(key, value, "unsigned integer")?,
            "width_multiplier" => self.width_multiplier = parse_typed(key, value, "real")?,
            "augment" => self.augment = AugmentMode::parse(value)?,
            "data_root" => self.data_root = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "no_split" => self.no_split = parse_typed(key, value, "true or false")?,
            "encoder1_weights" => {
                self.encoder1_weights = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "threshold" => self.threshold = parse_typed(key, value, "real in (0,1)")?,
            "deterministic" => self.deterministic = parse_typed(key, value, "true or false")?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must be in (0,1), got {}",
                self.threshold
            )));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_size: self.input_size,
            width_multiplier: self.width_multiplier,
            use_pretrained_encoder1: self.encoder1_weights.is_some(),
            ..ModelConfig::default()
        }
    }

    /// Key/value snapshot; `set` on each pair reconstructs the config.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("model".into(), self.model.as_str().into()),
            ("input_size".into(), format!("{}x{}", self.input_size.0, self.input_size.1)),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), format!("{:?}", self.lr)),
            ("optimizer".into(), self.optimizer.as_str().into()),
            ("loss".into(), self.loss.as_str().into()),
            ("epochs".into(), self.epochs.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("width_multiplier".into(), format!("{:?}", self.width_multiplier)),
            ("augment".into(), self.augment.as_str().into()),
            ("data_root".into(), self.data_root.display().to_string()),
            ("out_dir".into(), self.out_dir.display().to_string()),
            ("no_split".into(), self.no_split.to_string()),
            (
                "encoder1_weights".into(),
                self.encoder1_weights
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("threshold".into(), format!("{:?}", self.threshold)),
            ("deterministic".into(), self.deterministic.to_string()),
        ]
    }
}

/// Parses a flat `key = value` UTF-8 config file ('#' starts a comment).
pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected 'key = value', found '{line}'",
                path.display(),
                lineno + 1
            ))
        })?;
        config.set(key.trim(), value.trim())?;
    }
    Ok(config)
}

/// Stacks samples into `(images, masks)` batch tensors.
pub fn stack_batch(samples: &[&Sample]) -> (Tensor<f32>, Tensor<f32>) {
    let s0 = samples[0].image.shape();
    let m0 = samples[0].mask.shape();
    let n = samples.len();
    let mut images = vec![0.0f32; n * s0.c * s0.h * s0.w];
    let mut masks = vec![0.0f32; n * m0.h * m0.w];
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.image.shape(), s0, "batch images must share one shape");
        images[i * s0.c * s0.h * s0.w..(i + 1) * s0.c * s0.h * s0.w]
            .copy_from_slice(s.image.data());
        masks[i * m0.h * m0.w..(i + 1) * m0.h * m0.w].copy_from_slice(s.mask.data());
    }
    (
        Tensor::from_vec(Shape::new(n, s0.c, s0.h, s0.w), images),
        Tensor::from_vec(Shape::new(n, 1, m0.h, m0.w), masks),
    )
}

/// Extracts batch item `n` as a `(1,C,H,W)` tensor.
pub fn slice_batch_item(t: &Tensor<f32>, n: usize) -> Tensor<f32> {
    let s = t.shape();
    let plane = s.c * s.h * s.w;
    Tensor::from_vec(
        Shape::new(1, s.c, s.h, s.w),
        t.data()[n * plane..(n + 1) * plane].to_vec(),
    )
}

/// Mean of the per-head losses (both sigmoid heads are supervised on the
/// same target; the stacked architecture averages them).
pub fn seg_loss(
    tape: &mut Tape<f32>,
    output: &SegOutput,
    target: &Tensor<f32>,
    kind: LossKind,
) -> Result<Var> {
    let mut losses = Vec::with_capacity(output.masks.len());
    for &m in &output.masks {
        losses.push(match kind {
            LossKind::Bce => tape.bce_loss(m, target)?,
            LossKind::Dice => tape.dice_loss(m, target, DICE_SMOOTH)?,
        });
    }
    if losses.len() == 1 {
        return Ok(losses[0]);
    }
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l)?;
    }
    let scale = tape.constant_scalar(1.0 / losses.len() as f64)?;
    tape.mul(acc, scale)
}

/// Eval-mode pass over a sample set: mean loss plus the per-image metric
/// report on the primary mask.
pub fn evaluate_model(
    model: &mut dyn SegModel<f32>,
    samples: &[Sample],
    batch_size: usize,
    loss: LossKind,
    threshold: f64,
) -> Result<(f64, MetricsReport)> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut report = MetricsReport::new(threshold);
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, masks) = stack_batch(&refs);
        let mut tape = Tape::new();
        let x = tape.constant(images)?;
        let out = model.forward(&mut tape, x, Mode::Eval)?;
        let l = seg_loss(&mut tape, &out, &masks, loss)?;
        loss_sum += tape.value(l).data()[0].to_f64() * chunk.len() as f64;
        count += chunk.len();
        let pred = tape.value(out.primary()).clone();
        for (i, s) in chunk.iter().enumerate() {
            report.push(&s.id, &slice_batch_item(&pred, i), &s.mask)?;
        }
    }
    Ok((loss_sum / count as f64, report))
}

/// One CSV log line per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dsc: f64,
    pub val_miou: f64,
    pub lr: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:e}\n",
            self.epoch, self.train_loss, self.val_loss, self.val_dsc, self.val_miou, self.lr
        )
    }
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,val_dsc,val_miou,lr\n";

/// Mutable schedule state persisted in checkpoints.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub best_val_dsc: f64,
    pub plateau: ReduceOnPlateau,
    pub early: EarlyStopping,
}

impl TrainState {
    fn fresh(lr: f64) -> TrainState {
        TrainState {
            epoch: 0,
            lr,
            best_val_dsc: f64::NEG_INFINITY,
            plateau: ReduceOnPlateau::default(),
            early: EarlyStopping::default(),
        }
    }
}

fn write_meta(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "epoch = {}", state.epoch);
    let _ = writeln!(text, "lr = {:?}", state.lr);
    let _ = writeln!(text, "best_val_dsc = {:?}", state.best_val_dsc);
    let _ = writeln!(text, "plateau_best = {:?}", state.plateau.best);
    let _ = writeln!(text, "plateau_wait = {}", state.plateau.wait);
    let _ = writeln!(text, "early_best = {:?}", state.early.best);
    let _ = writeln!(text, "early_wait = {}", state.early.wait);
    let _ = writeln!(text, "early_stopped = {}", state.early.stopped);
    for (k, v) in config.to_key_values() {
        let _ = writeln!(text, "config.{k} = {v}");
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn read_meta(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let text = std::fs::read_to_string(path)?;
    let mut state = TrainState::fresh(0.0);
    let mut config = TrainConfig::default();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad meta line '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "epoch" => state.epoch = parse_typed(key, value, "integer")?,
            "lr" => state.lr = parse_typed(key, value, "real")?,
            "best_val_dsc" => state.best_val_dsc = parse_typed(key, value, "real")?,
            "plateau_best" => state.plateau.best = parse_typed(key, value, "real")?,
            "plateau_wait" => state.plateau.wait = parse_typed(key, value, "integer")?,
            "early_best" => state.early.best = parse_typed(key, value, "real")?,
            "early_wait" => state.early.wait = parse_typed(key, value, "integer")?,
            "early_stopped" => state.early.stopped = parse_typed(key, value, "bool")?,
            other => {
                if let Some(ck) = other.strip_prefix("config.") {
                    config.set(ck, value)?;
                } else {
                    return Err(Error::format(path, format!("unknown meta key '{other}'")));
                }
            }
        }
    }
    Ok((state, config))
}

/// Writes `model.duow`, `optim.duow`, and `meta.txt` under `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &mut dyn SegModel<f32>,
    optimizer: &Optimizer<f32>,
    state: &TrainState,
    config: &TrainConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    weights::save_weights(model, &dir.join("model.duow"))?;
    weights::save_entries(&optimizer.state_entries(), &dir.join("optim.duow"))?;
    write_meta(&dir.join("meta.txt"), state, config)
}

/// Rebuilds the model recorded in a checkpoint directory and loads its
/// weights.
pub fn load_checkpoint_model(dir: &Path) -> Result<(Box<dyn SegModel<f32>>, TrainState, TrainConfig)> {
    let (state, config) = read_meta(&dir.join("meta.txt"))?;
    let mut model = build_model::<f32>(config.model, config.model_config(), config.seed)?;
    weights::load_weights(model.as_mut(), &dir.join("model.duow"))?;
    Ok((model, state, config))
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Outcome of `run_train`.
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: u64,
    pub stopped_early: bool,
    pub best_val_dsc: f64,
    pub final_val_loss: f64,
    pub log: Vec<EpochLog>,
    pub best_dir: PathBuf,
    pub last_dir: PathBuf,
    pub log_path: PathBuf,
}

/// Builds the configured architecture and, for a fresh DoubleU-Net run,
/// imports converted first-encoder weights when the config names them.
pub fn build_train_model(config: &TrainConfig) -> Result<Box<dyn SegModel<f32>>> {
    match config.model {
        ModelKind::DoubleUNet => {
            let mut model = DoubleUNet::new(config.model_config(), config.seed)?;
            if let Some(path) = &config.encoder1_weights {
                model.load_encoder1_weights(path)?;
            }
            Ok(Box::new(model))
        }
        ModelKind::UNet => {
            if config.encoder1_weights.is_some() {
                return Err(Error::Config(
                    "encoder1_weights applies to the doubleunet model only".into(),
                ));
            }
            Ok(Box::new(UNet::new(config.model_config(), config.seed)?))
        }
    }
}

/// Loads, resizes, splits, and optionally augments the dataset per config.
pub fn prepare_data(config: &TrainConfig) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let raw = load_dataset(&config.data_root)?;
    let (h, w) = config.input_size;
    let resized: Vec<Sample> = raw.iter().map(|s| resize_sample(s, h, w)).collect();
    let (train, val, test) = if config.no_split {
        (resized.clone(), resized, Vec::new())
    } else {
        split_dataset(resized, SplitSpec { seed: config.seed })?
    };
    let fan_out = |set: Vec<Sample>| -> Result<Vec<Sample>> {
        let spec = AugmentationSpec::standard(config.seed);
        let mut out = Vec::with_capacity(set.len() * 26);
        for s in &set {
            for augmented in augment_sample(s, &spec)? {
                // axis-swapping transforms change H x W on non-square
                // inputs; batches need one shape, so restore the input size
                if augmented.image.shape().h != h || augmented.image.shape().w != w {
                    out.push(resize_sample(&augmented, h, w));
                } else {
                    out.push(augmented);
                }
            }
        }
        Ok(out)
    };
    Ok(match config.augment {
        AugmentMode::Off => (train, val, test),
        AugmentMode::Train => (fan_out(train)?, val, test),
        AugmentMode::All => (fan_out(train)?, fan_out(val)?, fan_out(test)?),
    })
}

/// Trains per config. `resume` continues from a `last` checkpoint with an
/// identical trajectory to an uninterrupted run.
pub fn run_train(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let (train_set, val_set, _test) = prepare_data(config)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(
            "training requires non-empty train and validation splits".into(),
        ));
    }

    let mut model: Box<dyn SegModel<f32>>;
    let mut optimizer;
    let mut state;
    match resume {
        Some(dir) => {
            let (m, s, ckpt_config) = load_checkpoint_model(dir)?;
            if ckpt_config.model != config.model {
                return Err(Error::Config(format!(
                    "checkpoint holds a {} model but config asks for {}",
                    ckpt_config.model.as_str(),
                    config.model.as_str()
                )));
            }
            if ckpt_config.optimizer != config.optimizer {
                return Err(Error::Config(format!(
                    "checkpoint was trained with {} but config asks for {}",
                    ckpt_config.optimizer.as_str(),
                    config.optimizer.as_str()
                )));
            }
            model = m;
            state = s;
            optimizer = Optimizer::new(config.optimizer, state.lr);
            optimizer.load_state_entries(weights::load_entries(&dir.join("optim.duow"))?)?;
        }
        None => {
            model = build_train_model(config)?;
            optimizer = Optimizer::new(config.optimizer, config.lr);
            state = TrainState::fresh(config.lr);
        }
    }

    let log_path = config.out_dir.join("log.csv");
    let mut log_file = std::fs::File::create(&log_path)?;
    log_file.write_all(LOG_HEADER.as_bytes())?;

    let best_dir = config.out_dir.join("best");
    let last_dir = config.out_dir.join("last");
    let mut log = Vec::new();
    let mut steps: u64 = 0;
    let mut stopped_early = false;
    let mut final_val_loss = f64::NAN;

    let start_epoch = state.epoch + 1;
    for epoch in start_epoch..=config.epochs {
        if state.early.stopped {
            stopped_early = true;
            break;
        }
        let lr_this_epoch = state.lr;
        optimizer.lr = lr_this_epoch;

        let order = shuffled_indices(train_set.len(), derive_seed(config.seed, "shuffle", epoch as u64));
        let mut train_loss_sum = 0.0;
        let mut seen = 0usize;
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = batch_idx.iter().map(|&i| &train_set[i]).collect();
            let (images, masks) = stack_batch(&batch);
            let mut tape = Tape::new();
            let x = tape.constant(images)?;
            let out = model.forward(&mut tape, x, Mode::Train)?;
            let loss = seg_loss(&mut tape, &out, &masks, config.loss)?;
            let loss_value = tape.value(loss).data()[0].to_f64();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss {loss_value} at epoch {epoch}, step {}",
                    steps + 1
                )));
            }
            tape.backward(loss)?;
            absorb_grads(model.as_mut(), &tape);
            optimizer.step(model.as_mut())?;
            steps += 1;
            train_loss_sum += loss_value * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = train_loss_sum / seen as f64;

        let (val_loss, report) = evaluate_model(
            model.as_mut(),
            &val_set,
            config.batch_size,
            config.loss,
            config.threshold,
        )?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss {val_loss} at epoch {epoch}"
            )));
        }
        final_val_loss = val_loss;
        let row = EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_dsc: report.mean_dsc(),
            val_miou: report.mean_miou(),
            lr: lr_this_epoch,
        };
        log_file.write_all(row.csv_row().as_bytes())?;
        log_file.flush()?;
        log.push(row);

        state.epoch = epoch;
        state.lr = state.plateau.observe(val_loss, lr_this_epoch);
        let stop = state.early.observe(val_loss);

        if report.mean_dsc() > state.best_val_dsc {
            state.best_val_dsc = report.mean_dsc();
            save_checkpoint(&best_dir, model.as_mut(), &optimizer, &state, config)?;
        }
        save_checkpoint(&last_dir, model.as_mut(), &optimizer, &state, config)?;

        if stop {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainSummary {
        epochs_run: log.len(),
        steps,
        stopped_early,
        best_val_dsc: state.best_val_dsc,
        final_val_loss,
        log,
        best_dir,
        last_dir,
        log_path,
    })
}

/// Raw fixed-step training loop used by capacity checks: cycles shuffled
/// minibatches for exactly `steps` optimizer steps, evaluating the train-set
/// DSC every `eval_every` steps. Returns `(step, dsc)` measurements.
#[allow(clippy::too_many_arguments)]
pub fn overfit_steps(
    model: &mut dyn SegModel<f32>,
    optimizer: &mut Optimizer<f32>,
    samples: &[Sample],
    batch_size: usize,
    steps: u64,
    loss: LossKind,
    eval_every: u64,
    seed: u64,
) -> Result<Vec<(u64, f64)>> {
    let mut measurements = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut pass = 0u64;
    for step in 1..=steps {
        let mut batch: Vec<&Sample> = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor >= order.len() {
                order = shuffled_indices(samples.len(), derive_seed(seed, "overfit", pass));
                pass += 1;
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let (images, masks) = stack_batch(&batch);
        let mut tape = Tape::new();
        let x = tape.constant(images)?;
        let out = model.forward(&mut tape, x, Mode::Train)?;
        let l = seg_loss(&mut tape, &out, &masks, loss)?;
        let loss_value = tape.value(l).data()[0].to_f64();
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        tape.backward(l)?;
        absorb_grads(model, &tape);
        optimizer.step(model)?;
        if step % eval_every == 0 || step == steps {
            let (_, report) = evaluate_model(model, samples, batch_size, loss, 0.5)?;
            measurements.push((step, report.mean_dsc()));
        }
    }
    Ok(measurements)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSelect {
    Train,
    Val,
    Test,
    All,
}

impl SplitSelect {
    pub fn parse(s: &str) -> Result<SplitSelect> {
        match s {
            "train" => Ok(SplitSelect::Train),
            "val" => Ok(SplitSelect::Val),
            "test" => Ok(SplitSelect::Test),
            "all" => Ok(SplitSelect::All),
            other => Err(Error::Config(format!(
                "unknown split '{other}', expected one of: train, val, test, all"
            ))),
        }
    }
}

/// Evaluates a checkpoint on one split of a dataset, reproducing the
/// training-time split by seed.
pub fn run_evaluate(
    checkpoint: &Path,
    data_root: &Path,
    split: SplitSelect,
    threshold: f64,
) -> Result<MetricsReport> {
    let (mut model, _, mut config) = load_checkpoint_model(checkpoint)?;
    config.data_root = data_root.to_path_buf();
    let samples = match split {
        SplitSelect::All => {
            let raw = load_dataset(data_root)?;
            let (h, w) = config.input_size;
            raw.iter().map(|s| resize_sample(s, h, w)).collect()
        }
        _ => {
            let (train, val, test) = prepare_data(&config)?;
            match split {
                SplitSelect::Train => train,
                SplitSelect::Val => val,
                SplitSelect::Test => test,
                SplitSelect::All => unreachable!(),
            }
        }
    };
    if samples.is_empty() {
        return Err(Error::Data("no samples in the selected split".into()));
    }
    let (_, report) = evaluate_model(
        model.as_mut(),
        &samples,
        config.batch_size,
        config.loss,
        threshold,
    )?;
    Ok(report)
}

fn round_up_16(v: usize) -> usize {
    (v.div_ceil(16) * 16).max(16)
}

/// Prediction artifacts for one input image.
pub struct PredictionPaths {
    pub out1: PathBuf,
    pub out2: PathBuf,
    pub panel: PathBuf,
}

/// Runs eval-mode inference on image files and writes binarized `out1` and
/// `out2` masks plus an `input | out1 | out2` panel per image. Outputs keep
/// each input's original size.
pub fn run_predict(
    checkpoint: &Path,
    inputs: &[PathBuf],
    out_dir: &Path,
    threshold: f64,
) -> Result<Vec<PredictionPaths>> {
    let (mut model, _, _) = load_checkpoint_model(checkpoint)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for path in inputs {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        let (w0, h0) = (img.width() as usize, img.height() as usize);
        let tensor = crate::data::image_to_tensor(&img);
        let (h, w) = (round_up_16(h0), round_up_16(w0));
        let resized = crate::data::resize_bilinear_tensor(&tensor, h, w);

        let mut tape = Tape::new();
        let x = tape.constant(resized)?;
        let out = model.forward(&mut tape, x, Mode::Eval)?;
        let (m1, m2) = match out.masks.as_slice() {
            [only] => (*only, *only),
            [first, second, ..] => (*first, *second),
            [] => return Err(Error::shape("model produced no masks")),
        };
        let binarize_back = |t: &Tensor<f32>| -> Tensor<f32> {
            let hard = crate::metrics::binarize(t, threshold);
            resize_nearest_tensor(&hard, h0, w0)
        };
        let mask1 = binarize_back(tape.value(m1));
        let mask2 = binarize_back(tape.value(m2));

        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let out1_path = out_dir.join(format!("{stem}_out1.png"));
        let out2_path = out_dir.join(format!("{stem}_out2.png"));
        let panel_path = out_dir.join(format!("{stem}_panel.png"));
        crate::data::tensor_to_mask(&mask1).save(&out1_path)?;
        crate::data::tensor_to_mask(&mask2).save(&out2_path)?;

        // input | out1 | out2, each column at the input's size
        let mut panel = image::RgbImage::new((3 * w0) as u32, h0 as u32);
        for y in 0..h0 {
            for x in 0..w0 {
                panel.put_pixel(x as u32, y as u32, *img.get_pixel(x as u32, y as u32));
                let v1 = (mask1.at(0, 0, y, x) * 255.0) as u8;
                let v2 = (mask2.at(0, 0, y, x) * 255.0) as u8;
                panel.put_pixel((w0 + x) as u32, y as u32, image::Rgb([v1, v1, v1]));
                panel.put_pixel((2 * w0 + x) as u32, y as u32, image::Rgb([v2, v2, v2]));
            }
        }
        panel.save(&panel_path)?;
        written.push(PredictionPaths {
            out1: out1_path,
            out2: out2_path,
            panel: panel_path,
        });
    }
    Ok(written)
}
