//! The training loop: data order, pair sampling, metrics and snapshots.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use ndarray::Array3;

use super::{
    checkpoint_path, load_checkpoint, pairs_to_tensors, save_checkpoint, train_step_tensors,
    Objective, TrainState,
};
use crate::config::{PerceptualConfig, Split, TrainConfig};
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::losses::{ConvTapNet, LossReport, PerceptualExtractor, TAP_NAMES};
use crate::networks::PartSegModel;
use crate::tps::{make_pair, ImagePair};

pub const METRICS_HEADER: &str = "step,rec,cls,fg,bg,total,lr,seconds";
pub const METRICS_FILE: &str = "metrics.csv";

/// Images are kept in memory after first use while the training set fits
/// in this many bytes.
const CACHE_LIMIT_BYTES: usize = 1 << 30;

/// The pretrained extractor when weights are configured, otherwise the fixed
/// random stand-in.
pub fn build_extractor(cfg: &PerceptualConfig, dtype: DType, device: &Device) -> Result<ConvTapNet> {
    match &cfg.weights {
        Some(path) => ConvTapNet::vgg19_from_file(path, dtype, device),
        None => {
            let w = cfg.random_width;
            ConvTapNet::random(&[w, 2 * w, 4 * w, 8 * w, 8 * w], cfg.random_seed, dtype, device)
        }
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    /// Unreadable images skipped while batching.
    pub skipped: usize,
    pub last: Option<LossReport>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
    pub dataset: Dataset,
    extractor: ConvTapNet,
    objective: Objective,
    cache: Vec<Option<Array3<f32>>>,
    cache_enabled: bool,
    metrics: BufWriter<File>,
    started: Instant,
    last_checkpoint: Option<PathBuf>,
    skipped: usize,
    dtype: DType,
    device: Device,
}

impl Trainer {
    /// Starts a fresh run on the training split.
    pub fn new(config: &TrainConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let dtype = DType::F32;
        let model = PartSegModel::new(
            &config.model.network(),
            config.model.parts,
            config.dataset.image_size,
            dtype,
            device,
        )?;
        model.init_all(config.train.seed)?;
        let state = TrainState::new(model, config.optimizer, TAP_NAMES.len(), config.train.seed);
        Self::with_state(config, state, None, dtype, device)
    }

    /// Continues the run stored in `checkpoint`.
    pub fn resume(config: &TrainConfig, checkpoint: &Path, device: &Device) -> Result<Self> {
        config.validate()?;
        let dtype = DType::F32;
        let state = load_checkpoint(checkpoint, config, dtype, device)?;
        Self::with_state(config, state, Some(checkpoint.to_path_buf()), dtype, device)
    }

    fn with_state(
        config: &TrainConfig,
        state: TrainState,
        last_checkpoint: Option<PathBuf>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let dataset = load_dataset(&config.dataset.with_split(Split::Train))?;
        if dataset.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no training samples under {}",
                config.dataset.root.display()
            )));
        }
        let extractor = build_extractor(&config.perceptual, dtype, device)?;
        let n = config.dataset.image_size;
        let cache_enabled = dataset.len() * 3 * n * n * 4 <= CACHE_LIMIT_BYTES;
        let metrics = open_metrics(&config.output.dir, state.step)?;
        Ok(Self {
            config: config.clone(),
            objective: Objective {
                weights: config.loss,
                arcface: config.arcface,
                mass_normalization: config.model.mass_normalization,
            },
            cache: vec![None; dataset.len()],
            cache_enabled,
            dataset,
            extractor,
            metrics,
            started: Instant::now(),
            last_checkpoint,
            skipped: 0,
            state,
            dtype,
            device: device.clone(),
        })
    }

    /// Steps the whole run takes: the configured override, or full epochs.
    pub fn total_steps(&self) -> u64 {
        let per_epoch = self.dataset.len().div_ceil(self.config.train.batch_size) as u64;
        self.config
            .train
            .steps
            .unwrap_or(self.config.train.epochs as u64 * per_epoch)
    }

    pub fn extractor(&self) -> &dyn PerceptualExtractor {
        &self.extractor
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    fn image(&mut self, i: usize) -> Result<Array3<f32>> {
        if let Some(img) = &self.cache[i] {
            return Ok(img.clone());
        }
        let img = self.dataset.load(i)?.image;
        if self.cache_enabled {
            self.cache[i] = Some(img.clone());
        }
        Ok(img)
    }

    fn next_pairs(&mut self) -> Result<Vec<ImagePair>> {
        let batch = self.config.train.batch_size;
        let len = self.dataset.len();
        let mut pairs = Vec::with_capacity(batch);
        let mut failures = 0;
        while pairs.is_empty() {
            let indices = self.state.data.next_batch(&mut self.state.rng, len, batch);
            for i in indices {
                match self.image(i) {
                    Ok(img) => pairs.push(make_pair(img.view(), &mut self.state.rng, &self.config.tps)?),
                    Err(e) => {
                        log::warn!("skipping {}: {e}", self.dataset.id(i));
                        self.skipped += 1;
                        failures += 1;
                        if failures >= len {
                            return Err(Error::InvalidInput("no training image could be read".into()));
                        }
                    }
                }
            }
        }
        Ok(pairs)
    }

    /// One optimizer update; appends a metrics row.
    pub fn step(&mut self) -> Result<LossReport> {
        let pairs = self.next_pairs()?;
        let (x1, x2) = pairs_to_tensors(&pairs, self.dtype, &self.device)?;
        let report = train_step_tensors(&mut self.state, &self.extractor, &self.objective, &x1, &x2)
            .map_err(|e| match e {
                Error::Divergence { component, value, .. } => Error::Divergence {
                    component,
                    value,
                    last_checkpoint: self.last_checkpoint.clone(),
                },
                other => other,
            })?;
        let path = self.config.output.dir.join(METRICS_FILE);
        writeln!(
            self.metrics,
            "{},{},{},{},{},{},{},{:.3}",
            self.state.step,
            report.rec,
            report.cls,
            report.fg,
            report.bg,
            report.total,
            self.config.optimizer.lr,
            self.started.elapsed().as_secs_f64()
        )
        .and_then(|_| self.metrics.flush())
        .map_err(|e| Error::io(&path, e))?;
        Ok(report)
    }

    /// Snapshots the current state under the checkpoint directory.
    pub fn checkpoint(&mut self) -> Result<PathBuf> {
        let dir = checkpoint_path(&self.config.output.checkpoint_dir, self.state.step);
        save_checkpoint(&self.state, &self.config, &dir)?;
        self.last_checkpoint = Some(dir.clone());
        Ok(dir)
    }

    /// Trains until the configured step count, snapshotting periodically
    /// and at the end.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let total = self.total_steps();
        let every = self.config.train.checkpoint_every.max(1);
        let mut last = None;
        while self.state.step < total {
            let report = self.step()?;
            let step = self.state.step;
            if step.is_multiple_of(50) || step == 1 {
                log::info!(
                    "step {step}/{total} total {:.4} rec {:.4} cls {:.4} fg {:.4} bg {:.4}",
                    report.total,
                    report.rec,
                    report.cls,
                    report.fg,
                    report.bg
                );
            }
            if step.is_multiple_of(every) && step < total {
                self.checkpoint()?;
            }
            last = Some(report);
        }
        let final_checkpoint = match &self.last_checkpoint {
            Some(p) if p == &checkpoint_path(&self.config.output.checkpoint_dir, self.state.step) => {
                p.clone()
            }
            _ => self.checkpoint()?,
        };
        Ok(TrainOutcome {
            final_checkpoint,
            steps: self.state.step,
            skipped: self.skipped,
            last,
        })
    }
}

/// Opens the metrics file for appending. Rows past `step` left behind by an
/// interrupted run are dropped so a resumed run continues a consistent log.
fn open_metrics(dir: &Path, step: u64) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(METRICS_FILE);
    let mut kept = format!("{METRICS_HEADER}\n");
    if step > 0 && path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in text.lines().skip(1) {
            let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if row_step.is_some_and(|s| s <= step) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
    let file = OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    Ok(BufWriter::new(file))
}

/// Runs a configuration to completion, resuming from `checkpoint` if given.
pub fn train(config: &TrainConfig, checkpoint: Option<&Path>, device: &Device) -> Result<TrainOutcome> {
    let mut trainer = match checkpoint {
        Some(dir) => Trainer::resume(config, dir, device)?,
        None => Trainer::new(config, device)?,
    };
    trainer.run()
}

