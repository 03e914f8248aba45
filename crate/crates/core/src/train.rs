//! Reconstruction training with Adam, epoch checkpoints and loss-curve export.

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use image::Rgb;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetManifest, SampleRef};
use crate::error::{Error, Result};
use crate::io_util::{read_file, write_atomic};
use crate::model::{load_checkpoint, save_checkpoint, AutoencoderModel, Checkpoint};
use crate::plot::{save_png, LineChart, Series};
use crate::tensor::{adam_step, mse_loss, AdamParams, AdamState, Tensor};

/// In-memory caching limit for decoded training images.
const CACHE_LIMIT_BYTES: usize = 512 << 20;
const PREFETCH_BATCHES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write `epoch_NNNN.ckpt` every this many epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Seeds the per-epoch batch shuffle.
    pub seed: u64,
    /// Single-threaded loading and gradient computation.
    pub sequential: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamParams::default();
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            checkpoint_every: 10,
            seed: 0,
            sequential: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample loss seen during the epoch, before each batch's update.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Seconds.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

pub const LOSS_CSV_HEADER: &str = "epoch,train_loss,val_loss";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOSS_CSV_HEADER}\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out
    }

    /// Parses [`TrainLog::to_csv`] output. Wall times are not stored in the CSV and come back as 0.
    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOSS_CSV_HEADER) {
            return Err(Error::format(path, format!("expected header `{LOSS_CSV_HEADER}`")));
        }
        let mut epochs = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::format(path, format!("bad row {}: {line}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            epochs.push(EpochStats {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                val_loss: f[2].parse().map_err(|_| bad())?,
                wall_time: 0.0,
            });
        }
        Ok(Self { epochs })
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Writes the CSV to `csv_path` and the rendered chart next to it with a `.png` extension.
pub fn export_loss_curves(log: &TrainLog, csv_path: &Path) -> Result<PathBuf> {
    write_atomic(csv_path, log.to_csv().as_bytes())?;
    let png_path = csv_path.with_extension("png");
    let points = |f: fn(&EpochStats) -> f64| log.epochs.iter().map(|e| (e.epoch as f64, f(e))).collect();
    let chart = LineChart {
        width: 480,
        height: 300,
        title: "LOSS: TRAIN (BLUE) VAL (ORANGE)".into(),
        series: vec![
            Series {
                points: points(|e| e.train_loss),
                color: Rgb([31, 119, 180]),
            },
            Series {
                points: points(|e| e.val_loss),
                color: Rgb([255, 127, 14]),
            },
        ],
    };
    save_png(&chart.render(), &png_path)?;
    Ok(png_path)
}

pub fn load_loss_csv(path: &Path) -> Result<TrainLog> {
    let bytes = read_file(path)?;
    TrainLog::from_csv(&String::from_utf8_lossy(&bytes), path)
}

/// Random-access provider of preprocessed `[1, H, W]` samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<Tensor<f32>>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [Tensor<f32>] {
    fn len(&self) -> usize {
        <[Tensor<f32>]>::len(self)
    }
    fn load(&self, index: usize) -> Result<Tensor<f32>> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<Tensor<f32>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn load(&self, index: usize) -> Result<Tensor<f32>> {
        Ok(self[index].clone())
    }
}

/// Samples decoded from disk on demand.
pub struct ManifestSamples<'a> {
    pub manifest: &'a DatasetManifest,
    pub samples: Vec<SampleRef>,
}

impl<'a> ManifestSamples<'a> {
    /// The given sample ids, in order. Unknown or excluded ids are an error.
    pub fn for_ids(manifest: &'a DatasetManifest, ids: &[String]) -> Result<Self> {
        let all = manifest.samples();
        let samples = ids
            .iter()
            .map(|id| {
                all.binary_search_by(|s| s.id.cmp(id))
                    .map(|i| all[i].clone())
                    .map_err(|_| Error::NotFound(format!("sample {id} is not an included manifest sample")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { manifest, samples })
    }

    pub fn all(manifest: &'a DatasetManifest) -> Self {
        Self {
            manifest,
            samples: manifest.samples(),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// Decodes everything in parallel, preserving order.
    pub fn load_all(&self, sequential: bool) -> Result<Vec<Tensor<f32>>> {
        if sequential {
            (0..self.len()).map(|i| self.load(i)).collect()
        } else {
            (0..self.len()).into_par_iter().map(|i| self.load(i)).collect()
        }
    }
}

impl SampleSource for ManifestSamples<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn load(&self, index: usize) -> Result<Tensor<f32>> {
        let s = &self.samples[index];
        let record = &self.manifest.records[s.record];
        data::load_normalized(&self.manifest.root, record, &self.manifest.preprocessing, s.channel)
    }
}

/// Model, optimizer moments and history; everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: AutoencoderModel<f32>,
    pub optimizer: Vec<AdamState<f32>>,
    pub log: TrainLog,
}

#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    log: TrainLog,
    train_config: TrainConfig,
}

impl TrainState {
    pub fn new(model: AutoencoderModel<f32>) -> Self {
        let optimizer = model
            .parameters()
            .iter()
            .map(|(_, p)| AdamState::new(p.len()))
            .collect();
        Self {
            model,
            optimizer,
            log: TrainLog::default(),
        }
    }

    pub fn completed_epochs(&self) -> usize {
        self.log.epochs.len()
    }

    pub fn save(&self, path: &Path, config: &TrainConfig) -> Result<()> {
        let extra = CheckpointExtra {
            log: self.log.clone(),
            train_config: config.clone(),
        };
        save_checkpoint(
            path,
            &Checkpoint {
                model: self.model.clone(),
                epoch: self.completed_epochs(),
                optimizer: Some(self.optimizer.clone()),
                extra: serde_json::to_value(extra).expect("log serializes"),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint<f32> = load_checkpoint(path)?;
        let model = ckpt.model;
        let optimizer = match ckpt.optimizer {
            Some(o) => o,
            None => return Ok(Self::new(model)),
        };
        let log = serde_json::from_value::<CheckpointExtra>(ckpt.extra)
            .map(|e| e.log)
            .map_err(|e| Error::format(path, format!("checkpoint has no training log: {e}")))?;
        if log.epochs.len() != ckpt.epoch {
            return Err(Error::format(
                path,
                format!("log has {} epochs but checkpoint says {}", log.epochs.len(), ckpt.epoch),
            ));
        }
        Ok(Self { model, optimizer, log })
    }
}

fn per_sample(model: &AutoencoderModel<f32>, images: &[Tensor<f32>], sequential: bool) -> Vec<Result<(f32, AutoencoderModel<f32>)>> {
    if sequential {
        images.iter().map(|x| model.loss_and_grads(x)).collect()
    } else {
        images.par_iter().map(|x| model.loss_and_grads(x)).collect()
    }
}

/// Mean reconstruction loss over every sample of `source`; weights are untouched.
pub fn evaluate_source(model: &AutoencoderModel<f32>, source: &dyn SampleSource, sequential: bool) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty sample set".into()));
    }
    let one = |i: usize| -> Result<f64> {
        let x = source.load(i)?;
        Ok(mse_loss(&model.forward(&x)?, &x)? as f64)
    };
    let losses: Vec<f64> = if sequential {
        (0..source.len()).map(one).collect::<Result<_>>()?
    } else {
        (0..source.len()).into_par_iter().map(one).collect::<Result<_>>()?
    };
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScope {
    Train,
    Validation,
    All,
}

/// Mean reconstruction loss of `model` over one split of the manifest.
pub fn evaluate(model: &AutoencoderModel<f32>, manifest: &DatasetManifest, scope: SplitScope) -> Result<f64> {
    let ids = match scope {
        SplitScope::All => manifest.samples().into_iter().map(|s| s.id).collect(),
        SplitScope::Train => data::split(manifest)?.train,
        SplitScope::Validation => data::split(manifest)?.validation,
    };
    evaluate_source(model, &ManifestSamples::for_ids(manifest, &ids)?, false)
}

fn divergence(epoch: usize, batch: usize, cfg: &TrainConfig, cause: &str) -> Error {
    log::error!("training diverged at epoch {epoch}, batch {batch}: {cause}");
    Error::Divergence {
        epoch,
        batch,
        learning_rate: cfg.learning_rate,
    }
}

/// One optimization step on a batch; returns the summed per-sample losses.
fn train_batch(state: &mut TrainState, images: &[Tensor<f32>], cfg: &TrainConfig, epoch: usize, batch: usize) -> Result<f64> {
    let results = per_sample(&state.model, images, cfg.sequential);
    let mut loss_sum = 0.0f64;
    let mut total: Option<AutoencoderModel<f32>> = None;
    for r in results {
        let (loss, grads) = match r {
            Ok(v) => v,
            Err(Error::Numeric(msg)) => return Err(divergence(epoch, batch, cfg, &msg)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(divergence(epoch, batch, cfg, "loss is not finite"));
        }
        loss_sum += loss as f64;
        match total.as_mut() {
            None => total = Some(grads),
            Some(t) => t.accumulate(&grads)?,
        }
    }
    let mut grads = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    grads.scale(1.0 / images.len() as f32);
    let hp = cfg.adam();
    let params = state.model.parameters_mut();
    let g = grads.parameters();
    for ((p, (_, g)), s) in params.into_iter().zip(g).zip(state.optimizer.iter_mut()) {
        match adam_step(p.data_mut(), g.data(), s, &hp) {
            Ok(()) => {}
            Err(Error::Numeric(msg)) => return Err(divergence(epoch, batch, cfg, &msg)),
            Err(e) => return Err(e),
        }
    }
    Ok(loss_sum)
}

fn load_batch(source: &dyn SampleSource, indices: &[usize]) -> Result<Vec<Tensor<f32>>> {
    indices.iter().map(|&i| source.load(i)).collect()
}

fn check_shapes(model: &AutoencoderModel<f32>, source: &dyn SampleSource) -> Result<()> {
    if source.is_empty() {
        return Ok(());
    }
    let (c, h, w) = model.config.input_shape;
    let first = source.load(0)?;
    if first.shape() != [c, h, w] {
        return Err(Error::Shape(format!(
            "model expects input {:?} but samples are {:?}",
            [c, h, w],
            first.shape()
        )));
    }
    Ok(())
}

/// Continues training `state` until `cfg.epochs` epochs are complete.
///
/// When `checkpoint_dir` is given, `epoch_NNNN.ckpt` is written per
/// `checkpoint_every` and `final.ckpt` after the last epoch. Batch order depends
/// only on `(cfg.seed, epoch)`, so resuming from any checkpoint continues exactly.
pub fn train_state(
    state: &mut TrainState,
    train: &dyn SampleSource,
    validation: &dyn SampleSource,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation sets".into()));
    }
    check_shapes(&state.model, train)?;
    check_shapes(&state.model, validation)?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in state.completed_epochs() + 1..=cfg.epochs {
        let start = Instant::now();
        let order = data::batch_order(train.len(), cfg.batch_size, cfg.seed, epoch)?;
        let mut loss_sum = 0.0;

        if cfg.sequential {
            for (b, indices) in order.iter().enumerate() {
                let images = load_batch(train, indices)?;
                loss_sum += train_batch(state, &images, cfg, epoch, b + 1)?;
            }
        } else {
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel(PREFETCH_BATCHES);
                let order = &order;
                scope.spawn(move || {
                    for indices in order {
                        if tx.send(load_batch(train, indices)).is_err() {
                            break;
                        }
                    }
                });
                for (b, images) in rx.iter().enumerate() {
                    loss_sum += train_batch(state, &images?, cfg, epoch, b + 1)?;
                }
                Ok(())
            })?;
        }

        let train_loss = loss_sum / train.len() as f64;
        let val_loss = evaluate_source(&state.model, validation, cfg.sequential)?;
        if !val_loss.is_finite() {
            return Err(divergence(epoch, order.len(), cfg, "validation loss is not finite"));
        }
        let stats = EpochStats {
            epoch,
            train_loss,
            val_loss,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: train {:.6} val {:.6} ({:.1}s)",
            cfg.epochs,
            stats.train_loss,
            stats.val_loss,
            stats.wall_time
        );
        state.log.epochs.push(stats);

        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                state.save(&dir.join(format!("epoch_{epoch:04}.ckpt")), cfg)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        state.save(&dir.join(FINAL_CHECKPOINT), cfg)?;
    }
    Ok(())
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn sources<'a>(manifest: &'a DatasetManifest, cfg: &TrainConfig) -> Result<(Box<dyn SampleSource + 'a>, Box<dyn SampleSource + 'a>)> {
    let split = data::split(manifest)?;
    let train = ManifestSamples::for_ids(manifest, &split.train)?;
    let val = ManifestSamples::for_ids(manifest, &split.validation)?;
    let (_, h, w) = manifest.target_shape()?;
    let bytes = (train.len() + val.len()) * h * w * std::mem::size_of::<f32>();
    if bytes <= CACHE_LIMIT_BYTES {
        Ok((Box::new(train.load_all(cfg.sequential)?), Box::new(val.load_all(cfg.sequential)?)))
    } else {
        Ok((Box::new(train), Box::new(val)))
    }
}

fn check_manifest(model: &AutoencoderModel<f32>, manifest: &DatasetManifest) -> Result<()> {
    let target = manifest.target_shape()?;
    if model.config.input_shape != target {
        return Err(Error::Shape(format!(
            "model input {:?} does not match preprocessing output {:?}",
            model.config.input_shape, target
        )));
    }
    Ok(())
}

/// Trains a fresh model on the manifest's train split, validating on its validation split.
pub fn train(
    model: AutoencoderModel<f32>,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(AutoencoderModel<f32>, TrainLog)> {
    cfg.validate()?;
    check_manifest(&model, manifest)?;
    let (train, val) = sources(manifest, cfg)?;
    let mut state = TrainState::new(model);
    train_state(&mut state, train.as_ref(), val.as_ref(), cfg, checkpoint_dir)?;
    Ok((state.model, state.log))
}

/// Loads a checkpoint written by [`train`] and continues to `cfg.epochs`.
pub fn resume(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(AutoencoderModel<f32>, TrainLog)> {
    cfg.validate()?;
    let mut state = TrainState::load(checkpoint)?;
    check_manifest(&state.model, manifest)?;
    if state.completed_epochs() > cfg.epochs {
        return Err(Error::Config(format!(
            "checkpoint already has {} epochs, more than the requested {}",
            state.completed_epochs(),
            cfg.epochs
        )));
    }
    let (train, val) = sources(manifest, cfg)?;
    train_state(&mut state, train.as_ref(), val.as_ref(), cfg, checkpoint_dir)?;
    Ok((state.model, state.log))
}
