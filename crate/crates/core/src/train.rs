//! Two-stage training.
//!
//! Stage 1 optimises the classification loss and the global count terms
//! (MSE on absent/within-range categories, ranking on beyond-range ones).
//! Stage 2 adds the spatial terms, with pseudo masks regenerated from the
//! current classification-branch peaks on every batch.

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{partition_categories, CategoryPartition, CountAnnotation, LossReport, PseudoMask};
use crate::error::{Error, Result};
use crate::losses::{batch_objective, image_objective, ImageLossInput, ObjectiveTerms};
use crate::network::{Backbone, Checkpoint, ConvBackbone, Image, Network};
use crate::peaks::{extract_peaks, pseudo_mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone_lr: f64,
    pub head_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lambda_rank: f64,
    /// Fraction of the absent set used by the density branch per batch.
    pub negative_fraction: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub seed: u64,
    /// Include the spatial terms in stage 2.
    pub spatial_loss: bool,
    pub horizontal_flip: bool,
    /// Multiply learning rates by `lr_decay_factor` every this many epochs.
    pub lr_decay_every: Option<usize>,
    pub lr_decay_factor: f64,
    /// Rescale the global gradient norm to at most this value.
    pub grad_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone_lr: 1e-4,
            head_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            lambda_rank: crate::losses::DEFAULT_LAMBDA_RANK,
            negative_fraction: 0.1,
            stage1_epochs: 10,
            stage2_epochs: 10,
            seed: 0,
            spatial_loss: true,
            horizontal_flip: false,
            lr_decay_every: None,
            lr_decay_factor: 0.1,
            grad_clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [("backbone_lr", self.backbone_lr), ("head_lr", self.head_lr)] {
            if !(v.is_finite() && v > 0.0) {
                p.push(format!("train.{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("train.momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            p.push(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            p.push("train.batch_size must be at least 1".into());
        }
        if !(self.lambda_rank.is_finite() && self.lambda_rank >= 0.0) {
            p.push(format!("train.lambda_rank must be non-negative, got {}", self.lambda_rank));
        }
        if !(self.negative_fraction > 0.0 && self.negative_fraction <= 1.0) {
            p.push(format!("train.negative_fraction must be in (0, 1], got {}", self.negative_fraction));
        }
        if self.lr_decay_every == Some(0) {
            p.push("train.lr_decay_every must be at least 1".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            p.push(format!("train.lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c.is_finite() && c > 0.0) {
                p.push(format!("train.grad_clip_norm must be positive, got {c}"));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// One training image with its clamped supervision. Raw counts never
/// reach the trainer.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Image,
    pub annotation: CountAnnotation,
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub stage: u8,
    pub step: u64,
    pub epoch: usize,
    pub report: LossReport,
}

pub const LOSS_LOG_HEADER: &str = "stage,step,epoch,class_loss,sp_plus,sp_minus,mse,rank,lambda_rank,total";

impl LogRecord {
    pub fn to_csv_line(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.stage, self.step, self.epoch, r.class_loss, r.sp_plus, r.sp_minus, r.mse, r.rank, r.lambda_rank, r.total
        )
    }
}

/// Appends records to a loss log, writing the header when the file is new.
pub fn append_loss_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let exists = path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    if !exists {
        buf.push_str(LOSS_LOG_HEADER);
        buf.push('\n');
    }
    for r in records {
        buf.push_str(&r.to_csv_line());
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Result of running one stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    /// Pseudo masks built from fewer than t_c peaks.
    pub fallback_events: u64,
    /// Within-range categories dropped from the spatial term for lack of
    /// any peak.
    pub missing_peak_events: u64,
}

/// Uniform random subset of the absent set of size ⌈fraction·|A|⌉, sorted.
pub fn sample_negatives(partition: &CategoryPartition, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let n = partition.absent.len();
    if n == 0 {
        return Vec::new();
    }
    let k = ((fraction * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, n, k)
        .into_iter()
        .map(|i| partition.absent[i])
        .collect();
    picked.sort_unstable();
    picked
}

pub fn train_stage1(checkpoint: Checkpoint, dataset: &[TrainSample], config: &TrainConfig) -> Result<StageOutcome> {
    run_stage(1, checkpoint, dataset, config)
}

pub fn train_stage2(checkpoint: Checkpoint, dataset: &[TrainSample], config: &TrainConfig) -> Result<StageOutcome> {
    run_stage(2, checkpoint, dataset, config)
}

/// Both stages back to back.
pub fn train_all(checkpoint: Checkpoint, dataset: &[TrainSample], config: &TrainConfig) -> Result<(StageOutcome, StageOutcome)> {
    let s1 = train_stage1(checkpoint, dataset, config)?;
    let s2 = train_stage2(s1.checkpoint.clone(), dataset, config)?;
    Ok((s1, s2))
}

struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buffers: Vec<Vec<f32>>,
}

impl Sgd {
    /// PyTorch-style momentum SGD with coupled weight decay.
    fn step(&mut self, params: Vec<(&mut [f32], &[f32], f64)>, grad_scale: f64) {
        if self.buffers.len() != params.len() {
            self.buffers = params.iter().map(|(p, _, _)| vec![0.0; p.len()]).collect();
        }
        let (mo, wd) = (self.momentum as f32, self.weight_decay as f32);
        let gs = grad_scale as f32;
        for ((p, g, lr), buf) in params.into_iter().zip(self.buffers.iter_mut()) {
            let lr = lr as f32;
            for ((w, &gv), b) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
                let d = gv * gs + wd * *w;
                *b = mo * *b + d;
                *w -= lr * *b;
            }
        }
    }
}

fn stage_seed(seed: u64, stage: u8, step: u64) -> u64 {
    seed ^ (u64::from(stage) << 56) ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn run_stage(stage: u8, checkpoint: Checkpoint, dataset: &[TrainSample], config: &TrainConfig) -> Result<StageOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let epochs = if stage == 1 { config.stage1_epochs } else { config.stage2_epochs };
    let Checkpoint {
        mut network,
        mut step,
        momentum,
        ..
    } = checkpoint;
    let c = network.num_categories();
    if let Some(bad) = dataset.iter().find(|s| s.annotation.num_categories() != c) {
        return Err(Error::IncompatibleCheckpoint(format!(
            "image {} has {} categories, network has {c}",
            bad.annotation.image_id(),
            bad.annotation.num_categories()
        )));
    }
    let spatial = stage == 2 && config.spatial_loss;
    let terms = ObjectiveTerms {
        spatial,
        lambda_rank: config.lambda_rank,
    };
    let mut sgd = Sgd {
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        buffers: momentum.unwrap_or_default(),
    };
    // resumed runs continue the same random stream position
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, stage, step));
    let mut log = Vec::new();
    let mut fallback_events = 0;
    let mut missing_peak_events = 0;
    let partitions: Vec<CategoryPartition> = dataset.iter().map(|s| partition_categories(&s.annotation)).collect();
    let radius = network.config.head.peak_radius;

    for epoch in 0..epochs {
        let decay = config
            .lr_decay_every
            .map_or(1.0, |every| config.lr_decay_factor.powi((epoch / every) as i32));
        let (bb_lr, head_lr) = (config.backbone_lr * decay, config.head_lr * decay);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let flipped: Vec<Option<Image>> = batch
                .iter()
                .map(|&i| (config.horizontal_flip && rng.random_bool(0.5)).then(|| dataset[i].image.flip_horizontal()))
                .collect();
            let images: Vec<&Image> = batch
                .iter()
                .zip(&flipped)
                .map(|(&i, f)| f.as_ref().unwrap_or(&dataset[i].image))
                .collect();
            let (outputs, cache) = network.forward_train(&images)?;

            let mut objectives = Vec::with_capacity(batch.len());
            for (&i, out) in batch.iter().zip(&outputs) {
                let ann = &dataset[i].annotation;
                let part = &partitions[i];
                let density_part = CategoryPartition {
                    absent: sample_negatives(part, config.negative_fraction, &mut rng),
                    within: part.within.clone(),
                    beyond: part.beyond.clone(),
                };
                let cm = &out.category_maps;
                let peaks = (0..c).map(|k| extract_peaks(&cm.channel(k), radius)).collect::<Result<Vec<_>>>()?;
                let mut masks: Vec<Option<PseudoMask>> = vec![None; c];
                if spatial {
                    for &k in &part.within {
                        let t_c = ann.labels()[k].exact().expect("within-range label is exact");
                        match pseudo_mask(&peaks[k], t_c) {
                            Ok(o) => {
                                fallback_events += u64::from(o.fell_back);
                                masks[k] = Some(o.mask);
                            }
                            Err(Error::NoPeaks) => missing_peak_events += 1,
                            Err(e) => return Err(e),
                        }
                    }
                }
                let input = ImageLossInput {
                    category_maps: cm,
                    density_maps: &out.density_maps,
                    annotation: ann,
                    partition: part,
                    density_partition: &density_part,
                    peaks: &peaks,
                    masks: &masks,
                };
                objectives.push(image_objective(&input, terms)?);
            }
            let (report, grads) = batch_objective(&objectives, config.lambda_rank)?;
            if !report.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("{report:?}"),
                });
            }
            let grad = network.backward(&cache, &grads);
            let Network { backbone, head, .. } = &mut network;
            let mut params: Vec<(&mut [f32], &[f32], f64)> = backbone
                .params_with_grads(&grad.backbone)
                .into_iter()
                .map(|(p, g)| (p, g, bb_lr))
                .collect();
            params.extend(head.params_with_grads(&grad.head).into_iter().map(|(p, g)| (p, g, head_lr)));
            let scale = match config.grad_clip_norm {
                Some(max) => {
                    let norm = params
                        .iter()
                        .flat_map(|(_, g, _)| g.iter())
                        .map(|&v| f64::from(v) * f64::from(v))
                        .sum::<f64>()
                        .sqrt();
                    if norm > max {
                        max / norm
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            };
            sgd.step(params, scale);
            step += 1;
            log.push(LogRecord {
                stage,
                step,
                epoch,
                report,
            });
        }
        if let Some(last) = log.last() {
            info!("stage {stage} epoch {epoch}: loss {:.4}", last.report.total);
        }
    }
    if fallback_events > 0 || missing_peak_events > 0 {
        debug!("stage {stage}: {fallback_events} pseudo-mask fallbacks, {missing_peak_events} categories without peaks");
    }
    Ok(StageOutcome {
        checkpoint: Checkpoint {
            network,
            step,
            stage,
            momentum: Some(sgd.buffers),
        },
        log,
        fallback_events,
        missing_peak_events,
    })
}

/// Fresh checkpoint for a dataset with `num_categories` categories.
pub fn initial_checkpoint(config: crate::network::NetworkConfig, seed: u64) -> Result<Checkpoint> {
    Ok(Checkpoint::fresh(Network::<ConvBackbone>::new(config, seed)?))
}
