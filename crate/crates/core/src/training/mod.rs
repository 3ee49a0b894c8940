//! Seeded training loop, validation, and simple reference baselines.

mod baselines;
mod optimizer;
mod schedule;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{patchify, random_crop_scale, ModelConfig, Sample};
use crate::error::{Error, Result};
use crate::loss::{class_weight_partials, class_weights, weighted_cross_entropy_grad, ClassStats, LossSupport, LossWeights};
use crate::masking::{mixed_select, pixel_mask_from_plan, select_patches, MaskPlan, MaskStrategy};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::model::{checkpoint, Model, ModelParams, Params};
use crate::seed;

pub use baselines::{majority_class, majority_class_baseline, nearest_patch_copy, nearest_patch_copy_baseline};
pub use optimizer::{Adam, AdamConfig};
pub use schedule::PlateauSchedule;

const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_STEP: u64 = 3;
const STREAM_VALIDATION: u64 = 4;
const STREAM_INIT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyMode {
    #[default]
    Mixed,
    Random,
    BackgroundFirst,
    LabelFirst,
}

impl std::str::FromStr for StrategyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Self::Mixed),
            other => Ok(match other.parse::<MaskStrategy>()? {
                MaskStrategy::Random => Self::Random,
                MaskStrategy::BackgroundFirst => Self::BackgroundFirst,
                MaskStrategy::LabelFirst => Self::LabelFirst,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossRegion {
    #[default]
    All,
    Masked,
}

impl std::str::FromStr for LossRegion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "masked" => Ok(Self::Masked),
            _ => Err(Error::Config(format!("unknown loss region '{s}' (expected all|masked)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Frequency-balanced class weights.
    #[default]
    Balanced,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub strategy: StrategyMode,
    pub loss_region: LossRegion,
    pub loss_ignore_background: bool,
    pub weighting: Weighting,
    pub beta: f64,
    pub gamma: f64,
    pub xi: f64,
    /// Let β and γ follow the loss gradient.
    pub trainable_weights: bool,
    /// Side of the random square crop taken before rescaling to the model size.
    pub crop: Option<usize>,
    pub val_fraction: f64,
    /// Write a checkpoint every k epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub plateau_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 200,
            batch_size: 8,
            base_lr: 1e-3,
            seed: 0,
            strategy: StrategyMode::Mixed,
            loss_region: LossRegion::All,
            loss_ignore_background: false,
            weighting: Weighting::Balanced,
            beta: 1.0,
            gamma: 1.0,
            xi: 1e-6,
            trainable_weights: false,
            crop: None,
            val_fraction: 0.2,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
            plateau_patience: 5,
            plateau_threshold: 0.001,
            plateau_factor: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0,1), got {}", self.val_fraction)));
        }
        if let Some(c) = self.crop {
            if c == 0 {
                return Err(Error::Config("crop must be positive".into()));
            }
        }
        PlateauSchedule::new(self.plateau_patience, self.plateau_threshold, self.plateau_factor)?;
        Ok(())
    }

    fn schedule(&self) -> PlateauSchedule {
        PlateauSchedule::new(self.plateau_patience, self.plateau_threshold, self.plateau_factor)
            .expect("validated")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Seeded shuffle of `0..n` split into (train, validation) indices.
pub fn split_indices(n: usize, val_fraction: f64, seed_value: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed_value, &[STREAM_SPLIT])));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    (train, val)
}

/// Class weights for the configured weighting scheme.
pub fn loss_weights(config: &TrainConfig, stats: &ClassStats) -> Result<LossWeights> {
    match config.weighting {
        Weighting::Balanced => class_weights(stats, config.beta, config.gamma, config.xi),
        Weighting::Uniform => Ok(LossWeights::uniform(config.model.class_count)),
    }
}

/// Mask plan used for sample `i` of a training step.
fn training_plan(config: &TrainConfig, sample: &Sample, seed_value: u64) -> Result<MaskPlan> {
    let grid = config.model.grid();
    let m = config.model.mask_ratio;
    match config.strategy {
        StrategyMode::Mixed => mixed_select(&sample.label, &grid, m, seed_value),
        StrategyMode::Random => select_patches(&sample.label, &grid, m, MaskStrategy::Random, seed_value),
        StrategyMode::BackgroundFirst => select_patches(&sample.label, &grid, m, MaskStrategy::BackgroundFirst, seed_value),
        StrategyMode::LabelFirst => select_patches(&sample.label, &grid, m, MaskStrategy::LabelFirst, seed_value),
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Mean of the per-sample losses.
    pub loss: f64,
    /// Mean dL/dw_c, used when class weights are trainable.
    pub weight_grad: Vec<f64>,
}

/// Forward, backward and one Adam update over the mean loss of `batch`.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[&Sample],
    weights: &LossWeights,
    config: &TrainConfig,
    seed_value: u64,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let c = config.model.class_count;
    let size = config.model.image_size;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = model.params.zeros_like();
    let mut loss_sum = 0.0;
    let mut weight_grad = vec![0.0; c];
    for (i, sample) in batch.iter().enumerate() {
        let stream = |k: u64| seed::derive(seed_value, &[i as u64, k]);
        let cropped;
        let sample = match config.crop {
            Some(crop) => {
                let (image, label) = random_crop_scale(&sample.image, &sample.label, crop, size, stream(2))?;
                cropped = Sample {
                    name: sample.name.clone(),
                    image,
                    label,
                };
                &cropped
            }
            None => *sample,
        };
        let plan = training_plan(config, sample, stream(0))?;
        let input = model.prepare(&sample.label, &sample.image)?;
        let mut rng = seed::rng(stream(1));
        let (logits, cache) = model.forward(&input, &plan, Some(&mut rng))?;
        let logits_img = model.logits_image(logits.view())?;
        let region = match config.loss_region {
            LossRegion::All => None,
            LossRegion::Masked => Some(pixel_mask_from_plan(&plan)?),
        };
        let support = LossSupport {
            ignore_class: config.loss_ignore_background.then_some(0),
            region: region.as_ref(),
        };
        let out = match weighted_cross_entropy_grad(&logits_img, &sample.label, weights, support) {
            // A crop or region can leave nothing to supervise; skip that sample.
            Err(Error::EmptyLossSupport) => continue,
            other => other?,
        };
        if !out.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {} at step {} (sample '{}', batch seed {seed_value})",
                out.loss,
                opt.step + 1,
                sample.name
            )));
        }
        loss_sum += out.loss;
        for (k, g) in weight_grad.iter_mut().enumerate() {
            *g += scale * (out.class_nll[k] - out.loss * out.class_pixels[k] as f64) / out.weight_sum;
        }
        let (dlogits, _) = patchify(&out.grad, config.model.patch_size)?;
        let g = model.backward(&cache, dlogits.view());
        for (acc, s) in grads.slices_mut().into_iter().zip(g.slices()) {
            for (a, b) in acc.iter_mut().zip(s) {
                *a += scale * b;
            }
        }
    }
    for s in grads.slices() {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at step {}", opt.step + 1)));
        }
    }
    opt.update(&mut model.params, &grads)?;
    Ok(StepOutput {
        loss: loss_sum * scale,
        weight_grad,
    })
}

/// Fixed Random-strategy plan for validation sample `index`.
pub fn validation_plan(config: &ModelConfig, sample: &Sample, index: usize, seed_value: u64) -> Result<MaskPlan> {
    select_patches(
        &sample.label,
        &config.grid(),
        config.mask_ratio,
        MaskStrategy::Random,
        seed::derive(seed_value, &[STREAM_VALIDATION, index as u64]),
    )
}

/// Evaluates `model` on `samples` under the given plans (global mIoU and PA-mIoU).
pub fn evaluate_with_plans(model: &Model, samples: &[&Sample], plans: &[MaskPlan]) -> Result<EvalReport> {
    if samples.len() != plans.len() {
        return Err(Error::Data(format!("{} samples but {} plans", samples.len(), plans.len())));
    }
    let c = model.config.class_count;
    let mut global = ConfusionMatrix::new(c);
    let mut masked = ConfusionMatrix::new(c);
    for (sample, plan) in samples.iter().zip(plans) {
        let pred = model.predict(&sample.label, &sample.image, plan)?;
        global.accumulate(&pred, &sample.label, None)?;
        masked.accumulate(&pred, &sample.label, Some(&pixel_mask_from_plan(plan)?))?;
    }
    EvalReport::from_matrices(&global, &masked, true)
}

/// Evaluation with the validation plans derived from `seed_value`.
pub fn evaluate(model: &Model, samples: &[&Sample], seed_value: u64) -> Result<EvalReport> {
    let plans = samples
        .iter()
        .enumerate()
        .map(|(i, s)| validation_plan(&model.config, s, i, seed_value))
        .collect::<Result<Vec<_>>>()?;
    evaluate_with_plans(model, samples, &plans)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val_miou: Option<f64>,
    pub val_pa_miou: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut out = String::from("epoch,train_loss,lr,val_mIoU,val_PA-mIoU\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.train_loss, r.lr, opt(r.val_miou), opt(r.val_pa_miou));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub final_model: Model,
    /// Model with the best validation PA-mIoU (the final model when there is no validation set).
    pub best_model: Model,
    pub best_epoch: usize,
    pub best_val: Option<EvalReport>,
    pub weights: LossWeights,
    pub checkpoints: Vec<PathBuf>,
}

/// Two-scalar parameter holder for trainable β and γ.
struct WeightBias([f64; 2]);

impl Params for WeightBias {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        f(prefix.to_string(), vec![2], &self.0);
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        f(&mut self.0);
    }
}

/// Trains on `train_set`, validating on `val_set` after every epoch.
///
/// With `out` set, writes `history.csv`, `best.lmae`, `final.lmae` and periodic
/// `epoch_NNNN.lmae` checkpoints there.
pub fn train(config: &TrainConfig, train_set: &[&Sample], val_set: &[&Sample], out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mcfg = &config.model;
    let stats = ClassStats::from_labels(train_set.iter().map(|s| &s.label), mcfg.class_count)?;
    let mut weights = loss_weights(config, &stats)?;
    let mut model = Model::init(mcfg.clone(), seed::derive(config.seed, &[STREAM_INIT]))?;
    let mut opt = Adam::for_params(config.adam, config.base_lr, &model.params)?;
    let mut bias = WeightBias([weights.beta, weights.gamma]);
    let mut bias_opt = Adam::new(
        AdamConfig {
            weight_decay: 0.0,
            ..config.adam
        },
        config.base_lr,
        2,
    )?;
    let mut schedule = config.schedule();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams, EvalReport)> = None;
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(config.seed, &[STREAM_SHUFFLE, epoch as u64])));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let step_seed = seed::derive(config.seed, &[STREAM_STEP, epoch as u64, b as u64]);
            let step = train_step(&mut model, &mut opt, &batch, &weights, config, step_seed)?;
            if config.trainable_weights && config.weighting == Weighting::Balanced {
                let partials = class_weight_partials(&stats, &weights);
                let mut g = [0.0; 2];
                for (dw, (db, dg)) in step.weight_grad.iter().zip(partials) {
                    g[0] += dw * db;
                    g[1] += dw * dg;
                }
                bias_opt.learning_rate = opt.learning_rate;
                bias_opt.update(&mut bias, &WeightBias(g))?;
                bias.0[0] = bias.0[0].max(1e-6);
                weights = class_weights(&stats, bias.0[0], bias.0[1], config.xi)?;
            }
            loss_sum += step.loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let lr = opt.learning_rate;
        let report = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, val_set, config.seed)?)
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            lr,
            val_miou: report.as_ref().map(|r| r.miou),
            val_pa_miou: report.as_ref().map(|r| r.pa_miou),
        });
        info!(
            "epoch {epoch}: loss {train_loss:.5} lr {lr:.3e} val PA-mIoU {}",
            report.as_ref().map_or("-".into(), |r| format!("{:.4}", r.pa_miou))
        );
        if let Some(r) = report {
            if best.as_ref().is_none_or(|(score, ..)| r.pa_miou > *score) {
                best = Some((r.pa_miou, epoch, model.params.clone(), r));
            }
        }
        opt.learning_rate *= schedule.step(train_loss)?;
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                let path = dir.join(format!("epoch_{epoch:04}.lmae"));
                checkpoint::save(&model, &path)?;
                checkpoints.push(path);
            }
        }
    }

    let (best_epoch, best_model, best_val) = match best {
        Some((_, epoch, params, report)) => (epoch, Model::new(mcfg.clone(), params)?, Some(report)),
        None => (config.epochs, model.clone(), None),
    };
    if let Some(dir) = out {
        let hist = dir.join("history.csv");
        std::fs::write(&hist, history_csv(&history)).map_err(|e| Error::io(&hist, e))?;
        for (name, m) in [("best.lmae", &best_model), ("final.lmae", &model)] {
            let path = dir.join(name);
            checkpoint::save(m, &path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        history,
        final_model: model,
        best_model,
        best_epoch,
        best_val,
        weights,
        checkpoints,
    })
}
