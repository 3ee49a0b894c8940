//! Label-augmentation experiment and ablation sweep.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::degrade::{degrade, DegradeMode};
use super::downstream::{evaluate_downstream, train_downstream, DownstreamConfig};
use crate::data::{FusionMode, Sample};
use crate::error::{Error, Result};
use crate::inference::{complete, ModelRegistry, RouteOn};
use crate::masking::PixelMask;
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::training::{self, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub fraction: f64,
    pub degrade_seed: u64,
    pub mode: DegradeMode,
    pub route_on: RouteOn,
    pub downstream: DownstreamConfig,
    /// Also run both arms on undegraded labels.
    pub control: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            degrade_seed: 0,
            mode: DegradeMode::Area,
            route_on: RouteOn::Unknown,
            downstream: DownstreamConfig::default(),
            control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    /// Downstream network trained on degraded labels, UNKNOWN ignored.
    pub arm_degraded: ArmResult,
    /// Downstream network trained on completed labels.
    pub arm_completed: ArmResult,
    /// `arm_completed.miou - arm_degraded.miou`.
    pub delta: f64,
    /// Quality of the completed labels on the blanked area.
    pub completion: Option<EvalReport>,
    pub control_delta: Option<f64>,
    pub train_samples: usize,
    pub test_samples: usize,
}

fn run_arms(train_a: &[&Sample], train_b: &[&Sample], test: &[&Sample], class_count: usize, cfg: &DownstreamConfig) -> Result<(ArmResult, ArmResult)> {
    let arm = |set: &[&Sample]| -> Result<ArmResult> {
        let net = train_downstream(set, class_count, cfg)?;
        let (per_class_iou, miou) = evaluate_downstream(&net, test)?;
        Ok(ArmResult { per_class_iou, miou })
    };
    Ok((arm(train_a)?, arm(train_b)?))
}

/// Trains the downstream network on degraded vs completed labels and compares test mIoU.
pub fn augmentation_experiment(dataset: &Dataset, registry: &ModelRegistry, cfg: &AugmentConfig) -> Result<AugmentReport> {
    let (train, test) = dataset.split_samples()?;
    if test.is_empty() {
        return Err(Error::Data("augmentation experiment needs a test split".into()));
    }
    let c = dataset.manifest.class_count;
    let patch = registry.model(0).config.patch_size;
    let train_ds = Dataset {
        manifest: dataset.manifest.clone(),
        samples: train.iter().map(|s| (*s).clone()).collect(),
    };
    let degraded = degrade(&train_ds, cfg.fraction, patch, cfg.degrade_seed, cfg.mode)?;

    let mut completed = Vec::with_capacity(degraded.dataset.samples.len());
    let mut global = ConfusionMatrix::new(c);
    let mut masked = ConfusionMatrix::new(c);
    for s in &degraded.dataset.samples {
        let out = complete(&s.label, &s.image, registry, cfg.route_on)?;
        let truth = &train_ds.get(&s.name).expect("degraded from train_ds").label;
        let hidden = PixelMask::new(s.label.height, s.label.width, s.label.values.iter().map(|&v| u8::from(v == crate::data::UNKNOWN)).collect())?;
        global.accumulate(&out.label, truth, None)?;
        masked.accumulate(&out.label, truth, Some(&hidden))?;
        completed.push(Sample::new(s.name.clone(), s.image.clone(), out.label)?);
    }
    let completion = EvalReport::from_matrices(&global, &masked, true).ok();

    let arm_a: Vec<&Sample> = degraded.dataset.samples.iter().collect();
    let arm_b: Vec<&Sample> = completed.iter().collect();
    let (arm_degraded, arm_completed) = run_arms(&arm_a, &arm_b, &test, c, &cfg.downstream)?;

    let control_delta = if cfg.control {
        let mut control_b = Vec::with_capacity(train.len());
        for s in &train {
            let out = complete(&s.label, &s.image, registry, cfg.route_on)?;
            control_b.push(Sample::new(s.name.clone(), s.image.clone(), out.label)?);
        }
        let control_b: Vec<&Sample> = control_b.iter().collect();
        let (a, b) = run_arms(&train, &control_b, &test, c, &cfg.downstream)?;
        Some(b.miou - a.miou)
    } else {
        None
    };

    Ok(AugmentReport {
        delta: arm_completed.miou - arm_degraded.miou,
        arm_degraded,
        arm_completed,
        completion,
        control_delta,
        train_samples: train.len(),
        test_samples: test.len(),
    })
}

impl AugmentReport {
    pub fn to_csv(&self) -> String {
        let fmt = |v: &Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from("arm,class,iou\n");
        for (name, arm) in [("degraded", &self.arm_degraded), ("completed", &self.arm_completed)] {
            for (k, v) in arm.per_class_iou.iter().enumerate() {
                let _ = writeln!(out, "{name},{k},{}", fmt(v));
            }
            let _ = writeln!(out, "{name},mean,{:.6}", arm.miou);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub mask_ratios: Vec<f64>,
    pub ips: Vec<bool>,
    pub fusions: Vec<FusionMode>,
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<(f64, bool, FusionMode)> {
        let mut out = Vec::new();
        for &m in &self.mask_ratios {
            for &ips in &self.ips {
                for &f in &self.fusions {
                    out.push((m, ips, f));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mask_ratio: f64,
    pub ips: bool,
    pub fusion: FusionMode,
    pub best_epoch: usize,
    pub val_miou: f64,
    pub val_pa_miou: f64,
}

pub fn cell_name(m: f64, ips: bool, fusion: FusionMode) -> String {
    format!("m{:03}_ips-{}_{fusion}", (m * 100.0).round() as u32, if ips { "on" } else { "off" })
}

/// Trains and validates every grid cell under the same seeds, split and budget.
///
/// With `out` set, each cell writes its training files to its own subdirectory.
pub fn ablation_sweep(grid: &SweepGrid, base: &TrainConfig, samples: &[&Sample], out: Option<&Path>) -> Result<Vec<SweepCell>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let (tr, va) = training::split_indices(samples.len(), base.val_fraction, base.seed);
    let train: Vec<&Sample> = tr.iter().map(|&i| samples[i]).collect();
    let val: Vec<&Sample> = va.iter().map(|&i| samples[i]).collect();
    let mut rows = Vec::with_capacity(cells.len());
    for (m, ips, fusion) in cells {
        let mut cfg = base.clone();
        cfg.model.mask_ratio = m;
        cfg.model.ips = ips;
        cfg.model.fusion = fusion;
        let dir = out.map(|d| d.join(cell_name(m, ips, fusion)));
        let outcome = training::train(&cfg, &train, &val, dir.as_deref())?;
        let report = outcome
            .best_val
            .ok_or_else(|| Error::Config("sweep cells need a validation split".into()))?;
        rows.push(SweepCell {
            mask_ratio: m,
            ips,
            fusion,
            best_epoch: outcome.best_epoch,
            val_miou: report.miou,
            val_pa_miou: report.pa_miou,
        });
    }
    if let Some(d) = out {
        write_sweep(&rows, d)?;
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepCell]) -> String {
    let mut out = String::from("mask_ratio,ips,fusion,best_epoch,val_mIoU,val_PA-mIoU\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.mask_ratio, r.ips, r.fusion, r.best_epoch, r.val_miou, r.val_pa_miou);
    }
    out
}

pub fn write_sweep(rows: &[SweepCell], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("sweep.csv");
    std::fs::write(&csv, sweep_csv(rows)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("sweep.json");
    std::fs::write(&json, serde_json::to_string_pretty(rows)? + "\n").map_err(|e| Error::io(&json, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ModelConfig;
    use crate::harness::synth::{synth_dataset, SynthSpec};
    use crate::model::Model;

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                image_size: 16,
                patch_size: 4,
                ..ModelConfig::tiny()
            },
            epochs: 2,
            batch_size: 4,
            weighting: training::Weighting::Uniform,
            ..TrainConfig::default()
        }
    }

    fn corpus(test_fraction: f64) -> Dataset {
        synth_dataset(&SynthSpec {
            image_size: 16,
            class_count: 3,
            samples: 10,
            test_fraction,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn one_cell_sweep_equals_single_run() {
        let ds = corpus(0.0);
        let refs: Vec<&Sample> = ds.samples.iter().collect();
        let base = tiny_train_config();
        let grid = SweepGrid {
            mask_ratios: vec![0.5],
            ips: vec![true],
            fusions: vec![FusionMode::Layer],
        };
        let dir = tempfile::tempdir().unwrap();
        let rows = ablation_sweep(&grid, &base, &refs, Some(dir.path())).unwrap();
        let (tr, va) = training::split_indices(refs.len(), base.val_fraction, base.seed);
        let train: Vec<&Sample> = tr.iter().map(|&i| refs[i]).collect();
        let val: Vec<&Sample> = va.iter().map(|&i| refs[i]).collect();
        let single = training::train(&base, &train, &val, None).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].val_pa_miou, single.best_val.unwrap().pa_miou);
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn csv_rows_match_grid_size() {
        let grid = SweepGrid {
            mask_ratios: vec![0.5, 0.75],
            ips: vec![true, false],
            fusions: vec![FusionMode::Layer, FusionMode::Direct, FusionMode::Insert],
        };
        assert_eq!(grid.cells().len(), 12);
        let rows: Vec<SweepCell> = grid
            .cells()
            .into_iter()
            .map(|(m, ips, fusion)| SweepCell {
                mask_ratio: m,
                ips,
                fusion,
                best_epoch: 1,
                val_miou: 0.0,
                val_pa_miou: 0.0,
            })
            .collect();
        assert_eq!(sweep_csv(&rows).lines().count(), 13);
    }

    #[test]
    fn augment_report_schema_and_control() {
        let ds = corpus(0.3);
        let model_cfg = ModelConfig {
            image_size: 16,
            patch_size: 4,
            ..ModelConfig::tiny()
        };
        let registry = ModelRegistry::new(vec![(0.5, Model::init(model_cfg, 1).unwrap())]).unwrap();
        let cfg = AugmentConfig {
            downstream: DownstreamConfig {
                width1: 4,
                width2: 4,
                epochs: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let report = augmentation_experiment(&ds, &registry, &cfg).unwrap();
        assert_eq!(report.arm_degraded.per_class_iou.len(), 3);
        assert_eq!(report.arm_completed.per_class_iou.len(), 3);
        assert_eq!(report.control_delta, Some(0.0));
        assert_eq!(report.train_samples + report.test_samples, 10);
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert!(json["arm_degraded"]["per_class_iou"].is_array());
        assert!(json["arm_completed"]["per_class_iou"].is_array());
        assert_eq!(report.to_csv().lines().count(), 1 + 2 * 4);
    }
}
