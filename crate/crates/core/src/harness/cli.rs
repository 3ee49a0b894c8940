//! `labelmae` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use super::dataset::{write_label, Dataset};
use super::degrade::{degrade_dir, DegradeMode};
use super::experiment::{ablation_sweep, augmentation_experiment, AugmentConfig, SweepGrid};
use super::manifest::{digest_tree, ExperimentManifest, FileDigest};
use super::synth::{synth_generate, SynthSpec};
use crate::data::{FusionMode, Sample};
use crate::error::{Error, Result};
use crate::inference::{complete, ModelRegistry, RouteOn};
use crate::loss::{ClassStats, StatsFile};
use crate::masking::{pixel_mask_from_plan, read_plans, write_plans, MaskPlan, PlanRecord};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::model::checkpoint;
use crate::training::{self, LossRegion, StrategyMode, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "labelmae", version, about = "Label completion for partially annotated segmentation data")]
pub struct Cli {
    /// Base seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with [synth], [train] and [augment] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl From<OnOff> for bool {
    fn from(v: OnOff) -> bool {
        v == OnOff::On
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shapes corpus.
    Synth(SynthArgs),
    /// Class statistics and loss weights of a dataset (stats.json).
    Stats(InArgs),
    /// Hide part of every label (or drop samples).
    Degrade(DegradeArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Fill UNKNOWN pixels using a registry of models.
    Complete(CompleteArgs),
    /// mIoU / PA-mIoU of a checkpoint, or of predicted labels against ground truth.
    Eval(EvalArgs),
    /// Experiments built from the other commands.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Train every cell of a mask-ratio × IPS × fusion grid.
    Sweep(SweepArgs),
    /// Re-run a command from its manifest and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCommand {
    /// Downstream training on degraded vs completed labels.
    Augment(AugmentArgs),
}

#[derive(Debug, Args)]
pub struct InArgs {
    /// Dataset directory.
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub shapes_min: Option<usize>,
    #[arg(long)]
    pub shapes_max: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    /// Patch size used as degradation granularity.
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    #[arg(long, value_enum, default_value = "area")]
    pub degrade_mode: DegradeModeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DegradeModeArg {
    Area,
    Samples,
}

impl From<DegradeModeArg> for DegradeMode {
    fn from(v: DegradeModeArg) -> Self {
        match v {
            DegradeModeArg::Area => DegradeMode::Area,
            DegradeModeArg::Samples => DegradeMode::Samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RouteOnArg {
    Unknown,
    Background,
}

impl From<RouteOnArg> for RouteOn {
    fn from(v: RouteOnArg) -> Self {
        match v {
            RouteOnArg::Unknown => RouteOn::Unknown,
            RouteOnArg::Background => RouteOn::Background,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossRegionArg {
    All,
    Masked,
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// mixed | random | background-first | label-first
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long, value_enum)]
    pub loss_region: Option<LossRegionArg>,
    /// Leave background pixels out of the loss.
    #[arg(long)]
    pub loss_ignore_background: bool,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

/// Settings that the sweep varies as grid axes.
#[derive(Debug, Args, Default)]
pub struct ModelOverrides {
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long, value_enum)]
    pub ips: Option<OnOff>,
    /// layer | direct | insert
    #[arg(long)]
    pub fusion: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[command(flatten)]
    pub model: ModelOverrides,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "unknown")]
    pub route_on: RouteOnArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth dataset.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Evaluate this checkpoint (masks from --plans, or seeded Random masks).
    #[arg(long, conflicts_with = "pred")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate labels in this dataset directory (e.g. the output of `complete`).
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// plans.jsonl naming the masked patches per sample.
    #[arg(long)]
    pub plans: Option<PathBuf>,
    /// Patch size the plans refer to (with --pred).
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub degrade_mode: Option<DegradeModeArg>,
    #[arg(long, value_enum)]
    pub route_on: Option<RouteOnArg>,
    /// Downstream training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub mask_ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "on,off")]
    pub ips: Vec<OnOff>,
    #[arg(long, value_delimiter = ',', default_value = "layer")]
    pub fusions: Vec<String>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Everything a `--config` file may hold.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Toml(format!("{}: {e}", path.display())))
    }
}

fn apply_overrides(cfg: &mut TrainConfig, o: &TrainOverrides) -> Result<()> {
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = &o.strategy {
        cfg.strategy = v.parse::<StrategyMode>().map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Some(v) = o.loss_region {
        cfg.loss_region = match v {
            LossRegionArg::All => LossRegion::All,
            LossRegionArg::Masked => LossRegion::Masked,
        };
    }
    if o.loss_ignore_background {
        cfg.loss_ignore_background = true;
    }
    if let Some(v) = o.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate()
}

fn apply_model_overrides(cfg: &mut TrainConfig, o: &ModelOverrides) -> Result<()> {
    if let Some(v) = o.mask_ratio {
        cfg.model.mask_ratio = v;
    }
    if let Some(v) = o.ips {
        cfg.model.ips = v.into();
    }
    if let Some(v) = &o.fusion {
        cfg.model.fusion = v.parse::<FusionMode>().map_err(|e| Error::Config(e.to_string()))?;
    }
    cfg.validate()
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Loads a dataset and checks its class count and image size against the model.
fn load_for_model(dir: &Path, cfg: &mut TrainConfig) -> Result<Dataset> {
    let ds = Dataset::load(dir)?;
    if ds.manifest.class_count != cfg.model.class_count || ds.manifest.image_size != cfg.model.image_size {
        info!(
            "adopting class_count {} and image_size {} from the dataset",
            ds.manifest.class_count, ds.manifest.image_size
        );
        cfg.model.class_count = ds.manifest.class_count;
        cfg.model.image_size = ds.manifest.image_size;
        cfg.validate()?;
    }
    Ok(ds)
}

struct RunRecord {
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<FileDigest>,
}

fn record(config: &impl Serialize, seeds: &[(&str, u64)], inputs: &[&Path]) -> Result<RunRecord> {
    let mut digests = Vec::new();
    for p in inputs {
        for mut d in digest_tree(p)? {
            if p.is_dir() {
                d.path = format!("{}/{}", p.display(), d.path);
            }
            digests.push(d);
        }
    }
    Ok(RunRecord {
        config: serde_json::to_value(config)?,
        seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        inputs: digests,
    })
}

fn finish(args: &[String], out: &Path, rec: RunRecord) -> Result<()> {
    let outputs = digest_tree(out)?;
    ExperimentManifest::new(args.to_vec(), rec.config, rec.seeds, rec.inputs, outputs)?.write(out)
}

fn eval_report_write(report: &EvalReport, out: &Path) -> Result<()> {
    report.write_json(&out.join("report.json"))?;
    report.write_csv(&out.join("report.csv"))
}

fn plans_for(records: &[PlanRecord], samples: &[&Sample], grid: crate::data::GridSpec) -> Result<Vec<MaskPlan>> {
    samples
        .iter()
        .map(|s| {
            let r = records
                .iter()
                .find(|r| r.sample == s.name)
                .ok_or_else(|| Error::Data(format!("no plan for sample '{}'", s.name)))?;
            MaskPlan::from_dropped(grid, r.dropped.clone(), r.ratio, r.strategy)
        })
        .collect()
}

/// Runs one parsed command. `args` is the raw argument list stored in manifests.
pub fn execute(cli: &Cli, args: &[String]) -> Result<()> {
    let mut run = RunConfig::load(cli.config.as_deref())?;
    let config_inputs: Vec<&Path> = cli.config.as_deref().into_iter().collect();
    match &cli.command {
        Command::Synth(a) => {
            let s = &mut run.synth;
            if let Some(v) = cli.seed {
                s.seed = v;
            }
            macro_rules! set {
                ($($f:ident => $g:ident),*) => { $( if let Some(v) = a.$f { s.$g = v; } )* };
            }
            set!(samples => samples, image_size => image_size, classes => class_count, shapes_min => shapes_min,
                 shapes_max => shapes_max, noise => noise, test_fraction => test_fraction);
            s.validate()?;
            let out = out_dir(cli)?;
            let rec = record(&run.synth, &[("synth", run.synth.seed)], &config_inputs)?;
            let hist = synth_generate(&run.synth, &out)?;
            info!("wrote {} samples; class pixels {hist:?}", run.synth.samples);
            finish(args, &out, rec)
        }
        Command::Stats(a) => {
            let ds = Dataset::load(&a.input)?;
            let (train, _) = ds.split_samples()?;
            let stats = ClassStats::from_labels(train.iter().map(|s| &s.label), ds.manifest.class_count)?;
            let mut cfg = run.train.clone();
            cfg.model.class_count = ds.manifest.class_count;
            let weights = training::loss_weights(&cfg, &stats)?;
            let out = out_dir(cli)?;
            StatsFile::new(ds.manifest.class_names.clone(), &stats, weights).write(&out.join("stats.json"))
        }
        Command::Degrade(a) => {
            let seed = cli.seed.unwrap_or(0);
            let out = out_dir(cli)?;
            let mut inputs = config_inputs.clone();
            inputs.push(&a.input);
            let rec = record(&(a.fraction, a.patch, format!("{:?}", a.degrade_mode)), &[("degrade", seed)], &inputs)?;
            let d = degrade_dir(&a.input, &out, a.fraction, a.patch, seed, a.degrade_mode.into())?;
            info!("degraded {} samples", d.dataset.samples.len());
            finish(args, &out, rec)
        }
        Command::Train(a) => {
            let mut cfg = run.train.clone();
            if let Some(v) = cli.seed {
                cfg.seed = v;
            }
            apply_overrides(&mut cfg, &a.overrides)?;
            apply_model_overrides(&mut cfg, &a.model)?;
            let ds = load_for_model(&a.input, &mut cfg)?;
            let out = out_dir(cli)?;
            let mut inputs = config_inputs.clone();
            inputs.push(&a.input);
            let rec = record(&cfg, &[("train", cfg.seed)], &inputs)?;
            let (pool, _) = ds.split_samples()?;
            let (tr, va) = training::split_indices(pool.len(), cfg.val_fraction, cfg.seed);
            let train: Vec<&Sample> = tr.iter().map(|&i| pool[i]).collect();
            let val: Vec<&Sample> = va.iter().map(|&i| pool[i]).collect();
            let outcome = training::train(&cfg, &train, &val, Some(&out))?;
            let cfg_path = out.join("config.toml");
            let text = toml::to_string(&RunConfig {
                train: cfg.clone(),
                ..run.clone()
            })
            .map_err(|e| Error::Toml(e.to_string()))?;
            std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
            let split = serde_json::json!({
                "train": train.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
                "val": val.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
            });
            let split_path = out.join("split.json");
            std::fs::write(&split_path, serde_json::to_string_pretty(&split)? + "\n").map_err(|e| Error::io(&split_path, e))?;
            if let Some(r) = &outcome.best_val {
                eval_report_write(r, &out)?;
                info!("best epoch {}: val mIoU {:.4}, PA-mIoU {:.4}", outcome.best_epoch, r.miou, r.pa_miou);
            }
            finish(args, &out, rec)
        }
        Command::Complete(a) => {
            let registry = ModelRegistry::load(&a.registry)?;
            let ds = Dataset::load(&a.input)?;
            let out = out_dir(cli)?;
            let mut inputs = config_inputs.clone();
            inputs.push(&a.registry);
            inputs.push(&a.input);
            let rec = record(&format!("{:?}", a.route_on), &[], &inputs)?;
            let mut completed = ds.clone();
            let mut records = Vec::new();
            for s in &mut completed.samples {
                let c = complete(&s.label, &s.image, &registry, a.route_on.into())?;
                for (_, plan) in &c.passes {
                    records.push(PlanRecord::new(s.name.clone(), plan));
                }
                s.label = c.label;
            }
            for sub in ["images", "labels"] {
                let d = out.join(sub);
                std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
            for s in &completed.samples {
                let src = Dataset::image_path(&a.input, &s.name);
                let dst = Dataset::image_path(&out, &s.name);
                std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
                write_label(&s.label, &Dataset::label_path(&out, &s.name))?;
            }
            completed.write_manifest(&out)?;
            write_plans(&out.join("completion_plans.jsonl"), &records)?;
            finish(args, &out, rec)
        }
        Command::Eval(a) => {
            let truth = Dataset::load(&a.input)?;
            let out = out_dir(cli)?;
            let samples: Vec<&Sample> = truth.samples.iter().collect();
            let report = if let Some(ck) = &a.checkpoint {
                let model = checkpoint::load(ck)?;
                match &a.plans {
                    Some(p) => {
                        let plans = plans_for(&read_plans(p)?, &samples, model.grid())?;
                        training::evaluate_with_plans(&model, &samples, &plans)?
                    }
                    None => training::evaluate(&model, &samples, cli.seed.unwrap_or(run.train.seed))?,
                }
            } else if let Some(pred_dir) = &a.pred {
                let pred = Dataset::load(pred_dir)?;
                let plans_path = a
                    .plans
                    .as_ref()
                    .ok_or_else(|| Error::Config("--pred needs --plans to define the evaluated area".into()))?;
                let records = read_plans(plans_path)?;
                let c = truth.manifest.class_count;
                let mut global = ConfusionMatrix::new(c);
                let mut masked = ConfusionMatrix::new(c);
                for s in &samples {
                    let p = pred
                        .get(&s.name)
                        .ok_or_else(|| Error::Data(format!("no prediction for '{}'", s.name)))?;
                    let size = truth.manifest.image_size;
                    let r = records
                        .iter()
                        .find(|r| r.sample == s.name)
                        .ok_or_else(|| Error::Data(format!("no plan for '{}'", s.name)))?;
                    let grid = crate::data::GridSpec::new(size, size, a.patch)?;
                    let plan = MaskPlan::from_dropped(grid, r.dropped.clone(), r.ratio, r.strategy)?;
                    global.accumulate(&p.label, &s.label, None)?;
                    masked.accumulate(&p.label, &s.label, Some(&pixel_mask_from_plan(&plan)?))?;
                }
                EvalReport::from_matrices(&global, &masked, true)?
            } else {
                return Err(Error::Config("eval needs --checkpoint or --pred".into()));
            };
            eval_report_write(&report, &out)?;
            println!("mIoU {:.4}  PA-mIoU {:.4}", report.miou, report.pa_miou);
            Ok(())
        }
        Command::Experiment(ExperimentCommand::Augment(a)) => {
            let mut cfg = run.augment.clone();
            if let Some(v) = cli.seed {
                cfg.degrade_seed = v;
                cfg.downstream.seed = v;
            }
            if let Some(v) = a.fraction {
                cfg.fraction = v;
            }
            if let Some(v) = a.degrade_mode {
                cfg.mode = v.into();
            }
            if let Some(v) = a.route_on {
                cfg.route_on = v.into();
            }
            if let Some(v) = a.epochs {
                cfg.downstream.epochs = v;
            }
            let registry = ModelRegistry::load(&a.registry)?;
            let ds = Dataset::load(&a.input)?;
            let out = out_dir(cli)?;
            let mut inputs = config_inputs.clone();
            inputs.push(&a.registry);
            inputs.push(&a.input);
            let rec = record(&cfg, &[("degrade", cfg.degrade_seed), ("downstream", cfg.downstream.seed)], &inputs)?;
            let report = augmentation_experiment(&ds, &registry, &cfg)?;
            report.write(&out)?;
            println!(
                "degraded-arm mIoU {:.4}  completed-arm mIoU {:.4}  delta {:+.4}",
                report.arm_degraded.miou, report.arm_completed.miou, report.delta
            );
            finish(args, &out, rec)
        }
        Command::Sweep(a) => {
            let mut cfg = run.train.clone();
            if let Some(v) = cli.seed {
                cfg.seed = v;
            }
            apply_overrides(&mut cfg, &a.overrides)?;
            let ds = load_for_model(&a.input, &mut cfg)?;
            let grid = SweepGrid {
                mask_ratios: a.mask_ratios.clone(),
                ips: a.ips.iter().map(|&v| v.into()).collect(),
                fusions: a
                    .fusions
                    .iter()
                    .map(|f| f.parse::<FusionMode>().map_err(|e| Error::Config(e.to_string())))
                    .collect::<Result<_>>()?,
            };
            let out = out_dir(cli)?;
            let mut inputs = config_inputs.clone();
            inputs.push(&a.input);
            let rec = record(&(&cfg, &grid), &[("train", cfg.seed)], &inputs)?;
            let (pool, _) = ds.split_samples()?;
            let rows = ablation_sweep(&grid, &cfg, &pool, Some(&out))?;
            for r in &rows {
                println!("m={} ips={} fusion={}: PA-mIoU {:.4}", r.mask_ratio, r.ips, r.fusion, r.val_pa_miou);
            }
            finish(args, &out, rec)
        }
        Command::Replay(a) => {
            let manifest = ExperimentManifest::read(&a.manifest)?;
            for d in &manifest.inputs {
                let p = Path::new(&d.path);
                if super::manifest::digest_file(p)? != d.sha256 {
                    return Err(Error::Data(format!("input {} changed since the recorded run", d.path)));
                }
            }
            let out = out_dir(cli)?;
            let mut replay_args = strip_out(&manifest.command);
            replay_args.push("--out".into());
            replay_args.push(out.display().to_string());
            let replay_cli = Cli::try_parse_from(std::iter::once("labelmae".to_string()).chain(replay_args.iter().cloned()))
                .map_err(|e| Error::Config(format!("recorded command no longer parses: {e}")))?;
            execute(&replay_cli, &replay_args)?;
            let bad = manifest.output_mismatches(&digest_tree(&out)?);
            if bad.is_empty() {
                println!("replay of {} is byte-identical ({} files)", manifest.run_id, manifest.outputs.len());
                Ok(())
            } else {
                Err(Error::Data(format!("replay differs in: {}", bad.join(", "))))
            }
        }
    }
}

fn strip_out(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
        } else if !a.starts_with("--out=") {
            out.push(a.clone());
        }
    }
    out
}

/// Parses `argv` (including the program name), runs it, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn strip_out_removes_both_spellings() {
        let args: Vec<String> = ["train", "--out", "a", "--in", "b", "--out=c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(strip_out(&args), vec!["train", "--in", "b"]);
    }
}
