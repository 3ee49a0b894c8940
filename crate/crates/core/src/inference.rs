//! Per-ratio model registry and label completion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{RgbImage, SegLabel, UNKNOWN};
use crate::error::{Error, Result};
use crate::masking::{completion_plan, dropped_count, patch_background_fraction, MaskPlan, MaskStrategy};
use crate::model::{checkpoint, Model};

/// Fraction of pixels that are UNKNOWN.
pub fn unknown_fraction(label: &SegLabel) -> f64 {
    if label.values.is_empty() {
        return 0.0;
    }
    label.unknown_count() as f64 / label.values.len() as f64
}

/// Fraction of pixels that are background or UNKNOWN.
pub fn background_fraction(label: &SegLabel) -> f64 {
    if label.values.is_empty() {
        return 0.0;
    }
    let n = label.values.iter().filter(|&&v| v == 0 || v == UNKNOWN).count();
    n as f64 / label.values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteOn {
    #[default]
    Unknown,
    Background,
}

impl std::str::FromStr for RouteOn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unknown" => Ok(Self::Unknown),
            "background" => Ok(Self::Background),
            _ => Err(Error::Config(format!("unknown routing key '{s}' (expected unknown|background)"))),
        }
    }
}

/// Index of the smallest ratio ≥ `fraction`, or the largest ratio with `saturated = true`.
///
/// `ratios` must be sorted ascending.
pub fn route_index(ratios: &[f64], fraction: f64) -> Result<(usize, bool)> {
    if ratios.is_empty() {
        return Err(Error::Config("model registry is empty".into()));
    }
    match ratios.iter().position(|&m| m >= fraction) {
        Some(i) => Ok((i, false)),
        None => Ok((ratios.len() - 1, true)),
    }
}

/// Models keyed by the mask ratio they were trained with, ascending.
#[derive(Debug, Clone)]
pub struct ModelRegistry {
    entries: Vec<(f64, Model)>,
}

/// On-disk `reg.json`: ratio (as a string key) → checkpoint path, relative to the file.
pub type RegistryFile = BTreeMap<String, PathBuf>;

impl ModelRegistry {
    pub fn new(mut entries: Vec<(f64, Model)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("model registry is empty".into()));
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Config(format!("mask ratio {} registered twice", w[0].0)));
            }
        }
        for (m, model) in &entries {
            if !(*m > 0.0 && *m < 1.0) {
                return Err(Error::Config(format!("registered mask ratio {m} is outside (0,1)")));
            }
            if (model.config.mask_ratio - m).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "checkpoint registered under ratio {m} was trained with ratio {}",
                    model.config.mask_ratio
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: RegistryFile = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::with_capacity(file.len());
        for (key, ckpt) in file {
            let m: f64 = key
                .parse()
                .map_err(|_| Error::Config(format!("registry key '{key}' is not a number")))?;
            let resolved = if ckpt.is_absolute() { ckpt } else { base.join(ckpt) };
            entries.push((m, checkpoint::load(&resolved)?));
        }
        Self::new(entries)
    }

    pub fn write_file(entries: &[(f64, PathBuf)], path: &Path) -> Result<()> {
        let file: RegistryFile = entries.iter().map(|(m, p)| (m.to_string(), p.clone())).collect();
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.entries.iter().map(|(m, _)| *m).collect()
    }

    pub fn model(&self, index: usize) -> &Model {
        &self.entries[index].1
    }

    /// Ratio chosen for `fraction`; saturates at the largest ratio with a warning.
    pub fn route(&self, fraction: f64) -> f64 {
        let ratios = self.ratios();
        let (i, saturated) = route_index(&ratios, fraction).expect("registry is non-empty");
        if saturated {
            warn!("fraction {fraction:.4} exceeds every registered mask ratio; using {}", ratios[i]);
        }
        ratios[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub label: SegLabel,
    /// (ratio, plan) for each forward pass; empty when nothing was unknown.
    pub passes: Vec<(f64, MaskPlan)>,
}

/// Writes `pred` into every UNKNOWN pixel of `label`.
pub fn splice(label: &SegLabel, pred: &SegLabel) -> Result<SegLabel> {
    if label.height != pred.height || label.width != pred.width {
        return Err(Error::Shape("prediction and label sizes differ".into()));
    }
    let values = label
        .values
        .iter()
        .zip(&pred.values)
        .map(|(&k, &p)| if k == UNKNOWN { p } else { k })
        .collect();
    SegLabel::new(label.height, label.width, values)
}

/// Fills the UNKNOWN pixels of `label`; known pixels are never changed.
///
/// The routed model drops every patch containing UNKNOWN plus the most background-heavy
/// others. When the UNKNOWN patches do not fit, the next larger ratio is tried. If even
/// the largest ratio cannot cover them, it is applied repeatedly, each pass dropping the
/// l most UNKNOWN-heavy patches, until no UNKNOWN remains.
pub fn complete(label: &SegLabel, image: &RgbImage, registry: &ModelRegistry, route_on: RouteOn) -> Result<Completion> {
    if label.unknown_count() == 0 {
        return Ok(Completion {
            label: label.clone(),
            passes: Vec::new(),
        });
    }
    let fraction = match route_on {
        RouteOn::Unknown => unknown_fraction(label),
        RouteOn::Background => background_fraction(label),
    };
    let ratios = registry.ratios();
    let (start, saturated) = route_index(&ratios, fraction)?;
    if saturated {
        warn!("fraction {fraction:.4} exceeds every registered mask ratio; using {}", ratios[start]);
    }
    for (i, &ratio) in ratios.iter().enumerate().skip(start) {
        let model = registry.model(i);
        if let Some(plan) = completion_plan(label, &model.grid(), ratio)? {
            let pred = model.predict(label, image, &plan)?;
            return Ok(Completion {
                label: splice(label, &pred)?,
                passes: vec![(ratio, plan)],
            });
        }
    }

    let last = ratios.len() - 1;
    let model = registry.model(last);
    let grid = model.grid();
    warn!("UNKNOWN area exceeds the largest mask ratio {}; completing in several passes", ratios[last]);
    let mut current = label.clone();
    let mut passes = Vec::new();
    while current.unknown_count() > 0 {
        let l = dropped_count(grid.token_count(), ratios[last])?;
        let bg = patch_background_fraction(&current, &grid)?;
        let mut unknown = vec![0usize; grid.token_count()];
        for y in 0..current.height {
            for x in 0..current.width {
                if current.get(y, x) == UNKNOWN {
                    unknown[grid.patch_of(y, x)] += 1;
                }
            }
        }
        let mut order: Vec<usize> = (0..grid.token_count()).collect();
        order.sort_by(|&a, &b| unknown[b].cmp(&unknown[a]).then(bg[b].total_cmp(&bg[a])).then(a.cmp(&b)));
        order.truncate(l);
        let plan = MaskPlan::from_dropped(grid, order, ratios[last], MaskStrategy::BackgroundFirst)?;
        let pred = model.predict(&current, image, &plan)?;
        let mut next = current.clone();
        for &t in &plan.dropped {
            let (oy, ox) = grid.origin(t);
            for y in oy..oy + grid.patch_size {
                for x in ox..ox + grid.patch_size {
                    if next.get(y, x) == UNKNOWN {
                        next.set(y, x, pred.get(y, x));
                    }
                }
            }
        }
        current = next;
        passes.push((ratios[last], plan));
    }
    Ok(Completion { label: current, passes })
}
