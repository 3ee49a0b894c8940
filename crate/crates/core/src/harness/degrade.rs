//! Label degradation: hide a seeded subset of patches (or whole samples).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::data::{GridSpec, SegLabel, UNKNOWN};
use crate::error::{Error, Result};
use crate::masking::{dropped_count, write_plans, PlanRecord};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradeMode {
    /// Blank a fraction of every label's patches.
    #[default]
    Area,
    /// Drop a fraction of the samples from the dataset.
    Samples,
}

impl std::str::FromStr for DegradeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "area" => Ok(Self::Area),
            "samples" => Ok(Self::Samples),
            _ => Err(Error::Config(format!("unknown degrade mode '{s}' (expected area|samples)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub dataset: Dataset,
    /// Area mode: one record per sample with the blanked patches. Samples mode: one
    /// record per removed sample listing every patch.
    pub records: Vec<PlanRecord>,
}

/// Sets the listed patches of `label` to UNKNOWN.
pub fn blank_patches(label: &SegLabel, grid: &GridSpec, patches: &[usize]) -> Result<SegLabel> {
    grid.check_label(label)?;
    let mut out = label.clone();
    for &t in patches {
        if t >= grid.token_count() {
            return Err(Error::Data(format!("patch {t} outside a {}-patch grid", grid.token_count())));
        }
        let (oy, ox) = grid.origin(t);
        for y in oy..oy + grid.patch_size {
            for x in ox..ox + grid.patch_size {
                out.set(y, x, UNKNOWN);
            }
        }
    }
    Ok(out)
}

/// Patches blanked for sample `index`: a seeded random floor(fraction·L) subset.
pub fn degrade_patches(grid: &GridSpec, fraction: f64, seed_value: u64, index: usize) -> Result<Vec<usize>> {
    let l = dropped_count(grid.token_count(), fraction)?;
    let mut rng = seed::rng(seed::derive(seed_value, &[index as u64]));
    let mut picked = rand::seq::index::sample(&mut rng, grid.token_count(), l).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn degrade(dataset: &Dataset, fraction: f64, patch_size: usize, seed_value: u64, mode: DegradeMode) -> Result<Degraded> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("degrade fraction must lie in (0,1), got {fraction}")));
    }
    let size = dataset.manifest.image_size;
    let grid = GridSpec::new(size, size, patch_size)?;
    match mode {
        DegradeMode::Area => {
            let mut out = dataset.clone();
            let mut records = Vec::with_capacity(out.samples.len());
            for (i, s) in out.samples.iter_mut().enumerate() {
                let patches = degrade_patches(&grid, fraction, seed_value, i)?;
                s.label = blank_patches(&s.label, &grid, &patches)?;
                records.push(PlanRecord {
                    sample: s.name.clone(),
                    strategy: crate::masking::MaskStrategy::Random,
                    ratio: fraction,
                    dropped: patches,
                });
            }
            Ok(Degraded { dataset: out, records })
        }
        DegradeMode::Samples => {
            let n = dataset.samples.len();
            let k = ((n as f64) * fraction).floor() as usize;
            let mut rng = seed::rng(seed::derive(seed_value, &[u64::MAX]));
            let mut removed = rand::seq::index::sample(&mut rng, n, k).into_vec();
            removed.sort_unstable();
            let mut out = dataset.clone();
            out.samples = dataset
                .samples
                .iter()
                .enumerate()
                .filter(|(i, _)| removed.binary_search(i).is_err())
                .map(|(_, s)| s.clone())
                .collect();
            let kept: Vec<String> = out.samples.iter().map(|s| s.name.clone()).collect();
            out.manifest.samples = kept.clone();
            if let Some(split) = &mut out.manifest.split {
                split.train.retain(|n| kept.contains(n));
                split.test.retain(|n| kept.contains(n));
            }
            let records = removed
                .iter()
                .map(|&i| PlanRecord {
                    sample: dataset.samples[i].name.clone(),
                    strategy: crate::masking::MaskStrategy::Random,
                    ratio: 1.0,
                    dropped: (0..grid.token_count()).collect(),
                })
                .collect();
            Ok(Degraded { dataset: out, records })
        }
    }
}

/// Writes a degraded copy of the dataset in `input` to `out`.
///
/// Images are copied byte-for-byte; only labels change. The blanked patches go to
/// `plans.jsonl`.
pub fn degrade_dir(input: &Path, out: &Path, fraction: f64, patch_size: usize, seed_value: u64, mode: DegradeMode) -> Result<Degraded> {
    let dataset = Dataset::load(input)?;
    let degraded = degrade(&dataset, fraction, patch_size, seed_value, mode)?;
    for sub in ["images", "labels"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in &degraded.dataset.samples {
        let src = Dataset::image_path(input, &s.name);
        let dst = Dataset::image_path(out, &s.name);
        std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
        super::dataset::write_label(&s.label, &Dataset::label_path(out, &s.name))?;
    }
    degraded.dataset.write_manifest(out)?;
    write_plans(&out.join("plans.jsonl"), &degraded.records)?;
    Ok(degraded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{synth_dataset, SynthSpec};

    fn corpus() -> Dataset {
        synth_dataset(&SynthSpec {
            image_size: 32,
            samples: 6,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn half_of_196_is_98() {
        let grid = GridSpec::new(224, 224, 16).unwrap();
        assert_eq!(grid.token_count(), 196);
        assert_eq!(degrade_patches(&grid, 0.5, 1, 0).unwrap().len(), 98);
    }

    #[test]
    fn area_mode_blanks_exactly_the_recorded_patches() {
        let ds = corpus();
        let d = degrade(&ds, 0.5, 8, 3, DegradeMode::Area).unwrap();
        let grid = GridSpec::new(32, 32, 8).unwrap();
        for ((orig, new), rec) in ds.samples.iter().zip(&d.dataset.samples).zip(&d.records) {
            assert_eq!(rec.dropped.len(), 8);
            assert_eq!(orig.image, new.image);
            for y in 0..32 {
                for x in 0..32 {
                    let hidden = rec.dropped.contains(&grid.patch_of(y, x));
                    assert_eq!(new.label.get(y, x) == UNKNOWN, hidden);
                    if !hidden {
                        assert_eq!(new.label.get(y, x), orig.label.get(y, x));
                    }
                }
            }
        }
        assert_eq!(d, degrade(&ds, 0.5, 8, 3, DegradeMode::Area).unwrap());
        assert_ne!(d, degrade(&ds, 0.5, 8, 4, DegradeMode::Area).unwrap());
    }

    #[test]
    fn samples_mode_removes_samples() {
        let ds = corpus();
        let d = degrade(&ds, 0.5, 8, 3, DegradeMode::Samples).unwrap();
        assert_eq!(d.dataset.samples.len(), 3);
        assert_eq!(d.records.len(), 3);
        assert!(d.dataset.samples.iter().all(|s| s.label.unknown_count() == 0));
    }

    #[test]
    fn errors() {
        let ds = corpus();
        assert!(degrade(&ds, 0.5, 5, 0, DegradeMode::Area).is_err());
        assert!(degrade(&ds, 1.0, 8, 0, DegradeMode::Area).is_err());
    }

    #[test]
    fn directory_round_trip_leaves_images_untouched() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        corpus().save(src.path()).unwrap();
        let d = degrade_dir(src.path(), dst.path(), 0.5, 8, 1, DegradeMode::Area).unwrap();
        for s in &d.dataset.samples {
            let a = std::fs::read(Dataset::image_path(src.path(), &s.name)).unwrap();
            let b = std::fs::read(Dataset::image_path(dst.path(), &s.name)).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(Dataset::load(dst.path()).unwrap(), d.dataset);
        assert_eq!(crate::masking::read_plans(&dst.path().join("plans.jsonl")).unwrap(), d.records);
    }
}
