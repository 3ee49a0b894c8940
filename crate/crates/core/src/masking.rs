//! Patch selection strategies and the masks derived from them.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GridSpec, SegLabel, UNKNOWN};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskStrategy {
    Random,
    BackgroundFirst,
    LabelFirst,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "random" => Ok(MaskStrategy::Random),
            "backgroundfirst" | "background" => Ok(MaskStrategy::BackgroundFirst),
            "labelfirst" | "label" => Ok(MaskStrategy::LabelFirst),
            _ => Err(Error::Config(format!("unknown mask strategy {s:?}"))),
        }
    }
}

/// Probabilities of Random, LabelFirst and BackgroundFirst in the mixed strategy (1:2:2).
pub const MIXTURE: [(MaskStrategy, f64); 3] = [
    (MaskStrategy::Random, 0.2),
    (MaskStrategy::LabelFirst, 0.4),
    (MaskStrategy::BackgroundFirst, 0.4),
];

/// Partition of the patch grid into dropped and kept tokens. Both lists are sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub grid: GridSpec,
    pub dropped: Vec<usize>,
    pub kept: Vec<usize>,
    pub ratio: f64,
    pub strategy: MaskStrategy,
}

impl MaskPlan {
    /// Builds a plan from an arbitrary dropped set; kept is its complement.
    pub fn from_dropped(grid: GridSpec, mut dropped: Vec<usize>, ratio: f64, strategy: MaskStrategy) -> Result<Self> {
        let l = grid.token_count();
        dropped.sort_unstable();
        dropped.dedup();
        if dropped.last().is_some_and(|&t| t >= l) {
            return Err(Error::Data(format!("dropped index out of range for {l} patches")));
        }
        if dropped.is_empty() || dropped.len() == l {
            return Err(Error::Data("a mask plan needs both dropped and kept patches".into()));
        }
        let mut is_dropped = vec![false; l];
        for &t in &dropped {
            is_dropped[t] = true;
        }
        let kept = (0..l).filter(|&t| !is_dropped[t]).collect();
        Ok(Self {
            grid,
            dropped,
            kept,
            ratio,
            strategy,
        })
    }

    pub fn is_dropped(&self, t: usize) -> bool {
        self.dropped.binary_search(&t).is_ok()
    }

    /// Checks partition, sorting and range invariants.
    pub fn validate(&self) -> Result<()> {
        let l = self.grid.token_count();
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.dropped) || !sorted(&self.kept) {
            return Err(Error::Data("plan index lists must be strictly increasing".into()));
        }
        if self.dropped.is_empty() || self.kept.is_empty() || self.dropped.len() + self.kept.len() != l {
            return Err(Error::Data("plan does not partition the grid".into()));
        }
        let mut seen = vec![false; l];
        for &t in self.dropped.iter().chain(&self.kept) {
            if t >= l || seen[t] {
                return Err(Error::Data("plan does not partition the grid".into()));
            }
            seen[t] = true;
        }
        Ok(())
    }
}

/// Number of dropped patches for ratio `m` on `tokens` patches: floor(m·L), clamped to [1, L-1].
pub fn dropped_count(tokens: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0,1)")));
    }
    if tokens < 2 {
        return Err(Error::Config("masking needs at least two patches".into()));
    }
    Ok(((ratio * tokens as f64).floor() as usize).clamp(1, tokens - 1))
}

/// Per-patch fraction of pixels that are background (class 0) or UNKNOWN.
pub fn patch_background_fraction(label: &SegLabel, grid: &GridSpec) -> Result<Vec<f64>> {
    grid.check_label(label)?;
    let p = grid.patch_size;
    let mut counts = vec![0usize; grid.token_count()];
    for y in 0..label.height {
        for x in 0..label.width {
            let v = label.get(y, x);
            if v == 0 || v == UNKNOWN {
                counts[grid.patch_of(y, x)] += 1;
            }
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / (p * p) as f64).collect())
}

/// Indices of the `count` highest-scoring patches, ties to the lower index.
fn top_by<F: Fn(usize) -> f64>(tokens: usize, count: usize, score: F) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tokens).collect();
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    order.truncate(count);
    order
}

pub fn select_patches(
    label: &SegLabel,
    grid: &GridSpec,
    ratio: f64,
    strategy: MaskStrategy,
    seed_value: u64,
) -> Result<MaskPlan> {
    let tokens = grid.token_count();
    let l = dropped_count(tokens, ratio)?;
    let dropped = match strategy {
        MaskStrategy::Random => {
            let mut rng = seed::rng(seed_value);
            rand::seq::index::sample(&mut rng, tokens, l).into_vec()
        }
        MaskStrategy::BackgroundFirst => {
            let bg = patch_background_fraction(label, grid)?;
            top_by(tokens, l, |t| bg[t])
        }
        MaskStrategy::LabelFirst => {
            let bg = patch_background_fraction(label, grid)?;
            top_by(tokens, l, |t| -bg[t])
        }
    };
    if strategy == MaskStrategy::Random {
        grid.check_label(label)?;
    }
    MaskPlan::from_dropped(*grid, dropped, ratio, strategy)
}

/// Draws a strategy with the 1:2:2 mixture, then delegates to [`select_patches`].
pub fn mixed_select(label: &SegLabel, grid: &GridSpec, ratio: f64, seed_value: u64) -> Result<MaskPlan> {
    let mut rng = seed::rng(seed_value);
    let strategy = draw_strategy(&mut rng);
    select_patches(label, grid, ratio, strategy, rng.random())
}

pub fn draw_strategy<R: Rng>(rng: &mut R) -> MaskStrategy {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (strategy, p) in MIXTURE {
        acc += p;
        if u < acc {
            return strategy;
        }
    }
    MIXTURE[MIXTURE.len() - 1].0
}

/// Background-first selection that always drops every patch containing an UNKNOWN pixel.
///
/// Returns `None` when more than floor(m·L) patches contain UNKNOWN pixels.
pub fn completion_plan(label: &SegLabel, grid: &GridSpec, ratio: f64) -> Result<Option<MaskPlan>> {
    let tokens = grid.token_count();
    let l = dropped_count(tokens, ratio)?;
    let bg = patch_background_fraction(label, grid)?;
    let mut has_unknown = vec![false; tokens];
    for y in 0..label.height {
        for x in 0..label.width {
            if label.get(y, x) == UNKNOWN {
                has_unknown[grid.patch_of(y, x)] = true;
            }
        }
    }
    if has_unknown.iter().filter(|&&u| u).count() > l {
        return Ok(None);
    }
    let dropped = top_by(tokens, l, |t| bg[t] + if has_unknown[t] { 2.0 } else { 0.0 });
    MaskPlan::from_dropped(*grid, dropped, ratio, MaskStrategy::BackgroundFirst).map(Some)
}

/// H×W map with 1 on dropped patches and 0 elsewhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width || values.iter().any(|&v| v > 1) {
            return Err(Error::Shape("pixel mask must be H×W with values in {0,1}".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

pub fn pixel_mask_from_plan(plan: &MaskPlan) -> Result<PixelMask> {
    plan.validate()?;
    let g = &plan.grid;
    let mut values = vec![0u8; g.height() * g.width()];
    for &t in &plan.dropped {
        let (oy, ox) = g.origin(t);
        for y in oy..oy + g.patch_size {
            values[y * g.width() + ox..y * g.width() + ox + g.patch_size].fill(1);
        }
    }
    PixelMask::new(g.height(), g.width(), values)
}

/// One line of the `plans.jsonl` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub sample: String,
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub dropped: Vec<usize>,
}

impl PlanRecord {
    pub fn new(sample: impl Into<String>, plan: &MaskPlan) -> Self {
        Self {
            sample: sample.into(),
            strategy: plan.strategy,
            ratio: plan.ratio,
            dropped: plan.dropped.clone(),
        }
    }
}

pub fn write_plans(path: &Path, records: &[PlanRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_plans(path: &Path) -> Result<Vec<PlanRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_from_fractions(grid: &GridSpec, fg: &[usize]) -> SegLabel {
        // patch t gets fg[t] foreground pixels (class 1) in raster order
        let p = grid.patch_size;
        let mut label = SegLabel::filled(grid.height(), grid.width(), 0);
        for (t, &n) in fg.iter().enumerate() {
            let (oy, ox) = grid.origin(t);
            for k in 0..n {
                label.set(oy + k / p, ox + k % p, 1);
            }
        }
        label
    }

    #[test]
    fn background_fraction_cases() {
        let grid = GridSpec::new(4, 4, 2).unwrap();
        let all_bg = SegLabel::filled(4, 4, 0);
        assert_eq!(patch_background_fraction(&all_bg, &grid).unwrap(), vec![1.0; 4]);
        let label = label_from_fractions(&grid, &[0, 2, 4, 0]);
        assert_eq!(patch_background_fraction(&label, &grid).unwrap(), vec![1.0, 0.5, 0.0, 1.0]);
        let mut unk = SegLabel::filled(4, 4, 2);
        unk.set(0, 0, UNKNOWN);
        assert_eq!(patch_background_fraction(&unk, &grid).unwrap()[0], 0.25);
        assert!(patch_background_fraction(&SegLabel::filled(4, 6, 0), &grid).is_err());
    }

    #[test]
    fn sort_oracle_examples() {
        // background fractions [0.9, 0.1, 0.5, 0.7] on a 2x2 grid of 10x10 patches
        let grid = GridSpec::new(20, 20, 10).unwrap();
        let label = label_from_fractions(&grid, &[10, 90, 50, 30]);
        assert_eq!(patch_background_fraction(&label, &grid).unwrap(), vec![0.9, 0.1, 0.5, 0.7]);
        let bf = select_patches(&label, &grid, 0.5, MaskStrategy::BackgroundFirst, 0).unwrap();
        assert_eq!(bf.dropped, vec![0, 3]);
        assert_eq!(bf.kept, vec![1, 2]);
        let lf = select_patches(&label, &grid, 0.5, MaskStrategy::LabelFirst, 0).unwrap();
        assert_eq!(lf.dropped, vec![1, 2]);
    }

    #[test]
    fn ties_break_to_lower_index() {
        let grid = GridSpec::new(4, 4, 2).unwrap();
        let label = SegLabel::filled(4, 4, 0);
        let bf = select_patches(&label, &grid, 0.5, MaskStrategy::BackgroundFirst, 0).unwrap();
        assert_eq!(bf.dropped, vec![0, 1]);
        let lf = select_patches(&label, &grid, 0.5, MaskStrategy::LabelFirst, 0).unwrap();
        assert_eq!(lf.dropped, vec![0, 1]);
    }

    #[test]
    fn random_replay_and_extreme_ratio() {
        let grid = GridSpec::new(8, 8, 2).unwrap();
        let label = SegLabel::filled(8, 8, 1);
        let a = select_patches(&label, &grid, 15.5 / 16.0, MaskStrategy::Random, 7).unwrap();
        assert_eq!(a.dropped.len(), 15);
        assert_eq!(a, select_patches(&label, &grid, 15.5 / 16.0, MaskStrategy::Random, 7).unwrap());
    }

    #[test]
    fn invalid_ratios() {
        let grid = GridSpec::new(4, 4, 2).unwrap();
        let label = SegLabel::filled(4, 4, 0);
        for m in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(select_patches(&label, &grid, m, MaskStrategy::Random, 0).is_err());
        }
        // floor(0.1 * 4) = 0 is clamped up to one dropped patch
        assert_eq!(select_patches(&label, &grid, 0.1, MaskStrategy::Random, 0).unwrap().dropped.len(), 1);
    }

    #[test]
    fn mixed_is_deterministic_and_probabilities_sum_to_one() {
        let grid = GridSpec::new(8, 8, 2).unwrap();
        let label = label_from_fractions(&grid, &(0..16).map(|t| t % 5).collect::<Vec<_>>());
        assert_eq!(
            mixed_select(&label, &grid, 0.5, 3).unwrap(),
            mixed_select(&label, &grid, 0.5, 3).unwrap()
        );
        let total: f64 = MIXTURE.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pixel_mask_examples() {
        let grid = GridSpec::new(4, 4, 2).unwrap();
        let plan = MaskPlan::from_dropped(grid, vec![0], 0.25, MaskStrategy::Random).unwrap();
        let mask = pixel_mask_from_plan(&plan).unwrap();
        let want: Vec<u8> = (0..16).map(|i| u8::from(i / 4 < 2 && i % 4 < 2)).collect();
        assert_eq!(mask.values, want);
        assert_eq!(mask.count(), 4);
        let plan = MaskPlan::from_dropped(grid, vec![1, 2, 3], 0.75, MaskStrategy::Random).unwrap();
        assert_eq!(pixel_mask_from_plan(&plan).unwrap().count(), 12);
    }

    #[test]
    fn from_dropped_rejects_degenerate() {
        let grid = GridSpec::new(4, 4, 2).unwrap();
        assert!(MaskPlan::from_dropped(grid, vec![], 0.5, MaskStrategy::Random).is_err());
        assert!(MaskPlan::from_dropped(grid, vec![0, 1, 2, 3], 0.5, MaskStrategy::Random).is_err());
        assert!(MaskPlan::from_dropped(grid, vec![4], 0.5, MaskStrategy::Random).is_err());
    }

    #[test]
    fn completion_plan_covers_unknown_patches() {
        let grid = GridSpec::new(8, 8, 2).unwrap();
        let mut label = SegLabel::filled(8, 8, 1);
        // a single UNKNOWN pixel in a foreground patch far from the background
        label.set(7, 7, UNKNOWN);
        for x in 0..8 {
            label.set(0, x, 0);
        }
        let plan = completion_plan(&label, &grid, 0.25).unwrap().unwrap();
        assert!(plan.is_dropped(15));
        assert_eq!(plan.dropped.len(), 4);
        // five patches holding UNKNOWN do not fit in four drops
        for t in [0usize, 2, 5, 9] {
            let (y, x) = grid.origin(t);
            label.set(y, x, UNKNOWN);
        }
        assert!(completion_plan(&label, &grid, 0.25).unwrap().is_none());
    }

    #[test]
    fn plans_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(4, 4, 2).unwrap();
        let plan = MaskPlan::from_dropped(grid, vec![3, 1], 0.5, MaskStrategy::LabelFirst).unwrap();
        let recs = vec![PlanRecord::new("a", &plan), PlanRecord::new("b", &plan)];
        let path = dir.path().join("plans.jsonl");
        write_plans(&path, &recs).unwrap();
        assert_eq!(read_plans(&path).unwrap(), recs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"sample":"a","strategy":"LabelFirst","ratio":0.5,"dropped":[1,3]}"#));
    }
}
