//! Non-learned reference predictors for the discarded area.

use crate::data::{GridSpec, Sample, SegLabel, UNKNOWN};
use crate::error::{Error, Result};
use crate::masking::{pixel_mask_from_plan, MaskPlan};
use crate::metrics::{ConfusionMatrix, EvalReport};

/// Most frequent known class over `labels` (lowest index on ties).
pub fn majority_class<'a>(labels: impl IntoIterator<Item = &'a SegLabel>, class_count: usize) -> Result<u8> {
    let mut counts = vec![0u64; class_count];
    for label in labels {
        label.validate(class_count)?;
        for &v in label.values.iter().filter(|&&v| v != UNKNOWN) {
            counts[v as usize] += 1;
        }
    }
    let (best, n) = counts
        .iter()
        .enumerate()
        .fold((0, 0), |acc, (k, &n)| if n > acc.1 { (k, n) } else { acc });
    if n == 0 {
        return Err(Error::Data("no labelled pixels".into()));
    }
    Ok(best as u8)
}

fn report(samples: &[&Sample], plans: &[MaskPlan], class_count: usize, predict: impl Fn(&Sample, &MaskPlan) -> Result<SegLabel>) -> Result<EvalReport> {
    if samples.len() != plans.len() {
        return Err(Error::Data(format!("{} samples but {} plans", samples.len(), plans.len())));
    }
    let mut global = ConfusionMatrix::new(class_count);
    let mut masked = ConfusionMatrix::new(class_count);
    for (s, plan) in samples.iter().zip(plans) {
        let pred = predict(s, plan)?;
        global.accumulate(&pred, &s.label, None)?;
        masked.accumulate(&pred, &s.label, Some(&pixel_mask_from_plan(plan)?))?;
    }
    EvalReport::from_matrices(&global, &masked, true)
}

/// Predicts `class` for every pixel.
pub fn majority_class_baseline(samples: &[&Sample], plans: &[MaskPlan], class: u8, class_count: usize) -> Result<EvalReport> {
    report(samples, plans, class_count, |s, _| Ok(SegLabel::filled(s.label.height, s.label.width, class)))
}

fn plurality(label: &SegLabel, grid: &GridSpec, t: usize, class_count: usize) -> Option<u8> {
    let (oy, ox) = grid.origin(t);
    let p = grid.patch_size;
    let mut counts = vec![0u32; class_count];
    for y in oy..oy + p {
        for x in ox..ox + p {
            let v = label.get(y, x);
            if v != UNKNOWN {
                counts[v as usize] += 1;
            }
        }
    }
    let (best, n) = counts
        .iter()
        .enumerate()
        .fold((0, 0), |acc, (k, &n)| if n > acc.1 { (k, n) } else { acc });
    (n > 0).then_some(best as u8)
}

/// Fills every hidden patch with the plurality class of the nearest visible patch.
///
/// Distance is squared Euclidean on patch coordinates; ties go to the lower
/// patch index. Visible UNKNOWN pixels take their own patch's plurality class
/// (or `fallback`), so the result contains no UNKNOWN.
pub fn nearest_patch_copy(label: &SegLabel, grid: &GridSpec, hidden: &[bool], class_count: usize, fallback: u8) -> Result<SegLabel> {
    grid.check_label(label)?;
    let tokens = grid.token_count();
    if hidden.len() != tokens {
        return Err(Error::Shape(format!("{} hidden flags for {tokens} patches", hidden.len())));
    }
    let source: Vec<Option<u8>> = (0..tokens)
        .map(|t| if hidden[t] { None } else { plurality(label, grid, t, class_count) })
        .collect();
    let mut out = label.clone();
    let p = grid.patch_size;
    for t in 0..tokens {
        let (ty, tx) = (t / grid.cols, t % grid.cols);
        let fill = if hidden[t] {
            (0..tokens)
                .filter_map(|s| source[s].map(|c| (s, c)))
                .min_by_key(|&(s, _)| {
                    let (sy, sx) = (s / grid.cols, s % grid.cols);
                    let d = (sy as i64 - ty as i64).pow(2) + (sx as i64 - tx as i64).pow(2);
                    (d, s)
                })
                .map_or(fallback, |(_, c)| c)
        } else {
            source[t].unwrap_or(fallback)
        };
        let (oy, ox) = grid.origin(t);
        for y in oy..oy + p {
            for x in ox..ox + p {
                if hidden[t] || out.get(y, x) == UNKNOWN {
                    out.set(y, x, fill);
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-patch copy applied to the dropped patches of each plan.
pub fn nearest_patch_copy_baseline(samples: &[&Sample], plans: &[MaskPlan], class_count: usize, fallback: u8) -> Result<EvalReport> {
    report(samples, plans, class_count, |s, plan| {
        let hidden: Vec<bool> = (0..plan.grid.token_count()).map(|t| plan.is_dropped(t)).collect();
        nearest_patch_copy(&s.label, &plan.grid, &hidden, class_count, fallback)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_skips_unknown() {
        let a = SegLabel::new(1, 4, vec![1, 1, UNKNOWN, UNKNOWN]).unwrap();
        let b = SegLabel::new(1, 4, vec![2, 0, 0, 1]).unwrap();
        assert_eq!(majority_class([&a, &b], 3).unwrap(), 1);
        assert!(majority_class([&SegLabel::filled(2, 2, UNKNOWN)], 3).is_err());
    }

    #[test]
    fn copies_from_nearest_visible_patch() {
        // 4x4 patches of size 1
        let label = SegLabel::from_rows(&[
            vec![1, 1, 2, 2],
            vec![1, 9, 9, 2],
            vec![3, 9, 9, 2],
            vec![3, 3, 3, 2],
        ])
        .unwrap();
        let grid = GridSpec::new(4, 4, 1).unwrap();
        let hidden: Vec<bool> = label.values.iter().map(|&v| v == 9).collect();
        let out = nearest_patch_copy(&label, &grid, &hidden, 10, 0).unwrap();
        // (1,1): neighbours at distance 1 are 1 (idx 1), 1 (idx 4): lowest index 1 -> class 1
        assert_eq!(out.get(1, 1), 1);
        // (1,2): idx 2 holds 2
        assert_eq!(out.get(1, 2), 2);
        // (2,1): idx 8 holds 3
        assert_eq!(out.get(2, 1), 3);
        // (2,2): nearest visible are idx 11 (2) and idx 14 (3) -> idx 11
        assert_eq!(out.get(2, 2), 2);
        assert_eq!(out.get(0, 0), 1);
    }

    #[test]
    fn visible_unknown_is_filled() {
        let label = SegLabel::new(2, 2, vec![1, UNKNOWN, 1, 1]).unwrap();
        let grid = GridSpec::new(2, 2, 2).unwrap();
        let out = nearest_patch_copy(&label, &grid, &[false], 3, 0).unwrap();
        assert_eq!(out.values, vec![1; 4]);
    }
}
