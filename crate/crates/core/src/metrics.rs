//! Confusion matrices, mIoU, and PA-mIoU over the discarded area.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SegLabel, UNKNOWN};
use crate::error::{shape_err, Error, Result};
use crate::masking::PixelMask;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_count: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        Self {
            class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.class_count + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts pixel pairs where truth is known and, if given, `region` is 1.
    pub fn accumulate(&mut self, pred: &SegLabel, truth: &SegLabel, region: Option<&PixelMask>) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return shape_err("prediction and truth sizes differ");
        }
        if let Some(r) = region {
            if r.height != truth.height || r.width != truth.width {
                return shape_err("region mask size differs from truth");
            }
        }
        let c = self.class_count;
        if pred.values.iter().any(|&v| v as usize >= c) {
            return Err(Error::Data("prediction contains UNKNOWN or out-of-range classes".into()));
        }
        truth.validate(c)?;
        for (i, (&t, &p)) in truth.values.iter().zip(&pred.values).enumerate() {
            if t == UNKNOWN || region.is_some_and(|r| r.values[i] == 0) {
                continue;
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_count != self.class_count {
            return shape_err("cannot merge confusion matrices of different class counts");
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` where the class appears in neither truth nor prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.class_count;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|t| self.get(t, k)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

/// Mean IoU over classes with non-empty union; background optionally skipped.
pub fn miou(cm: &ConfusionMatrix, include_background: bool) -> Result<(Vec<Option<f64>>, f64)> {
    let per_class = cm.per_class_iou();
    let start = usize::from(!include_background);
    let defined: Vec<f64> = per_class[start..].iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Data("no class has any support".into()));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok((per_class, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pa_per_class_iou: Vec<Option<f64>>,
    pub pa_miou: f64,
    pub counted_pixels: u64,
    pub masked_pixels: u64,
}

impl EvalReport {
    /// Builds a report from a whole-image matrix and a discarded-area matrix.
    pub fn from_matrices(global: &ConfusionMatrix, masked: &ConfusionMatrix, include_background: bool) -> Result<Self> {
        if masked.total() == 0 {
            return Err(Error::Data("empty masked region".into()));
        }
        let (per_class_iou, miou_value) = miou(global, include_background)?;
        let (pa_per_class_iou, pa) = miou(masked, include_background)?;
        Ok(Self {
            per_class_iou,
            miou: miou_value,
            pa_per_class_iou,
            pa_miou: pa,
            counted_pixels: global.total(),
            masked_pixels: masked.total(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per class plus a `mean` row.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from("class,iou,pa_iou\n");
        for (k, (a, b)) in self.per_class_iou.iter().zip(&self.pa_per_class_iou).enumerate() {
            let _ = writeln!(out, "{k},{},{}", fmt(*a), fmt(*b));
        }
        let _ = writeln!(out, "mean,{:.6},{:.6}", self.miou, self.pa_miou);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// mIoU over the whole label and PA-mIoU over pixels where `mask` is 1.
pub fn pa_miou(pred: &SegLabel, truth: &SegLabel, mask: &PixelMask, class_count: usize) -> Result<EvalReport> {
    let mut global = ConfusionMatrix::new(class_count);
    global.accumulate(pred, truth, None)?;
    let mut masked = ConfusionMatrix::new(class_count);
    masked.accumulate(pred, truth, Some(mask))?;
    EvalReport::from_matrices(&global, &masked, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab(rows: &[&[u8]]) -> SegLabel {
        SegLabel::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn perfect_prediction_counts_diagonal() {
        let t = lab(&[&[0, 1], &[1, 1]]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&t, &t, None).unwrap();
        assert_eq!(cm.counts, vec![1, 0, 0, 3]);
        assert_eq!(miou(&cm, true).unwrap().1, 1.0);
    }

    #[test]
    fn zero_region_leaves_matrix_unchanged() {
        let t = lab(&[&[0, 1], &[1, 1]]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&t, &t, Some(&PixelMask::new(2, 2, vec![0; 4]).unwrap())).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn three_by_three_with_region() {
        let truth = lab(&[&[0, 1, 2], &[1, 1, UNKNOWN], &[2, 0, 0]]);
        let pred = lab(&[&[0, 2, 2], &[1, 0, 1], &[1, 0, 2]]);
        let region = PixelMask::new(3, 3, vec![1, 1, 0, 1, 1, 1, 0, 1, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &truth, Some(&region)).unwrap();
        // per-pixel oracle
        let mut want = vec![0u64; 9];
        for i in 0..9 {
            if truth.values[i] != UNKNOWN && region.values[i] == 1 {
                want[truth.values[i] as usize * 3 + pred.values[i] as usize] += 1;
            }
        }
        assert_eq!(cm.counts, want);
        assert_eq!(cm.total(), 6);
    }

    #[test]
    fn half_wrong_binary() {
        let truth = lab(&[&[0, 0], &[1, 1]]);
        let pred = lab(&[&[0, 1], &[1, 0]]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth, None).unwrap();
        let (per, mean) = miou(&cm, true).unwrap();
        // each class: tp 1, fp 1, fn 1
        assert_eq!(per, vec![Some(1.0 / 3.0), Some(1.0 / 3.0)]);
        assert_eq!(mean, 1.0 / 3.0);
    }

    #[test]
    fn disjoint_class_scores_zero_and_absent_class_is_skipped() {
        let truth = lab(&[&[1, 1], &[0, 0]]);
        let pred = lab(&[&[0, 0], &[0, 0]]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &truth, None).unwrap();
        let (per, mean) = miou(&cm, true).unwrap();
        assert_eq!(per, vec![Some(0.5), Some(0.0), None]);
        assert_eq!(mean, 0.25);
        assert!(miou(&ConfusionMatrix::new(3), true).is_err());
    }

    #[test]
    fn pa_restricts_to_mask() {
        let truth = lab(&[&[0, 1, 1, 0], &[0, 1, 1, 0], &[2, 2, 0, 0], &[2, 2, 0, 0]]);
        let mut pred = truth.clone();
        let mask = PixelMask::new(4, 4, (0..16).map(|i| u8::from(i / 4 >= 2 && i % 4 < 2)).collect()).unwrap();
        for i in 0..16 {
            if mask.values[i] == 0 {
                pred.values[i] = (truth.values[i] + 1) % 3;
            }
        }
        let r = pa_miou(&pred, &truth, &mask, 3).unwrap();
        assert_eq!(r.pa_miou, 1.0);
        assert!(r.miou < 1.0);
        assert_eq!(r.masked_pixels, 4);
        assert!(pa_miou(&pred, &truth, &PixelMask::new(4, 4, vec![0; 16]).unwrap(), 3).is_err());
    }

    #[test]
    fn all_ones_mask_equals_global() {
        let truth = lab(&[&[0, 1, 2], &[2, 1, 0]]);
        let pred = lab(&[&[0, 2, 2], &[1, 1, 0]]);
        let r = pa_miou(&pred, &truth, &PixelMask::ones(2, 3), 3).unwrap();
        assert_eq!(r.pa_miou, r.miou);
        assert_eq!(r.per_class_iou, r.pa_per_class_iou);
    }

    #[test]
    fn merge_equals_whole() {
        let truth = lab(&[&[0, 1], &[2, 1]]);
        let pred = lab(&[&[0, 0], &[2, 1]]);
        let top = PixelMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let bottom = PixelMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&pred, &truth, Some(&top)).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate(&pred, &truth, Some(&bottom)).unwrap();
        a.merge(&b).unwrap();
        let mut whole = ConfusionMatrix::new(3);
        whole.accumulate(&pred, &truth, None).unwrap();
        assert_eq!(a, whole);
    }

    #[test]
    fn rejects_unknown_predictions() {
        let truth = lab(&[&[0, 1]]);
        let pred = lab(&[&[0, UNKNOWN]]);
        assert!(ConfusionMatrix::new(2).accumulate(&pred, &truth, None).is_err());
    }

    #[test]
    fn csv_layout() {
        let truth = lab(&[&[0, 1]]);
        let r = pa_miou(&truth, &truth, &PixelMask::ones(1, 2), 3).unwrap();
        assert_eq!(r.to_csv(), "class,iou,pa_iou\n0,1.000000,1.000000\n1,1.000000,1.000000\n2,,\nmean,1.000000,1.000000\n");
    }
}
