//! Frequency-balanced class weights and weighted pixel cross-entropy.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{SegLabel, UNKNOWN};
use crate::error::{shape_err, Error, Result};
use crate::masking::PixelMask;

/// Per-class pixel statistics over a label set (UNKNOWN excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
    /// Mean of the frequency entries.
    pub mean: f64,
    /// Population variance of the frequency entries.
    pub variance: f64,
}

impl ClassStats {
    pub fn from_frequencies(frequencies: Vec<f64>) -> Self {
        let c = frequencies.len() as f64;
        let mean = frequencies.iter().sum::<f64>() / c;
        let variance = frequencies.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c;
        Self {
            counts: Vec::new(),
            frequencies,
            mean,
            variance,
        }
    }

    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a SegLabel>, class_count: usize) -> Result<Self> {
        let mut counts = vec![0u64; class_count];
        for label in labels {
            label.validate(class_count)?;
            for &v in &label.values {
                if v != UNKNOWN {
                    counts[v as usize] += 1;
                }
            }
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Data("no labelled pixels to compute class statistics".into()));
        }
        let frequencies = counts.iter().map(|&n| n as f64 / total as f64).collect();
        Ok(Self {
            counts,
            ..Self::from_frequencies(frequencies)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub weights: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub xi: f64,
}

impl LossWeights {
    pub fn uniform(class_count: usize) -> Self {
        Self {
            weights: vec![1.0; class_count],
            beta: 1.0,
            gamma: 1.0,
            xi: 1e-6,
        }
    }
}

/// `w_i = 1 - 1/(1 + β·exp(-(x_i - E(x))/(V(x) + ξ))^γ)`, with γ applied to the exponential.
pub fn class_weights(stats: &ClassStats, beta: f64, gamma: f64, xi: f64) -> Result<LossWeights> {
    let denom = stats.variance + xi;
    if !(denom > 0.0) {
        return Err(Error::Config(format!("V(x)+xi must be positive, got {denom}")));
    }
    if !(beta > 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("beta must be positive and gamma finite (beta={beta}, gamma={gamma})")));
    }
    let weights = stats
        .frequencies
        .iter()
        .map(|&x| {
            // 1 - 1/(1+t) = t/(1+t), which keeps precision when t is tiny
            let t = beta * (-gamma * (x - stats.mean) / denom).exp();
            if t.is_infinite() {
                1.0
            } else {
                t / (1.0 + t)
            }
        })
        .collect();
    Ok(LossWeights {
        weights,
        beta,
        gamma,
        xi,
    })
}

/// Partial derivatives of each class weight with respect to β and γ.
pub fn class_weight_partials(stats: &ClassStats, weights: &LossWeights) -> Vec<(f64, f64)> {
    let denom = stats.variance + weights.xi;
    stats
        .frequencies
        .iter()
        .zip(&weights.weights)
        .map(|(&x, &w)| {
            let z = (x - stats.mean) / denom;
            // dw/dt · t = w(1 - w)
            let s = w * (1.0 - w);
            (s / weights.beta, -s * z)
        })
        .collect()
}

/// Which pixels contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossSupport<'a> {
    /// Pixels of this class are ignored in addition to UNKNOWN.
    pub ignore_class: Option<u8>,
    /// Restrict to pixels where the mask is 1.
    pub region: Option<&'a PixelMask>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// dL/dlogits, H×W×C.
    pub grad: Array3<f64>,
    /// Σ over counted pixels of -log p(true class), per class.
    pub class_nll: Vec<f64>,
    pub class_pixels: Vec<u64>,
    pub weight_sum: f64,
}

/// Weighted cross-entropy `Σ_n w_{y_n}·(-log softmax(x_n)_{y_n}) / Σ_n w_{y_n}` over counted pixels.
pub fn weighted_cross_entropy(
    logits: &Array3<f64>,
    target: &SegLabel,
    weights: &LossWeights,
    support: LossSupport<'_>,
) -> Result<f64> {
    Ok(weighted_cross_entropy_grad(logits, target, weights, support)?.loss)
}

pub fn weighted_cross_entropy_grad(
    logits: &Array3<f64>,
    target: &SegLabel,
    weights: &LossWeights,
    support: LossSupport<'_>,
) -> Result<LossOutput> {
    let (h, w, c) = logits.dim();
    if target.height != h || target.width != w {
        return shape_err(format!("logits are {h}x{w} but target is {}x{}", target.height, target.width));
    }
    if weights.weights.len() != c {
        return shape_err(format!("{} class weights for {c} logit channels", weights.weights.len()));
    }
    if let Some(region) = support.region {
        if region.height != h || region.width != w {
            return shape_err("loss region does not match logits");
        }
    }
    target.validate(c)?;

    let mut grad = Array3::<f64>::zeros((h, w, c));
    let mut class_nll = vec![0.0; c];
    let mut class_pixels = vec![0u64; c];
    let mut probs = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let t = target.get(y, x);
            if t == UNKNOWN || Some(t) == support.ignore_class || support.region.is_some_and(|r| r.get(y, x) == 0) {
                continue;
            }
            let row = logits.slice(ndarray::s![y, x, ..]);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for (p, &v) in probs.iter_mut().zip(row.iter()) {
                *p = (v - max).exp();
                sum += *p;
            }
            let t = t as usize;
            class_nll[t] += -(row[t] - max - sum.ln());
            class_pixels[t] += 1;
            let wt = weights.weights[t];
            for k in 0..c {
                let p = probs[k] / sum;
                grad[[y, x, k]] = wt * (p - if k == t { 1.0 } else { 0.0 });
            }
        }
    }
    let weight_sum: f64 = class_pixels
        .iter()
        .zip(&weights.weights)
        .map(|(&n, &wt)| n as f64 * wt)
        .sum();
    if class_pixels.iter().all(|&n| n == 0) {
        return Err(Error::EmptyLossSupport);
    }
    if !(weight_sum > 0.0) {
        return Err(Error::Numeric(format!("loss normalizer is {weight_sum}")));
    }
    let loss = class_nll
        .iter()
        .zip(&weights.weights)
        .map(|(&nll, &wt)| wt * nll)
        .sum::<f64>()
        / weight_sum;
    grad /= weight_sum;
    Ok(LossOutput {
        loss,
        grad,
        class_nll,
        class_pixels,
        weight_sum,
    })
}

/// Contents of `stats.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub class_names: Vec<String>,
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub weights: LossWeights,
}

impl StatsFile {
    pub fn new(class_names: Vec<String>, stats: &ClassStats, weights: LossWeights) -> Self {
        Self {
            class_names,
            counts: stats.counts.clone(),
            frequencies: stats.frequencies.clone(),
            mean: stats.mean,
            variance: stats.variance,
            weights,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_frequencies_give_half() {
        let stats = ClassStats::from_frequencies(vec![0.25; 4]);
        let w = class_weights(&stats, 1.0, 1.0, 1e-6).unwrap();
        assert_eq!(w.weights, vec![0.5; 4]);
    }

    #[test]
    fn two_class_scalar_oracle() {
        let stats = ClassStats::from_frequencies(vec![0.9, 0.1]);
        let w = class_weights(&stats, 1.0, 1.0, 1e-6).unwrap();
        // E = 0.5, V = 0.16
        let oracle = |x: f64| 1.0 - 1.0 / (1.0 + (-(x - 0.5) / (0.16 + 1e-6)).exp());
        assert_abs_diff_eq!(w.weights[0], oracle(0.9), epsilon = 1e-12);
        assert_abs_diff_eq!(w.weights[1], oracle(0.1), epsilon = 1e-12);
        assert!(w.weights[1] > w.weights[0]);
    }

    #[test]
    fn weights_sort_against_frequency() {
        let stats = ClassStats::from_frequencies(vec![0.05, 0.6, 0.15, 0.2]);
        let w = class_weights(&stats, 2.0, 0.7, 1e-6).unwrap();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| stats.frequencies[a].total_cmp(&stats.frequencies[b]));
        for pair in order.windows(2) {
            assert!(w.weights[pair[0]] > w.weights[pair[1]]);
        }
    }

    #[test]
    fn invalid_weight_parameters() {
        let stats = ClassStats::from_frequencies(vec![0.5, 0.5]);
        assert!(class_weights(&stats, 1.0, 1.0, 0.0).is_err());
        assert!(class_weights(&stats, 0.0, 1.0, 1e-6).is_err());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn partials_match_finite_differences() {
        let stats = ClassStats::from_frequencies(vec![0.1, 0.3, 0.6]);
        let w = class_weights(&stats, 1.3, 0.8, 1e-3).unwrap();
        let parts = class_weight_partials(&stats, &w);
        let h = 1e-6;
        for i in 0..3 {
            let db = (class_weights(&stats, 1.3 + h, 0.8, 1e-3).unwrap().weights[i]
                - class_weights(&stats, 1.3 - h, 0.8, 1e-3).unwrap().weights[i])
                / (2.0 * h);
            let dg = (class_weights(&stats, 1.3, 0.8 + h, 1e-3).unwrap().weights[i]
                - class_weights(&stats, 1.3, 0.8 - h, 1e-3).unwrap().weights[i])
                / (2.0 * h);
            assert_abs_diff_eq!(parts[i].0, db, epsilon = 1e-8);
            assert_abs_diff_eq!(parts[i].1, dg, epsilon = 1e-8);
        }
    }

    #[test]
    fn stats_from_labels_skip_unknown() {
        let a = SegLabel::new(1, 4, vec![0, 0, 1, UNKNOWN]).unwrap();
        let b = SegLabel::new(1, 2, vec![2, 0]).unwrap();
        let s = ClassStats::from_labels([&a, &b], 3).unwrap();
        assert_eq!(s.counts, vec![3, 1, 1]);
        assert_abs_diff_eq!(s.frequencies[0], 0.6, epsilon = 1e-15);
        assert!(ClassStats::from_labels([&SegLabel::filled(2, 2, UNKNOWN)], 3).is_err());
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let target = SegLabel::new(1, 3, vec![0, 1, 2]).unwrap();
        let logits = Array3::from_shape_fn((1, 3, 3), |(_, x, c)| if x == c { 50.0 } else { -50.0 });
        let l = weighted_cross_entropy(&logits, &target, &LossWeights::uniform(3), LossSupport::default()).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn uniform_logits_two_pixels() {
        let target = SegLabel::new(1, 2, vec![0, 1]).unwrap();
        let logits = Array3::zeros((1, 2, 2));
        let w = LossWeights {
            weights: vec![0.5, 0.5],
            ..LossWeights::uniform(2)
        };
        let l = weighted_cross_entropy(&logits, &target, &w, LossSupport::default()).unwrap();
        assert_abs_diff_eq!(l, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn all_unknown_is_an_error() {
        let target = SegLabel::filled(2, 2, UNKNOWN);
        let r = weighted_cross_entropy(&Array3::zeros((2, 2, 2)), &target, &LossWeights::uniform(2), LossSupport::default());
        assert!(matches!(r, Err(Error::EmptyLossSupport)));
        let target = SegLabel::filled(2, 2, 0);
        let support = LossSupport {
            ignore_class: Some(0),
            region: None,
        };
        assert!(matches!(
            weighted_cross_entropy(&Array3::zeros((2, 2, 2)), &target, &LossWeights::uniform(2), support),
            Err(Error::EmptyLossSupport)
        ));
    }

    #[test]
    fn shape_errors() {
        let target = SegLabel::filled(2, 2, 0);
        let w = LossWeights::uniform(2);
        assert!(weighted_cross_entropy(&Array3::zeros((2, 3, 2)), &target, &w, LossSupport::default()).is_err());
        assert!(weighted_cross_entropy(&Array3::zeros((2, 2, 3)), &target, &w, LossSupport::default()).is_err());
    }
}
