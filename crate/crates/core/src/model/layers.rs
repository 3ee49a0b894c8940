//! Dense building blocks with hand-written backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};

const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Uniform access to every trainable tensor of a parameter tree.
///
/// `visit` and `visit_mut` must walk tensors in the same order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64]));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64]));

    fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, s| out.push(s));
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.visit_mut(&mut |s| out.push(s));
        out
    }

    fn named(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        self.visit("", &mut |n, s, d| out.push((n, s, d)));
        out
    }

    fn scalar_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |s| s.fill(value));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn mat_slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are contiguous")
}

pub(crate) fn vec_slice(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are contiguous")
}

/// Std of a standard normal truncated to [-2, 2].
const TRUNC2_STD: f64 = 0.879_625_7;

/// Truncated normal (cut at two base std) whose resulting std is `std`.
pub fn truncated_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let base = std / TRUNC2_STD;
    let normal = Normal::new(0.0, base).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * base {
            break v;
        }
    })
}

/// Affine map `y = x · W + b`, with `W` stored input-major (in × out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        Self {
            weight: truncated_normal(rng, input, output, INIT_STD),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() || self.bias.len() != self.output_dim() {
            return shape_err(format!(
                "linear layer {}x{} applied to width {}",
                self.input_dim(),
                self.output_dim(),
                x.ncols()
            ));
        }
        Ok(self.apply(x))
    }

    pub(crate) fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Adds dL/dW and dL/db for this call into `grad`.
    pub(crate) fn accumulate_grad(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    pub(crate) fn input_grad(&self, dy: ArrayView2<f64>) -> Array2<f64> {
        dy.dot(&self.weight.t())
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        f(join(prefix, "weight"), self.weight.shape().to_vec(), mat_slice(&self.weight));
        f(join(prefix, "bias"), self.bias.shape().to_vec(), vec_slice(&self.bias));
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        f(self.weight.as_slice_mut().expect("contiguous"));
        f(self.bias.as_slice_mut().expect("contiguous"));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

pub(crate) struct LayerNormCache {
    normed: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            scale: Array1::ones(dim),
            shift: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            scale: Array1::zeros(dim),
            shift: Array1::zeros(dim),
        }
    }

    pub(crate) fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = &x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let normed = centered * inv_std.view().insert_axis(Axis(1));
        let mut y = &normed * &self.scale;
        y += &self.shift;
        (y, LayerNormCache { normed, inv_std })
    }

    pub(crate) fn backward(&self, cache: &LayerNormCache, dy: ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.scale += &(&dy * &cache.normed).sum_axis(Axis(0));
        grad.shift += &dy.sum_axis(Axis(0));
        let dnormed = &dy * &self.scale;
        let d = dy.ncols() as f64;
        let mean_d = dnormed.sum_axis(Axis(1)) / d;
        let mean_dn = (&dnormed * &cache.normed).sum_axis(Axis(1)) / d;
        let mut dx = dnormed;
        dx -= &mean_d.view().insert_axis(Axis(1));
        dx -= &(&cache.normed * &mean_dn.view().insert_axis(Axis(1)));
        dx *= &cache.inv_std.view().insert_axis(Axis(1));
        dx
    }
}

impl Params for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        f(join(prefix, "scale"), self.scale.shape().to_vec(), vec_slice(&self.scale));
        f(join(prefix, "shift"), self.shift.shape().to_vec(), vec_slice(&self.shift));
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        f(self.scale.as_slice_mut().expect("contiguous"));
        f(self.shift.as_slice_mut().expect("contiguous"));
    }
}

/// Position-wise `ReLU(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub(crate) struct FeedForwardCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
}

impl FeedForward {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::init(rng, dim, hidden),
            fc2: Linear::init(rng, hidden, dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.fc1.input_dim() || self.fc1.output_dim() != self.fc2.input_dim() {
            return shape_err("feed-forward dimensions do not line up");
        }
        Ok(self.forward_cached(x).0)
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let hidden = self.fc1.apply(x).mapv_into(|v| v.max(0.0));
        let out = self.fc2.apply(hidden.view());
        (
            out,
            FeedForwardCache {
                input: x.to_owned(),
                hidden,
            },
        )
    }

    pub(crate) fn backward(&self, cache: &FeedForwardCache, dy: ArrayView2<f64>, grad: &mut FeedForward) -> Array2<f64> {
        self.fc2.accumulate_grad(cache.hidden.view(), dy, &mut grad.fc2);
        let mut dh = self.fc2.input_grad(dy);
        dh.zip_mut_with(&cache.hidden, |g, &h| {
            if h <= 0.0 {
                *g = 0.0
            }
        });
        self.fc1.accumulate_grad(cache.input.view(), dh.view(), &mut grad.fc1);
        self.fc1.input_grad(dh.view())
    }
}

impl Params for FeedForward {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    fn random(rows: usize, cols: usize, s: u64) -> Array2<f64> {
        let mut rng = seed::rng(s);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn ffn_zero_weights_give_zero() {
        let ffn = FeedForward::zeros(3, 6);
        let x = random(4, 3, 1);
        assert!(ffn.forward(x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_relu_gate_leaves_only_output_bias() {
        let mut ffn = FeedForward::zeros(2, 3);
        ffn.fc1.bias.fill(-1.0);
        ffn.fc2.weight.fill(5.0);
        ffn.fc2.bias = ndarray::arr1(&[0.25, -0.75]);
        let x = random(3, 2, 2) * 0.1;
        for r in ffn.forward(x.view()).unwrap().rows() {
            assert_eq!(r.to_vec(), vec![0.25, -0.75]);
        }
    }

    #[test]
    fn ffn_matches_dense_oracle() {
        let mut rng = seed::rng(5);
        let ffn = FeedForward::init(&mut rng, 2, 3);
        let x = arr2(&[[0.3, -0.2], [1.0, 0.5]]);
        let y = ffn.forward(x.view()).unwrap();
        for n in 0..2 {
            for o in 0..2 {
                let mut acc = ffn.fc2.bias[o];
                for h in 0..3 {
                    let pre = x[[n, 0]] * ffn.fc1.weight[[0, h]] + x[[n, 1]] * ffn.fc1.weight[[1, h]] + ffn.fc1.bias[h];
                    acc += pre.max(0.0) * ffn.fc2.weight[[h, o]];
                }
                assert_abs_diff_eq!(y[[n, o]], acc, epsilon = 1e-15);
            }
        }
        assert!(ffn.forward(random(2, 3, 0).view()).is_err());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let ln = LayerNorm::new(5);
        let (y, _) = ln.forward(random(3, 5, 7).view());
        for r in y.rows() {
            assert_abs_diff_eq!(r.sum() / 5.0, 0.0, epsilon = 1e-12);
            let var = r.mapv(|v| v * v).sum() / 5.0;
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = seed::rng(9);
        let ln = LayerNorm {
            scale: Array1::from_shape_simple_fn(4, || rng.random_range(0.5..1.5)),
            shift: Array1::from_shape_simple_fn(4, || rng.random_range(-0.5..0.5)),
        };
        let x = random(3, 4, 10);
        let w = random(3, 4, 11);
        let objective = |x: &Array2<f64>| (ln.forward(x.view()).0 * &w).sum();
        let (_, cache) = ln.forward(x.view());
        let mut grad = LayerNorm::zeros(4);
        let dx = ln.backward(&cache, w.view(), &mut grad);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
                assert_abs_diff_eq!(dx[[i, j]], fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn truncated_normal_statistics() {
        let mut rng = seed::rng(1);
        let w = truncated_normal(&mut rng, 256, 256, INIT_STD);
        assert!(w.iter().all(|v| v.abs() <= 2.0 * INIT_STD / TRUNC2_STD));
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.mapv(|v| (v - mean).powi(2)).sum() / n).sqrt();
        assert!((std - INIT_STD).abs() <= 0.1 * INIT_STD, "std {std}");
        assert!((std - INIT_STD).abs() <= 0.01 * INIT_STD, "std {std}");
    }
}
