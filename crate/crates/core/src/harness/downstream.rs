//! Small fixed encoder-decoder CNN used as the downstream segmentation network.
//!
//! conv3×3(3→w1) → ReLU → conv3×3 stride 2 (w1→w2) → ReLU → conv3×3(w2→w2) → ReLU
//! → nearest ×2 upsample → concat with the first feature map → conv1×1(w1+w2→C).

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Sample, SegLabel};
use crate::error::{shape_err, Error, Result};
use crate::loss::{weighted_cross_entropy_grad, LossSupport, LossWeights};
use crate::metrics::{miou, ConfusionMatrix};
use crate::model::{argmax_labels, Params};
use crate::seed;
use crate::training::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub kernel: usize,
    pub stride: usize,
    /// (k·k·c_in) × c_out, rows in (dy, dx, c) order.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

fn out_size(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (n + 2 * pad - kernel) / stride + 1
}

impl Conv {
    fn zeros(kernel: usize, stride: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            kernel,
            stride,
            weight: Array2::zeros((kernel * kernel * c_in, c_out)),
            bias: Array1::zeros(c_out),
        }
    }

    fn init(rng: &mut impl rand::Rng, kernel: usize, stride: usize, c_in: usize, c_out: usize) -> Self {
        let mut conv = Self::zeros(kernel, stride, c_in, c_out);
        let fan_in = (kernel * kernel * c_in) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        conv.weight.mapv_inplace(|_| normal.sample(rng));
        conv
    }

    fn c_in(&self) -> usize {
        self.weight.nrows() / (self.kernel * self.kernel)
    }

    /// Zero-padded patches, one row per output pixel.
    fn im2col(&self, x: ArrayView3<f64>) -> Array2<f64> {
        let (h, w, c) = x.dim();
        let (k, st, pad) = (self.kernel, self.stride, self.kernel / 2);
        let (ho, wo) = (out_size(h, k, st), out_size(w, k, st));
        let mut cols = Array2::zeros((ho * wo, k * k * c));
        for oy in 0..ho {
            for ox in 0..wo {
                let mut row = cols.row_mut(oy * wo + ox);
                for dy in 0..k {
                    let y = (oy * st + dy) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let xx = (ox * st + dx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let base = (dy * k + dx) * c;
                        row.slice_mut(s![base..base + c]).assign(&x.slice(s![y as usize, xx as usize, ..]));
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, h: usize, w: usize, c: usize) -> Array3<f64> {
        let (k, st, pad) = (self.kernel, self.stride, self.kernel / 2);
        let (ho, wo) = (out_size(h, k, st), out_size(w, k, st));
        let mut x = Array3::zeros((h, w, c));
        for oy in 0..ho {
            for ox in 0..wo {
                let row = cols.row(oy * wo + ox);
                for dy in 0..k {
                    let y = (oy * st + dy) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let xx = (ox * st + dx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let base = (dy * k + dx) * c;
                        let mut dst = x.slice_mut(s![y as usize, xx as usize, ..]);
                        dst += &row.slice(s![base..base + c]);
                    }
                }
            }
        }
        x
    }

    fn forward(&self, x: ArrayView3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (h, w, _) = x.dim();
        let cols = self.im2col(x);
        let y = cols.dot(&self.weight) + &self.bias;
        let (ho, wo) = (out_size(h, self.kernel, self.stride), out_size(w, self.kernel, self.stride));
        let y = y.into_shape_with_order((ho, wo, self.weight.ncols())).expect("sizes agree");
        (y, cols)
    }

    fn backward(&self, cols: &Array2<f64>, dy: &Array3<f64>, in_hw: (usize, usize), grad: &mut Conv) -> Array3<f64> {
        let (ho, wo, co) = dy.dim();
        let dy2 = dy.view().into_shape_with_order((ho * wo, co)).expect("contiguous");
        grad.weight += &cols.t().dot(&dy2);
        grad.bias += &dy2.sum_axis(Axis(0));
        let dcols = dy2.dot(&self.weight.t());
        self.col2im(&dcols, in_hw.0, in_hw.1, self.c_in())
    }
}

impl Params for Conv {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        f(format!("{prefix}.weight"), self.weight.shape().to_vec(), self.weight.as_slice().expect("contiguous"));
        f(format!("{prefix}.bias"), self.bias.shape().to_vec(), self.bias.as_slice().expect("contiguous"));
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        f(self.weight.as_slice_mut().expect("contiguous"));
        f(self.bias.as_slice_mut().expect("contiguous"));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    pub width1: usize,
    pub width2: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            width1: 16,
            width2: 32,
            epochs: 20,
            batch_size: 8,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamNet {
    pub class_count: usize,
    pub c1: Conv,
    pub c2: Conv,
    pub c3: Conv,
    pub head: Conv,
}

impl Params for DownstreamNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        for (name, conv) in [("c1", &self.c1), ("c2", &self.c2), ("c3", &self.c3), ("head", &self.head)] {
            conv.visit(&crate::model::layers::join(prefix, name), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        self.c1.visit_mut(f);
        self.c2.visit_mut(f);
        self.c3.visit_mut(f);
        self.head.visit_mut(f);
    }
}

struct Trace {
    cols1: Array2<f64>,
    f1: Array3<f64>,
    cols2: Array2<f64>,
    f2: Array3<f64>,
    cols3: Array2<f64>,
    f3: Array3<f64>,
    cols4: Array2<f64>,
}

fn relu(mut x: Array3<f64>) -> Array3<f64> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

fn upsample2(x: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = x.dim().2;
    Array3::from_shape_fn((h, w, c), |(y, xx, k)| x[[y / 2, xx / 2, k]])
}

impl DownstreamNet {
    pub fn init(cfg: &DownstreamConfig, class_count: usize) -> Self {
        let mut rng = seed::rng(seed::derive(cfg.seed, &[11]));
        Self {
            class_count,
            c1: Conv::init(&mut rng, 3, 1, 3, cfg.width1),
            c2: Conv::init(&mut rng, 3, 2, cfg.width1, cfg.width2),
            c3: Conv::init(&mut rng, 3, 1, cfg.width2, cfg.width2),
            head: Conv::init(&mut rng, 1, 1, cfg.width1 + cfg.width2, class_count),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |c: &Conv| Conv::zeros(c.kernel, c.stride, c.c_in(), c.weight.ncols());
        Self {
            class_count: self.class_count,
            c1: z(&self.c1),
            c2: z(&self.c2),
            c3: z(&self.c3),
            head: z(&self.head),
        }
    }

    fn forward_trace(&self, image: ArrayView3<f64>) -> (Array3<f64>, Trace) {
        let (h, w, _) = image.dim();
        let (y1, cols1) = self.c1.forward(image);
        let f1 = relu(y1);
        let (y2, cols2) = self.c2.forward(f1.view());
        let f2 = relu(y2);
        let (y3, cols3) = self.c3.forward(f2.view());
        let f3 = relu(y3);
        let up = upsample2(&f3, h, w);
        let cat = ndarray::concatenate(Axis(2), &[up.view(), f1.view()]).expect("same spatial size");
        let (logits, cols4) = self.head.forward(cat.view());
        (
            logits,
            Trace {
                cols1,
                f1,
                cols2,
                f2,
                cols3,
                f3,
                cols4,
            },
        )
    }

    pub fn logits(&self, image: &crate::data::RgbImage) -> Array3<f64> {
        self.forward_trace(image.to_array().view()).0
    }

    pub fn predict(&self, image: &crate::data::RgbImage) -> Result<SegLabel> {
        argmax_labels(&self.logits(image))
    }

    fn backward(&self, t: &Trace, dlogits: &Array3<f64>, hw: (usize, usize)) -> Self {
        let mut g = self.zeros_like();
        let (h, w) = hw;
        let w2 = self.c3.weight.ncols();
        let dcat = self.head.backward(&t.cols4, dlogits, hw, &mut g.head);
        let dup = dcat.slice(s![.., .., ..w2]);
        let mut df1 = dcat.slice(s![.., .., w2..]).to_owned();
        let (h2, w2s, _) = t.f3.dim();
        let mut df3 = Array3::<f64>::zeros(t.f3.dim());
        for y in 0..h {
            for x in 0..w {
                let mut d = df3.slice_mut(s![y / 2, x / 2, ..]);
                d += &dup.slice(s![y, x, ..]);
            }
        }
        df3.zip_mut_with(&t.f3, |d, &f| if f <= 0.0 { *d = 0.0 });
        let mut df2 = self.c3.backward(&t.cols3, &df3, (h2, w2s), &mut g.c3);
        df2.zip_mut_with(&t.f2, |d, &f| if f <= 0.0 { *d = 0.0 });
        df1 += &self.c2.backward(&t.cols2, &df2, (h, w), &mut g.c2);
        df1.zip_mut_with(&t.f1, |d, &f| if f <= 0.0 { *d = 0.0 });
        self.c1.backward(&t.cols1, &df1, (h, w), &mut g.c1);
        g
    }

    /// Uniform-weight cross-entropy over known pixels and its parameter gradient.
    pub fn loss_and_grad(&self, sample: &Sample) -> Result<(f64, Self)> {
        let image = sample.image.to_array();
        let (logits, trace) = self.forward_trace(image.view());
        let out = weighted_cross_entropy_grad(
            &logits,
            &sample.label,
            &LossWeights::uniform(self.class_count),
            LossSupport::default(),
        )?;
        let g = self.backward(&trace, &out.grad, (sample.image.height, sample.image.width));
        Ok((out.loss, g))
    }
}

/// Trains a fresh network; samples whose labels are entirely UNKNOWN contribute nothing.
pub fn train_downstream(samples: &[&Sample], class_count: usize, cfg: &DownstreamConfig) -> Result<DownstreamNet> {
    if samples.is_empty() {
        return Err(Error::Data("no downstream training samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.image.height % 2 != 0 || s.image.width % 2 != 0) {
        return shape_err(format!("{}: downstream network needs even image sides", s.name));
    }
    let mut net = DownstreamNet::init(cfg, class_count);
    let mut opt = Adam::for_params(AdamConfig::default(), cfg.lr, &net)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &[12, epoch as u64])));
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = net.zeros_like();
            let mut used = 0usize;
            let mut grads = Vec::new();
            for &i in chunk {
                match net.loss_and_grad(samples[i]) {
                    Err(Error::EmptyLossSupport) => continue,
                    other => {
                        let (loss, g) = other?;
                        if !loss.is_finite() {
                            return Err(Error::Numeric(format!("downstream loss {loss} on '{}'", samples[i].name)));
                        }
                        grads.push(g);
                        used += 1;
                    }
                }
            }
            if used == 0 {
                continue;
            }
            let scale = 1.0 / used as f64;
            for g in &grads {
                for (a, b) in acc.slices_mut().into_iter().zip(g.slices()) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += scale * y;
                    }
                }
            }
            opt.update(&mut net, &acc)?;
        }
    }
    Ok(net)
}

/// Per-class IoU and mIoU of `net` on fully labelled `samples`.
pub fn evaluate_downstream(net: &DownstreamNet, samples: &[&Sample]) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(net.class_count);
    for s in samples {
        cm.accumulate(&net.predict(&s.image)?, &s.label, None)?;
    }
    miou(&cm, true)
}
