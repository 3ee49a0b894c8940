use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::layers::{join, mat_slice, truncated_normal, Params, INIT_STD};
use crate::data::TokenSequence;
use crate::error::{shape_err, Result};

/// Multi-head self-attention weights.
///
/// The per-head projections are stored side by side: columns
/// `i*d_k .. (i+1)*d_k` of `w_q` are head `i`'s query projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

pub(crate) struct AttentionCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    z: Array2<f64>,
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl AttentionParams {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            heads,
            w_q: Array2::zeros((dim, dim)),
            w_k: Array2::zeros((dim, dim)),
            w_v: Array2::zeros((dim, dim)),
            w_o: Array2::zeros((dim, dim)),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        Self {
            heads,
            w_q: truncated_normal(rng, dim, dim, INIT_STD),
            w_k: truncated_normal(rng, dim, dim, INIT_STD),
            w_v: truncated_normal(rng, dim, dim, INIT_STD),
            w_o: truncated_normal(rng, dim, dim, INIT_STD),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }

    fn check(&self, width: usize) -> Result<()> {
        let d = self.model_dim();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return shape_err(format!("model dim {d} not divisible by {} heads", self.heads));
        }
        if width != d {
            return shape_err(format!("attention expects width {d}, got {width}"));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, AttentionCache) {
        let n = x.nrows();
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let q = x.dot(&self.w_q);
        let k = x.dot(&self.w_k);
        let v = x.dot(&self.w_v);
        let mut z = Array2::<f64>::zeros((n, self.model_dim()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores *= scale;
            softmax_rows(&mut scores);
            general_mat_mul(1.0, &scores, &v.slice(cols), 0.0, &mut z.slice_mut(cols));
            probs.push(scores);
        }
        let out = z.dot(&self.w_o);
        (
            out,
            AttentionCache {
                input: x.to_owned(),
                q,
                k,
                v,
                probs,
                z,
            },
        )
    }

    pub(crate) fn backward(&self, cache: &AttentionCache, dy: ArrayView2<f64>, grad: &mut AttentionParams) -> Array2<f64> {
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        general_mat_mul(1.0, &cache.z.t(), &dy, 1.0, &mut grad.w_o);
        let dz = dy.dot(&self.w_o.t());
        let mut dq = Array2::<f64>::zeros(cache.q.raw_dim());
        let mut dkm = Array2::<f64>::zeros(cache.k.raw_dim());
        let mut dv = Array2::<f64>::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dk..(h + 1) * dk];
            let dzh = dz.slice(cols);
            let dp = dzh.dot(&cache.v.slice(cols).t());
            general_mat_mul(1.0, &p.t(), &dzh, 0.0, &mut dv.slice_mut(cols));
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let mut ds = dp - &row_dot.insert_axis(Axis(1));
            ds *= p;
            ds *= scale;
            general_mat_mul(1.0, &ds, &cache.k.slice(cols), 0.0, &mut dq.slice_mut(cols));
            general_mat_mul(1.0, &ds.t(), &cache.q.slice(cols), 0.0, &mut dkm.slice_mut(cols));
        }
        let x = cache.input.view();
        general_mat_mul(1.0, &x.t(), &dq, 1.0, &mut grad.w_q);
        general_mat_mul(1.0, &x.t(), &dkm, 1.0, &mut grad.w_k);
        general_mat_mul(1.0, &x.t(), &dv, 1.0, &mut grad.w_v);
        let mut dx = dq.dot(&self.w_q.t());
        general_mat_mul(1.0, &dkm, &self.w_k.t(), 1.0, &mut dx);
        general_mat_mul(1.0, &dv, &self.w_v.t(), 1.0, &mut dx);
        dx
    }
}

impl Params for AttentionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        for (name, m) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            f(join(prefix, name), m.shape().to_vec(), mat_slice(m));
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        for m in [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o] {
            f(m.as_slice_mut().expect("contiguous"));
        }
    }
}

/// `concat_i(softmax(Q_i K_iᵀ / √d_k) V_i) · W_O` over the whole sequence.
pub fn multi_head_attention(x: &TokenSequence, params: &AttentionParams) -> Result<TokenSequence> {
    params.check(x.dim())?;
    Ok(TokenSequence {
        tokens: params.forward_cached(x.tokens.view()).0,
        grid: x.grid,
    })
}

/// Attention probability matrices, one per head.
pub fn attention_weights(x: &TokenSequence, params: &AttentionParams) -> Result<Vec<Array2<f64>>> {
    params.check(x.dim())?;
    Ok(params.forward_cached(x.tokens.view()).1.probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GridSpec;
    use crate::seed;
    use approx::assert_abs_diff_eq;

    fn seq(rows: usize, dim: usize, s: u64) -> TokenSequence {
        let mut rng = seed::rng(s);
        TokenSequence {
            tokens: Array2::from_shape_simple_fn((rows, dim), || rng.random_range(-1.0..1.0)),
            grid: GridSpec {
                patch_size: 1,
                rows: 1,
                cols: rows,
            },
        }
    }

    #[test]
    fn single_token_passes_value_through() {
        let mut rng = seed::rng(1);
        let p = AttentionParams::init(&mut rng, 4, 2);
        let x = seq(1, 4, 2);
        let out = multi_head_attention(&x, &p).unwrap();
        let want = x.tokens.dot(&p.w_v).dot(&p.w_o);
        for (a, b) in out.tokens.iter().zip(want.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        for w in attention_weights(&x, &p).unwrap() {
            assert_eq!(w[[0, 0]], 1.0);
        }
    }

    #[test]
    fn two_tokens_identity_projections_match_hand_oracle() {
        let p = AttentionParams {
            heads: 1,
            w_q: Array2::eye(2),
            w_k: Array2::eye(2),
            w_v: Array2::eye(2),
            w_o: Array2::eye(2),
        };
        let x = TokenSequence {
            tokens: ndarray::arr2(&[[1.0, 0.0], [0.0, 2.0]]),
            grid: GridSpec {
                patch_size: 1,
                rows: 1,
                cols: 2,
            },
        };
        let out = multi_head_attention(&x, &p).unwrap();
        // scores = x xᵀ / √2 = [[1,0],[0,4]] / √2
        let r = 2f64.sqrt();
        let a0 = [1.0 / r, 0.0];
        let a1 = [0.0, 4.0 / r];
        let soft = |s: [f64; 2]| {
            let e = [s[0].exp(), s[1].exp()];
            [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
        };
        let (w0, w1) = (soft(a0), soft(a1));
        let want = [[w0[0], 2.0 * w0[1]], [w1[0], 2.0 * w1[1]]];
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert_abs_diff_eq!(out.tokens[[i, j]], *w, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn full_width_head_dim() {
        let p = AttentionParams::zeros(512, 8);
        assert_eq!(p.head_dim(), 64);
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = seed::rng(3);
        let mut p = AttentionParams::init(&mut rng, 8, 2);
        p.w_q *= 50.0;
        let x = seq(6, 8, 4);
        for w in attention_weights(&x, &p).unwrap() {
            for r in w.rows() {
                assert_abs_diff_eq!(r.sum(), 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let p = AttentionParams::zeros(8, 2);
        assert!(multi_head_attention(&seq(3, 6, 0), &p).is_err());
        let p = AttentionParams::zeros(6, 4);
        assert!(multi_head_attention(&seq(3, 6, 0), &p).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seed::rng(5);
        let mut p = AttentionParams::init(&mut rng, 4, 2);
        for m in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o] {
            *m *= 20.0;
        }
        let x = seq(3, 4, 6).tokens;
        let proj = seq(3, 4, 7).tokens;
        let objective = |p: &AttentionParams, x: &Array2<f64>| (p.forward_cached(x.view()).0 * &proj).sum();
        let (_, cache) = p.forward_cached(x.view());
        let mut grad = AttentionParams::zeros(4, 2);
        let dx = p.backward(&cache, proj.view(), &mut grad);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                let fd = (objective(&p, &xp) - objective(&p, &xm)) / (2.0 * h);
                assert_abs_diff_eq!(dx[[i, j]], fd, epsilon = 1e-7);
            }
        }
        let analytic: Vec<f64> = grad.slices().concat();
        let mut numeric = Vec::new();
        for t in 0..4 {
            for e in 0..16 {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.slices_mut()[t][e] += h;
                pm.slices_mut()[t][e] -= h;
                numeric.push((objective(&pp, &x) - objective(&pm, &x)) / (2.0 * h));
            }
        }
        for (a, n) in analytic.iter().zip(&numeric) {
            assert_abs_diff_eq!(a, n, epsilon = 1e-7);
        }
    }
}
