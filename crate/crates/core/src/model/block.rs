use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore};

use super::attention::{AttentionCache, AttentionParams};
use super::layers::{join, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, Params};
use crate::data::{NormPlacement, TokenSequence};
use crate::error::{shape_err, Result};
use crate::seed;

/// One transformer block: residual attention and feed-forward branches, each behind DropPath.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1: LayerNorm,
    pub attention: AttentionParams,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub drop_path_rate: f64,
}

pub(crate) struct BlockCache {
    norm: NormPlacement,
    keep: [f64; 2],
    ln1: LayerNormCache,
    attn: Option<AttentionCache>,
    ln2: LayerNormCache,
    ffn: Option<FeedForwardCache>,
}

/// Residual branch multipliers for one forward pass.
///
/// Evaluation (`rng == None`) always keeps both branches at scale 1. In training a
/// branch is dropped with probability `rate` and otherwise scaled by `1/(1-rate)`.
fn drop_path_scales(rate: f64, rng: Option<&mut dyn RngCore>) -> [f64; 2] {
    match rng {
        Some(rng) if rate > 0.0 => {
            let mut draw = || {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    1.0 / (1.0 - rate)
                }
            };
            let a = draw();
            [a, draw()]
        }
        _ => [1.0, 1.0],
    }
}

impl BlockParams {
    pub fn zeros(dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            norm1: LayerNorm::zeros(dim),
            attention: AttentionParams::zeros(dim, heads),
            norm2: LayerNorm::zeros(dim),
            ffn: FeedForward::zeros(dim, hidden),
            drop_path_rate: 0.0,
        }
    }

    pub fn init<R: Rng>(rng: &mut R, dim: usize, heads: usize, hidden: usize, drop_path_rate: f64) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attention: AttentionParams::init(rng, dim, heads),
            norm2: LayerNorm::new(dim),
            ffn: FeedForward::init(rng, dim, hidden),
            drop_path_rate,
        }
    }

    pub fn dim(&self) -> usize {
        self.attention.model_dim()
    }

    pub(crate) fn forward_cached(
        &self,
        x: ArrayView2<f64>,
        norm: NormPlacement,
        rng: Option<&mut dyn RngCore>,
    ) -> (Array2<f64>, BlockCache) {
        let keep = drop_path_scales(self.drop_path_rate, rng);
        match norm {
            NormPlacement::Pre => {
                let (a, ln1) = self.norm1.forward(x);
                let mut y = x.to_owned();
                let attn = (keep[0] != 0.0).then(|| {
                    let (out, cache) = self.attention.forward_cached(a.view());
                    y.scaled_add(keep[0], &out);
                    cache
                });
                let (c, ln2) = self.norm2.forward(y.view());
                let ffn = (keep[1] != 0.0).then(|| {
                    let (out, cache) = self.ffn.forward_cached(c.view());
                    y.scaled_add(keep[1], &out);
                    cache
                });
                (y, BlockCache { norm, keep, ln1, attn, ln2, ffn })
            }
            NormPlacement::Post => {
                let mut u = x.to_owned();
                let attn = (keep[0] != 0.0).then(|| {
                    let (out, cache) = self.attention.forward_cached(x);
                    u.scaled_add(keep[0], &out);
                    cache
                });
                let (mut v, ln1) = self.norm1.forward(u.view());
                let ffn = (keep[1] != 0.0).then(|| {
                    let (out, cache) = self.ffn.forward_cached(v.view());
                    v.scaled_add(keep[1], &out);
                    cache
                });
                let (z, ln2) = self.norm2.forward(v.view());
                (z, BlockCache { norm, keep, ln1, attn, ln2, ffn })
            }
        }
    }

    pub(crate) fn backward(&self, cache: &BlockCache, dz: ArrayView2<f64>, grad: &mut BlockParams) -> Array2<f64> {
        match cache.norm {
            NormPlacement::Pre => {
                let mut dy = dz.to_owned();
                if let Some(fc) = &cache.ffn {
                    let dc = self.ffn.backward(fc, (&dz * cache.keep[1]).view(), &mut grad.ffn);
                    dy += &self.norm2.backward(&cache.ln2, dc.view(), &mut grad.norm2);
                }
                let mut dx = dy.clone();
                if let Some(ac) = &cache.attn {
                    let da = self.attention.backward(ac, (&dy * cache.keep[0]).view(), &mut grad.attention);
                    dx += &self.norm1.backward(&cache.ln1, da.view(), &mut grad.norm1);
                }
                dx
            }
            NormPlacement::Post => {
                let dv = self.norm2.backward(&cache.ln2, dz, &mut grad.norm2);
                let mut dy = dv.clone();
                if let Some(fc) = &cache.ffn {
                    dy += &self.ffn.backward(fc, (&dv * cache.keep[1]).view(), &mut grad.ffn);
                }
                let du = self.norm1.backward(&cache.ln1, dy.view(), &mut grad.norm1);
                let mut dx = du.clone();
                if let Some(ac) = &cache.attn {
                    dx += &self.attention.backward(ac, (&du * cache.keep[0]).view(), &mut grad.attention);
                }
                dx
            }
        }
    }
}

impl Params for BlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        self.norm1.visit_mut(f);
        self.attention.visit_mut(f);
        self.norm2.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

/// Applies one block. `training` enables DropPath drawn from `seed`.
pub fn lmmsa_block(
    x: &TokenSequence,
    params: &BlockParams,
    norm: NormPlacement,
    training: bool,
    seed_value: u64,
) -> Result<TokenSequence> {
    if x.dim() != params.dim() || params.attention.heads == 0 || !params.dim().is_multiple_of(params.attention.heads) {
        return shape_err(format!("block of width {} applied to width {}", params.dim(), x.dim()));
    }
    if params.ffn.fc1.input_dim() != x.dim() || params.ffn.fc2.output_dim() != x.dim() {
        return shape_err("feed-forward width does not match block width");
    }
    let mut rng = seed::rng(seed_value);
    let rng: Option<&mut dyn RngCore> = if training { Some(&mut rng) } else { None };
    Ok(TokenSequence {
        tokens: params.forward_cached(x.tokens.view(), norm, rng).0,
        grid: x.grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GridSpec;
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

    fn block(rate: f64) -> BlockParams {
        let mut rng = seed::rng(17);
        let mut b = BlockParams::init(&mut rng, 8, 2, 32, rate);
        b.attention.w_q *= 10.0;
        b.attention.w_k *= 10.0;
        b.ffn.fc1.weight *= 10.0;
        b
    }

    fn plain_pre_norm(b: &BlockParams, x: &Array2<f64>) -> Array2<f64> {
        let a = b.norm1.forward(x.view()).0;
        let y = x + &b.attention.forward_cached(a.view()).0;
        let c = b.norm2.forward(y.view()).0;
        &y + &b.ffn.forward(c.view()).unwrap()
    }

    #[test]
    fn zero_rate_equals_plain_block_in_training() {
        let b = block(0.0);
        let x = seq(5, 8, 1);
        let out = lmmsa_block(&x, &b, NormPlacement::Pre, true, 3).unwrap();
        assert_eq!(out.tokens, plain_pre_norm(&b, &x.tokens));
    }

    #[test]
    fn evaluation_is_deterministic_identity_drop_path() {
        let b = block(0.7);
        let x = seq(5, 8, 2);
        let a = lmmsa_block(&x, &b, NormPlacement::Pre, false, 1).unwrap();
        let c = lmmsa_block(&x, &b, NormPlacement::Pre, false, 99).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.tokens, plain_pre_norm(&b, &x.tokens));
    }

    #[test]
    fn near_one_rate_averages_to_input() {
        let rate = 1.0 - 1e-3;
        let b = block(rate);
        let x = seq(4, 8, 3);
        let runs = 2000;
        let mut exact = 0;
        for s in 0..runs {
            let out = lmmsa_block(&x, &b, NormPlacement::Pre, true, s).unwrap();
            if out.tokens == x.tokens {
                exact += 1;
            }
        }
        // a branch survives with probability 1e-3 each; both dropped ≈ 99.8% of runs
        assert!(exact as f64 / runs as f64 > 0.99, "{exact}/{runs}");
    }

    #[test]
    fn rejects_wrong_width() {
        let b = block(0.0);
        assert!(lmmsa_block(&seq(3, 6, 0), &b, NormPlacement::Pre, false, 0).is_err());
    }

    fn check_gradients(norm: NormPlacement, training: bool) {
        let b = block(0.3);
        let x = seq(4, 8, 5).tokens;
        let proj = seq(4, 8, 6).tokens;
        let run = |b: &BlockParams, x: &Array2<f64>| {
            let mut rng = seed::rng(2);
            let rng: Option<&mut dyn RngCore> = if training { Some(&mut rng) } else { None };
            b.forward_cached(x.view(), norm, rng)
        };
        let objective = |b: &BlockParams, x: &Array2<f64>| (run(b, x).0 * &proj).sum();
        let (_, cache) = run(&b, &x);
        let mut grad = BlockParams::zeros(8, 2, 32);
        let dx = b.backward(&cache, proj.view(), &mut grad);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..8 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                let fd = (objective(&b, &xp) - objective(&b, &xm)) / (2.0 * h);
                assert_abs_diff_eq!(dx[[i, j]], fd, epsilon = 1e-6);
            }
        }
        let analytic = grad.slices().concat();
        let mut k = 0;
        for t in 0..b.slices().len() {
            for e in (0..b.slices()[t].len()).step_by(7) {
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp.slices_mut()[t][e] += h;
                bm.slices_mut()[t][e] -= h;
                let fd = (objective(&bp, &x) - objective(&bm, &x)) / (2.0 * h);
                let offset: usize = b.slices()[..t].iter().map(|s| s.len()).sum();
                assert_abs_diff_eq!(analytic[offset + e], fd, epsilon = 1e-6);
                k += 1;
            }
        }
        assert!(k > 50);
    }

    #[test]
    fn pre_norm_gradients() {
        check_gradients(NormPlacement::Pre, false);
        check_gradients(NormPlacement::Pre, true);
    }

    #[test]
    fn post_norm_gradients() {
        check_gradients(NormPlacement::Post, false);
        check_gradients(NormPlacement::Post, true);
    }
}
