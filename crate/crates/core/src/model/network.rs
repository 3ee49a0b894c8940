use ndarray::{Array2, Array3, ArrayView2};
use rand::RngCore;

use super::block::{BlockCache, BlockParams};
use super::layers::{join, Linear, Params};
use crate::data::{fuse, patchify, positional_table, unpatchify, GridSpec, ModelConfig, RgbImage, SegLabel, TokenSequence};
use crate::error::{shape_err, Error, Result};
use crate::ips::{self, assemble, gather};
use crate::loss::{weighted_cross_entropy_grad, LossSupport, LossWeights};
use crate::masking::MaskPlan;
use crate::seed;

/// All trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Fuse-map patch rows to encoder width.
    pub fuse_embed: Linear,
    pub encoder: Vec<BlockParams>,
    /// Encoder width to decoder width, applied to kept tokens before supplement.
    pub enc_to_dec: Linear,
    /// Image-only patch rows to decoder width, used to refill dropped positions.
    pub image_embed: Linear,
    pub decoder: Vec<BlockParams>,
    /// Decoder width to p·p·C per-pixel class logits.
    pub head: Linear,
}

impl Params for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        self.fuse_embed.visit(&join(prefix, "fuse_embed"), f);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.enc_to_dec.visit(&join(prefix, "enc_to_dec"), f);
        self.image_embed.visit(&join(prefix, "image_embed"), f);
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        self.fuse_embed.visit_mut(f);
        for b in self.encoder.iter_mut() {
            b.visit_mut(f);
        }
        self.enc_to_dec.visit_mut(f);
        self.image_embed.visit_mut(f);
        for b in self.decoder.iter_mut() {
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let p2 = config.patch_size * config.patch_size;
        let (e, d) = (config.encoder_dim, config.decoder_dim);
        let block = |dim| {
            let mut b = BlockParams::zeros(dim, config.heads, config.ffn_dim(dim));
            b.drop_path_rate = config.drop_path_rate;
            b
        };
        Self {
            fuse_embed: Linear::zeros(p2 * config.fuse_channels(), e),
            encoder: (0..config.encoder_blocks).map(|_| block(e)).collect(),
            enc_to_dec: Linear::zeros(e, d),
            image_embed: Linear::zeros(p2 * 3, d),
            decoder: (0..config.decoder_blocks).map(|_| block(d)).collect(),
            head: Linear::zeros(d, p2 * config.class_count),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Names and shapes must match what `config` implies.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let want = Self::zeros(config);
        let a = want.named();
        let b = self.named();
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.0 != y.0 || x.1 != y.1) {
            return Err(Error::Config("parameter shapes do not match the model config".into()));
        }
        Ok(())
    }
}

/// Truncated-normal weights (std 0.02), zero biases, unit layer-norm scales.
pub fn init_params(config: &ModelConfig, seed_value: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = seed::rng(seed_value);
    let p2 = config.patch_size * config.patch_size;
    let (e, d) = (config.encoder_dim, config.decoder_dim);
    let fuse_embed = Linear::init(&mut rng, p2 * config.fuse_channels(), e);
    let encoder = (0..config.encoder_blocks)
        .map(|_| BlockParams::init(&mut rng, e, config.heads, config.ffn_dim(e), config.drop_path_rate))
        .collect();
    let enc_to_dec = Linear::init(&mut rng, e, d);
    let image_embed = Linear::init(&mut rng, p2 * 3, d);
    let decoder = (0..config.decoder_blocks)
        .map(|_| BlockParams::init(&mut rng, d, config.heads, config.ffn_dim(d), config.drop_path_rate))
        .collect();
    let head = Linear::init(&mut rng, d, p2 * config.class_count);
    Ok(ModelParams {
        fuse_embed,
        encoder,
        enc_to_dec,
        image_embed,
        decoder,
        head,
    })
}

/// Patch matrices for one (label, image) pair.
#[derive(Debug, Clone)]
pub struct SampleInput {
    pub grid: GridSpec,
    /// L × p·p·fuse_channels.
    pub fuse_patches: Array2<f64>,
    /// L × p·p·3.
    pub image_patches: Array2<f64>,
}

pub(crate) struct ForwardCache {
    kept: Vec<usize>,
    dropped: Vec<usize>,
    fuse_kept: Array2<f64>,
    encoder: Vec<BlockCache>,
    encoded: Array2<f64>,
    image_dropped: Option<Array2<f64>>,
    decoder: Vec<BlockCache>,
    decoded: Array2<f64>,
}

/// Configuration plus weights, with the fixed positional tables precomputed.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pe_encoder: Array2<f64>,
    pe_decoder: Array2<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        let l = config.grid().token_count();
        Ok(Self {
            pe_encoder: positional_table(l, config.encoder_dim)?,
            pe_decoder: positional_table(l, config.decoder_dim)?,
            config,
            params,
        })
    }

    pub fn init(config: ModelConfig, seed_value: u64) -> Result<Self> {
        let params = init_params(&config, seed_value)?;
        Self::new(config, params)
    }

    pub fn grid(&self) -> GridSpec {
        self.config.grid()
    }

    pub fn prepare(&self, label: &SegLabel, image: &RgbImage) -> Result<SampleInput> {
        let size = self.config.image_size;
        if label.height != size || label.width != size {
            return shape_err(format!(
                "model expects {size}x{size} inputs, got {}x{}",
                label.height, label.width
            ));
        }
        let fused = fuse(label, image, self.config.class_count, self.config.fusion)?;
        let (fuse_patches, grid) = patchify(&fused.data, self.config.patch_size)?;
        let image_patches = ips::image_patches(image, &grid)?;
        Ok(SampleInput {
            grid,
            fuse_patches,
            image_patches,
        })
    }

    fn check_plan(&self, plan: &MaskPlan) -> Result<()> {
        if plan.grid != self.grid() {
            return shape_err("mask plan grid does not match the model");
        }
        plan.validate()
    }

    /// Full forward pass to token-major logits (L × p·p·C).
    ///
    /// `rng` enables training-mode DropPath; `None` is evaluation mode.
    pub(crate) fn forward(
        &self,
        input: &SampleInput,
        plan: &MaskPlan,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_plan(plan)?;
        let p = &self.params;
        let fuse_kept = gather(input.fuse_patches.view(), &plan.kept);
        let mut x = p.fuse_embed.forward(fuse_kept.view())?;
        x += &gather(self.pe_encoder.view(), &plan.kept);
        let mut encoder = Vec::with_capacity(p.encoder.len());
        for b in &p.encoder {
            let (y, c) = b.forward_cached(x.view(), self.config.norm, reborrow(&mut rng));
            x = y;
            encoder.push(c);
        }
        let encoded = x;

        let projected = p.enc_to_dec.apply(encoded.view());
        let (fill, image_dropped) = if self.config.ips {
            let rows = gather(input.image_patches.view(), &plan.dropped);
            (p.image_embed.forward(rows.view())?, Some(rows))
        } else {
            (Array2::zeros((plan.dropped.len(), self.config.decoder_dim)), None)
        };
        let mut x = assemble(projected.view(), fill.view(), plan);
        x += &self.pe_decoder;
        let mut decoder = Vec::with_capacity(p.decoder.len());
        for b in &p.decoder {
            let (y, c) = b.forward_cached(x.view(), self.config.norm, reborrow(&mut rng));
            x = y;
            decoder.push(c);
        }
        let logits = p.head.apply(x.view());
        let cache = ForwardCache {
            kept: plan.kept.clone(),
            dropped: plan.dropped.clone(),
            fuse_kept,
            encoder,
            encoded,
            image_dropped,
            decoder,
            decoded: x,
        };
        Ok((logits, cache))
    }

    /// Gradients of all parameters given dL/dlogits in token-major layout.
    pub(crate) fn backward(&self, cache: &ForwardCache, dlogits: ArrayView2<f64>) -> ModelParams {
        let p = &self.params;
        let mut g = p.zeros_like();
        p.head.accumulate_grad(cache.decoded.view(), dlogits, &mut g.head);
        let mut dx = p.head.input_grad(dlogits);
        for ((b, c), gb) in p.decoder.iter().zip(&cache.decoder).zip(g.decoder.iter_mut()).rev() {
            dx = b.backward(c, dx.view(), gb);
        }
        if let Some(rows) = &cache.image_dropped {
            let d_fill = gather(dx.view(), &cache.dropped);
            p.image_embed.accumulate_grad(rows.view(), d_fill.view(), &mut g.image_embed);
        }
        let d_proj = gather(dx.view(), &cache.kept);
        p.enc_to_dec.accumulate_grad(cache.encoded.view(), d_proj.view(), &mut g.enc_to_dec);
        let mut dx = p.enc_to_dec.input_grad(d_proj.view());
        for ((b, c), gb) in p.encoder.iter().zip(&cache.encoder).zip(g.encoder.iter_mut()).rev() {
            dx = b.backward(c, dx.view(), gb);
        }
        p.fuse_embed.accumulate_grad(cache.fuse_kept.view(), dx.view(), &mut g.fuse_embed);
        g
    }

    /// Weighted cross-entropy of the evaluation-mode prediction and its gradient
    /// with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        label: &SegLabel,
        target: &SegLabel,
        image: &RgbImage,
        plan: &MaskPlan,
        weights: &LossWeights,
        support: LossSupport<'_>,
    ) -> Result<(f64, ModelParams)> {
        let input = self.prepare(label, image)?;
        let (logits, cache) = self.forward(&input, plan, None)?;
        let out = weighted_cross_entropy_grad(&self.logits_image(logits.view())?, target, weights, support)?;
        let (dlogits, _) = patchify(&out.grad, self.config.patch_size)?;
        Ok((out.loss, self.backward(&cache, dlogits.view())))
    }

    /// Token-major logits reshaped to H×W×C.
    pub fn logits_image(&self, logits: ArrayView2<f64>) -> Result<Array3<f64>> {
        unpatchify(logits, &self.grid(), self.config.class_count)
    }

    /// Evaluation-mode prediction logits (H×W×C) for one sample under `plan`.
    pub fn predict_logits(&self, label: &SegLabel, image: &RgbImage, plan: &MaskPlan) -> Result<Array3<f64>> {
        let input = self.prepare(label, image)?;
        let (logits, _) = self.forward(&input, plan, None)?;
        self.logits_image(logits.view())
    }

    /// Per-pixel argmax class map.
    pub fn predict(&self, label: &SegLabel, image: &RgbImage, plan: &MaskPlan) -> Result<SegLabel> {
        argmax_labels(&self.predict_logits(label, image, plan)?)
    }
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

pub fn argmax_labels(logits: &Array3<f64>) -> Result<SegLabel> {
    let (h, w, c) = logits.dim();
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut best = 0;
            for k in 1..c {
                if logits[[y, x, k]] > logits[[y, x, best]] {
                    best = k;
                }
            }
            values.push(best as u8);
        }
    }
    SegLabel::new(h, w, values)
}

fn run_blocks(
    x: &TokenSequence,
    blocks: &[BlockParams],
    config: &ModelConfig,
    training: bool,
    seed_value: u64,
) -> Result<TokenSequence> {
    let mut rng = seed::rng(seed_value);
    let mut tokens = x.tokens.clone();
    for b in blocks {
        if b.dim() != tokens.ncols() {
            return shape_err(format!("block width {} applied to width {}", b.dim(), tokens.ncols()));
        }
        let r: Option<&mut dyn RngCore> = if training { Some(&mut rng) } else { None };
        tokens = b.forward_cached(tokens.view(), config.norm, r).0;
    }
    Ok(TokenSequence { tokens, grid: x.grid })
}

/// Runs the encoder on the kept tokens (ascending index order) of a full,
/// positionally encoded fuse-token sequence. Output has L-l rows at encoder width.
pub fn encode(
    fuse_tokens: &TokenSequence,
    plan: &MaskPlan,
    model: &Model,
    training: bool,
    seed_value: u64,
) -> Result<TokenSequence> {
    let mut plan = plan.clone();
    plan.kept.sort_unstable();
    plan.dropped.sort_unstable();
    plan.validate()?;
    if fuse_tokens.len() != plan.grid.token_count() || fuse_tokens.grid != plan.grid {
        return shape_err("fuse tokens and mask plan disagree on the grid");
    }
    let kept = plan.kept;
    let visible = TokenSequence {
        tokens: gather(fuse_tokens.tokens.view(), &kept),
        grid: fuse_tokens.grid,
    };
    run_blocks(&visible, &model.params.encoder, &model.config, training, seed_value)
}

/// Runs the decoder over a full-length, positionally encoded sequence and
/// maps every token to p·p·C logits, returned as an H×W×C map.
pub fn decode_and_predict(
    decoder_input: &TokenSequence,
    model: &Model,
    training: bool,
    seed_value: u64,
) -> Result<Array3<f64>> {
    if decoder_input.len() != decoder_input.grid.token_count() {
        return shape_err("decoder input must cover every patch");
    }
    let decoded = run_blocks(decoder_input, &model.params.decoder, &model.config, training, seed_value)?;
    let logits = model.params.head.forward(decoded.tokens.view())?;
    unpatchify(logits.view(), &decoder_input.grid, model.config.class_count)
}
