//! Labels, images, fusion, patch grids, token embedding and positional encoding.

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::layers::Linear;
use crate::seed;

/// Pixel value marking a missing annotation.
pub const UNKNOWN: u8 = 255;

/// Integer class map. Values are class indices or [`UNKNOWN`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegLabel {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl SegLabel {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return shape_err("label dimensions must be positive");
        }
        if values.len() != height * width {
            return shape_err(format!(
                "label has {} values, expected {}x{}",
                values.len(),
                height,
                width
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            values: vec![class; height * width],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return shape_err("ragged label rows");
        }
        Self::new(height, width, rows.concat())
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.values[y * self.width + x] = v;
    }

    /// Checks that every value is a class below `class_count` or UNKNOWN.
    pub fn validate(&self, class_count: usize) -> Result<()> {
        match self
            .values
            .iter()
            .find(|&&v| v != UNKNOWN && v as usize >= class_count)
        {
            Some(v) => Err(Error::Data(format!(
                "class index {v} out of range for {class_count} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn unknown_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == UNKNOWN).count()
    }
}

/// RGB image with intensities in [0, 1], stored row-major and interleaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return shape_err("image dimensions must be positive");
        }
        if values.len() != height * width * 3 {
            return shape_err(format!(
                "image has {} values, expected {}x{}x3",
                values.len(),
                height,
                width
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Data("image values must be finite and in [0,1]".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let values = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            values,
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    pub fn to_array(&self) -> Array3<f64> {
        Array3::from_shape_vec((self.height, self.width, 3), self.values.clone())
            .expect("image buffer length checked at construction")
    }
}

/// How the label is combined with the image before patch embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// One binary plane per class, then the three image planes.
    #[default]
    Layer,
    /// The raw class index as a single plane after RGB.
    Direct,
    /// R, label, G, label, B, label.
    Insert,
}

impl FusionMode {
    pub fn channels(self, class_count: usize) -> usize {
        match self {
            FusionMode::Layer => class_count + 3,
            FusionMode::Direct => 4,
            FusionMode::Insert => 6,
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(FusionMode::Layer),
            "direct" => Ok(FusionMode::Direct),
            "insert" => Ok(FusionMode::Insert),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Layer => "layer",
            FusionMode::Direct => "direct",
            FusionMode::Insert => "insert",
        })
    }
}

/// Label and image stacked into one H×W×channels map.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseMap {
    pub data: Array3<f64>,
    pub class_count: usize,
    pub mode: FusionMode,
}

impl FuseMap {
    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

/// Layered fusion: `class_count` indicator planes followed by RGB.
pub fn stack_fuse(label: &SegLabel, image: &RgbImage, class_count: usize) -> Result<FuseMap> {
    fuse(label, image, class_count, FusionMode::Layer)
}

pub fn fuse(
    label: &SegLabel,
    image: &RgbImage,
    class_count: usize,
    mode: FusionMode,
) -> Result<FuseMap> {
    if label.height != image.height || label.width != image.width {
        return shape_err(format!(
            "label is {}x{} but image is {}x{}",
            label.height, label.width, image.height, image.width
        ));
    }
    label.validate(class_count)?;
    let (h, w) = (label.height, label.width);
    let channels = mode.channels(class_count);
    let mut data = Array3::<f64>::zeros((h, w, channels));
    for y in 0..h {
        for x in 0..w {
            let v = label.get(y, x);
            let rgb = image.pixel(y, x);
            let mut px = data.slice_mut(s![y, x, ..]);
            match mode {
                FusionMode::Layer => {
                    if v != UNKNOWN {
                        px[v as usize] = 1.0;
                    }
                    for c in 0..3 {
                        px[class_count + c] = rgb[c];
                    }
                }
                FusionMode::Direct | FusionMode::Insert => {
                    // UNKNOWN has no class index; -1 keeps it apart from background.
                    let lv = if v == UNKNOWN { -1.0 } else { f64::from(v) };
                    if mode == FusionMode::Direct {
                        px[0] = rgb[0];
                        px[1] = rgb[1];
                        px[2] = rgb[2];
                        px[3] = lv;
                    } else {
                        for c in 0..3 {
                            px[2 * c] = rgb[c];
                            px[2 * c + 1] = lv;
                        }
                    }
                }
            }
        }
    }
    Ok(FuseMap {
        data,
        class_count,
        mode,
    })
}

/// Patch grid geometry. Tokens are numbered row-major from 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height == 0 || width == 0 {
            return shape_err("grid dimensions must be positive");
        }
        if !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
            return shape_err(format!(
                "{height}x{width} is not divisible by patch size {patch_size}"
            ));
        }
        Ok(Self {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
        })
    }

    pub fn token_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_size
    }

    /// Top-left pixel (y, x) of patch `t`.
    pub fn origin(&self, t: usize) -> (usize, usize) {
        (
            (t / self.cols) * self.patch_size,
            (t % self.cols) * self.patch_size,
        )
    }

    /// Patch index containing pixel (y, x).
    pub fn patch_of(&self, y: usize, x: usize) -> usize {
        (y / self.patch_size) * self.cols + x / self.patch_size
    }

    pub fn check_label(&self, label: &SegLabel) -> Result<()> {
        if label.height != self.height() || label.width != self.width() {
            return shape_err(format!(
                "label is {}x{}, grid expects {}x{}",
                label.height,
                label.width,
                self.height(),
                self.width()
            ));
        }
        Ok(())
    }
}

/// Splits an H×W×C map into an L×(p·p·C) matrix, one row per patch.
///
/// Each row is the patch flattened in (dy, dx, channel) order.
pub fn patchify(map: &Array3<f64>, patch_size: usize) -> Result<(Array2<f64>, GridSpec)> {
    let (h, w, c) = map.dim();
    let grid = GridSpec::new(h, w, patch_size)?;
    let p = patch_size;
    let mut out = Array2::<f64>::zeros((grid.token_count(), p * p * c));
    for t in 0..grid.token_count() {
        let (oy, ox) = grid.origin(t);
        let mut row = out.row_mut(t);
        let row = row.as_slice_mut().expect("fresh array is contiguous");
        let mut k = 0;
        for dy in 0..p {
            for dx in 0..p {
                for ch in 0..c {
                    row[k] = map[[oy + dy, ox + dx, ch]];
                    k += 1;
                }
            }
        }
    }
    Ok((out, grid))
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: ArrayView2<f64>, grid: &GridSpec, channels: usize) -> Result<Array3<f64>> {
    let p = grid.patch_size;
    if patches.nrows() != grid.token_count() || patches.ncols() != p * p * channels {
        return shape_err(format!(
            "patch matrix is {}x{}, expected {}x{}",
            patches.nrows(),
            patches.ncols(),
            grid.token_count(),
            p * p * channels
        ));
    }
    let mut out = Array3::<f64>::zeros((grid.height(), grid.width(), channels));
    for t in 0..grid.token_count() {
        let (oy, ox) = grid.origin(t);
        let row = patches.row(t);
        let mut k = 0;
        for dy in 0..p {
            for dx in 0..p {
                for ch in 0..channels {
                    out[[oy + dy, ox + dx, ch]] = row[k];
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Token matrix together with the grid it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub grid: GridSpec,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Projects patch rows to `dim`-wide tokens: `patches · W + b`.
pub fn linear_embed(patches: ArrayView2<f64>, grid: GridSpec, embed: &Linear) -> Result<TokenSequence> {
    if patches.nrows() != grid.token_count() {
        return shape_err("patch matrix rows do not match grid token count");
    }
    if embed.weight.iter().chain(embed.bias.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("embedding weights are not finite".into()));
    }
    Ok(TokenSequence {
        tokens: embed.forward(patches)?,
        grid,
    })
}

/// Sinusoidal table: `pe[pos, 2i] = sin(pos / 10000^(2i/D))`, `pe[pos, 2i+1] = cos(...)`.
pub fn positional_table(len: usize, dim: usize) -> Result<Array2<f64>> {
    if !dim.is_multiple_of(2) {
        return shape_err(format!("positional encoding needs an even dimension, got {dim}"));
    }
    let mut pe = Array2::<f64>::zeros((len, dim));
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / dim as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(pe)
}

pub fn add_positional_encoding(seq: &TokenSequence) -> Result<TokenSequence> {
    let pe = positional_table(seq.len(), seq.dim())?;
    Ok(TokenSequence {
        tokens: &seq.tokens + &pe,
        grid: seq.grid,
    })
}

/// Random square crop followed by resampling to `out`×`out`.
///
/// The image is resampled bilinearly, the label by nearest neighbour so it stays integral.
pub fn random_crop_scale(
    image: &RgbImage,
    label: &SegLabel,
    crop: usize,
    out: usize,
    seed_value: u64,
) -> Result<(RgbImage, SegLabel)> {
    if image.height != label.height || image.width != label.width {
        return shape_err("image and label sizes differ");
    }
    if crop == 0 || out == 0 {
        return shape_err("crop and output sizes must be positive");
    }
    if crop > image.height.min(image.width) {
        return shape_err(format!(
            "crop {crop} exceeds input {}x{}",
            image.height, image.width
        ));
    }
    let mut rng = seed::rng(seed_value);
    let oy = rng.random_range(0..=image.height - crop);
    let ox = rng.random_range(0..=image.width - crop);
    let scale = crop as f64 / out as f64;

    let mut label_out = Vec::with_capacity(out * out);
    for y in 0..out {
        let sy = (((y as f64 + 0.5) * scale) as usize).min(crop - 1);
        for x in 0..out {
            let sx = (((x as f64 + 0.5) * scale) as usize).min(crop - 1);
            label_out.push(label.get(oy + sy, ox + sx));
        }
    }

    let sample = |d: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (crop - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(crop - 1);
        (lo, hi, s - lo as f64)
    };
    let mut img_out = Vec::with_capacity(out * out * 3);
    for y in 0..out {
        let (y0, y1, fy) = sample(y);
        for x in 0..out {
            let (x0, x1, fx) = sample(x);
            let a = image.pixel(oy + y0, ox + x0);
            let b = image.pixel(oy + y0, ox + x1);
            let c = image.pixel(oy + y1, ox + x0);
            let d = image.pixel(oy + y1, ox + x1);
            for ch in 0..3 {
                let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                let bottom = c[ch] * (1.0 - fx) + d[ch] * fx;
                img_out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok((
        RgbImage::new(out, out, img_out)?,
        SegLabel::new(out, out, label_out)?,
    ))
}

/// An image with its (possibly partial) label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: RgbImage,
    pub label: SegLabel,
}

impl Sample {
    pub fn new(name: impl Into<String>, image: RgbImage, label: SegLabel) -> Result<Self> {
        if image.height != label.height || image.width != label.width {
            return shape_err(format!(
                "image is {}x{} but label is {}x{}",
                image.height, image.width, label.height, label.width
            ));
        }
        Ok(Self {
            name: name.into(),
            image,
            label,
        })
    }
}

/// Layer-norm placement inside a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    #[default]
    Pre,
    Post,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Number of classes including background (class 0).
    pub class_count: usize,
    pub image_size: usize,
    pub mask_ratio: f64,
    pub drop_path_rate: f64,
    /// Hidden width of the feed-forward layer as a multiple of the model width.
    pub ffn_ratio: usize,
    pub norm: NormPlacement,
    pub fusion: FusionMode,
    /// Fill dropped decoder positions with image patch embeddings (otherwise zeros).
    pub ips: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_blocks: 4,
            decoder_blocks: 2,
            encoder_dim: 128,
            decoder_dim: 64,
            heads: 4,
            patch_size: 8,
            class_count: 4,
            image_size: 64,
            mask_ratio: 0.5,
            drop_path_rate: 0.1,
            ffn_ratio: 4,
            norm: NormPlacement::Pre,
            fusion: FusionMode::Layer,
            ips: true,
        }
    }
}

impl ModelConfig {
    /// The published full-scale combination (EB=8, DB=6, ED=1440, DD=720) at 224×224, p=16.
    pub fn full_scale(class_count: usize) -> Self {
        Self {
            encoder_blocks: 8,
            decoder_blocks: 6,
            encoder_dim: 1440,
            decoder_dim: 720,
            heads: 8,
            patch_size: 16,
            class_count,
            image_size: 224,
            ..Self::default()
        }
    }

    /// 8×8 image, p=4, C=3, width 8, one block each side, two heads.
    pub fn tiny() -> Self {
        Self {
            encoder_blocks: 1,
            decoder_blocks: 1,
            encoder_dim: 8,
            decoder_dim: 8,
            heads: 2,
            patch_size: 4,
            class_count: 3,
            image_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.encoder_dim.is_multiple_of(self.heads) || !self.decoder_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "encoder_dim {} and decoder_dim {} must be divisible by heads {}",
                self.encoder_dim, self.decoder_dim, self.heads
            ));
        }
        if !self.encoder_dim.is_multiple_of(2) || !self.decoder_dim.is_multiple_of(2) {
            return bad("embedding dimensions must be even".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask ratio {} outside (0,1)", self.mask_ratio));
        }
        if self.class_count < 2 || self.class_count > UNKNOWN as usize {
            return bad(format!("class count {} outside [2,255)", self.class_count));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop path rate {} outside [0,1)", self.drop_path_rate));
        }
        if self.ffn_ratio == 0 {
            return bad("ffn_ratio must be positive".into());
        }
        let grid = GridSpec::new(self.image_size, self.image_size, self.patch_size)
            .map_err(|e| Error::Config(e.to_string()))?;
        if grid.token_count() < 2 {
            return bad("the grid needs at least two patches".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            patch_size: self.patch_size,
            rows: self.image_size / self.patch_size,
            cols: self.image_size / self.patch_size,
        }
    }

    pub fn fuse_channels(&self) -> usize {
        self.fusion.channels(self.class_count)
    }

    pub fn ffn_dim(&self, model_dim: usize) -> usize {
        model_dim * self.ffn_ratio
    }
}
