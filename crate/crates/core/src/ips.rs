//! Image Patch Supplement: refill dropped decoder positions with image patch embeddings.

use ndarray::{Array2, ArrayView2};

use crate::data::{patchify, GridSpec, RgbImage, TokenSequence};
use crate::error::{shape_err, Result};
use crate::masking::MaskPlan;
use crate::model::layers::Linear;

/// Decoder-width embedding of every image patch (label planes excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokenTable {
    pub tokens: Array2<f64>,
    pub grid: GridSpec,
}

pub fn image_patches(image: &RgbImage, grid: &GridSpec) -> Result<Array2<f64>> {
    if image.height != grid.height() || image.width != grid.width() {
        return shape_err(format!(
            "image is {}x{}, grid expects {}x{}",
            image.height,
            image.width,
            grid.height(),
            grid.width()
        ));
    }
    Ok(patchify(&image.to_array(), grid.patch_size)?.0)
}

pub fn embed_image_patches(image: &RgbImage, image_embed: &Linear, grid: &GridSpec) -> Result<ImageTokenTable> {
    let patches = image_patches(image, grid)?;
    Ok(ImageTokenTable {
        tokens: image_embed.forward(patches.view())?,
        grid: *grid,
    })
}

/// Interleaves kept rows and dropped-position rows back into token order.
pub(crate) fn assemble(kept_rows: ArrayView2<f64>, dropped_rows: ArrayView2<f64>, plan: &MaskPlan) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((plan.grid.token_count(), kept_rows.ncols()));
    for (r, &t) in plan.kept.iter().enumerate() {
        out.row_mut(t).assign(&kept_rows.row(r));
    }
    for (r, &t) in plan.dropped.iter().enumerate() {
        out.row_mut(t).assign(&dropped_rows.row(r));
    }
    out
}

/// Gathers the given token rows, in list order.
pub(crate) fn gather(rows: ArrayView2<f64>, index: &[usize]) -> Array2<f64> {
    rows.select(ndarray::Axis(0), index)
}

/// Restores the decoder input to full length.
///
/// Row `t` is `enc_to_dec(encoder_out[r])` when `t` is the `r`-th kept patch, and
/// `image_tokens[t]` when `t` was dropped. Passing `None` fills dropped rows with
/// zeros (the ablation without supplement).
pub fn supplement(
    encoder_out: &TokenSequence,
    image_tokens: Option<&ImageTokenTable>,
    plan: &MaskPlan,
    enc_to_dec: &Linear,
) -> Result<TokenSequence> {
    plan.validate()?;
    if encoder_out.len() != plan.kept.len() {
        return shape_err(format!(
            "encoder produced {} tokens but the plan keeps {}",
            encoder_out.len(),
            plan.kept.len()
        ));
    }
    let projected = enc_to_dec.forward(encoder_out.tokens.view())?;
    let dim = projected.ncols();
    let fill = match image_tokens {
        Some(table) => {
            if table.tokens.nrows() != plan.grid.token_count() || table.tokens.ncols() != dim {
                return shape_err(format!(
                    "image token table is {}x{}, expected {}x{}",
                    table.tokens.nrows(),
                    table.tokens.ncols(),
                    plan.grid.token_count(),
                    dim
                ));
            }
            gather(table.tokens.view(), &plan.dropped)
        }
        None => Array2::zeros((plan.dropped.len(), dim)),
    };
    Ok(TokenSequence {
        tokens: assemble(projected.view(), fill.view(), plan),
        grid: plan.grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskStrategy;
    use crate::seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn linear(input: usize, output: usize, s: u64) -> Linear {
        let mut rng = seed::rng(s);
        Linear {
            weight: Array2::from_shape_simple_fn((input, output), || rng.random_range(-1.0..1.0)),
            bias: ndarray::Array1::from_shape_simple_fn(output, || rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_table() {
        let grid = GridSpec::new(4, 4, 2).unwrap();
        let mut embed = linear(12, 6, 1);
        embed.bias.fill(0.0);
        let table = embed_image_patches(&RgbImage::filled(4, 4, [0.0; 3]), &embed, &grid).unwrap();
        assert!(table.tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_rows_identical() {
        let grid = GridSpec::new(4, 4, 2).unwrap();
        let table = embed_image_patches(&RgbImage::filled(4, 4, [0.2, 0.4, 0.9]), &linear(12, 6, 2), &grid).unwrap();
        for r in table.tokens.rows() {
            assert_eq!(r, table.tokens.row(0));
        }
    }

    #[test]
    fn four_patch_matmul_oracle() {
        let grid = GridSpec::new(4, 4, 2).unwrap();
        let mut rng = seed::rng(3);
        let image = RgbImage::new(4, 4, (0..48).map(|_| rng.random::<f64>()).collect()).unwrap();
        let embed = linear(12, 5, 4);
        let table = embed_image_patches(&image, &embed, &grid).unwrap();
        for t in 0..4 {
            let (oy, ox) = grid.origin(t);
            for j in 0..5 {
                let mut acc = embed.bias[j];
                let mut k = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        for c in 0..3 {
                            acc += image.pixel(oy + dy, ox + dx)[c] * embed.weight[[k, j]];
                            k += 1;
                        }
                    }
                }
                assert_abs_diff_eq!(table.tokens[[t, j]], acc, epsilon = 1e-13);
            }
        }
        assert!(embed_image_patches(&RgbImage::filled(6, 4, [0.0; 3]), &embed, &grid).is_err());
    }

    fn setup(dropped: Vec<usize>) -> (MaskPlan, TokenSequence, ImageTokenTable, Linear) {
        let grid = GridSpec::new(4, 4, 2).unwrap();
        let plan = MaskPlan::from_dropped(grid, dropped, 0.5, MaskStrategy::Random).unwrap();
        let mut rng = seed::rng(8);
        let enc = TokenSequence {
            tokens: Array2::from_shape_simple_fn((plan.kept.len(), 6), || rng.random_range(-1.0..1.0)),
            grid,
        };
        let table = ImageTokenTable {
            tokens: Array2::from_shape_simple_fn((4, 4), || rng.random_range(-1.0..1.0)),
            grid,
        };
        (plan, enc, table, linear(6, 4, 9))
    }

    #[test]
    fn placement_oracle() {
        let (plan, enc, table, proj) = setup(vec![1, 3]);
        let out = supplement(&enc, Some(&table), &plan, &proj).unwrap();
        let projected = enc.tokens.dot(&proj.weight) + &proj.bias;
        assert_eq!(out.tokens.row(1), table.tokens.row(1));
        assert_eq!(out.tokens.row(3), table.tokens.row(3));
        assert_eq!(out.tokens.row(0), projected.row(0));
        assert_eq!(out.tokens.row(2), projected.row(1));
    }

    #[test]
    fn single_drop_places_one_image_row() {
        let (plan, enc, table, proj) = setup(vec![2]);
        let out = supplement(&enc, Some(&table), &plan, &proj).unwrap();
        let matches = (0..4).filter(|&t| out.tokens.row(t) == table.tokens.row(t)).count();
        assert_eq!(matches, 1);
        assert_eq!(out.tokens.row(2), table.tokens.row(2));
    }

    #[test]
    fn zero_fill_without_supplement() {
        let (plan, enc, _, proj) = setup(vec![0, 3]);
        let out = supplement(&enc, None, &plan, &proj).unwrap();
        for &t in &plan.dropped {
            assert!(out.tokens.row(t).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cardinality_mismatch() {
        let (_, enc, table, proj) = setup(vec![1, 3]);
        let (plan, _, _, _) = setup(vec![1]);
        assert!(supplement(&enc, Some(&table), &plan, &proj).is_err());
    }
}
