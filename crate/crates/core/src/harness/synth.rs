//! Synthetic shapes corpus: rectangles, ellipses and triangles on a textured background.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{image_from_u8, Dataset, DatasetManifest, Split};
use crate::data::{Sample, SegLabel};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub image_size: usize,
    pub class_count: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Std of the per-pixel Gaussian noise.
    pub noise: f64,
    pub samples: usize,
    pub seed: u64,
    /// Fraction of samples listed as `test` in the split (0 writes no split).
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            class_count: 4,
            shapes_min: 1,
            shapes_max: 3,
            noise: 0.03,
            samples: 200,
            seed: 0,
            test_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

/// Shape drawn for class `k ≥ 1`.
pub fn shape_of(class: u8) -> ShapeKind {
    match (class - 1) % 3 {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Ellipse,
        _ => ShapeKind::Triangle,
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.22, 0.18],
    [0.20, 0.72, 0.28],
    [0.22, 0.34, 0.88],
    [0.92, 0.82, 0.20],
    [0.70, 0.28, 0.80],
    [0.18, 0.80, 0.80],
];

fn class_color(class: u8) -> [f64; 3] {
    let k = (class - 1) as usize;
    let base = PALETTE[k % PALETTE.len()];
    // beyond the palette, darken each further cycle
    let f = 1.0 / (1 + k / PALETTE.len()) as f64;
    base.map(|c| c * f)
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.class_count > 255 {
            return Err(Error::Config(format!("class_count {} outside [2, 255]", self.class_count)));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max {
            return Err(Error::Config("need 1 ≤ shapes_min ≤ shapes_max".into()));
        }
        if self.samples < self.class_count - 1 {
            return Err(Error::Config(format!(
                "{} samples cannot show all {} foreground classes",
                self.samples,
                self.class_count - 1
            )));
        }
        if !(self.noise >= 0.0) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("noise must be ≥ 0 and test_fraction in [0,1)".into()));
        }
        Ok(())
    }
}

struct Canvas {
    size: usize,
    rgb: Vec<f64>,
    label: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, class: u8, color: [f64; 3]) {
        let i = y * self.size + x;
        self.label[i] = class;
        self.rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
    }
}

fn draw_shape(canvas: &mut Canvas, rng: &mut ChaCha8Rng, class: u8) {
    let n = canvas.size;
    let (lo, hi) = (n / 5, n / 2);
    let h = rng.random_range(lo..=hi);
    let w = rng.random_range(lo..=hi);
    let oy = rng.random_range(0..=n - h);
    let ox = rng.random_range(0..=n - w);
    let color = class_color(class).map(|c| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
    let flip_y = rng.random::<bool>();
    let flip_x = rng.random::<bool>();
    let kind = shape_of(class);
    for dy in 0..h {
        for dx in 0..w {
            // pixel centre in the unit box
            let u = (dx as f64 + 0.5) / w as f64;
            let v = (dy as f64 + 0.5) / h as f64;
            let inside = match kind {
                ShapeKind::Rectangle => true,
                ShapeKind::Ellipse => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
                ShapeKind::Triangle => {
                    let v = if flip_y { 1.0 - v } else { v };
                    let u = if flip_x { 1.0 - u } else { u };
                    // apex at the top centre (or flipped), base along the far edge
                    (u - 0.5).abs() <= 0.5 * v
                }
            };
            if inside {
                canvas.paint(oy + dy, ox + dx, class, color);
            }
        }
    }
}

/// Generates one sample; image values are quantized to 8 bits.
pub fn synth_sample(spec: &SynthSpec, index: usize) -> Result<Sample> {
    let n = spec.image_size;
    let mut rng = seed::rng(seed::derive(spec.seed, &[index as u64]));
    let base = rng.random_range(0.35..0.6);
    let tint = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
    let fy = rng.random_range(0.1..0.5);
    let fx = rng.random_range(0.1..0.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut rgb = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let t = 0.06 * (fy * y as f64 + fx * x as f64 + phase).sin();
            for c in tint {
                rgb.push(base + c + t);
            }
        }
    }
    let mut canvas = Canvas {
        size: n,
        rgb,
        label: vec![0; n * n],
    };
    let count = rng.random_range(spec.shapes_min..=spec.shapes_max);
    let fg = (spec.class_count - 1) as u64;
    for s in 0..count {
        let class = if s == 0 {
            1 + (index as u64 % fg) as u8
        } else {
            1 + rng.random_range(0..fg) as u8
        };
        draw_shape(&mut canvas, &mut rng, class);
    }
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid std");
    let bytes: Vec<u8> = canvas
        .rgb
        .iter()
        .map(|&v| {
            let e = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            ((v + e).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Sample::new(
        format!("{index:04}"),
        image_from_u8(n, n, &bytes)?,
        SegLabel::new(n, n, canvas.label)?,
    )
}

pub fn class_names(class_count: usize) -> Vec<String> {
    (0..class_count)
        .map(|k| match k {
            0 => "background".to_string(),
            k => {
                let shape = match shape_of(k as u8) {
                    ShapeKind::Rectangle => "rectangle",
                    ShapeKind::Ellipse => "ellipse",
                    ShapeKind::Triangle => "triangle",
                };
                format!("{shape}_{k}")
            }
        })
        .collect()
}

/// Builds the whole corpus in memory.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.samples).map(|i| synth_sample(spec, i)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = samples.iter().map(|s| s.name.clone()).collect();
    let split = (spec.test_fraction > 0.0).then(|| {
        let n_test = ((spec.samples as f64) * spec.test_fraction).round() as usize;
        let (train, test) = names.split_at(spec.samples - n_test);
        Split {
            train: train.to_vec(),
            test: test.to_vec(),
        }
    });
    Ok(Dataset {
        manifest: DatasetManifest {
            class_count: spec.class_count,
            class_names: class_names(spec.class_count),
            image_size: spec.image_size,
            samples: names,
            split,
        },
        samples,
    })
}

/// Pixel count per class over every label.
pub fn class_histogram(dataset: &Dataset) -> Vec<u64> {
    let mut hist = vec![0u64; dataset.manifest.class_count];
    for s in &dataset.samples {
        for &v in &s.label.values {
            if (v as usize) < hist.len() {
                hist[v as usize] += 1;
            }
        }
    }
    hist
}

/// Generates and writes the corpus; returns its class histogram.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<Vec<u64>> {
    let ds = synth_dataset(spec)?;
    ds.save(out)?;
    Ok(class_histogram(&ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            image_size: 32,
            samples: 12,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn one_shape_gives_two_classes() {
        let spec = SynthSpec {
            shapes_min: 1,
            shapes_max: 1,
            ..small()
        };
        for s in synth_dataset(&spec).unwrap().samples {
            let mut present: Vec<u8> = s.label.values.clone();
            present.sort();
            present.dedup();
            assert_eq!(present.len(), 2, "{}", s.name);
            assert_eq!(present[0], 0);
        }
    }

    #[test]
    fn every_class_appears_and_replays() {
        let spec = small();
        let a = synth_dataset(&spec).unwrap();
        assert!(class_histogram(&a).iter().all(|&n| n > 0));
        assert_eq!(a, synth_dataset(&spec).unwrap());
        let other = synth_dataset(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.samples[0], other.samples[0]);
    }

    #[test]
    fn files_replay_and_histogram_matches_recount() {
        let spec = small();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let hist = synth_generate(&spec, d1.path()).unwrap();
        synth_generate(&spec, d2.path()).unwrap();
        let mut recount = vec![0u64; spec.class_count];
        for i in 0..spec.samples {
            let name = format!("{i:04}");
            for sub in ["images", "labels"] {
                let a = std::fs::read(d1.path().join(sub).join(format!("{name}.png"))).unwrap();
                let b = std::fs::read(d2.path().join(sub).join(format!("{name}.png"))).unwrap();
                assert_eq!(a, b);
            }
            let img = image::open(d1.path().join("labels").join(format!("{name}.png"))).unwrap().to_luma8();
            for p in img.pixels() {
                recount[p.0[0] as usize] += 1;
            }
        }
        assert_eq!(hist, recount);
        assert_eq!(Dataset::load(d1.path()).unwrap(), synth_dataset(&spec).unwrap());
    }

    #[test]
    fn shape_kinds_follow_class() {
        let spec = SynthSpec {
            shapes_min: 1,
            shapes_max: 1,
            noise: 0.0,
            samples: 3,
            ..small()
        };
        let ds = synth_dataset(&spec).unwrap();
        for s in &ds.samples {
            let class = *s.label.values.iter().max().unwrap();
            let area = s.label.values.iter().filter(|&&v| v == class).count();
            let ys: Vec<usize> = (0..32).filter(|&y| (0..32).any(|x| s.label.get(y, x) == class)).collect();
            let xs: Vec<usize> = (0..32).filter(|&x| (0..32).any(|y| s.label.get(y, x) == class)).collect();
            let bbox = ys.len() * xs.len();
            match shape_of(class) {
                ShapeKind::Rectangle => assert_eq!(area, bbox),
                ShapeKind::Ellipse => assert!(area < bbox && area * 10 > bbox * 7),
                ShapeKind::Triangle => assert!(area * 10 < bbox * 7),
            }
        }
    }

    #[test]
    fn split_and_validation() {
        let ds = synth_dataset(&SynthSpec {
            test_fraction: 0.25,
            ..small()
        })
        .unwrap();
        let split = ds.manifest.split.as_ref().unwrap();
        assert_eq!((split.train.len(), split.test.len()), (9, 3));
        assert!(SynthSpec { shapes_min: 0, ..small() }.validate().is_err());
        assert!(SynthSpec { samples: 2, ..small() }.validate().is_err());
    }
}
