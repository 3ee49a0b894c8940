//! Dataset directories: `dataset.toml`, `images/*.png`, `labels/*.png`.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage as PngRgb};
use serde::{Deserialize, Serialize};

use crate::data::{RgbImage, Sample, SegLabel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub samples: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn image_from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<RgbImage> {
    RgbImage::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write_image(image: &RgbImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.values.iter().map(|&v| to_u8(v)).collect();
    let png = PngRgb::from_raw(image.width as u32, image.height as u32, bytes).expect("buffer sized from image");
    png.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    image_from_u8(img.height() as usize, img.width() as usize, img.as_raw())
}

pub fn write_label(label: &SegLabel, path: &Path) -> Result<()> {
    let png = GrayImage::from_raw(label.width as u32, label.height as u32, label.values.clone()).expect("buffer sized from label");
    png.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_label(path: &Path) -> Result<SegLabel> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Data(format!(
                "{}: labels must be 8-bit grayscale PNGs, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    SegLabel::new(gray.height() as usize, gray.width() as usize, gray.into_raw())
}

impl Dataset {
    pub fn image_path(dir: &Path, name: &str) -> PathBuf {
        dir.join("images").join(format!("{name}.png"))
    }

    pub fn label_path(dir: &Path, name: &str) -> PathBuf {
        dir.join("labels").join(format!("{name}.png"))
    }

    pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join("dataset.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if manifest.class_count < 2 || manifest.class_count > 255 {
            return Err(Error::Data(format!("class_count {} outside [2, 255]", manifest.class_count)));
        }
        if manifest.class_names.len() != manifest.class_count {
            return Err(Error::Data("class_names length differs from class_count".into()));
        }
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for name in &manifest.samples {
            let image = read_image(&Self::image_path(dir, name))?;
            let label = read_label(&Self::label_path(dir, name))?;
            label.validate(manifest.class_count)?;
            if image.height != manifest.image_size || image.width != manifest.image_size {
                return Err(Error::Data(format!(
                    "{name}: image is {}x{}, manifest says {}",
                    image.height, image.width, manifest.image_size
                )));
            }
            samples.push(Sample::new(name.clone(), image, label)?);
        }
        Ok(Self { manifest, samples })
    }

    pub fn write_manifest(&self, dir: &Path) -> Result<()> {
        let path = dir.join("dataset.toml");
        let text = toml::to_string(&self.manifest).map_err(|e| Error::Toml(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "labels"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for s in &self.samples {
            write_image(&s.image, &Self::image_path(dir, &s.name))?;
            write_label(&s.label, &Self::label_path(dir, &s.name))?;
        }
        self.write_manifest(dir)
    }

    pub fn get(&self, name: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.name == name)
    }

    /// Samples named in the train/test split, or every sample as train when no split is recorded.
    pub fn split_samples(&self) -> Result<(Vec<&Sample>, Vec<&Sample>)> {
        let Some(split) = &self.manifest.split else {
            return Ok((self.samples.iter().collect(), Vec::new()));
        };
        let pick = |names: &[String]| -> Result<Vec<&Sample>> {
            names
                .iter()
                .map(|n| self.get(n).ok_or_else(|| Error::Data(format!("split names unknown sample '{n}'"))))
                .collect()
        };
        Ok((pick(&split.train)?, pick(&split.test)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UNKNOWN;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 5) as u8).collect();
        let image = image_from_u8(4, 4, &bytes).unwrap();
        let label = SegLabel::new(4, 4, (0..16).map(|i| if i == 3 { UNKNOWN } else { (i % 3) as u8 }).collect()).unwrap();
        let ds = Dataset {
            manifest: DatasetManifest {
                class_count: 3,
                class_names: vec!["bg".into(), "a".into(), "b".into()],
                image_size: 4,
                samples: vec!["x".into()],
                split: Some(Split {
                    train: vec!["x".into()],
                    test: vec![],
                }),
            },
            samples: vec![Sample::new("x", image, label).unwrap()],
        };
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn missing_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = Dataset::load(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
