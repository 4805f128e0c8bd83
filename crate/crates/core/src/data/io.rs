//! Dataset directories: `images/*.png`, `annotations/*.json`, `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{generate_image, inject_label_noise, AnnotatedImage, GeneratorConfig};
use crate::error::{Error, Result};
use crate::types::{GroundTruthPoint, GroundTruthSet};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_images: usize,
    pub generator: GeneratorConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub generator: GeneratorConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Every image listed in the manifest, train ids first.
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&AnnotatedImage> {
        let ids = match split {
            Split::Train => &self.manifest.train,
            Split::Test => &self.manifest.test,
        };
        ids.iter()
            .filter_map(|id| self.images.iter().find(|img| &img.id == id))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.generator.num_classes
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Annotation {
    image: String,
    points: Vec<GroundTruthPoint>,
}

/// Number of training images under a 4:1 split, rounding in favor of training.
fn train_count(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

/// Generates images, splits them 4:1 by a seeded shuffle, and applies the
/// configured label noise to the training split only.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    let gen = &config.generator;
    gen.validate()?;
    let mut images = (0..config.num_images)
        .map(|i| generate_image(gen, i))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut super::stream(gen.seed, u64::MAX - 1));
    let (train_idx, test_idx) = order.split_at(train_count(order.len()));
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    if gen.label_noise_rate > 0.0 {
        for &i in &train_idx {
            let seed = gen.seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            images[i].points = inject_label_noise(&images[i].points, gen.label_noise_rate, gen.num_classes, seed);
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: gen.seed,
        train: train_idx.iter().map(|&i| images[i].id.clone()).collect(),
        test: test_idx.iter().map(|&i| images[i].id.clone()).collect(),
        generator: gen.clone(),
    };
    let images = train_idx.iter().chain(&test_idx).map(|&i| images[i].clone()).collect();
    Ok(Dataset { manifest, images })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn invalid_data(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

pub(crate) fn write_rgb_png(path: &Path, height: usize, width: usize, pixels: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer_with_format(
        path,
        &bytes,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| invalid_data(path, e))
}

pub(crate) fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => invalid_data(path, other),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok((h as usize, w as usize, pixels))
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    let ann_dir = dir.join("annotations");
    for d in [&images_dir, &ann_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for img in &dataset.images {
        let name = format!("{}.png", img.id);
        write_rgb_png(&images_dir.join(&name), img.height, img.width, &img.pixels)?;
        let ann = Annotation {
            image: name,
            points: img.points.clone(),
        };
        write_file(&ann_dir.join(format!("{}.json", img.id)), to_json(&ann).as_bytes())?;
    }
    write_file(&dir.join("manifest.json"), to_json(&dataset.manifest).as_bytes())
}

/// Parses one annotation sidecar, returning the referenced image file name
/// and its points.
pub fn read_annotation(path: &Path) -> Result<(String, GroundTruthSet)> {
    let text = read_file(path)?;
    let ann: Annotation = serde_json::from_str(&text).map_err(|e| invalid_data(path, e))?;
    Ok((ann.image, GroundTruthSet::new(ann.points)))
}

fn read_image(dir: &Path, id: &str, num_classes: usize) -> Result<AnnotatedImage> {
    let ann_path = dir.join("annotations").join(format!("{id}.json"));
    let (image_name, gt) = read_annotation(&ann_path)?;
    let image_path: PathBuf = dir.join("images").join(&image_name);
    if !image_path.is_file() {
        return Err(Error::Validation(format!(
            "{} references missing image {}",
            ann_path.display(),
            image_path.display()
        )));
    }
    let (height, width, pixels) = read_rgb_png(&image_path)?;
    let img = AnnotatedImage {
        id: id.to_string(),
        height,
        width,
        pixels,
        points: gt.points,
    };
    img.validate(num_classes)?;
    Ok(img)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&read_file(&manifest_path)?)
        .map_err(|e| invalid_data(&manifest_path, e))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version(format!(
            "{}: manifest version {} is not supported (expected {MANIFEST_VERSION})",
            manifest_path.display(),
            manifest.version
        )));
    }
    let num_classes = manifest.generator.num_classes;
    let images = manifest
        .train
        .iter()
        .chain(&manifest.test)
        .map(|id| read_image(dir, id, num_classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, images })
}
