//! Point-annotated images: synthetic generation, label noise, augmentation,
//! and on-disk datasets.

mod augment;
mod generate;
mod io;
mod noise;

pub use augment::{augment, augment_with, AugmentationConfig, CropWindow};
pub use generate::{default_appearance, generate_image, ClassAppearance, GeneratorConfig};
pub use io::{
    generate_dataset, read_annotation, read_dataset, write_dataset, Dataset, DatasetConfig, Manifest, Split,
};
pub use noise::inject_label_noise;

pub(crate) use generate::stream;
pub(crate) use io::read_rgb_png;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{GroundTruthPoint, GroundTruthSet};

/// An RGB image (row-major `H×W×3`, values in `[0, 1]`) with point labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub points: Vec<GroundTruthPoint>,
}

impl AnnotatedImage {
    pub fn ground_truth(&self) -> GroundTruthSet {
        GroundTruthSet::new(self.points.clone())
    }

    /// `1×3×H×W` network input.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.chunks(3).enumerate() {
            for k in 0..3 {
                data[k * plane + i] = px[k];
            }
        }
        Tensor::new(vec![1, 3, self.height, self.width], data).expect("consistent image shape")
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.pixels.len() != self.height * self.width * 3 {
            return Err(Error::Validation(format!(
                "{}: {} pixel values for a {}x{} image",
                self.id,
                self.pixels.len(),
                self.width,
                self.height
            )));
        }
        for (i, p) in self.points.iter().enumerate() {
            let inside = (0.0..self.width as f64).contains(&p.x) && (0.0..self.height as f64).contains(&p.y);
            if !inside {
                return Err(Error::Validation(format!(
                    "{}: point {i} at ({}, {}) lies outside the {}x{} image",
                    self.id, p.x, p.y, self.width, self.height
                )));
            }
            if p.class_id >= num_classes {
                return Err(Error::Validation(format!(
                    "{}: point {i} has class {} but only {num_classes} classes exist",
                    self.id, p.class_id
                )));
            }
        }
        Ok(())
    }

    /// Zero-pads on the bottom and right so both extents are multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> AnnotatedImage {
        let h = self.height.div_ceil(multiple) * multiple;
        let w = self.width.div_ceil(multiple) * multiple;
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        let mut pixels = vec![0.0; h * w * 3];
        for y in 0..self.height {
            let src = &self.pixels[y * self.width * 3..(y + 1) * self.width * 3];
            pixels[y * w * 3..y * w * 3 + self.width * 3].copy_from_slice(src);
        }
        AnnotatedImage {
            id: self.id.clone(),
            height: h,
            width: w,
            pixels,
            points: self.points.clone(),
        }
    }
}
