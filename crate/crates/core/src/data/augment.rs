//! Random resized cropping and flipping applied jointly to pixels and points.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::error::{Error, Result};
use crate::types::GroundTruthPoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Range of the crop's area as a fraction of the image area.
    pub crop_scale_range: (f64, f64),
    pub horizontal_flip_prob: f64,
    pub vertical_flip_prob: f64,
    /// `(height, width)` of the result; the input size when absent.
    pub output_size: Option<(usize, usize)>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.6, 1.0),
            horizontal_flip_prob: 0.5,
            vertical_flip_prob: 0.5,
            output_size: None,
        }
    }
}

impl AugmentationConfig {
    /// Leaves images untouched.
    pub fn identity() -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            horizontal_flip_prob: 0.0,
            vertical_flip_prob: 0.0,
            output_size: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "augmentation.crop_scale_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        for (name, p) in [("horizontal_flip_prob", self.horizontal_flip_prob), ("vertical_flip_prob", self.vertical_flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augmentation.{name} must lie in [0, 1], got {p}")));
            }
        }
        if let Some((h, w)) = self.output_size {
            if h == 0 || w == 0 {
                return Err(Error::Config("augmentation.output_size must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Continuous crop rectangle in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

/// Output coordinate of source coordinate `x` under a crop starting at
/// `origin` with output/crop scale `s` (half-pixel convention).
fn forward_map(x: f64, origin: f64, s: f64) -> f64 {
    (x - origin) * s + 0.5 * (s - 1.0)
}

fn sample_axis(origin: f64, s: f64, out: usize, len: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|u| {
            let src = (origin + (u as f64 + 0.5) / s - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Applies a fixed crop, bilinear resize to `output_size`, and flips.
/// Points that leave the output frame are dropped.
pub fn augment_with(
    image: &AnnotatedImage,
    window: CropWindow,
    hflip: bool,
    vflip: bool,
    output_size: (usize, usize),
) -> AnnotatedImage {
    let (oh, ow) = output_size;
    let (sx, sy) = (ow as f64 / window.width, oh as f64 / window.height);
    let cols = sample_axis(window.x0, sx, ow, image.width);
    let rows = sample_axis(window.y0, sy, oh, image.height);
    let mut pixels = vec![0.0; oh * ow * 3];
    let src = |y: usize, x: usize, k: usize| image.pixels[(y * image.width + x) * 3 + k];
    for (v, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (u, &(x0, x1, fx)) in cols.iter().enumerate() {
            let tu = if hflip { ow - 1 - u } else { u };
            let tv = if vflip { oh - 1 - v } else { v };
            for k in 0..3 {
                let top = src(y0, x0, k) * (1.0 - fx) + src(y0, x1, k) * fx;
                let bot = src(y1, x0, k) * (1.0 - fx) + src(y1, x1, k) * fx;
                pixels[(tv * ow + tu) * 3 + k] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let (max_x, max_y) = ((ow - 1) as f64, (oh - 1) as f64);
    let points = image
        .points
        .iter()
        .filter_map(|p| {
            let x = forward_map(p.x, window.x0, sx);
            let y = forward_map(p.y, window.y0, sy);
            if !((0.0..=max_x).contains(&x) && (0.0..=max_y).contains(&y)) {
                return None;
            }
            Some(GroundTruthPoint {
                x: if hflip { max_x - x } else { x },
                y: if vflip { max_y - y } else { y },
                class_id: p.class_id,
            })
        })
        .collect();
    AnnotatedImage {
        id: image.id.clone(),
        height: oh,
        width: ow,
        pixels,
        points,
    }
}

/// Samples a crop with area fraction in `crop_scale_range` (same aspect as the
/// image) and flips with the configured probabilities.
pub fn augment<R: Rng>(image: &AnnotatedImage, config: &AugmentationConfig, rng: &mut R) -> AnnotatedImage {
    let (lo, hi) = config.crop_scale_range;
    let area = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let side = area.sqrt();
    let (cw, ch) = (image.width as f64 * side, image.height as f64 * side);
    let x0 = if cw < image.width as f64 { rng.gen_range(0.0..=image.width as f64 - cw) } else { 0.0 };
    let y0 = if ch < image.height as f64 { rng.gen_range(0.0..=image.height as f64 - ch) } else { 0.0 };
    let hflip = rng.gen_bool(config.horizontal_flip_prob);
    let vflip = rng.gen_bool(config.vertical_flip_prob);
    let out = config.output_size.unwrap_or((image.height, image.width));
    augment_with(
        image,
        CropWindow {
            x0,
            y0,
            width: cw,
            height: ch,
        },
        hflip,
        vflip,
        out,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_image, GeneratorConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> AnnotatedImage {
        generate_image(&GeneratorConfig::default(), 1).unwrap()
    }

    fn full(img: &AnnotatedImage) -> CropWindow {
        CropWindow {
            x0: 0.0,
            y0: 0.0,
            width: img.width as f64,
            height: img.height as f64,
        }
    }

    #[test]
    fn full_crop_without_flips_is_exact_identity() {
        let img = sample();
        let out = augment_with(&img, full(&img), false, false, (64, 64));
        assert_eq!(out, img);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &AugmentationConfig::identity(), &mut rng), img);
    }

    #[test]
    fn horizontal_flip_reflects_points_and_pixels() {
        let img = sample();
        let out = augment_with(&img, full(&img), true, false, (64, 64));
        for (p, q) in img.points.iter().zip(&out.points) {
            assert_eq!(q.x, 63.0 - p.x);
            assert_eq!(q.y, p.y);
        }
        assert_eq!(out.pixels[..3], img.pixels[63 * 3..64 * 3]);
    }

    #[test]
    fn half_area_center_crop_maps_points_affinely() {
        let img = sample();
        let side = 64.0 / 2f64.sqrt();
        let origin = (64.0 - side) / 2.0;
        let window = CropWindow {
            x0: origin,
            y0: origin,
            width: side,
            height: side,
        };
        let out = augment_with(&img, window, false, false, (64, 64));
        let s = 64.0 / side;
        let expected: Vec<_> = img
            .points
            .iter()
            .map(|p| ((p.x - origin + 0.5) * s - 0.5, (p.y - origin + 0.5) * s - 0.5, p.class_id))
            .filter(|&(x, y, _)| (0.0..=63.0).contains(&x) && (0.0..=63.0).contains(&y))
            .collect();
        assert_eq!(out.points.len(), expected.len());
        for (q, e) in out.points.iter().zip(&expected) {
            assert!((q.x - e.0).abs() < 1e-9 && (q.y - e.1).abs() < 1e-9);
            assert_eq!(q.class_id, e.2);
        }
    }

    #[test]
    fn random_augmentation_keeps_points_inside() {
        let img = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AugmentationConfig {
            crop_scale_range: (0.3, 1.0),
            ..Default::default()
        };
        for _ in 0..50 {
            let out = augment(&img, &cfg, &mut rng);
            assert!(out.points.len() <= img.points.len());
            out.validate(2).unwrap();
        }
    }
}
