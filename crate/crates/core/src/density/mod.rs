//! Density-map baseline: Gaussian reference maps, a BCE+IoU objective, and
//! local-maximum peak search.

mod model;

pub use model::DensityModel;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Prediction;
use crate::losses::PROB_FLOOR;
use crate::tensor::{Graph, Tensor, Var};
use crate::types::GroundTruthSet;

/// Row-major `H×W` map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height} density map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("density value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `1×1×H×W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.values.clone()).expect("consistent map shape")
    }

    /// 16-bit grayscale PNG, `0 → 0`, `1 → 65535`.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .values
            .iter()
            .flat_map(|v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
            .collect();
        let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
            self.width as u32,
            self.height as u32,
            bytes.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
        )
        .expect("buffer matches extents");
        buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| {
            Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
        })
    }
}

/// Stamps a `kernel_size × kernel_size` Gaussian with peak value 1 at each
/// point's rounded position; overlapping stamps combine by maximum.
pub fn make_rdm(points: &GroundTruthSet, height: usize, width: usize, kernel_size: usize, sigma: f64) -> Result<DensityMap> {
    if kernel_size % 2 == 0 {
        return Err(Error::Contract(format!("kernel size must be odd, got {kernel_size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
    }
    let mut map = DensityMap::zeros(height, width);
    let half = (kernel_size / 2) as i64;
    for p in &points.points {
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        for dy in -half..=half {
            for dx in -half..=half {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                    continue;
                }
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let slot = &mut map.values[y as usize * width + x as usize];
                *slot = slot.max(v);
            }
        }
    }
    Ok(map)
}

/// `w_bce · mean BCE + w_iou · (1 − Σpt / Σ(p + t − pt))` on graph variables
/// of equal shape; `pred` holds probabilities.
pub fn bce_iou_graph(g: &mut Graph, pred: Var, target: Var, w_bce: f64, w_iou: f64) -> Result<Var> {
    if g.value(pred).shape() != g.value(target).shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and target {:?} differ in shape",
            g.value(pred).shape(),
            g.value(target).shape()
        )));
    }
    let log_p = g.log(pred, PROB_FLOOR)?;
    let one_minus_p = g.affine(pred, -1.0, 1.0)?;
    let log_q = g.log(one_minus_p, PROB_FLOOR)?;
    let one_minus_t = g.affine(target, -1.0, 1.0)?;
    let a = g.mul(target, log_p)?;
    let b = g.mul(one_minus_t, log_q)?;
    let ll = g.add(a, b)?;
    let ll = g.mean(ll)?;
    let bce = g.affine(ll, -w_bce, 0.0)?;

    let inter = g.mul(pred, target)?;
    let union = g.add(pred, target)?;
    let union = g.sub(union, inter)?;
    let inter = g.sum(inter)?;
    let union = g.sum(union)?;
    let union = g.clamp_min(union, PROB_FLOOR)?;
    let inv = g.powf(union, -1.0)?;
    let iou = g.mul(inter, inv)?;
    let iou_term = g.affine(iou, -w_iou, w_iou)?;
    g.add(bce, iou_term)
}

pub fn bce_iou_loss(pred: &DensityMap, target: &DensityMap, w_bce: f64, w_iou: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.to_tensor())?;
    let t = g.constant(target.to_tensor())?;
    let loss = bce_iou_graph(&mut g, p, t, w_bce, w_iou)?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakParams {
    pub min_distance: usize,
    pub abs_threshold: f64,
}

impl PeakParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_distance < 1 {
            return Err(Error::Config("min_distance must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.abs_threshold) {
            return Err(Error::Config(format!(
                "abs_threshold must lie in [0, 1], got {}",
                self.abs_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// A pixel is a candidate when it is positive, at least `abs_threshold`, and
/// beats every pixel within Chebyshev distance `min_distance`, equal values
/// counting as beaten only by pixels earlier in row-major order. Candidates
/// are accepted in descending score order, dropping any within `min_distance`
/// of an accepted one.
pub fn find_peaks(map: &DensityMap, params: &PeakParams) -> Result<Vec<Peak>> {
    params.validate()?;
    let (h, w, d) = (map.height, map.width, params.min_distance);
    let mut candidates = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map.get(x, y);
            if v < params.abs_threshold || v <= 0.0 {
                continue;
            }
            let here = y * w + x;
            let dominates = (y.saturating_sub(d)..(y + d + 1).min(h)).all(|yy| {
                (x.saturating_sub(d)..(x + d + 1).min(w)).all(|xx| {
                    let u = map.get(xx, yy);
                    let there = yy * w + xx;
                    there == here || v > u || (v == u && here < there)
                })
            });
            if dominates {
                candidates.push(Peak { x, y, score: v });
            }
        }
    }
    // Stable sort keeps row-major order among equal scores.
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut accepted: Vec<Peak> = Vec::with_capacity(candidates.len());
    for c in candidates {
        let near = accepted.iter().any(|a| a.x.abs_diff(c.x).max(a.y.abs_diff(c.y)) <= d);
        if !near {
            accepted.push(c);
        }
    }
    Ok(accepted)
}

/// Peaks as single-class predictions for the evaluation module.
pub fn peaks_to_predictions(peaks: &[Peak]) -> Vec<Prediction> {
    peaks
        .iter()
        .map(|p| Prediction {
            x: p.x as f64,
            y: p.y as f64,
            score: p.score,
            class_id: 0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::GroundTruthPoint;

    fn gt(points: &[(f64, f64)]) -> GroundTruthSet {
        GroundTruthSet::new(points.iter().map(|&(x, y)| GroundTruthPoint { x, y, class_id: 0 }).collect())
    }

    #[test]
    fn single_point_peaks_at_one() {
        let m = make_rdm(&gt(&[(16.0, 16.0)]), 32, 32, 7, 6.0).unwrap();
        assert_eq!(m.get(16, 16), 1.0);
        assert!(m.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let nonzero = m.values.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(nonzero, 49);
        assert_eq!(m.get(19, 16), (-9.0f64 / 72.0).exp());
    }

    #[test]
    fn empty_points_give_zero_map() {
        let m = make_rdm(&gt(&[]), 8, 8, 7, 6.0).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(make_rdm(&gt(&[]), 8, 8, 6, 6.0).is_err());
    }

    #[test]
    fn border_points_stamp_clipped_kernels() {
        let m = make_rdm(&gt(&[(0.0, 0.0)]), 8, 8, 7, 6.0).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.values.iter().filter(|&&v| v > 0.0).count(), 16);
    }

    #[test]
    fn all_half_fixture() {
        let m = DensityMap::new(4, 4, vec![0.5; 16]).unwrap();
        let loss = bce_iou_loss(&m, &m, 0.8, 0.2).unwrap();
        assert!((loss - 0.687851).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn zero_iou_weight_is_plain_bce() {
        let p = DensityMap::new(1, 3, vec![0.2, 0.7, 0.9]).unwrap();
        let t = DensityMap::new(1, 3, vec![0.0, 1.0, 0.5]).unwrap();
        let expected = -((0.8f64).ln() + (0.7f64).ln() + 0.5 * (0.9f64).ln() + 0.5 * (0.1f64).ln()) / 3.0;
        assert!((bce_iou_loss(&p, &t, 1.0, 0.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn single_gaussian_gives_one_peak_at_its_center() {
        let m = make_rdm(&gt(&[(10.0, 12.0)]), 32, 32, 7, 6.0).unwrap();
        let peaks = find_peaks(&m, &PeakParams { min_distance: 2, abs_threshold: 0.1 }).unwrap();
        assert_eq!(peaks, vec![Peak { x: 10, y: 12, score: 1.0 }]);
    }

    #[test]
    fn all_zero_map_has_no_peaks() {
        let m = DensityMap::zeros(16, 16);
        for abs_threshold in [0.0, 0.1] {
            assert!(find_peaks(&m, &PeakParams { min_distance: 1, abs_threshold }).unwrap().is_empty());
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let m = DensityMap::zeros(4, 4);
        assert!(find_peaks(&m, &PeakParams { min_distance: 0, abs_threshold: 0.1 }).is_err());
        assert!(find_peaks(&m, &PeakParams { min_distance: 1, abs_threshold: 1.5 }).is_err());
    }
}
