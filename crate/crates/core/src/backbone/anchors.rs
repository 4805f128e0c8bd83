use super::BackboneConfig;
use crate::error::{Error, Result};

/// Preset anchor points, ordered cell-major (row-major over cells) then by
/// offset index.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub points: Vec<(f64, f64)>,
    pub cells_y: usize,
    pub cells_x: usize,
    pub per_cell: usize,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One cell per `head_stride`-sized block; each cell contributes its center
/// plus the configured shifts, all clamped into the image.
pub fn build_anchor_grid(height: usize, width: usize, config: &BackboneConfig) -> Result<AnchorGrid> {
    let stride = config.head_stride;
    if height < stride || width < stride {
        return Err(Error::Dimension(format!(
            "image {width}x{height} is smaller than one {stride}-pixel anchor cell"
        )));
    }
    let cells_y = height.div_ceil(stride);
    let cells_x = width.div_ceil(stride);
    let (max_x, max_y) = ((width - 1) as f64, (height - 1) as f64);
    let half = stride as f64 / 2.0;
    let mut points = Vec::with_capacity(cells_y * cells_x * config.anchors_per_cell);
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            let center_x = (cx as f64 * stride as f64 + half).min(max_x);
            let center_y = (cy as f64 * stride as f64 + half).min(max_y);
            for &(dx, dy) in &config.anchor_offsets {
                points.push((
                    (center_x + dx).clamp(0.0, max_x),
                    (center_y + dy).clamp(0.0, max_y),
                ));
            }
        }
    }
    Ok(AnchorGrid {
        points,
        cells_y,
        cells_x,
        per_cell: config.anchors_per_cell,
    })
}
