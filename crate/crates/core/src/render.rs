//! Class-colored point overlays and simple line plots, written as PNG.

use std::path::Path;

use crate::error::Result;

pub type Rgb = [u8; 3];

/// Red, green, yellow, pink, then evenly spaced hues.
pub fn palette(num_classes: usize) -> Vec<Rgb> {
    const BASE: [Rgb; 4] = [[255, 0, 0], [0, 255, 0], [255, 255, 0], [255, 105, 180]];
    (0..num_classes)
        .map(|c| {
            BASE.get(c).copied().unwrap_or_else(|| {
                let extra = num_classes - BASE.len();
                hsv_to_rgb((c - BASE.len()) as f64 / extra as f64 * 360.0 + 15.0, 0.9, 0.95)
            })
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

/// An 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Canvas {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: color.repeat(width * height),
        }
    }

    /// From `H×W×3` floats in `[0, 1]`.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Self {
        Self {
            width,
            height,
            pixels: values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let (height, width, values) = crate::data::read_rgb_png(path)?;
        Ok(Self::from_unit(width, height, &values))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| crate::error::Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e.to_string())))
    }

    pub fn put(&mut self, x: i64, y: i64, color: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.pixels[i..i + 3].copy_from_slice(&color);
        }
    }

    pub fn disc(&mut self, cx: f64, cy: f64, radius: f64, color: Rgb) {
        let r = radius.ceil() as i64;
        let (x0, y0) = (cx.round() as i64, cy.round() as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (x0 + dx, y0 + dy);
                if (x as f64 - cx).hypot(y as f64 - cy) <= radius {
                    self.put(x, y, color);
                }
            }
        }
    }

    /// Bresenham segment.
    pub fn line(&mut self, from: (i64, i64), to: (i64, i64), color: Rgb) {
        let (mut x, mut y) = from;
        let (dx, dy) = ((to.0 - x).abs(), -(to.1 - y).abs());
        let (sx, sy) = (if x < to.0 { 1 } else { -1 }, if y < to.1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x, y, color);
            if (x, y) == to {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

/// A point marker: position and class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Marker {
    pub x: f64,
    pub y: f64,
    pub class_id: usize,
}

/// Draws a filled dot per marker in its class color.
pub fn overlay(base: &Canvas, markers: &[Marker], num_classes: usize, dot_radius: f64) -> Canvas {
    let colors = palette(num_classes.max(markers.iter().map(|m| m.class_id + 1).max().unwrap_or(0)));
    let mut out = base.clone();
    for m in markers {
        out.disc(m.x, m.y, dot_radius, colors[m.class_id]);
    }
    out
}

/// One polyline of a plot.
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: Rgb,
}

/// Line plot on a white canvas with axes and one tick per distinct x value.
/// Unlabeled; the accompanying CSV carries the numbers.
pub fn line_plot(series: &[Series], width: usize, height: usize) -> Canvas {
    let mut c = Canvas::filled(width, height, [255, 255, 255]);
    let margin = 24i64;
    let (w, h) = (width as i64, height as i64);
    let axis = [0, 0, 0];
    c.line((margin, h - margin), (w - margin, h - margin), axis);
    c.line((margin, margin), (margin, h - margin), axis);
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return c;
    }
    let (mut x_lo, mut x_hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y_lo, mut y_hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if x_hi == x_lo {
        x_lo -= 1.0;
        x_hi += 1.0;
    }
    y_lo = y_lo.min(0.0);
    y_hi = y_hi.max(1.0);
    if y_hi == y_lo {
        y_hi += 1.0;
    }
    let to_px = |(x, y): (f64, f64)| {
        let px = margin as f64 + (x - x_lo) / (x_hi - x_lo) * (w - 2 * margin) as f64;
        let py = (h - margin) as f64 - (y - y_lo) / (y_hi - y_lo) * (h - 2 * margin) as f64;
        (px.round() as i64, py.round() as i64)
    };
    for &(x, _) in &all {
        let (px, _) = to_px((x, y_lo));
        c.line((px, h - margin), (px, h - margin + 4), axis);
    }
    for k in 0..=4 {
        let (_, py) = to_px((x_lo, y_lo + (y_hi - y_lo) * k as f64 / 4.0));
        c.line((margin - 4, py), (margin, py), axis);
    }
    for s in series {
        let px: Vec<(i64, i64)> = s.points.iter().map(|&p| to_px(p)).collect();
        for pair in px.windows(2) {
            c.line(pair[0], pair[1], s.color);
        }
        for &(x, y) in &px {
            c.disc(x as f64, y as f64, 2.5, s.color);
        }
    }
    c
}
