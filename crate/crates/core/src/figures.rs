//! Static raster figures: colour-mapped heatmaps, overlays on decoded
//! images, bar charts and raw float32 grids.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{invalid, IoContext, Result};
use crate::image::Image;

/// Anchor colours of a perceptually ordered dark-to-bright map, RGB in `[0, 1]`.
const ANCHORS: [[f32; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.231, 0.322, 0.545],
    [0.128, 0.567, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
];

/// Colour of `v` in `[0, 1]` as an image pixel in `[-1, 1]`.
pub fn colormap(v: f64) -> [f32; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let pos = v * (ANCHORS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(ANCHORS.len() - 2);
    let frac = (pos - i as f64) as f32;
    std::array::from_fn(|c| {
        let unit = ANCHORS[i][c] + frac * (ANCHORS[i + 1][c] - ANCHORS[i][c]);
        unit * 2.0 - 1.0
    })
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
pub fn rescale(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Array2::zeros(map.raw_dim());
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

pub fn heatmap(map: &Array2<f64>) -> Image {
    let scaled = rescale(map);
    let (h, w) = scaled.dim();
    let mut out = Array3::zeros((h, w, 3));
    for ((y, x), &v) in scaled.indexed_iter() {
        let c = colormap(v);
        for k in 0..3 {
            out[[y, x, k]] = c[k];
        }
    }
    out
}

/// Heatmap of `map` blended over `base` with opacity `alpha`.
pub fn overlay(base: &Image, map: &Array2<f64>, alpha: f32) -> Result<Image> {
    let (h, w, _) = base.dim();
    if map.dim() != (h, w) {
        return Err(invalid(format!("map is {:?}, image is {h}x{w}", map.dim())));
    }
    let hm = heatmap(map);
    Ok(Array3::from_shape_fn(base.raw_dim(), |(y, x, c)| (1.0 - alpha) * base[[y, x, c]] + alpha * hm[[y, x, c]]))
}

/// Nearest-neighbour enlargement by an integer factor.
pub fn upscale(img: &Image, factor: usize) -> Image {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h * factor, w * factor, c), |(y, x, k)| img[[y / factor, x / factor, k]])
}

/// Vertical bars on a white canvas, one per value, scaled to the largest
/// absolute value.
pub fn bar_chart(values: &[f64], height: usize, bar_width: usize) -> Result<Image> {
    if values.is_empty() || height < 2 || bar_width == 0 {
        return Err(invalid("bar chart needs values, a height of at least 2 and a positive bar width"));
    }
    let gap = 1;
    let width = values.len() * (bar_width + gap) + gap;
    let top = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut out = Array3::from_elem((height, width, 3), 1.0f32);
    for (i, &v) in values.iter().enumerate() {
        let frac = if top > 0.0 { v.abs() / top } else { 0.0 };
        let bar = ((frac * (height - 1) as f64).round() as usize).max(usize::from(v != 0.0));
        let colour = colormap(i as f64 / (values.len().max(2) - 1) as f64);
        let x0 = gap + i * (bar_width + gap);
        for y in height - bar..height {
            for x in x0..x0 + bar_width {
                for k in 0..3 {
                    out[[y, x, k]] = colour[k];
                }
            }
        }
    }
    Ok(out)
}

/// Writes a row-major little-endian float32 grid.
pub fn write_f32_grid(map: &Array2<f64>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(map.len() * 4);
    for &v in map.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).at(path)?;
    f.write_all(&buf).at(path)
}

pub fn read_f32_grid(path: &Path, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let bytes = std::fs::read(path).at(path)?;
    if bytes.len() != rows * cols * 4 {
        return Err(invalid(format!("{} holds {} bytes, expected {}", path.display(), bytes.len(), rows * cols * 4)));
    }
    let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}
