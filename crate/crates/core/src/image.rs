//! RGB image helpers. Images are `[height, width, 3]` arrays in `[-1, 1]`.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{invalid, Result};

pub type Image = Array3<f32>;

/// Maps `[-1, 1]` to 8-bit, clamping out-of-range values.
pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn to_rgb8(img: &Image) -> image::RgbImage {
    let (h, w, _) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(img[[y, x, 0]]), to_u8(img[[y, x, 1]]), to_u8(img[[y, x, 2]])])
    })
}

pub fn from_rgb8(rgb: &image::RgbImage) -> Image {
    let (w, h) = rgb.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| from_u8(rgb.get_pixel(x as u32, y as u32)[c]))
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    to_rgb8(img).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    Ok(from_rgb8(&rgb))
}

/// Luma in `[0, 1]` using Rec. 601 weights.
pub fn grayscale_unit(img: &Image) -> Array2<f64> {
    let (h, w, c) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if c == 1 {
            unit(img[[y, x, 0]])
        } else {
            0.299 * unit(img[[y, x, 0]]) + 0.587 * unit(img[[y, x, 1]]) + 0.114 * unit(img[[y, x, 2]])
        }
    })
}

fn unit(v: f32) -> f64 {
    ((v as f64).clamp(-1.0, 1.0) + 1.0) / 2.0
}

/// Grid of same-sized images with a 1-pixel separator.
pub fn tile(images: &[Vec<Image>], separator: f32) -> Result<Image> {
    let first = images.first().and_then(|r| r.first()).ok_or_else(|| invalid("nothing to tile"))?;
    let (h, w, c) = first.dim();
    let rows = images.len();
    let cols = images.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut out = Array3::from_elem((rows * (h + 1) - 1, cols * (w + 1) - 1, c), separator);
    for (r, row) in images.iter().enumerate() {
        for (col, img) in row.iter().enumerate() {
            if img.dim() != (h, w, c) {
                return Err(invalid("tiled images must share a shape"));
            }
            let (y0, x0) = (r * (h + 1), col * (w + 1));
            out.slice_mut(ndarray::s![y0..y0 + h, x0..x0 + w, ..]).assign(img);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_round_trip_is_stable() {
        for v in 0..=255u8 {
            assert_eq!(to_u8(from_u8(v)), v);
        }
        assert_eq!(to_u8(-3.0), 0);
        assert_eq!(to_u8(3.0), 255);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((4, 5, 3), |(y, x, c)| from_u8(((y * 50 + x * 10 + c) % 256) as u8));
        let path = dir.path().join("a.png");
        save_png(&img, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);
    }
}
