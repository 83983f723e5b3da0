//! Image and mask file i/o.
//!
//! Images may be 8-bit RGB or grayscale on disk; grayscale is replicated to
//! three channels on load. Masks are 8-bit single-channel images whose pixel
//! value is the class index.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader};
use ndarray::{Array2, Array3};

use super::{ImageSample, MaskSample};
use crate::error::{Error, Result};

fn sample_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

fn open(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Load an 8-bit RGB or grayscale image as `(3, H, W)` reals in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageSample> {
    let rgb = open(path)?.into_rgb8();
    let (w, h) = rgb.dimensions();
    let mut pixels = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            pixels[(c, y as usize, x as usize)] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(ImageSample {
        id: sample_id(path),
        pixels,
        source_path: path.to_path_buf(),
    })
}

/// Load an 8-bit single-channel index mask.
pub fn load_mask(path: &Path) -> Result<MaskSample> {
    let gray = open(path)?.into_luma8();
    let (w, h) = gray.dimensions();
    let mut labels = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in gray.enumerate_pixels() {
        labels[(y as usize, x as usize)] = p.0[0];
    }
    Ok(MaskSample {
        id: sample_id(path),
        labels,
    })
}

/// Write a `(H, W)` array of `[0, 1]` reals as an 8-bit grayscale PNG.
pub fn save_gray_image(path: &Path, pixels: &Array2<f64>) -> Result<()> {
    let (h, w) = pixels.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), v) in pixels.indexed_iter() {
        let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(x as u32, y as u32, image::Luma([byte]));
    }
    img.save(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Write a `(3, H, W)` array of `[0, 1]` reals as an RGB PNG.
pub fn save_rgb_image(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (_, h, w) = pixels.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|c| {
                (pixels[(c, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Write class indices as an 8-bit single-channel PNG.
pub fn save_mask(path: &Path, labels: &Array2<u8>) -> Result<()> {
    let (h, w) = labels.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in labels.indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([v]));
    }
    img.save(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
