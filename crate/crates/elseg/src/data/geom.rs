//! Geometric preprocessing: resize and crop.
//!
//! Images resize bilinearly; masks resize with nearest-neighbor so class
//! indices are never blended.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Bilinear resize of a `(C, H, W)` image (half-pixel center convention).
pub fn resize_bilinear(image: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.to_owned();
    }
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let top = image[(ch, y0, x0)] * (1.0 - fx) + image[(ch, y0, x1)] * fx;
                let bot = image[(ch, y1, x0)] * (1.0 - fx) + image[(ch, y1, x1)] * fx;
                out[(ch, oy, ox)] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Nearest-neighbor resize of a `(H, W)` index mask.
pub fn resize_nearest(mask: ArrayView2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    if (h, w) == (out_h, out_w) {
        return mask.to_owned();
    }
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let mut out = Array2::<u8>::zeros((out_h, out_w));
    for oy in 0..out_h {
        let sy = (((oy as f64 + 0.5) * scale_y - 0.5).round().max(0.0) as usize).min(h - 1);
        for ox in 0..out_w {
            let sx = (((ox as f64 + 0.5) * scale_x - 0.5).round().max(0.0) as usize).min(w - 1);
            out[(oy, ox)] = mask[(sy, sx)];
        }
    }
    out
}

/// Crop a `(C, H, W)` image at `(top, left)`.
pub fn crop_image(image: ArrayView3<f64>, top: usize, left: usize, size: usize) -> Array3<f64> {
    image
        .slice(ndarray::s![.., top..top + size, left..left + size])
        .to_owned()
}

/// Crop a `(H, W)` mask at `(top, left)`.
pub fn crop_mask(mask: ArrayView2<u8>, top: usize, left: usize, size: usize) -> Array2<u8> {
    mask.slice(ndarray::s![top..top + size, left..left + size])
        .to_owned()
}

pub fn center_crop_image(image: ArrayView3<f64>, size: usize) -> Array3<f64> {
    let (_, h, w) = image.dim();
    crop_image(image, (h - size) / 2, (w - size) / 2, size)
}

pub fn center_crop_mask(mask: ArrayView2<u8>, size: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    crop_mask(mask, (h - size) / 2, (w - size) / 2, size)
}
