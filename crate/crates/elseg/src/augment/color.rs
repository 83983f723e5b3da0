//! Photometric primitives for the strong branch.
//!
//! Brightness, contrast, and saturation are multiplicative blends toward the
//! black, mean-gray, and grayscale degenerates respectively; hue is a shift
//! on the HSV hue circle of up to `jitter_max_delta` times the hue
//! half-range. Factors are drawn in a fixed order (brightness, contrast,
//! saturation, hue, grayscale, blur) so a given rng stream replays exactly.

use ndarray::ArrayViewMut3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::StrongAugConfig;

const LUMA: [f64; 3] = [0.2989, 0.587, 0.114];

fn luma_at(view: &ArrayViewMut3<f64>, y: usize, x: usize) -> f64 {
    (0..3).map(|c| LUMA[c] * view[(c, y, x)]).sum()
}

fn clamp_unit(view: &mut ArrayViewMut3<f64>) {
    view.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

fn apply_brightness(view: &mut ArrayViewMut3<f64>, factor: f64) {
    view.mapv_inplace(|v| v * factor);
    clamp_unit(view);
}

fn apply_contrast(view: &mut ArrayViewMut3<f64>, factor: f64) {
    let (_, h, w) = view.dim();
    let mut mean = 0.0;
    for y in 0..h {
        for x in 0..w {
            mean += luma_at(view, y, x);
        }
    }
    mean /= (h * w) as f64;
    view.mapv_inplace(|v| (v - mean) * factor + mean);
    clamp_unit(view);
}

fn apply_saturation(view: &mut ArrayViewMut3<f64>, factor: f64) {
    let (_, h, w) = view.dim();
    for y in 0..h {
        for x in 0..w {
            let l = luma_at(view, y, x);
            for c in 0..3 {
                let v = (view[(c, y, x)] - l) * factor + l;
                view[(c, y, x)] = v.clamp(0.0, 1.0);
            }
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn apply_hue_shift(view: &mut ArrayViewMut3<f64>, shift: f64) {
    let (_, h, w) = view.dim();
    for y in 0..h {
        for x in 0..w {
            let (hh, ss, vv) = rgb_to_hsv(view[(0, y, x)], view[(1, y, x)], view[(2, y, x)]);
            let (r, g, b) = hsv_to_rgb(hh + shift, ss, vv);
            view[(0, y, x)] = r;
            view[(1, y, x)] = g;
            view[(2, y, x)] = b;
        }
    }
}

fn apply_grayscale(view: &mut ArrayViewMut3<f64>) {
    let (_, h, w) = view.dim();
    for y in 0..h {
        for x in 0..w {
            let l = luma_at(view, y, x);
            for c in 0..3 {
                view[(c, y, x)] = l;
            }
        }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with replicate padding.
fn apply_blur(view: &mut ArrayViewMut3<f64>, size: usize, sigma: f64) {
    if size <= 1 {
        return;
    }
    let (chans, h, w) = view.dim();
    let kernel = gaussian_kernel(size, sigma);
    let half = size as i64 / 2;
    let mut tmp = vec![0.0; h * w];
    for c in 0..chans {
        // horizontal pass
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let sx = (x as i64 + i as i64 - half).clamp(0, w as i64 - 1) as usize;
                    acc += kv * view[(c, y, sx)];
                }
                tmp[y * w + x] = acc;
            }
        }
        // vertical pass
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + i as i64 - half).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[sy * w + x];
                }
                view[(c, y, x)] = acc;
            }
        }
    }
}

/// Full photometric pipeline for one image, in place, before normalization.
pub(super) fn photometric_inplace(
    view: &mut ArrayViewMut3<f64>,
    cfg: &StrongAugConfig,
    rng: &mut ChaCha8Rng,
) {
    let delta = cfg.jitter_max_delta;
    let factor = |rng: &mut ChaCha8Rng| {
        if delta > 0.0 {
            rng.gen_range(1.0 - delta..=1.0 + delta)
        } else {
            1.0
        }
    };
    let brightness = factor(rng);
    let contrast = factor(rng);
    let saturation = factor(rng);
    let hue_shift = if delta > 0.0 {
        rng.gen_range(-delta..=delta) * 0.5
    } else {
        0.0
    };

    if delta > 0.0 {
        apply_brightness(view, brightness);
        apply_contrast(view, contrast);
        apply_saturation(view, saturation);
        apply_hue_shift(view, hue_shift);
    }

    if cfg.grayscale_prob > 0.0 && rng.gen_bool(cfg.grayscale_prob) {
        apply_grayscale(view);
    }

    let (lo, hi) = cfg.blur_kernel_range;
    let mut size = rng.gen_range(lo..=hi);
    if size % 2 == 0 {
        size += 1; // symmetric kernels need odd support
    }
    let sigma = rng.gen_range(cfg.blur_sigma_range.0..=cfg.blur_sigma_range.1);
    apply_blur(view, size, sigma);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn hsv_roundtrip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.8), (0.9, 0.1, 0.3), (0.5, 0.5, 0.5), (0.0, 0.0, 0.0)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-9, "{r} {r2}");
            assert!((g - g2).abs() < 1e-9);
            assert!((b - b2).abs() < 1e-9);
        }
    }

    #[test]
    fn gaussian_kernel_normalized_and_symmetric() {
        let k = gaussian_kernel(5, 1.3);
        let sum: f64 = k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!((k[0] - k[4]).abs() < 1e-12);
        assert!((k[1] - k[3]).abs() < 1e-12);
        assert!(k[2] > k[1]);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut img = Array3::from_elem((3, 6, 6), 0.4);
        apply_blur(&mut img.view_mut(), 5, 1.0);
        for v in img.iter() {
            assert!((v - 0.4).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_factors_change_nothing() {
        let mut img = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| {
            0.1 + 0.05 * (c + y + x) as f64
        });
        let original = img.clone();
        apply_brightness(&mut img.view_mut(), 1.0);
        apply_contrast(&mut img.view_mut(), 1.0);
        apply_saturation(&mut img.view_mut(), 1.0);
        apply_hue_shift(&mut img.view_mut(), 0.0);
        let max_err = img
            .iter()
            .zip(original.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-9, "{max_err}");
    }
}
