//! Synthetic desk-scale corpus: cell-like grayscale textures with geometric
//! defects and exact masks.
//!
//! Defect kinds by class index: thin polylines (crack-like), vertical bars
//! (interconnect-like), dot clusters (contact-like), and blobs
//! (corrosion-like). The blob class always takes the highest index and is
//! drawn roughly an order of magnitude less often than the commonest class,
//! so per-class pixel frequencies are imbalanced by construction. The
//! background carries busbar-like vertical stripes whose intensity overlaps
//! the bar defects, which keeps the task from being solvable by a single
//! gray threshold.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::sampler::stream_rng;
use super::{save_gray_image, save_manifest, save_mask, DatasetManifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    /// Number of image/mask pairs to generate.
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Number of defect classes, at most 4; mask values are `0..=num_classes`.
    pub num_classes: usize,
    pub seed: u64,
}

struct Canvas {
    gray: Array2<f64>,
    mask: Array2<u8>,
}

impl Canvas {
    fn dim(&self) -> (usize, usize) {
        self.gray.dim()
    }

    fn darken(&mut self, y: i64, x: i64, factor: f64, class: u8) {
        let (h, w) = self.dim();
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            return;
        }
        let (y, x) = (y as usize, x as usize);
        self.gray[(y, x)] *= factor;
        self.mask[(y, x)] = class;
    }

    fn darken_disc(&mut self, cy: f64, cx: f64, ry: f64, rx: f64, factor: f64, class: u8) {
        let y0 = (cy - ry).floor() as i64;
        let y1 = (cy + ry).ceil() as i64;
        let x0 = (cx - rx).floor() as i64;
        let x1 = (cx + rx).ceil() as i64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    self.darken(y, x, factor, class);
                }
            }
        }
    }
}

fn background(h: usize, w: usize, rng: &mut impl Rng) -> Canvas {
    let base: f64 = rng.gen_range(0.5..0.7);
    let mut gray = Array2::<f64>::from_elem((h, w), base);

    // low-frequency texture from a coarse value-noise grid
    let gh = 9;
    let gw = 9;
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.gen_range(-0.07..0.07));
    for y in 0..h {
        let gy = y as f64 / (h - 1) as f64 * (gh - 1) as f64;
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(gh - 1);
        let fy = gy - y0 as f64;
        for x in 0..w {
            let gx = x as f64 / (w - 1) as f64 * (gw - 1) as f64;
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(gw - 1);
            let fx = gx - x0 as f64;
            let top = grid[(y0, x0)] * (1.0 - fx) + grid[(y0, x1)] * fx;
            let bot = grid[(y1, x0)] * (1.0 - fx) + grid[(y1, x1)] * fx;
            gray[(y, x)] += top * (1.0 - fy) + bot * fy;
        }
    }

    // busbar-like vertical stripes, part of the background class
    for third in [1usize, 2] {
        let jitter: i64 = rng.gen_range(-2..=2);
        let cx = (third * w / 3) as i64 + jitter;
        let factor = rng.gen_range(0.62..0.78);
        for y in 0..h as i64 {
            for dx in 0..2 {
                let x = cx + dx;
                if x >= 0 && x < w as i64 {
                    gray[(y as usize, x as usize)] *= factor;
                }
            }
        }
    }

    let noise = Normal::new(0.0, 0.015).expect("valid stddev");
    for v in gray.iter_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.02, 0.98);
    }

    Canvas {
        gray,
        mask: Array2::zeros((h, w)),
    }
}

fn draw_crack(canvas: &mut Canvas, class: u8, rng: &mut impl Rng) {
    let (h, w) = canvas.dim();
    let lines = rng.gen_range(1..=2);
    for _ in 0..lines {
        let mut y = rng.gen_range(4.0..(h - 4) as f64);
        let mut x = rng.gen_range(4.0..(w - 4) as f64);
        let mut angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let steps = rng.gen_range(40..70);
        let factor = rng.gen_range(0.25..0.4);
        for _ in 0..steps {
            let (py, px) = (y.round() as i64, x.round() as i64);
            canvas.darken(py, px, factor, class);
            canvas.darken(py, px + 1, factor, class);
            canvas.darken(py + 1, px, factor, class);
            angle += rng.gen_range(-0.5..0.5);
            y += angle.sin();
            x += angle.cos();
        }
    }
}

fn draw_bar(canvas: &mut Canvas, class: u8, rng: &mut impl Rng) {
    let (h, w) = canvas.dim();
    let bars = if rng.gen_bool(0.3) { 2 } else { 1 };
    for _ in 0..bars {
        let bw = rng.gen_range(3..=5);
        let x0 = rng.gen_range(2..w - bw - 2);
        let len = (rng.gen_range(0.45..0.8) * h as f64) as usize;
        let y0 = rng.gen_range(0..h - len);
        let factor = rng.gen_range(0.3..0.45);
        for y in y0..y0 + len {
            for x in x0..x0 + bw {
                canvas.darken(y as i64, x as i64, factor, class);
            }
        }
    }
}

fn draw_spots(canvas: &mut Canvas, class: u8, rng: &mut impl Rng) {
    let (h, w) = canvas.dim();
    // contact-like dots clustered near a busbar column
    let third = if rng.gen_bool(0.5) { 1 } else { 2 };
    let bx = (third * w / 3) as f64;
    let dots = rng.gen_range(3..=5);
    for _ in 0..dots {
        let cy = rng.gen_range(4.0..(h - 4) as f64);
        let cx = (bx + rng.gen_range(-4.0..4.0)).clamp(3.0, (w - 4) as f64);
        let factor = rng.gen_range(0.3..0.45);
        canvas.darken_disc(cy, cx, 1.8, 1.8, factor, class);
    }
}

fn draw_blob(canvas: &mut Canvas, class: u8, rng: &mut impl Rng) {
    let (h, w) = canvas.dim();
    let cy = rng.gen_range(7.0..(h - 7) as f64);
    let cx = rng.gen_range(7.0..(w - 7) as f64);
    let ry = rng.gen_range(3.0..5.5);
    let rx = rng.gen_range(3.0..5.5);
    let factor = rng.gen_range(0.35..0.5);
    canvas.darken_disc(cy, cx, ry, rx, factor, class);
}

/// Whether defect `class` (1-based) appears in image `index` for a corpus
/// with `num_classes` defect kinds. The schedule is deterministic so the
/// corpus-level class imbalance is structural, not a sampling accident.
fn class_present(class: usize, num_classes: usize, index: usize) -> bool {
    let rare = class == num_classes && num_classes >= 2;
    if rare {
        return index % 11 == 0;
    }
    match class {
        1 => index % 10 < 8,
        2 => index % 10 < 7,
        3 => index % 5 < 2,
        _ => false,
    }
}

/// Generate `count` image/mask pairs plus `manifest.tsv` under `out_dir`.
///
/// Identical configs produce identical pixel data. `count = 0` writes an
/// empty (but valid) manifest.
pub fn generate_synthetic_corpus(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if config.num_classes == 0 || config.num_classes > 4 {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be 1..=4, got {}",
            config.num_classes
        )));
    }
    if config.height < 32 || config.width < 32 {
        return Err(Error::InvalidArgument(format!(
            "synthetic images must be at least 32x32, got {}x{}",
            config.height, config.width
        )));
    }

    let image_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;

    let mut manifest = DatasetManifest {
        labeled: Vec::with_capacity(config.count),
        unlabeled: Vec::new(),
        split_seed: config.seed,
        labeled_fraction: 1.0,
    };

    for i in 0..config.count {
        let mut rng = stream_rng(config.seed, i as u64, 0x1d);
        let mut canvas = background(config.height, config.width, &mut rng);

        for class in 1..=config.num_classes {
            if !class_present(class, config.num_classes, i) {
                continue;
            }
            let rare = class == config.num_classes && config.num_classes >= 2;
            let kind = if rare { 4 } else { class };
            match kind {
                1 => draw_crack(&mut canvas, class as u8, &mut rng),
                2 => draw_bar(&mut canvas, class as u8, &mut rng),
                3 => draw_spots(&mut canvas, class as u8, &mut rng),
                _ => draw_blob(&mut canvas, class as u8, &mut rng),
            }
        }

        let image_path = image_dir.join(format!("im_{i:04}.png"));
        let mask_path = mask_dir.join(format!("im_{i:04}.png"));
        save_gray_image(&image_path, &canvas.gray)?;
        save_mask(&mask_path, &canvas.mask)?;
        manifest.labeled.push((image_path, mask_path));
    }

    save_manifest(&out_dir.join("manifest.tsv"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_manifest, load_mask};

    fn small() -> SynthConfig {
        SynthConfig {
            count: 24,
            height: 32,
            width: 32,
            num_classes: 3,
            seed: 1,
        }
    }

    #[test]
    fn mask_values_bounded_by_class_count() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(&small(), dir.path()).unwrap();
        assert_eq!(m.num_labeled(), 24);
        for (_, mask_path) in &m.labeled {
            let mask = load_mask(mask_path).unwrap();
            assert!(mask.labels.iter().all(|&v| v <= 3));
        }
    }

    #[test]
    fn identical_configs_give_identical_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic_corpus(&small(), d1.path()).unwrap();
        generate_synthetic_corpus(&small(), d2.path()).unwrap();
        for name in ["images/im_0003.png", "masks/im_0003.png"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identically seeded runs");
        }
    }

    #[test]
    fn zero_count_writes_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(
            &SynthConfig { count: 0, ..small() },
            dir.path(),
        )
        .unwrap();
        assert_eq!(m.num_labeled(), 0);
        let back = load_manifest(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(back.num_labeled(), 0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad_classes = SynthConfig { num_classes: 5, ..small() };
        assert!(generate_synthetic_corpus(&bad_classes, dir.path()).is_err());
        let bad_size = SynthConfig { height: 16, ..small() };
        assert!(generate_synthetic_corpus(&bad_size, dir.path()).is_err());
    }

    #[test]
    fn corpus_is_class_imbalanced_at_standard_scale() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            count: 200,
            height: 64,
            width: 64,
            num_classes: 3,
            seed: 1,
        };
        let m = generate_synthetic_corpus(&config, dir.path()).unwrap();
        let mut counts = [0u64; 4];
        for (_, mask_path) in &m.labeled {
            let mask = load_mask(mask_path).unwrap();
            for &v in mask.labels.iter() {
                counts[v as usize] += 1;
            }
        }
        let defects = &counts[1..=3];
        let most = *defects.iter().max().unwrap();
        let least = *defects.iter().min().unwrap();
        assert!(least > 0, "every defect class must appear: {defects:?}");
        assert!(
            most >= 10 * least,
            "expected >= 10:1 imbalance, got {defects:?}"
        );
    }
}
