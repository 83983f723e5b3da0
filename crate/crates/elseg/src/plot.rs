//! Minimal static-PNG chart rendering: line charts and heatmaps.
//!
//! Enough for training curves and confusion heatmaps without pulling in a
//! font stack; text uses a built-in 5x7 pixel font (digits, upper-case
//! letters, and basic punctuation; anything else renders as a blank).

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// One polyline in a chart.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

pub const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

const FONT_W: usize = 5;
const FONT_H: usize = 7;

fn glyph(c: char) -> [u8; FONT_H] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        _ => [0; FONT_H],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..FONT_W {
                if row & (1 << (FONT_W - 1 - rx)) != 0 {
                    let px = cx + rx as i64;
                    let py = y + ry as i64;
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height()
                    {
                        img.put_pixel(px as u32, py as u32, Rgb(color));
                    }
                }
            }
        }
        cx += FONT_W as i64 + 1;
    }
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
        if x == x1 && y == y1 {
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

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

/// Render series as a line chart PNG with axes, ticks, and a legend.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let (width, height) = (640u32, 420u32);
    let (ml, mr, mt, mb) = (64i64, 20i64, 34i64, 44i64);
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));

    let points: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x_min, mut x_max) = points
        .iter()
        .fold((f64::MAX, f64::MIN), |acc, p| (acc.0.min(p.0), acc.1.max(p.0)));
    let (mut y_min, mut y_max) = points
        .iter()
        .fold((f64::MAX, f64::MIN), |acc, p| (acc.0.min(p.1), acc.1.max(p.1)));
    if points.is_empty() {
        (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
    }
    if (x_max - x_min).abs() < 1e-12 {
        x_max = x_min + 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let pad = (y_max - y_min) * 0.05;
    y_min -= pad;
    y_max += pad;

    let plot_w = width as i64 - ml - mr;
    let plot_h = height as i64 - mt - mb;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = ml + ((x - x_min) / (x_max - x_min) * plot_w as f64) as i64;
        let py = mt + plot_h - ((y - y_min) / (y_max - y_min) * plot_h as f64) as i64;
        (px, py)
    };

    let axis = [60, 60, 60];
    let grid = [225, 225, 225];
    for i in 0..=4 {
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        let (_, py) = to_px(x_min, fy);
        draw_line(&mut img, ml, py, ml + plot_w, py, grid);
        draw_text(&mut img, 4, py - 3, &fmt_tick(fy), axis);
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let (px, _) = to_px(fx, y_min);
        draw_text(&mut img, px - 8, mt + plot_h + 6, &fmt_tick(fx), axis);
    }
    draw_line(&mut img, ml, mt, ml, mt + plot_h, axis);
    draw_line(&mut img, ml, mt + plot_h, ml + plot_w, mt + plot_h, axis);
    draw_text(&mut img, ml, 10, title, [0, 0, 0]);
    draw_text(&mut img, ml + plot_w / 2 - 20, height as i64 - 14, x_label, axis);
    draw_text(&mut img, 4, mt - 12, y_label, axis);

    for (si, s) in series.iter().enumerate() {
        for pair in s.points.windows(2) {
            let (x0, y0) = to_px(pair[0].0, pair[0].1);
            let (x1, y1) = to_px(pair[1].0, pair[1].1);
            draw_line(&mut img, x0, y0, x1, y1, s.color);
        }
        // legend swatch + name
        let ly = mt + 6 + 12 * si as i64;
        draw_line(&mut img, ml + plot_w - 90, ly + 3, ml + plot_w - 76, ly + 3, s.color);
        draw_text(&mut img, ml + plot_w - 72, ly, &s.name, axis);
    }

    img.save(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn ramp(t: f64) -> [u8; 3] {
    // five-stop perceptual-ish ramp
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    std::array::from_fn(|c| (STOPS[i][c] + (STOPS[i + 1][c] - STOPS[i][c]) * f).round() as u8)
}

/// Render a matrix as a colored heatmap with per-cell values and axis labels.
pub fn heatmap(path: &Path, matrix: &ArrayView2<f64>, labels: &[String], title: &str) -> Result<()> {
    let (rows, cols) = matrix.dim();
    let cell = 56u32;
    let (ml, mt) = (70i64, 40i64);
    let width = ml as u32 + cols as u32 * cell + 20;
    let height = mt as u32 + rows as u32 * cell + 60;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));

    let max = matrix.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
    let min = matrix.iter().cloned().fold(f64::MAX, f64::min).min(0.0);
    for r in 0..rows {
        for c in 0..cols {
            let v = matrix[(r, c)];
            let t = (v - min) / (max - min).max(1e-12);
            let color = ramp(t);
            for py in 0..cell {
                for px in 0..cell {
                    img.put_pixel(
                        ml as u32 + c as u32 * cell + px,
                        mt as u32 + r as u32 * cell + py,
                        Rgb(color),
                    );
                }
            }
            let text_color = if t > 0.6 { [0, 0, 0] } else { [255, 255, 255] };
            draw_text(
                &mut img,
                ml + c as i64 * cell as i64 + 6,
                mt + r as i64 * cell as i64 + (cell as i64 / 2) - 3,
                &format!("{v:.2}"),
                text_color,
            );
        }
    }
    draw_text(&mut img, ml, 12, title, [0, 0, 0]);
    for (i, label) in labels.iter().enumerate().take(rows) {
        draw_text(&mut img, 4, mt + i as i64 * cell as i64 + cell as i64 / 2 - 3, label, [0, 0, 0]);
    }
    for (i, label) in labels.iter().enumerate().take(cols) {
        draw_text(
            &mut img,
            ml + i as i64 * cell as i64 + 8,
            mt + rows as i64 * cell as i64 + 10,
            label,
            [0, 0, 0],
        );
    }
    draw_text(
        &mut img,
        ml,
        mt + rows as i64 * cell as i64 + 30,
        "ROWS TRUE / COLS PREDICTED",
        [90, 90, 90],
    );

    img.save(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn line_chart_writes_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.png");
        let series = vec![
            Series {
                name: "LOSS".into(),
                points: (0..10).map(|i| (i as f64, (10 - i) as f64 * 0.1)).collect(),
                color: PALETTE[0],
            },
            Series {
                name: "MIOU".into(),
                points: (0..10).map(|i| (i as f64, i as f64 * 0.08)).collect(),
                color: PALETTE[1],
            },
        ];
        line_chart(&path, "TRAINING", "EPOCH", "VALUE", &series).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), 640);
    }

    #[test]
    fn heatmap_writes_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cm.png");
        let m = Array2::from_shape_fn((3, 3), |(r, c)| (r * 3 + c) as f64);
        let labels = vec!["BG".to_string(), "CR".to_string(), "CO".to_string()];
        heatmap(&path, &m.view(), &labels, "CONFUSION").unwrap();
        assert!(path.exists());
    }

    #[test]
    fn empty_series_does_not_crash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.png");
        line_chart(&path, "EMPTY", "X", "Y", &[]).unwrap();
        assert!(path.exists());
    }
}
