// SPDX-License-Identifier: Apache-2.0

//! Raster output: heatmap overlays, box outlines and simple charts.
//!
//! Charts are drawn directly into RGB buffers with a 3×5 bitmap font, so
//! no font files or plotting backends are needed.

use ndarray::{s, Array2, Array3};

use crate::saliency::BBox;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GRAY: Rgb = [200, 200, 200];
pub const RED: Rgb = [220, 40, 40];
pub const GREEN: Rgb = [40, 180, 60];
pub const BLUE: Rgb = [40, 90, 220];
pub const ORANGE: Rgb = [240, 150, 30];

/// Line colors for successive chart series.
pub const PALETTE: [Rgb; 6] = [BLUE, RED, GREEN, ORANGE, [140, 60, 170], [90, 90, 90]];

fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '+' => [0, 2, 7, 2, 0],
        '=' => [0, 7, 0, 7, 0],
        '_' => [0, 0, 0, 0, 7],
        '(' => [2, 4, 4, 4, 2],
        ')' => [2, 1, 1, 1, 2],
        '/' => [1, 1, 2, 4, 4],
        ':' => [0, 2, 0, 2, 0],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        _ => [0; 5],
    }
}

/// An RGB drawing surface, `(3, H, W)`.
pub struct Canvas {
    pub pixels: Array3<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, background: Rgb) -> Self {
        Canvas {
            pixels: Array3::from_shape_fn((3, height, width), |(c, _, _)| background[c]),
        }
    }

    pub fn from_image(image: Array3<u8>) -> Self {
        Canvas { pixels: image }
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn set(&mut self, x: i64, y: i64, color: Rgb) {
        if x < 0 || y < 0 || x >= self.width() as i64 || y >= self.height() as i64 {
            return;
        }
        for (c, v) in color.iter().enumerate() {
            self.pixels[[c, y as usize, x as usize]] = *v;
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: Rgb) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, color);
            }
        }
    }

    /// Inclusive rectangle outline.
    pub fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb) {
        self.line(x0, y0, x1, y0, color);
        self.line(x0, y1, x1, y1, color);
        self.line(x0, y0, x0, y1, color);
        self.line(x1, y0, x1, y1, color);
    }

    pub fn draw_box(&mut self, b: &BBox, color: Rgb) {
        self.rect(b.x_min as i64, b.y_min as i64, b.x_max as i64, b.y_max as i64, color);
    }

    /// Bresenham line.
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, color);
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

    pub fn thick_line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb) {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            self.line(x0 + ox, y0 + oy, x1 + ox, y1 + oy, color);
        }
    }

    /// Draws text with its top-left corner at `(x, y)`; each font pixel is `scale` pixels.
    pub fn text(&mut self, x: i64, y: i64, text: &str, scale: i64, color: Rgb) {
        for (i, ch) in text.chars().enumerate() {
            let g = glyph(ch);
            let ox = x + i as i64 * 4 * scale;
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        self.fill_rect(ox + col * scale, y + row as i64 * scale, scale, scale, color);
                    }
                }
            }
        }
    }

    pub fn text_width(text: &str, scale: i64) -> i64 {
        text.chars().count() as i64 * 4 * scale - scale
    }
}

/// Blue → cyan → yellow → red ramp for values in `[0, 1]`.
pub fn colormap(v: f64) -> Rgb {
    let v = v.clamp(0.0, 1.0);
    let stops: [(f64, [f64; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.3, 1.0]),
        (0.5, [0.0, 0.9, 0.9]),
        (0.75, [1.0, 0.9, 0.0]),
        (1.0, [0.8, 0.0, 0.0]),
    ];
    let i = stops.iter().rposition(|(t, _)| *t <= v).unwrap_or(0).min(3);
    let (t0, c0) = stops[i];
    let (t1, c1) = stops[i + 1];
    let f = (v - t0) / (t1 - t0);
    [0, 1, 2].map(|k| ((c0[k] + f * (c1[k] - c0[k])) * 255.0).round() as u8)
}

/// Blends the colormapped heatmap over the image with weight `alpha`.
pub fn overlay(image: &Array3<u8>, heat: &Array2<f64>, alpha: f64) -> Array3<u8> {
    let (_, h, w) = image.dim();
    assert_eq!(heat.dim(), (h, w), "heatmap must match the image");
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let c = colormap(heat[[y, x]]);
            for k in 0..3 {
                let v = (1.0 - alpha) * image[[k, y, x]] as f64 + alpha * c[k] as f64;
                out[[k, y, x]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Places images side by side with `gap` pixels of white between them.
pub fn hstack(images: &[Array3<u8>], gap: usize) -> Array3<u8> {
    let h = images.iter().map(|i| i.dim().1).max().unwrap_or(0);
    let w = images.iter().map(|i| i.dim().2).sum::<usize>() + gap * images.len().saturating_sub(1);
    let mut out = Array3::from_elem((3, h, w), 255u8);
    let mut x = 0;
    for img in images {
        let (_, ih, iw) = img.dim();
        out.slice_mut(s![.., ..ih, x..x + iw]).assign(img);
        x += iw + gap;
    }
    out
}

/// Stacks images vertically with `gap` pixels of white between them.
pub fn vstack(images: &[Array3<u8>], gap: usize) -> Array3<u8> {
    let w = images.iter().map(|i| i.dim().2).max().unwrap_or(0);
    let h = images.iter().map(|i| i.dim().1).sum::<usize>() + gap * images.len().saturating_sub(1);
    let mut out = Array3::from_elem((3, h, w), 255u8);
    let mut y = 0;
    for img in images {
        let (_, ih, iw) = img.dim();
        out.slice_mut(s![.., y..y + ih, ..iw]).assign(img);
        y += ih + gap;
    }
    out
}

/// Nearest-neighbour enlargement by an integer factor.
pub fn upscale(image: &Array3<u8>, factor: usize) -> Array3<u8> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h * factor, w * factor), |(k, y, x)| image[[k, y / factor, x / factor]])
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

const CHART_W: i64 = 480;
const CHART_H: i64 = 320;
const LEFT: i64 = 56;
const RIGHT: i64 = 16;
const TOP: i64 = 36;
const BOTTOM: i64 = 44;

/// Line chart with markers, axis ticks at the data's x values and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], y_range: (f64, f64)) -> Canvas {
    let mut c = Canvas::new(CHART_W as usize, CHART_H as usize, WHITE);
    let (pw, ph) = (CHART_W - LEFT - RIGHT, CHART_H - TOP - BOTTOM);
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let (y0, y1) = y_range;
    let y_span = if y1 > y0 { y1 - y0 } else { 1.0 };
    let px = |x: f64| LEFT + ((x - x_min) / x_span * pw as f64).round() as i64;
    let py = |y: f64| TOP + ph - ((y.clamp(y0, y1) - y0) / y_span * ph as f64).round() as i64;

    c.text((CHART_W - Canvas::text_width(title, 2)) / 2, 8, title, 2, BLACK);
    for k in 0..=4 {
        let v = y0 + y_span * k as f64 / 4.0;
        let y = py(v);
        c.line(LEFT, y, LEFT + pw, y, GRAY);
        let label = fmt_tick(v);
        c.text(LEFT - 6 - Canvas::text_width(&label, 1), y - 2, &label, 1, BLACK);
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for &t in &ticks {
        let x = px(t);
        c.line(x, TOP + ph, x, TOP + ph + 4, BLACK);
        let label = fmt_tick(t);
        c.text(x - Canvas::text_width(&label, 1) / 2, TOP + ph + 8, &label, 1, BLACK);
    }
    c.line(LEFT, TOP, LEFT, TOP + ph, BLACK);
    c.line(LEFT, TOP + ph, LEFT + pw, TOP + ph, BLACK);
    c.text(LEFT + (pw - Canvas::text_width(x_label, 2)) / 2, CHART_H - 18, x_label, 2, BLACK);
    c.text(4, TOP - 14, y_label, 1, BLACK);

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for w in s.points.windows(2) {
            c.thick_line(px(w[0].0), py(w[0].1), px(w[1].0), py(w[1].1), color);
        }
        for &(x, y) in &s.points {
            c.fill_rect(px(x) - 2, py(y) - 2, 5, 5, color);
        }
        let ly = TOP + 6 + i as i64 * 12;
        let lx = LEFT + pw - 120;
        c.fill_rect(lx, ly, 10, 6, color);
        c.text(lx + 14, ly, &s.name, 1, BLACK);
    }
    c
}

/// Vertical bars with value labels; the zero line is drawn when the range spans it.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> Canvas {
    let mut c = Canvas::new(CHART_W as usize, CHART_H as usize, WHITE);
    let (pw, ph) = (CHART_W - LEFT - RIGHT, CHART_H - TOP - BOTTOM);
    let lo = bars.iter().map(|b| b.1).fold(0.0_f64, f64::min);
    let hi = bars.iter().map(|b| b.1).fold(0.0_f64, f64::max);
    let pad = ((hi - lo) * 0.15).max(0.05);
    let (y0, y1) = (if lo < 0.0 { lo - pad } else { 0.0 }, hi + pad);
    let py = |y: f64| TOP + ph - ((y - y0) / (y1 - y0) * ph as f64).round() as i64;
    c.text((CHART_W - Canvas::text_width(title, 2)) / 2, 8, title, 2, BLACK);
    c.line(LEFT, TOP, LEFT, TOP + ph, BLACK);
    c.line(LEFT, py(0.0), LEFT + pw, py(0.0), BLACK);
    let n = bars.len().max(1) as i64;
    let slot = pw / n;
    for (i, (name, v)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = LEFT + i as i64 * slot + slot / 4;
        let (top, bottom) = if *v >= 0.0 { (py(*v), py(0.0)) } else { (py(0.0), py(*v)) };
        c.fill_rect(x, top, slot / 2, (bottom - top).max(1), color);
        let label = format!("{v:.3}");
        c.text(x + slot / 4 - Canvas::text_width(&label, 1) / 2, top - 9, &label, 1, BLACK);
        c.text(x + slot / 4 - Canvas::text_width(name, 1) / 2, TOP + ph + 10, name, 1, BLACK);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 128]);
        assert_eq!(colormap(1.0), [204, 0, 0]);
        assert_eq!(colormap(2.0), colormap(1.0));
    }

    #[test]
    fn overlay_with_zero_alpha_is_identity() {
        let img = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| (c * 50 + y * 10 + x) as u8);
        assert_eq!(overlay(&img, &Array2::from_elem((4, 5), 0.7), 0.0), img);
    }

    #[test]
    fn stacking_shapes() {
        let a = Array3::zeros((3, 4, 5));
        let b = Array3::zeros((3, 6, 2));
        assert_eq!(hstack(&[a.clone(), b.clone()], 1).dim(), (3, 6, 8));
        assert_eq!(vstack(&[a, b], 2).dim(), (3, 12, 5));
    }

    #[test]
    fn box_outline_is_drawn_on_the_border_only() {
        let mut c = Canvas::new(6, 6, BLACK);
        c.draw_box(&BBox::new(1, 1, 4, 4).unwrap(), RED);
        assert_eq!(c.pixels[[0, 1, 1]], RED[0]);
        assert_eq!(c.pixels[[0, 4, 2]], RED[0]);
        assert_eq!(c.pixels[[0, 2, 2]], 0);
    }

    #[test]
    fn charts_render() {
        let s = vec![Series {
            name: "A".into(),
            points: vec![(0.0, 0.9), (0.1, 0.8), (0.4, 0.3)],
        }];
        let c = line_chart("ACC", "SIGMA", "ACCURACY", &s, (0.0, 1.0));
        assert_eq!((c.width(), c.height()), (480, 320));
        assert!(c.pixels.iter().any(|&v| v != 255));
        let b = bar_chart("RFS", &[("BASE".into(), -0.1), ("RIA".into(), 0.2)]);
        assert!(b.pixels.iter().any(|&v| v != 255));
    }
}
