//! Static false-color figures: residual maps and quiver-over-magnitude plots.
//!
//! Colormap: piecewise-linear through five fixed stops (black, purple, red,
//! orange, pale yellow) at 0, 0.25, 0.5, 0.75, 1. Excluded pixels render
//! pure green. Each figure carries a colorbar with its scale maximum drawn
//! beside it and stored in the PNG `Scale` text chunk.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;

use crate::types::VelocityField;

pub type Rgb = [u8; 3];

const STOPS: [(f64, Rgb); 5] = [
    (0.0, [0, 0, 4]),
    (0.25, [87, 16, 110]),
    (0.5, [188, 55, 84]),
    (0.75, [249, 142, 9]),
    (1.0, [252, 255, 164]),
];

pub const INVALID_COLOR: Rgb = [0, 255, 0];
const BACKGROUND: Rgb = [255, 255, 255];

/// Maps `t` in `[0, 1]` onto the fixed colormap.
pub fn colormap(t: f64) -> Rgb {
    if !t.is_finite() {
        return INVALID_COLOR;
    }
    let t = t.clamp(0.0, 1.0);
    for pair in STOPS.windows(2) {
        let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
        if t <= t1 {
            let a = (t - t0) / (t1 - t0);
            let mix = |i: usize| (c0[i] as f64 + a * (c1[i] as f64 - c0[i] as f64)).round() as u8;
            return [mix(0), mix(1), mix(2)];
        }
    }
    STOPS[4].1
}

/// Simple owned RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
    pub scale_label: Option<String>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Self { width, height, pixels: vec![fill; width * height], scale_label: None }
    }

    pub fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let a = i as f64 / steps as f64;
            self.put((x0 + a * (x1 - x0)).round() as i64, (y0 + a * (y1 - y0)).round() as i64, c);
        }
    }

    fn blit(&mut self, other: &Canvas, ox: usize, oy: usize) {
        for y in 0..other.height {
            for x in 0..other.width {
                self.put((ox + x) as i64, (oy + y) as i64, other.get(x, y));
            }
        }
    }

    fn text(&mut self, s: &str, x: usize, y: usize, c: Rgb) {
        for (i, ch) in s.chars().enumerate() {
            let Some(rows) = glyph(ch) else { continue };
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if row & (0b100 >> dx) != 0 {
                        self.put((x + i * 4 + dx) as i64, (y + dy) as i64, c);
                    }
                }
            }
        }
    }

    /// Writes an 8-bit RGB PNG; the scale label goes into a `Scale` text chunk.
    pub fn save_png(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let file = File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(label) = &self.scale_label {
            enc.add_text_chunk("Scale".to_string(), label.clone()).map_err(std::io::Error::other)?;
        }
        let mut writer = enc.write_header().map_err(std::io::Error::other)?;
        let data: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        writer.write_image_data(&data).map_err(std::io::Error::other)?;
        writer.finish().map_err(std::io::Error::other)
    }
}

/// 3x5 bitmap glyphs for scale labels.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        _ => return None,
    })
}

fn zoom_for(h: usize, w: usize) -> usize {
    (256 / h.max(w).max(1)).max(1)
}

fn format_scale(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders `values / scale_max` through the colormap with a labelled colorbar.
pub fn scalar_figure(values: &Array2<f32>, scale_max: Option<f64>) -> Canvas {
    let (h, w) = values.dim();
    let zoom = zoom_for(h, w);
    let max = scale_max.unwrap_or_else(|| {
        values.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, &v| m.max(v as f64))
    });
    let denom = if max > 0.0 { max } else { 1.0 };
    let label = format_scale(max);
    let bar_x = w * zoom + 6;
    let width = bar_x + 8 + 4 + label.len() * 4;
    let mut canvas = Canvas::new(width, (h * zoom).max(12), BACKGROUND);
    for y in 0..h * zoom {
        for x in 0..w * zoom {
            let v = values[[y / zoom, x / zoom]];
            let c = if v.is_finite() { colormap(v as f64 / denom) } else { INVALID_COLOR };
            canvas.put(x as i64, y as i64, c);
        }
    }
    let bar_h = h * zoom;
    for y in 0..bar_h {
        let c = colormap(1.0 - y as f64 / (bar_h.max(2) - 1) as f64);
        for x in 0..8 {
            canvas.put((bar_x + x) as i64, y as i64, c);
        }
    }
    canvas.text(&label, bar_x + 12, 0, [0, 0, 0]);
    canvas.text("0", bar_x + 12, bar_h.saturating_sub(5), [0, 0, 0]);
    canvas.scale_label = Some(label);
    canvas
}

/// Residual map figure; excluded pixels (NaN) render green.
pub fn residual_figure(residual: &Array2<f32>, scale_max: Option<f64>) -> Canvas {
    scalar_figure(residual, scale_max)
}

/// Vectors every `stride` pixels drawn over the speed magnitude.
pub fn quiver_figure(field: &VelocityField, stride: usize, scale_max: Option<f64>) -> Canvas {
    let (h, w) = field.shape();
    let mag = ndarray::Zip::from(field.u()).and(field.v()).map_collect(|&u, &v| {
        let m = (u as f64).hypot(v as f64) as f32;
        if m.is_finite() && m <= crate::types::INVALID_FLOW_THRESHOLD {
            m
        } else {
            f32::NAN
        }
    });
    let max = scale_max.unwrap_or_else(|| mag.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, &v| m.max(v as f64)));
    let mut canvas = scalar_figure(&mag, Some(max));
    let zoom = zoom_for(h, w) as f64;
    let stride = stride.max(1);
    let arrow = if max > 0.0 { 0.9 * stride as f64 / max } else { 0.0 };
    for y in (stride / 2..h).step_by(stride) {
        for x in (stride / 2..w).step_by(stride) {
            let (u, v) = (field.u()[[y, x]] as f64, field.v()[[y, x]] as f64);
            if !mag[[y, x]].is_finite() {
                continue;
            }
            let p0 = ((x as f64 + 0.5) * zoom, (y as f64 + 0.5) * zoom);
            let p1 = (p0.0 + u * arrow * zoom, p0.1 + v * arrow * zoom);
            canvas.line(p0, p1, [255, 255, 255]);
            let len = (p1.0 - p0.0).hypot(p1.1 - p0.1);
            if len > 2.0 {
                let (dx, dy) = ((p1.0 - p0.0) / len, (p1.1 - p0.1) / len);
                let head = (len * 0.3).min(4.0 * zoom);
                for sign in [-1.0, 1.0] {
                    let (hx, hy) = (-dx * 0.866 - sign * dy * 0.5, -dy * 0.866 + sign * dx * 0.5);
                    canvas.line(p1, (p1.0 + hx * head, p1.1 + hy * head), [255, 255, 255]);
                }
            }
        }
    }
    canvas
}

/// Places canvases side by side with a 6 px gutter.
pub fn hstack(panels: &[Canvas]) -> Canvas {
    let width = panels.iter().map(|p| p.width).sum::<usize>() + 6 * panels.len().saturating_sub(1);
    let height = panels.iter().map(|p| p.height).max().unwrap_or(0);
    let mut out = Canvas::new(width.max(1), height.max(1), BACKGROUND);
    let mut x = 0;
    for p in panels {
        out.blit(p, x, 0);
        x += p.width + 6;
    }
    out.scale_label = Some(panels.iter().filter_map(|p| p.scale_label.clone()).collect::<Vec<_>>().join(" | "));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints_and_invalid() {
        assert_eq!(colormap(0.0), [0, 0, 4]);
        assert_eq!(colormap(1.0), [252, 255, 164]);
        assert_eq!(colormap(f64::NAN), INVALID_COLOR);
        assert_eq!(colormap(2.0), colormap(1.0));
    }

    #[test]
    fn residual_figure_marks_invalid_and_is_deterministic() {
        let mut r = Array2::from_shape_fn((32, 32), |(y, x)| (x + y) as f32 / 64.0);
        r[[0, 0]] = f32::NAN;
        let a = residual_figure(&r, None);
        assert_eq!(a.get(0, 0), INVALID_COLOR);
        assert_eq!(a, residual_figure(&r, None));
        assert!(a.scale_label.is_some());
    }

    #[test]
    fn png_carries_scale_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.png");
        let f = VelocityField::constant(16, 16, 1.0, 0.5);
        let c = quiver_figure(&f, 8, None);
        c.save_png(&p).unwrap();
        let decoder = png::Decoder::new(File::open(&p).unwrap());
        let reader = decoder.read_info().unwrap();
        let texts = &reader.info().uncompressed_latin1_text;
        assert!(texts.iter().any(|t| t.keyword == "Scale" && t.text == "1.118"));
        let panel = hstack(&[c.clone(), c]);
        assert!(panel.width > 2 * 16);
    }
}
