//! Bilinear resampling helpers shared by the generator, the baseline and
//! the scale-adaptation wrapper.
//!
//! Pixel `(row, col)` covers the unit square whose center sits at continuous
//! position `(row + 0.5, col + 0.5)`. Samples outside the raster clamp to the
//! nearest edge pixel.

use ndarray::Array2;

use crate::types::{TypeError, VelocityField};

/// Bilinear sample at continuous position `(x, y)`, edge-clamped.
pub fn sample_bilinear(img: &Array2<f32>, x: f64, y: f64) -> f32 {
    let (h, w) = img.dim();
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    let top = img[[y0, x0]] as f64 * (1.0 - ax) + img[[y0, x1]] as f64 * ax;
    let bottom = img[[y1, x0]] as f64 * (1.0 - ax) + img[[y1, x1]] as f64 * ax;
    (top * (1.0 - ay) + bottom * ay) as f32
}

/// Resizes `img` to `(height, width)` by bilinear interpolation on pixel centers.
pub fn resize_bilinear(img: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    Array2::from_shape_fn((height, width), |(y, x)| {
        sample_bilinear(img, (x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy)
    })
}

/// Integer-factor upsampling.
pub fn upsample(img: &Array2<f32>, factor: usize) -> Array2<f32> {
    if factor == 1 {
        return img.clone();
    }
    let (h, w) = img.dim();
    resize_bilinear(img, h * factor, w * factor)
}

/// Integer-factor downsampling by block averaging. For a factor of two this
/// equals bilinear sampling at the coarse pixel centers.
pub fn downsample_mean(img: &Array2<f32>, factor: usize) -> Array2<f32> {
    if factor == 1 {
        return img.clone();
    }
    let (h, w) = img.dim();
    let norm = (factor * factor) as f64;
    Array2::from_shape_fn((h / factor, w / factor), |(y, x)| {
        let mut acc = 0.0f64;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += img[[y * factor + dy, x * factor + dx]] as f64;
            }
        }
        (acc / norm) as f32
    })
}

/// Pads the bottom and right edges by replicating the last row/column.
pub fn pad_edge(img: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((height, width), |(y, x)| img[[y.min(h - 1), x.min(w - 1)]])
}

pub fn crop(img: &Array2<f32>, top: usize, left: usize, height: usize, width: usize) -> Array2<f32> {
    img.slice(ndarray::s![top..top + height, left..left + width]).to_owned()
}

/// Upsamples a native field into coordinates `factor` times finer; values scale by `factor`.
pub fn upsample_field(field: &VelocityField, factor: usize) -> Result<VelocityField, TypeError> {
    let s = factor as f32;
    let u = upsample(field.u(), factor).mapv(|x| x * s);
    let v = upsample(field.v(), factor).mapv(|x| x * s);
    VelocityField::new(u, v, field.coordinate_scale() * s)
}

/// Inverse of [`upsample_field`]: block-average and divide values by `factor`.
pub fn downsample_field(field: &VelocityField, factor: usize) -> Result<VelocityField, TypeError> {
    let s = factor as f32;
    let u = downsample_mean(field.u(), factor).mapv(|x| x / s);
    let v = downsample_mean(field.v(), factor).mapv(|x| x / s);
    VelocityField::new(u, v, field.coordinate_scale() / s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_integer_sample_is_mean_of_neighbours() {
        let img = Array2::from_shape_fn((4, 4), |(_, x)| x as f32);
        assert!((sample_bilinear(&img, 2.0, 1.5) - 1.5).abs() < 1e-6);
    }

    #[test]
    fn upsample_then_downsample_constant_is_identity() {
        let f = VelocityField::constant(6, 10, 1.25, -0.5);
        let up = upsample_field(&f, 2).unwrap();
        assert_eq!(up.shape(), (12, 20));
        assert_eq!(up.coordinate_scale(), 2.0);
        assert!(up.u().iter().all(|&x| x == 2.5));
        let down = downsample_field(&up, 2).unwrap();
        assert_eq!(down, f);
    }

    #[test]
    fn linear_ramp_survives_upsampling_in_interior() {
        let img = Array2::from_shape_fn((8, 8), |(_, x)| x as f32);
        let up = upsample(&img, 2);
        // fine pixel 5 has center 5.5/2 = 2.75 in coarse units -> value 2.25
        assert!((up[[4, 5]] - 2.25).abs() < 1e-6);
    }

    #[test]
    fn pad_replicates_edges() {
        let img = Array2::from_shape_fn((2, 3), |(y, x)| (y * 3 + x) as f32);
        let p = pad_edge(&img, 4, 4);
        assert_eq!(p[[3, 3]], 5.0);
        assert_eq!(p[[0, 3]], 2.0);
    }
}
