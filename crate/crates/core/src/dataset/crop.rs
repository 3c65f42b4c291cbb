use crate::dataset::{BBox, ImageRecord};
use crate::error::{Error, Result};

/// Affine map from image coordinates to crop coordinates.
///
/// Both frames are continuous: pixel `(i, j)` covers `[j, j+1) x [i, i+1)`,
/// so its center sits at `(j + 0.5, i + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    /// Row-major `[[a, b, tx], [c, d, ty]]`.
    pub matrix: [[f64; 3]; 2],
    pub width: usize,
    pub height: usize,
}

impl CropTransform {
    /// Crop of `bbox` grown by `pad_ratio` of its size on every side.
    pub fn for_box(bbox: &BBox, width: usize, height: usize, pad_ratio: f64) -> Result<Self> {
        let [x, y, w, h] = *bbox;
        if !(w > 0.0 && h > 0.0) || !bbox.iter().all(|v| v.is_finite()) {
            return Err(Error::Shape(format!("degenerate crop box {bbox:?}")));
        }
        if !(pad_ratio >= 0.0 && pad_ratio.is_finite()) {
            return Err(Error::Config(format!("pad ratio {pad_ratio} must be >= 0")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        let x0 = x - pad_ratio * w;
        let y0 = y - pad_ratio * h;
        let sx = width as f64 / (w * (1.0 + 2.0 * pad_ratio));
        let sy = height as f64 / (h * (1.0 + 2.0 * pad_ratio));
        Ok(CropTransform {
            matrix: [[sx, 0.0, -sx * x0], [0.0, sy, -sy * y0]],
            width,
            height,
        })
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn invert(&self, xc: f64, yc: f64) -> (f64, f64) {
        let m = &self.matrix;
        let det = self.determinant();
        let (dx, dy) = (xc - m[0][2], yc - m[1][2]);
        ((m[1][1] * dx - m[0][1] * dy) / det, (m[0][0] * dy - m[1][0] * dx) / det)
    }
}

/// A resampled instance crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub pixels: Vec<f32>,
    pub transform: CropTransform,
}

/// Bilinear crop of `bbox` (padded) resized to `out_size = (width, height)`.
/// Samples outside the image read as zero.
pub fn make_crop(image: &ImageRecord, bbox: &BBox, out_size: (usize, usize), pad_ratio: f64) -> Result<Crop> {
    let transform = CropTransform::for_box(bbox, out_size.0, out_size.1, pad_ratio)?;
    let src = image.pixels()?;
    let (w, h) = (image.width as isize, image.height as isize);
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h || c >= w {
            0.0
        } else {
            f64::from(src[(r * w + c) as usize])
        }
    };
    let mut pixels = Vec::with_capacity(out_size.0 * out_size.1);
    for i in 0..out_size.1 {
        for j in 0..out_size.0 {
            let (u, v) = transform.invert(j as f64 + 0.5, i as f64 + 0.5);
            let (fx, fy) = (u - 0.5, v - 0.5);
            let (c0, r0) = (fx.floor(), fy.floor());
            let (tx, ty) = (fx - c0, fy - r0);
            let (c0, r0) = (c0 as isize, r0 as isize);
            let top = at(r0, c0) * (1.0 - tx) + at(r0, c0 + 1) * tx;
            let bottom = at(r0 + 1, c0) * (1.0 - tx) + at(r0 + 1, c0 + 1) * tx;
            let value = top * (1.0 - ty) + bottom * ty;
            pixels.push(value.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(Crop { pixels, transform })
}

/// Left-right mirror of a row-major `width`-wide grid.
pub fn mirror_crop<T: Copy>(pixels: &[T], width: usize) -> Vec<T> {
    pixels
        .chunks_exact(width)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}
