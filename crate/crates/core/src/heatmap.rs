//! Heatmap targets and read-out.
//!
//! Grid cell `g` of a stride-4 heatmap covers crop pixels `[4g, 4g + 4)`; its
//! center is crop coordinate `4g + 2`. A crop coordinate `xc` therefore sits at
//! grid coordinate `xc / 4 - 0.5`, which keeps left-right mirroring of the crop
//! (`xc -> W_in - xc`) and of the grid (`g -> W_out - 1 - g`) consistent.

use std::io::{Read, Write};
use std::path::Path;

use crate::dataset::CropTransform;
use crate::error::{Error, Result};
use crate::schema::AggregateKeypoints;

pub const OUTPUT_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major, then row-major.
    pub data: Vec<f64>,
    pub supervised: Vec<bool>,
}

/// A decoded landmark in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakPoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl HeatmapStack {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        HeatmapStack {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            supervised: vec![true; channels],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} stack",
                data.len()
            )));
        }
        Ok(HeatmapStack {
            channels,
            height,
            width,
            data,
            supervised: vec![true; channels],
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn same_shape(&self, other: &HeatmapStack) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

fn output_size(transform: &CropTransform) -> Result<(usize, usize)> {
    if !transform.width.is_multiple_of(OUTPUT_STRIDE) || !transform.height.is_multiple_of(OUTPUT_STRIDE) {
        return Err(Error::Shape(format!(
            "crop size {}x{} is not a multiple of the output stride {OUTPUT_STRIDE}",
            transform.width, transform.height
        )));
    }
    Ok((transform.width / OUTPUT_STRIDE, transform.height / OUTPUT_STRIDE))
}

/// Image point to heatmap grid coordinates.
pub fn image_to_grid(transform: &CropTransform, x: f64, y: f64) -> (f64, f64) {
    let (xc, yc) = transform.apply(x, y);
    let s = OUTPUT_STRIDE as f64;
    (xc / s - 0.5, yc / s - 0.5)
}

/// Heatmap grid coordinates back to an image point.
pub fn grid_to_image(transform: &CropTransform, gx: f64, gy: f64) -> (f64, f64) {
    let s = OUTPUT_STRIDE as f64;
    transform.invert((gx + 0.5) * s, (gy + 0.5) * s)
}

/// Unnormalized Gaussian targets, `sigma` in grid cells.
///
/// Labeled slots (v >= 1) get a peak at the keypoint; supervised slots with
/// v = 0 stay all-zero; unsupervised slots are zero and flagged off.
pub fn encode_gaussian(keypoints: &AggregateKeypoints, transform: &CropTransform, sigma: f64) -> Result<HeatmapStack> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma {sigma} must be > 0")));
    }
    let (w_out, h_out) = output_size(transform)?;
    let mut stack = HeatmapStack::zeros(keypoints.slots.len(), h_out, w_out);
    let denom = 2.0 * sigma * sigma;
    for (c, slot) in keypoints.slots.iter().enumerate() {
        let Some(kp) = slot else {
            stack.supervised[c] = false;
            continue;
        };
        if !kp.is_labeled() {
            continue;
        }
        let (mx, my) = image_to_grid(transform, kp.x, kp.y);
        let gx: Vec<f64> = (0..w_out)
            .map(|col| (-(col as f64 - mx).powi(2) / denom).exp())
            .collect();
        let plane = stack.channel_mut(c);
        for row in 0..h_out {
            let wy = (-(row as f64 - my).powi(2) / denom).exp();
            for (col, wx) in gx.iter().enumerate() {
                plane[row * w_out + col] = wy * wx;
            }
        }
    }
    Ok(stack)
}

fn quarter_shift(before: f64, after: f64) -> f64 {
    if after > before {
        0.25
    } else if before > after {
        -0.25
    } else {
        0.0
    }
}

/// Per-channel argmax with the quarter-cell refinement, in grid coordinates.
///
/// Ties for the maximum resolve to the first cell in row-major order. The
/// refinement moves a quarter cell toward the larger neighbor along each axis
/// and is skipped on ties and at the border.
pub fn decode_grid(stack: &HeatmapStack) -> Vec<PeakPoint> {
    let (h, w) = (stack.height, stack.width);
    (0..stack.channels)
        .map(|c| {
            let plane = stack.channel(c);
            let mut best = 0;
            for (k, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = k;
                }
            }
            let (row, col) = (best / w, best % w);
            let mut gx = col as f64;
            let mut gy = row as f64;
            if col > 0 && col + 1 < w {
                gx += quarter_shift(plane[best - 1], plane[best + 1]);
            }
            if row > 0 && row + 1 < h {
                gy += quarter_shift(plane[best - w], plane[best + w]);
            }
            PeakPoint {
                x: gx,
                y: gy,
                score: plane[best],
            }
        })
        .collect()
}

/// Decoded peaks mapped back to image coordinates.
pub fn decode(stack: &HeatmapStack, transform: &CropTransform) -> Vec<PeakPoint> {
    decode_grid(stack)
        .into_iter()
        .map(|p| {
            let (x, y) = grid_to_image(transform, p.x, p.y);
            PeakPoint { x, y, score: p.score }
        })
        .collect()
}

/// Mirrors every channel left-right and moves channel `a` to `perm[a]`.
pub fn hflip_stack(stack: &HeatmapStack, perm: &[usize]) -> Result<HeatmapStack> {
    if perm.len() != stack.channels {
        return Err(Error::Shape(format!(
            "flip permutation has {} entries for {} channels",
            perm.len(),
            stack.channels
        )));
    }
    let w = stack.width;
    let mut out = HeatmapStack::zeros(stack.channels, stack.height, w);
    for (a, &b) in perm.iter().enumerate() {
        let src = stack.channel(a);
        let dst = out.channel_mut(b);
        for (s_row, d_row) in src.chunks_exact(w).zip(dst.chunks_exact_mut(w)) {
            for (d, s) in d_row.iter_mut().zip(s_row.iter().rev()) {
                *d = *s;
            }
        }
        out.supervised[b] = stack.supervised[a];
    }
    Ok(out)
}

/// Element-wise mean. Computed as `first + mean(x - first)` so that
/// averaging identical stacks returns the stack bit-for-bit.
pub fn average_stacks(stacks: &[HeatmapStack]) -> Result<HeatmapStack> {
    let (first, rest) = stacks
        .split_first()
        .ok_or_else(|| Error::Shape("cannot average an empty list of stacks".into()))?;
    for s in rest {
        if !s.same_shape(first) || s.supervised != first.supervised {
            return Err(Error::Shape(format!(
                "stack {}x{}x{} does not match {}x{}x{}",
                s.channels, s.height, s.width, first.channels, first.height, first.width
            )));
        }
    }
    if rest.is_empty() {
        return Ok(first.clone());
    }
    let k = stacks.len() as f64;
    let mut out = first.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let base = *v;
        let offset: f64 = stacks.iter().map(|s| s.data[i] - base).sum();
        *v = base + offset / k;
    }
    Ok(out)
}

/// Binary layout: `channels, height, width` as little-endian u32, then the
/// values as row-major little-endian f32.
pub fn write_stack<W: Write>(mut out: W, stack: &HeatmapStack) -> std::io::Result<()> {
    for dim in [stack.channels, stack.height, stack.width] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in &stack.data {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_stack<R: Read>(mut input: R) -> Result<HeatmapStack> {
    let mut header = [0u8; 12];
    input
        .read_exact(&mut header)
        .map_err(|e| Error::parse("heatmap stack header", e))?;
    let dim = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (channels, height, width) = (dim(0), dim(1), dim(2));
    let mut body = Vec::new();
    input
        .read_to_end(&mut body)
        .map_err(|e| Error::parse("heatmap stack body", e))?;
    if body.len() != 4 * channels * height * width {
        return Err(Error::Shape(format!(
            "stack body has {} bytes, header {channels}x{height}x{width} needs {}",
            body.len(),
            4 * channels * height * width
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    HeatmapStack::from_data(channels, height, width, data)
}

pub fn save_stack(path: &Path, stack: &HeatmapStack) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_stack(&mut out, stack).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_stack(path: &Path) -> Result<HeatmapStack> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_stack(std::io::BufReader::new(file))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::Keypoint;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Crop with unit image->crop scale: grid (gx, gy) sits at image (4gx + 2, 4gy + 2).
    fn unit_crop(w_in: usize, h_in: usize) -> CropTransform {
        CropTransform::for_box(&[0.0, 0.0, w_in as f64, h_in as f64], w_in, h_in, 0.0).unwrap()
    }

    fn one_slot(x: f64, y: f64, v: u8) -> AggregateKeypoints {
        AggregateKeypoints {
            slots: vec![Some(Keypoint { x, y, v })],
        }
    }

    fn random_stack(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> HeatmapStack {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        HeatmapStack::from_data(c, h, w, data).unwrap()
    }

    #[test]
    fn on_grid_peak() {
        let t = unit_crop(64, 64);
        let s = encode_gaussian(&one_slot(4.0 * 5.0 + 2.0, 4.0 * 7.0 + 2.0, 2), &t, 2.0).unwrap();
        assert_eq!((s.width, s.height), (16, 16));
        assert_eq!(s.at(0, 7, 5), 1.0);
        let max = s.data.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn unlabeled_and_unsupervised_slots() {
        let t = unit_crop(32, 32);
        let agg = AggregateKeypoints {
            slots: vec![
                Some(Keypoint { x: 10.0, y: 10.0, v: 0 }),
                None,
                Some(Keypoint { x: 9.0, y: 3.0, v: 1 }),
            ],
        };
        let s = encode_gaussian(&agg, &t, 2.0).unwrap();
        assert!(s.channel(0).iter().all(|&v| v == 0.0));
        assert_eq!(s.supervised, vec![true, false, true]);
        assert!(s.channel(2).iter().any(|&v| v > 0.5));
    }

    #[test]
    fn gaussian_mass_matches_integral() {
        // 2*pi*sigma^2 for an on-grid peak well inside a 32x32 grid
        let t = unit_crop(128, 128);
        let s = encode_gaussian(&one_slot(4.0 * 16.0 + 2.0, 4.0 * 16.0 + 2.0, 2), &t, 2.0).unwrap();
        let sum: f64 = s.data.iter().sum();
        let expected = std::f64::consts::TAU * 4.0;
        assert!((sum - expected).abs() / expected < 0.02, "{sum} vs {expected}");
    }

    #[test]
    fn rejects_bad_sigma() {
        assert!(encode_gaussian(&one_slot(1.0, 1.0, 2), &unit_crop(16, 16), 0.0).is_err());
    }

    #[test]
    fn decode_examples() {
        let mut s = HeatmapStack::zeros(1, 12, 12);
        s.channel_mut(0)[7 * 12 + 5] = 1.0;
        let p = decode_grid(&s)[0];
        assert_eq!((p.x, p.y, p.score), (5.0, 7.0, 1.0));
        s.channel_mut(0)[7 * 12 + 6] = 0.5;
        let p = decode_grid(&s)[0];
        assert_eq!((p.x, p.y), (5.25, 7.0));
        // a border peak is never shifted
        let mut b = HeatmapStack::zeros(1, 4, 4);
        b.channel_mut(0)[0] = 1.0;
        b.channel_mut(0)[1] = 0.9;
        assert_eq!(decode_grid(&b)[0].x, 0.0);
    }

    #[test]
    fn decode_maps_through_inverse_transform() {
        let t = CropTransform::for_box(&[10.0, 20.0, 24.0, 32.0], 48, 64, 0.0).unwrap();
        let mut s = HeatmapStack::zeros(1, 16, 12);
        s.channel_mut(0)[3 * 12 + 2] = 1.0;
        let p = decode(&s, &t)[0];
        // grid (2, 3) -> crop (10, 14) -> image (10 + 5, 20 + 7)
        assert!((p.x - 15.0).abs() < 1e-12 && (p.y - 27.0).abs() < 1e-12);
    }

    /// Mean crop-pixel error of decode(encode(k)) over random keypoints two
    /// cells from the border, per axis and Euclidean.
    pub(crate) fn roundtrip_errors(seed: u64, n: usize) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = CropTransform::for_box(&[5.0, 9.0, 40.0, 52.0], 48, 64, 0.25).unwrap();
        let (mut axis, mut euclid) = (0.0, 0.0);
        for _ in 0..n {
            let gx = rng.random_range(2.0..9.0);
            let gy = rng.random_range(2.0..13.0);
            let (x, y) = grid_to_image(&t, gx, gy);
            let s = encode_gaussian(&one_slot(x, y, 2), &t, 2.0).unwrap();
            let p = decode(&s, &t)[0];
            let (cx, cy) = t.apply(p.x, p.y);
            let (ex, ey) = t.apply(x, y);
            axis += 0.5 * ((cx - ex).abs() + (cy - ey).abs());
            euclid += ((cx - ex).powi(2) + (cy - ey).powi(2)).sqrt();
        }
        (axis / n as f64, euclid / n as f64)
    }

    #[test]
    fn encode_decode_roundtrip_error() {
        // The quarter-cell rule leaves a residual uniform on [0, 1] crop px per
        // axis: E|e| = 0.5 and E||e|| = (sqrt(2) + ln(1 + sqrt(2))) / 3.
        let expected_euclid = (2f64.sqrt() + (1.0 + 2f64.sqrt()).ln()) / 3.0;
        let (axis, euclid) = roundtrip_errors(2024, 4000);
        assert!((axis - 0.5).abs() < 0.02, "per-axis {axis}");
        assert!((euclid - expected_euclid).abs() < 0.02, "euclidean {euclid}");
        // never worse than a quarter cell per axis
        let t = unit_crop(48, 64);
        let s = encode_gaussian(&one_slot(17.3, 30.9, 2), &t, 2.0).unwrap();
        let p = decode(&s, &t)[0];
        assert!((p.x - 17.3).abs() <= 1.0 && (p.y - 30.9).abs() <= 1.0);
    }

    #[test]
    fn flip_examples() {
        let mut s = HeatmapStack::zeros(2, 3, 5);
        s.channel_mut(0)[5 + 1] = 1.0;
        let f = hflip_stack(&s, &[1, 0]).unwrap();
        assert_eq!(f.at(1, 1, 3), 1.0);
        assert_eq!(f.channel(0).iter().sum::<f64>(), 0.0);
        let mut sym = HeatmapStack::zeros(1, 2, 4);
        sym.channel_mut(0)
            .copy_from_slice(&[1.0, 2.0, 2.0, 1.0, 0.5, 0.0, 0.0, 0.5]);
        assert_eq!(hflip_stack(&sym, &[0]).unwrap(), sym);
        assert!(hflip_stack(&s, &[0]).is_err());
    }

    #[test]
    fn average_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_stack(&mut rng, 3, 4, 5);
        assert_eq!(average_stacks(std::slice::from_ref(&s)).unwrap(), s);
        assert_eq!(average_stacks(&[s.clone(), s.clone(), s.clone()]).unwrap(), s);
        let mut neg = s.clone();
        neg.data.iter_mut().for_each(|v| *v = -*v);
        let zero = average_stacks(&[s.clone(), neg]).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        assert!(average_stacks(&[]).is_err());
        let other = random_stack(&mut rng, 3, 4, 4);
        assert!(average_stacks(&[s, other]).is_err());
    }

    #[test]
    fn binary_layout() {
        let s = HeatmapStack::from_data(1, 1, 2, vec![0.5, -2.0]).unwrap();
        let mut bytes = Vec::new();
        write_stack(&mut bytes, &s).unwrap();
        assert_eq!(&bytes[..12], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &0.5f32.to_le_bytes());
        assert_eq!(read_stack(bytes.as_slice()).unwrap(), s);
        assert!(read_stack(&bytes[..14]).is_err());
    }

    proptest! {
        #[test]
        fn hflip_is_involution(seed in any::<u64>(), c in 1usize..5, h in 1usize..6, w in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_stack(&mut rng, c, h, w);
            let mut perm: Vec<usize> = (0..c).collect();
            if c >= 2 { perm.swap(0, 1); }
            let twice = hflip_stack(&hflip_stack(&s, &perm).unwrap(), &perm).unwrap();
            prop_assert_eq!(twice, s);
        }

        #[test]
        fn decode_commutes_with_flip(seed in any::<u64>(), h in 1usize..8, w in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_stack(&mut rng, 3, h, w);
            let perm = [2, 1, 0];
            let plain = decode_grid(&s);
            let flipped = decode_grid(&hflip_stack(&s, &perm).unwrap());
            for a in 0..3 {
                let p = plain[a];
                let q = flipped[perm[a]];
                prop_assert_eq!(q.x, (w - 1) as f64 - p.x);
                prop_assert_eq!(q.y, p.y);
                prop_assert_eq!(q.score, p.score);
            }
        }

        #[test]
        fn average_is_order_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stacks: Vec<_> = (0..3).map(|_| random_stack(&mut rng, 2, 3, 3)).collect();
            let a = average_stacks(&stacks).unwrap();
            let b = average_stacks(&[stacks[2].clone(), stacks[0].clone(), stacks[1].clone()]).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
