//! One-hidden-layer heatmap regressor with hand-written backpropagation.
//!
//! `h = relu(W1 x + b1)`, `y = W2 h + b2`, with `y` reshaped to
//! `(channels, H_in / 4, W_in / 4)`. The loss is the mean squared error over
//! the pixels of supervised channels only.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{HeatmapStack, OUTPUT_STRIDE};
use crate::par::{self, Execution};

const MAGIC: &[u8; 4] = b"CMKW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_width: usize,
    pub input_height: usize,
    pub hidden: usize,
    pub channels: usize,
}

impl ModelShape {
    pub fn new(input_width: usize, input_height: usize, hidden: usize, channels: usize) -> Result<Self> {
        let shape = ModelShape {
            input_width,
            input_height,
            hidden,
            channels,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.input_height == 0 || self.hidden == 0 || self.channels == 0 {
            return Err(Error::Shape(format!("zero dimension in {self:?}")));
        }
        if !self.input_width.is_multiple_of(OUTPUT_STRIDE) || !self.input_height.is_multiple_of(OUTPUT_STRIDE) {
            return Err(Error::Shape(format!(
                "input {}x{} must be divisible by {OUTPUT_STRIDE}",
                self.input_width, self.input_height
            )));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_width * self.input_height
    }

    pub fn output_width(&self) -> usize {
        self.input_width / OUTPUT_STRIDE
    }

    pub fn output_height(&self) -> usize {
        self.input_height / OUTPUT_STRIDE
    }

    pub fn plane_len(&self) -> usize {
        self.output_width() * self.output_height()
    }

    pub fn output_len(&self) -> usize {
        self.channels * self.plane_len()
    }
}

/// Parameters of the regressor; gradients and momentum buffers share the type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub shape: ModelShape,
    /// `hidden x input_len`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `output_len x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Anything that maps a crop to a heatmap stack.
pub trait HeatmapModel: Send + Sync {
    fn shape(&self) -> ModelShape;
    fn forward(&self, crop: &[f32]) -> Result<HeatmapStack>;
}

impl HeatmapModel for ModelWeights {
    fn shape(&self) -> ModelShape {
        self.shape
    }

    fn forward(&self, crop: &[f32]) -> Result<HeatmapStack> {
        forward(self, crop)
    }
}

impl ModelWeights {
    pub fn zeros(shape: ModelShape) -> Self {
        ModelWeights {
            shape,
            w1: vec![0.0; shape.hidden * shape.input_len()],
            b1: vec![0.0; shape.hidden],
            w2: vec![0.0; shape.output_len() * shape.hidden],
            b2: vec![0.0; shape.output_len()],
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` per layer, zero biases.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights::zeros(shape);
        let l1 = (6.0 / (shape.input_len() + shape.hidden) as f64).sqrt();
        let l2 = (6.0 / (shape.hidden + shape.output_len()) as f64).sqrt();
        w.w1.iter_mut().for_each(|v| *v = rng.random_range(-l1..l1));
        w.w2.iter_mut().for_each(|v| *v = rng.random_range(-l2..l2));
        w
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_consistent(&self) -> Result<()> {
        let s = self.shape;
        let expected = [
            s.hidden * s.input_len(),
            s.hidden,
            s.output_len() * s.hidden,
            s.output_len(),
        ];
        let actual = self.tensors().map(|t| t.len());
        if actual != expected {
            return Err(Error::Shape(format!("tensor sizes {actual:?} do not match {s:?}")));
        }
        Ok(())
    }
}

fn check_input(shape: &ModelShape, crop: &[f32]) -> Result<()> {
    if crop.len() != shape.input_len() {
        return Err(Error::Shape(format!(
            "crop has {} pixels, model expects {}x{}",
            crop.len(),
            shape.input_width,
            shape.input_height
        )));
    }
    Ok(())
}

/// Nonzero input entries; crops are mostly background.
fn sparse_input(crop: &[f32]) -> Vec<(usize, f64)> {
    crop.iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, &v)| (i, f64::from(v)))
        .collect()
}

/// Hidden pre-activations and activations.
fn hidden_layer(weights: &ModelWeights, x: &[(usize, f64)]) -> (Vec<f64>, Vec<f64>) {
    let n = weights.shape.input_len();
    let pre: Vec<f64> = weights
        .w1
        .chunks_exact(n)
        .zip(&weights.b1)
        .map(|(row, b)| b + x.iter().map(|&(i, v)| row[i] * v).sum::<f64>())
        .collect();
    let act = pre.iter().map(|&a| a.max(0.0)).collect();
    (pre, act)
}

fn output_row(weights: &ModelWeights, row: usize, h: &[f64]) -> f64 {
    let k = weights.shape.hidden;
    let w = &weights.w2[row * k..(row + 1) * k];
    weights.b2[row] + w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
}

pub fn forward(weights: &ModelWeights, crop: &[f32]) -> Result<HeatmapStack> {
    let s = weights.shape;
    check_input(&s, crop)?;
    let (_, h) = hidden_layer(weights, &sparse_input(crop));
    let data = (0..s.output_len()).map(|r| output_row(weights, r, &h)).collect();
    HeatmapStack::from_data(s.channels, s.output_height(), s.output_width(), data)
}

/// Mean squared error over the pixels of the target's supervised channels.
/// No supervised channel means zero loss.
pub fn loss(pred: &HeatmapStack, target: &HeatmapStack) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs target {}x{}x{}",
            pred.channels, pred.height, pred.width, target.channels, target.height, target.width
        )));
    }
    let supervised: Vec<usize> = (0..target.channels).filter(|&c| target.supervised[c]).collect();
    if supervised.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = supervised
        .iter()
        .map(|&c| {
            pred.channel(c)
                .iter()
                .zip(target.channel(c))
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
        })
        .sum();
    Ok(sum / (supervised.len() * target.plane_len()) as f64)
}

/// Everything needed to add one sample's gradient into dense buffers.
///
/// Only supervised output rows and active hidden units carry gradient, so
/// the outer products are stored factored.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub loss: f64,
    input: Vec<(usize, f64)>,
    hidden: Vec<f64>,
    /// dL/d(pre-activation) per hidden unit.
    d_pre: Vec<f64>,
    /// (output row, dL/dy) for supervised rows.
    d_out: Vec<(usize, f64)>,
}

pub fn sample_gradient(weights: &ModelWeights, crop: &[f32], target: &HeatmapStack) -> Result<SampleGradient> {
    let s = weights.shape;
    check_input(&s, crop)?;
    if target.channels != s.channels || target.height != s.output_height() || target.width != s.output_width() {
        return Err(Error::Shape(format!(
            "target {}x{}x{} does not match model output {}x{}x{}",
            target.channels,
            target.height,
            target.width,
            s.channels,
            s.output_height(),
            s.output_width()
        )));
    }
    let input = sparse_input(crop);
    let (pre, hidden) = hidden_layer(weights, &input);
    let plane = s.plane_len();
    let supervised: Vec<usize> = (0..s.channels).filter(|&c| target.supervised[c]).collect();
    if supervised.is_empty() {
        return Ok(SampleGradient {
            loss: 0.0,
            input,
            hidden,
            d_pre: vec![0.0; s.hidden],
            d_out: Vec::new(),
        });
    }
    let norm = (supervised.len() * plane) as f64;
    let mut loss = 0.0;
    let mut d_out = Vec::with_capacity(supervised.len() * plane);
    for &c in &supervised {
        for p in 0..plane {
            let row = c * plane + p;
            let diff = output_row(weights, row, &hidden) - target.data[row];
            loss += diff * diff;
            d_out.push((row, 2.0 * diff / norm));
        }
    }
    let k = s.hidden;
    let mut d_hidden = vec![0.0; k];
    for &(row, g) in &d_out {
        let w = &weights.w2[row * k..(row + 1) * k];
        for (d, wv) in d_hidden.iter_mut().zip(w) {
            *d += g * wv;
        }
    }
    let d_pre = d_hidden
        .iter()
        .zip(&pre)
        .map(|(&d, &a)| if a > 0.0 { d } else { 0.0 })
        .collect();
    Ok(SampleGradient {
        loss: loss / norm,
        input,
        hidden,
        d_pre,
        d_out,
    })
}

/// Adds `scale` times each sample's gradient into `grad`, in sample order.
///
/// Work is split over rows of each tensor, so the result does not depend on
/// the execution mode.
pub fn accumulate(grad: &mut ModelWeights, samples: &[SampleGradient], scale: f64, exec: Execution) {
    let s = grad.shape;
    let (n, k) = (s.input_len(), s.hidden);
    {
        let rows: Vec<(usize, &mut [f64])> = grad.w1.chunks_exact_mut(n).enumerate().collect();
        par_rows(exec, rows, |h, row| {
            for sg in samples {
                let d = sg.d_pre[h] * scale;
                if d != 0.0 {
                    for &(i, v) in &sg.input {
                        row[i] += d * v;
                    }
                }
            }
        });
    }
    for sg in samples {
        for (b, d) in grad.b1.iter_mut().zip(&sg.d_pre) {
            *b += d * scale;
        }
        for &(row, g) in &sg.d_out {
            grad.b2[row] += g * scale;
        }
    }
    // Each sample touches only its supervised rows of W2.
    let rows: Vec<(usize, &mut [f64])> = grad.w2.chunks_exact_mut(k).enumerate().collect();
    let per_row: Vec<Vec<(usize, f64)>> = {
        let mut lists = vec![Vec::new(); s.output_len()];
        for (si, sg) in samples.iter().enumerate() {
            for &(row, g) in &sg.d_out {
                lists[row].push((si, g * scale));
            }
        }
        lists
    };
    par_rows(exec, rows, |r, row| {
        for &(si, g) in &per_row[r] {
            if g != 0.0 {
                for (w, hv) in row.iter_mut().zip(&samples[si].hidden) {
                    *w += g * hv;
                }
            }
        }
    });
}

fn par_rows<F>(exec: Execution, rows: Vec<(usize, &mut [f64])>, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        rows.into_par_iter().with_min_len(8).for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = exec;
    rows.into_iter().for_each(|(i, row)| f(i, row));
}

/// Exact gradient of [`loss`] with respect to every parameter.
pub fn gradient(weights: &ModelWeights, crop: &[f32], target: &HeatmapStack) -> Result<ModelWeights> {
    let sg = sample_gradient(weights, crop, target)?;
    let mut grad = ModelWeights::zeros(weights.shape);
    accumulate(&mut grad, std::slice::from_ref(&sg), 1.0, Execution::Sequential);
    Ok(grad)
}

/// Mean loss and mean gradient over a batch.
pub fn batch_gradient(
    weights: &ModelWeights,
    batch: &[(&[f32], &HeatmapStack)],
    exec: Execution,
) -> Result<(f64, ModelWeights)> {
    let samples = par::map_with(exec, batch, |(crop, target)| sample_gradient(weights, crop, target))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut grad = ModelWeights::zeros(weights.shape);
    if samples.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / samples.len() as f64;
    accumulate(&mut grad, &samples, scale, exec);
    let loss = samples.iter().map(|s| s.loss).sum::<f64>() * scale;
    Ok((loss, grad))
}

/// Momentum SGD: `v <- momentum * v - lr * g`, `w <- w + v`.
pub fn sgd_step(weights: &mut ModelWeights, grad: &ModelWeights, lr: f64, momentum: f64, velocity: &mut ModelWeights) {
    let grads = grad.tensors();
    for ((w, v), g) in weights.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grads) {
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi - lr * gi;
            *wi += *vi;
        }
    }
}

/// Little-endian file: magic `CMKW`, u32 version, u32 `input_width,
/// input_height, hidden, channels, output_width, output_height`, then
/// `W1, b1, W2, b2` as f64.
pub fn write_weights<W: Write>(mut out: W, weights: &ModelWeights) -> std::io::Result<()> {
    let s = weights.shape;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for dim in [
        s.input_width,
        s.input_height,
        s.hidden,
        s.channels,
        s.output_width(),
        s.output_height(),
    ] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    for t in weights.tensors() {
        for v in t {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_weights<R: Read>(mut input: R) -> Result<ModelWeights> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| Error::parse("weights", e))?;
    if bytes.len() < 32 {
        return Err(Error::parse(
            "weights",
            format!("file too short ({} bytes)", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::parse("weights", "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) as u32 != VERSION {
        return Err(Error::parse("weights", format!("unsupported version {}", word(0))));
    }
    let shape = ModelShape::new(word(1), word(2), word(3), word(4))?;
    if word(5) != shape.output_width() || word(6) != shape.output_height() {
        return Err(Error::Shape(format!(
            "header output {}x{} inconsistent with input {}x{}",
            word(5),
            word(6),
            shape.input_width,
            shape.input_height
        )));
    }
    let mut weights = ModelWeights::zeros(shape);
    let body = &bytes[32..];
    if body.len() != 8 * weights.param_count() {
        return Err(Error::Shape(format!(
            "payload holds {} values, header {shape:?} needs {}",
            body.len() / 8,
            weights.param_count()
        )));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in weights.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().expect("payload length checked");
        }
    }
    weights.check_consistent()?;
    Ok(weights)
}

pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_weights(&mut out, weights).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

/// Loads weights and checks them against the shape a run is configured for.
pub fn load_weights_for(path: &Path, expected: &ModelShape) -> Result<ModelWeights> {
    let w = load_weights(path)?;
    if w.shape != *expected {
        return Err(Error::Shape(format!(
            "{} holds a {:?} model, expected {expected:?}",
            path.display(),
            w.shape
        )));
    }
    Ok(w)
}
