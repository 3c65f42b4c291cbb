//! Two-stage inference (boxes, then landmarks per box) and the experiment
//! recipes built on it.

mod experiment;
mod manifest;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_crop, mirror_crop, perturb_boxes, Dataset, DetectionBox};
use crate::error::{Error, Result};
use crate::eval::KeypointDetection;
use crate::heatmap::{average_stacks, decode, hflip_stack};
use crate::model::{HeatmapModel, ModelWeights};
use crate::par::{self, Execution};
use crate::schema::Schema;
use crate::train::TrainConfig;

pub use experiment::{
    aggregation_convergence, evaluate_grid, run_ablation_suite, AblationOutcome, ConvergenceOutcome, ExperimentConfig,
    GridPoint, PRESETS,
};
pub use manifest::{content_hash, InputDigest, Manifest};

/// Where the per-instance boxes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BoxSource {
    Gt,
    Detections { boxes: Vec<DetectionBox> },
    Perturbed { jitter: f64, drop_rate: f64, seed: u64 },
}

impl BoxSource {
    pub fn resolve(&self, dataset: &Dataset) -> Result<Vec<DetectionBox>> {
        match self {
            BoxSource::Gt => Ok(dataset.gt_boxes()),
            BoxSource::Detections { boxes } => Ok(boxes.clone()),
            BoxSource::Perturbed {
                jitter,
                drop_rate,
                seed,
            } => perturb_boxes(&dataset.annotations, *jitter, *drop_rate, *seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub pad_ratio: f64,
    /// Also run the mirrored crop and average it back in.
    pub hflip_test: bool,
    pub execution: Execution,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig::from(&TrainConfig::default())
    }
}

impl From<&TrainConfig> for InferConfig {
    fn from(t: &TrainConfig) -> Self {
        InferConfig {
            input_width: t.input_width,
            input_height: t.input_height,
            pad_ratio: t.pad_ratio,
            hflip_test: false,
            execution: t.execution,
        }
    }
}

/// The universal ensemble plus optional per-category specialist ensembles.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub universal: Vec<ModelWeights>,
    pub specialists: BTreeMap<u32, Vec<ModelWeights>>,
}

impl ModelSet {
    pub fn single(model: ModelWeights) -> Self {
        ModelSet {
            universal: vec![model],
            specialists: BTreeMap::new(),
        }
    }

    fn for_category(&self, category_id: u32) -> Result<&[ModelWeights]> {
        let models = self
            .specialists
            .get(&category_id)
            .filter(|m| !m.is_empty())
            .map(Vec::as_slice)
            .unwrap_or(&self.universal);
        if models.is_empty() {
            return Err(Error::Missing(format!(
                "no model for category {category_id} and no universal fallback"
            )));
        }
        Ok(models)
    }

    fn check(&self, schema: &Schema, cfg: &InferConfig) -> Result<()> {
        for m in self.universal.iter().chain(self.specialists.values().flatten()) {
            let s = m.shape();
            if s.channels != schema.aggregate_count()
                || s.input_width != cfg.input_width
                || s.input_height != cfg.input_height
            {
                return Err(Error::Shape(format!(
                    "model {s:?} does not fit {} aggregates at {}x{}",
                    schema.aggregate_count(),
                    cfg.input_width,
                    cfg.input_height
                )));
            }
        }
        Ok(())
    }
}

/// Landmarks for every box, in box order.
///
/// Each box is cropped, run through every model of its category's ensemble
/// (and, with `hflip_test`, on the mirrored crop with the output flipped
/// back), averaged, decoded and read out in the box category's landmarks.
/// The instance score is the mean landmark score, clamped to `[0, 1]`.
pub fn infer(
    models: &ModelSet,
    dataset: &Dataset,
    boxes: &[DetectionBox],
    schema: &Schema,
    cfg: &InferConfig,
) -> Result<Vec<KeypointDetection>> {
    models.check(schema, cfg)?;
    let perm = schema.flip_permutation();
    let results = par::map_with(cfg.execution, boxes, |b| -> Result<KeypointDetection> {
        let image = dataset.image(b.image_id).ok_or_else(|| {
            Error::Missing(format!(
                "box refers to image {} which is not in the dataset",
                b.image_id
            ))
        })?;
        let ensemble = models.for_category(b.category_id)?;
        let crop = make_crop(image, &b.bbox, (cfg.input_width, cfg.input_height), cfg.pad_ratio)?;
        let mirrored = cfg.hflip_test.then(|| mirror_crop(&crop.pixels, cfg.input_width));
        let mut stacks = Vec::with_capacity(ensemble.len() * 2);
        for m in ensemble {
            stacks.push(m.forward(&crop.pixels)?);
            if let Some(mirrored) = &mirrored {
                stacks.push(hflip_stack(&m.forward(mirrored)?, &perm)?);
            }
        }
        let stack = average_stacks(&stacks)?;
        let peaks = schema.lift_prediction(&decode(&stack, &crop.transform), b.category_id)?;
        let keypoints: Vec<[f64; 3]> = peaks.iter().map(|p| [p.x, p.y, p.score]).collect();
        if keypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite prediction for image {}",
                b.image_id
            )));
        }
        let mean = peaks.iter().map(|p| p.score).sum::<f64>() / peaks.len().max(1) as f64;
        Ok(KeypointDetection {
            image_id: b.image_id,
            category_id: b.category_id,
            keypoints,
            score: mean.clamp(0.0, 1.0),
            bbox: Some(b.bbox),
        })
    });
    results.into_iter().collect()
}
