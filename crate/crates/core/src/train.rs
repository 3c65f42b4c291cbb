//! Universal training in the aggregate landmark space, then per-category
//! finetuning of copies of the universal model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_crop, mirror_crop, Dataset, InstanceAnnotation};
use crate::error::{Error, Result};
use crate::heatmap::{encode_gaussian, hflip_stack, HeatmapStack};
use crate::model::{batch_gradient, forward, loss, sgd_step, ModelShape, ModelWeights};
use crate::par::{self, Execution};
use crate::schema::Schema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Chance that a training sample is replaced by its mirror image.
    pub hflip_train_prob: f64,
    pub seed: u64,
    /// Target Gaussian width in heatmap cells.
    pub sigma: f64,
    pub input_width: usize,
    pub input_height: usize,
    pub hidden: usize,
    /// Crop padding on each side, as a fraction of the box size.
    pub pad_ratio: f64,
    /// Finetuning runs at `learning_rate * finetune_lr_scale`.
    pub finetune_lr_scale: f64,
    /// Finetuning epochs; `None` reuses `epochs`.
    pub finetune_epochs: Option<usize>,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            momentum: 0.9,
            batch_size: 16,
            epochs: 20,
            hflip_train_prob: 0.0,
            seed: 0,
            sigma: 1.0,
            input_width: 48,
            input_height: 64,
            hidden: 128,
            pad_ratio: 0.25,
            finetune_lr_scale: 0.1,
            finetune_epochs: None,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.hflip_train_prob) {
            return bad(format!("hflip_train_prob {} must be in [0, 1]", self.hflip_train_prob));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be > 0", self.sigma));
        }
        if !(self.pad_ratio >= 0.0 && self.pad_ratio.is_finite()) {
            return bad(format!("pad_ratio {} must be >= 0", self.pad_ratio));
        }
        if !(self.finetune_lr_scale >= 0.0 && self.finetune_lr_scale.is_finite()) {
            return bad(format!("finetune_lr_scale {} must be >= 0", self.finetune_lr_scale));
        }
        self.model_shape(1).map(|_| ())
    }

    pub fn model_shape(&self, channels: usize) -> Result<ModelShape> {
        ModelShape::new(self.input_width, self.input_height, self.hidden, channels)
    }

    pub fn finetune_lr(&self) -> f64 {
        self.learning_rate * self.finetune_lr_scale
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let cfg: TrainConfig = crate::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// A crop with its aggregate-space target, ready for SGD.
#[derive(Debug, Clone)]
pub struct Sample {
    pub instance_id: u64,
    pub category_id: u32,
    pub crop: Vec<f32>,
    pub target: HeatmapStack,
}

/// Precomputed samples plus a record of which annotations were loaded.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
    pub input_width: usize,
    pub flip_perm: Vec<usize>,
    /// Instance ids in the order their pixels were read.
    pub loaded: Vec<u64>,
}

impl TrainingSet {
    /// Crops every annotation accepted by `keep`; nothing else is read.
    pub fn build(
        dataset: &Dataset,
        schema: &Schema,
        cfg: &TrainConfig,
        keep: impl Fn(&InstanceAnnotation) -> bool,
    ) -> Result<TrainingSet> {
        let chosen: Vec<&InstanceAnnotation> = dataset.annotations.iter().filter(|a| keep(a)).collect();
        let samples = par::map_with(cfg.execution, &chosen, |ann| build_sample(dataset, schema, cfg, ann))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let loaded = samples.iter().map(|s| s.instance_id).collect();
        Ok(TrainingSet {
            samples,
            input_width: cfg.input_width,
            flip_perm: schema.flip_permutation(),
            loaded,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The sample or, when `flipped`, its mirror with flip-permuted targets.
    fn view(&self, index: usize, flipped: bool) -> Result<(Vec<f32>, HeatmapStack)> {
        let s = &self.samples[index];
        if flipped {
            Ok((
                mirror_crop(&s.crop, self.input_width),
                hflip_stack(&s.target, &self.flip_perm)?,
            ))
        } else {
            Ok((s.crop.clone(), s.target.clone()))
        }
    }
}

fn build_sample(dataset: &Dataset, schema: &Schema, cfg: &TrainConfig, ann: &InstanceAnnotation) -> Result<Sample> {
    let image = dataset
        .image(ann.image_id)
        .ok_or_else(|| Error::Missing(format!("instance {} refers to missing image {}", ann.id, ann.image_id)))?;
    let crop = make_crop(image, &ann.bbox, (cfg.input_width, cfg.input_height), cfg.pad_ratio)?;
    let projected = schema.project_annotation(ann)?;
    let target = encode_gaussian(&projected, &crop.transform, cfg.sigma)?;
    Ok(Sample {
        instance_id: ann.id,
        category_id: ann.category_id,
        crop: crop.pixels,
        target,
    })
}

/// Mean per-sample loss of `weights` over a set.
pub fn mean_loss(weights: &ModelWeights, set: &TrainingSet, exec: Execution) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Missing("cannot evaluate loss on an empty set".into()));
    }
    let losses = par::map_with(exec, &set.samples, |s| loss(&forward(weights, &s.crop)?, &s.target))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Numerical(format!("loss is {mean}")));
    }
    Ok(mean)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Entry 0 is the loss before any update; entry `e` is the mean batch
    /// loss seen during epoch `e`.
    pub trace: Vec<EpochLog>,
    /// Instances whose pixels were read for this run.
    pub loaded: Vec<u64>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    splitmix64(seed ^ splitmix64(epoch as u64))
}

/// Well-mixed 64-bit hash, used to derive independent seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Minibatch momentum SGD starting from `init`. `on_epoch` sees the log
/// line and the weights after every epoch, including epoch 0.
///
/// Each epoch shuffles with its own seed, keeps the remainder as a short
/// batch and draws the mirror decisions from the same stream.
pub fn train_from(
    init: ModelWeights,
    set: &TrainingSet,
    cfg: &TrainConfig,
    lr: f64,
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochLog, &ModelWeights) -> Result<()>,
) -> Result<TrainOutcome> {
    if set.is_empty() {
        return Err(Error::Missing("no training instances".into()));
    }
    let mut weights = init;
    let mut velocity = ModelWeights::zeros(weights.shape);
    let initial = EpochLog {
        epoch: 0,
        mean_loss: mean_loss(&weights, set, cfg.execution)?,
        lr,
    };
    on_epoch(&initial, &weights)?;
    let mut trace = vec![initial];
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 1..=epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let views = chunk
                .iter()
                .map(|&i| {
                    let flipped = cfg.hflip_train_prob > 0.0 && rng.random::<f64>() < cfg.hflip_train_prob;
                    set.view(i, flipped)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<(&[f32], &HeatmapStack)> = views.iter().map(|(c, t)| (c.as_slice(), t)).collect();
            let (batch_loss, grad) = batch_gradient(&weights, &batch, cfg.execution)?;
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!("loss became {batch_loss} in epoch {epoch}")));
            }
            total += batch_loss * chunk.len() as f64;
            sgd_step(&mut weights, &grad, lr, cfg.momentum, &mut velocity);
        }
        if !weights.is_finite() {
            return Err(Error::Numerical(format!("weights diverged in epoch {epoch}")));
        }
        let log = EpochLog {
            epoch,
            mean_loss: total / set.len() as f64,
            lr,
        };
        on_epoch(&log, &weights)?;
        trace.push(log);
    }
    Ok(TrainOutcome {
        weights,
        trace,
        loaded: set.loaded.clone(),
    })
}

/// Trains a freshly initialized model on every instance of the dataset.
pub fn train_universal(dataset: &Dataset, schema: &Schema, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let set = TrainingSet::build(dataset, schema, cfg, |_| true)?;
    let init = ModelWeights::init(cfg.model_shape(schema.aggregate_count())?, cfg.seed);
    train_from(init, &set, cfg, cfg.learning_rate, cfg.epochs, |_, _| Ok(()))
}

/// Continues training a copy of `universal` on one category's instances.
pub fn finetune_category(
    universal: &ModelWeights,
    dataset: &Dataset,
    schema: &Schema,
    category_id: u32,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    schema.category(category_id)?;
    let expected = cfg.model_shape(schema.aggregate_count())?;
    if universal.shape != expected {
        return Err(Error::Shape(format!(
            "universal model is {:?}, configuration expects {expected:?}",
            universal.shape
        )));
    }
    let set = TrainingSet::build(dataset, schema, cfg, |a| a.category_id == category_id)?;
    if set.is_empty() {
        return Err(Error::Missing(format!("no instances of category {category_id}")));
    }
    let epochs = cfg.finetune_epochs.unwrap_or(cfg.epochs);
    train_from(universal.clone(), &set, cfg, cfg.finetune_lr(), epochs, |_, _| Ok(()))
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneSummary {
    pub models: BTreeMap<u32, TrainOutcome>,
    pub skipped: Vec<u32>,
    pub failed: Vec<(u32, String)>,
}

/// Finetunes one specialist per schema category present in the dataset.
///
/// Categories without instances are skipped with a warning; a failing
/// category is reported without stopping the others.
pub fn finetune_all(
    universal: &ModelWeights,
    dataset: &Dataset,
    schema: &Schema,
    cfg: &TrainConfig,
) -> FinetuneSummary {
    let mut summary = FinetuneSummary::default();
    let mut present = Vec::new();
    for id in schema.landmarks.category_ids() {
        if dataset.count_by_category(id) == 0 {
            log::warn!("category {id} has no training instances; skipping finetune");
            summary.skipped.push(id);
        } else {
            present.push(id);
        }
    }
    let results = par::map_with(cfg.execution, &present, |&id| {
        finetune_category(universal, dataset, schema, id, cfg)
    });
    for (id, result) in present.into_iter().zip(results) {
        match result {
            Ok(outcome) => {
                summary.models.insert(id, outcome);
            }
            Err(e) => summary.failed.push((id, e.to_string())),
        }
    }
    summary
}
