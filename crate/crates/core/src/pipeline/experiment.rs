//! Synthetic experiment recipes: the box/finetune/test-time-flip ablation
//! grid and the aggregated-vs-disjoint convergence comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{infer, BoxSource, InferConfig, ModelSet};
use crate::dataset::synth::{synth_generate, SyntheticConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{default_thresholds, evaluate, evaluate_boxes, report_ablation, AblationRun, EvalResult, Table};
use crate::model::{forward, loss, ModelWeights};
use crate::par::Execution;
use crate::schema::Schema;
use crate::train::{finetune_category, splitmix64, train_from, train_universal, TrainConfig, TrainingSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Built-in schema name or path to a schema file.
    pub schema: String,
    pub train_data: SyntheticConfig,
    pub val_data: SyntheticConfig,
    pub train: TrainConfig,
    /// Box noise of the simulated light and heavy detectors.
    pub light_jitter: f64,
    pub heavy_jitter: f64,
    pub box_drop_rate: f64,
    /// One universal model per entry, trained with that mirror probability;
    /// inference averages over all of them.
    pub ensemble_hflip_train: Vec<f64>,
    /// Categories to finetune; empty means every category with data.
    pub finetune_categories: Vec<u32>,
    /// Convergence target as a fraction of the all-zero predictor's loss.
    pub convergence_target: f64,
    pub convergence_max_epochs: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::imbalanced()
    }
}

type Preset = (&'static str, fn() -> ExperimentConfig);

/// Named presets for the CLI and the test suite.
pub const PRESETS: &[Preset] = &[
    ("imbalanced", ExperimentConfig::imbalanced),
    ("smoke", ExperimentConfig::smoke),
];

impl ExperimentConfig {
    /// A rich category, a mid-sized one and a poor one at about 50:1.
    pub fn imbalanced() -> Self {
        let train_data = SyntheticConfig {
            landmark_jitter: 0.0,
            ..SyntheticConfig::with_counts([(1, 1000), (2, 150), (3, 20)])
        };
        let val_data = SyntheticConfig {
            landmark_jitter: 0.0,
            first_image_id: 1_000_001,
            ..SyntheticConfig::with_counts([(1, 60), (2, 60), (3, 60)])
        };
        ExperimentConfig {
            schema: "garments3".into(),
            train_data,
            val_data,
            train: TrainConfig {
                hidden: 64,
                epochs: 20,
                finetune_epochs: Some(30),
                ..TrainConfig::default()
            },
            light_jitter: 0.02,
            heavy_jitter: 0.06,
            box_drop_rate: 0.0,
            ensemble_hflip_train: vec![0.0],
            finetune_categories: Vec::new(),
            convergence_target: 0.25,
            convergence_max_epochs: 12,
            seed: 0,
        }
    }

    /// Seconds-scale configuration for smoke tests.
    pub fn smoke() -> Self {
        let base = ExperimentConfig::imbalanced();
        ExperimentConfig {
            train_data: SyntheticConfig {
                image_width: 48,
                image_height: 48,
                ..SyntheticConfig::with_counts([(1, 24), (2, 8), (3, 4)])
            },
            val_data: SyntheticConfig {
                image_width: 48,
                image_height: 48,
                first_image_id: 1_000_001,
                ..SyntheticConfig::with_counts([(1, 6), (2, 6), (3, 6)])
            },
            train: TrainConfig {
                input_width: 16,
                input_height: 24,
                hidden: 8,
                epochs: 2,
                finetune_epochs: Some(2),
                ..base.train.clone()
            },
            convergence_max_epochs: 3,
            ..base
        }
    }

    pub fn preset(name: &str) -> Option<ExperimentConfig> {
        PRESETS.iter().find(|(n, _)| *n == name).map(|(_, f)| f())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for j in [self.light_jitter, self.heavy_jitter] {
            if !(j >= 0.0 && j.is_finite()) {
                return Err(Error::Config(format!("box jitter {j} must be >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.box_drop_rate) {
            return Err(Error::Config(format!(
                "box_drop_rate {} must be in [0, 1)",
                self.box_drop_rate
            )));
        }
        if self.ensemble_hflip_train.is_empty() {
            return Err(Error::Config("ensemble_hflip_train needs at least one entry".into()));
        }
        if !(self.convergence_target > 0.0 && self.convergence_target < 1.0) {
            return Err(Error::Config(format!(
                "convergence_target {} must be in (0, 1)",
                self.convergence_target
            )));
        }
        Ok(())
    }

    /// Independent seed for one use within the experiment.
    pub fn derived_seed(&self, purpose: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(purpose))
    }

    pub fn schema(&self) -> Result<Schema> {
        Schema::resolve(&self.schema)
    }

    /// Training and validation sets for this seed.
    pub fn datasets(&self, schema: &Schema) -> Result<(Dataset, Dataset)> {
        let train = synth_generate(schema, &self.train_data, self.derived_seed(1))?;
        let val = synth_generate(schema, &self.val_data, self.derived_seed(2))?;
        Ok((train, val))
    }

    /// Training settings of one universal ensemble member.
    pub fn member_config(&self, member: usize) -> TrainConfig {
        TrainConfig {
            hflip_train_prob: self.ensemble_hflip_train[member],
            seed: self.derived_seed(100 + member as u64),
            ..self.train.clone()
        }
    }
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GridPoint {
    /// "gt", "light" or "heavy".
    pub boxes: &'static str,
    pub finetune: bool,
    pub hflip_test: bool,
}

impl GridPoint {
    pub fn name(&self) -> String {
        format!(
            "{}{}{}",
            self.boxes,
            if self.finetune { "+ft" } else { "" },
            if self.hflip_test { "+tta" } else { "" }
        )
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub points: Vec<GridPoint>,
    pub results: Vec<EvalResult>,
    pub runs: Vec<AblationRun>,
    pub report: Table,
    pub models: ModelSet,
}

impl AblationOutcome {
    pub fn result(&self, boxes: &str, finetune: bool, hflip_test: bool) -> Option<&EvalResult> {
        self.points
            .iter()
            .position(|p| p.boxes == boxes && p.finetune == finetune && p.hflip_test == hflip_test)
            .map(|i| &self.results[i])
    }
}

/// Trains the ensemble and specialists, then evaluates the
/// {gt, light, heavy boxes} x {finetune} x {test-time flip} grid on the
/// validation set.
pub fn run_ablation_suite(cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    cfg.validate()?;
    let schema = cfg.schema()?;
    let (train, val) = cfg.datasets(&schema)?;
    let mut models = ModelSet::default();
    for member in 0..cfg.ensemble_hflip_train.len() {
        let tcfg = cfg.member_config(member);
        let universal = train_universal(&train, &schema, &tcfg)?.weights;
        let categories: Vec<u32> = if cfg.finetune_categories.is_empty() {
            schema.landmarks.category_ids().collect()
        } else {
            cfg.finetune_categories.clone()
        };
        for c in categories {
            if train.count_by_category(c) == 0 {
                log::warn!("category {c} has no training instances; no specialist");
                continue;
            }
            let ft = finetune_category(&universal, &train, &schema, c, &tcfg)?;
            models.specialists.entry(c).or_default().push(ft.weights);
        }
        models.universal.push(universal);
    }
    evaluate_grid(cfg, &schema, &val, models)
}

/// Evaluates given models over the ablation grid.
pub fn evaluate_grid(
    cfg: &ExperimentConfig,
    schema: &Schema,
    val: &Dataset,
    models: ModelSet,
) -> Result<AblationOutcome> {
    let sources = [
        ("gt", BoxSource::Gt),
        (
            "light",
            BoxSource::Perturbed {
                jitter: cfg.light_jitter,
                drop_rate: cfg.box_drop_rate,
                seed: cfg.derived_seed(10),
            },
        ),
        (
            "heavy",
            BoxSource::Perturbed {
                jitter: cfg.heavy_jitter,
                drop_rate: cfg.box_drop_rate,
                seed: cfg.derived_seed(11),
            },
        ),
    ];
    let universal_only = ModelSet {
        universal: models.universal.clone(),
        specialists: BTreeMap::new(),
    };
    let thresholds = default_thresholds();
    let mut points = Vec::new();
    let mut results = Vec::new();
    let mut runs = Vec::new();
    let any_hflip_train = cfg.ensemble_hflip_train.iter().any(|&p| p > 0.0);
    for (label, source) in &sources {
        let boxes = source.resolve(val)?;
        let ap_box = evaluate_boxes(&boxes, &val.annotations, &thresholds)?.overall_ap;
        for finetune in [false, true] {
            for hflip_test in [false, true] {
                let point = GridPoint {
                    boxes: label,
                    finetune,
                    hflip_test,
                };
                let set = if finetune { &models } else { &universal_only };
                let icfg = InferConfig {
                    hflip_test,
                    ..InferConfig::from(&cfg.train)
                };
                let dets = infer(set, val, &boxes, schema, &icfg)?;
                let result = evaluate(&dets, &val.annotations, schema, &thresholds)?;
                runs.push(AblationRun {
                    name: point.name(),
                    det_model: label.to_string(),
                    ap_box: Some(ap_box),
                    aggregation: true,
                    finetune,
                    hflip_train: any_hflip_train,
                    hflip_test,
                    ap_kps: result.overall_ap,
                });
                points.push(point);
                results.push(result);
            }
        }
    }
    let report = report_ablation(&runs);
    Ok(AblationOutcome {
        points,
        results,
        runs,
        report,
        models,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceOutcome {
    pub target_loss: f64,
    /// First epoch at or below the target; `max_epochs + 1` if never.
    pub epochs_aggregated: usize,
    pub epochs_disjoint: usize,
    pub val_loss_aggregated: Vec<f64>,
    pub val_loss_disjoint: Vec<f64>,
}

/// Trains the same network on the aggregated schema and on its
/// category-disjoint counterpart and counts the epochs each needs to bring
/// validation loss under a common target.
///
/// Both schemas supervise the same number of channels per instance with the
/// same Gaussians, so their losses are directly comparable; the target is a
/// fixed fraction of the loss of the all-zero predictor, which is identical
/// under both.
pub fn aggregation_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceOutcome> {
    cfg.validate()?;
    let aggregated = cfg.schema()?;
    let disjoint = aggregated.disjoint();
    let (train, val) = cfg.datasets(&aggregated)?;
    let tcfg = cfg.member_config(0);
    let zero_loss = {
        let set = TrainingSet::build(&val, &aggregated, &tcfg, |_| true)?;
        let zeros = ModelWeights::zeros(tcfg.model_shape(aggregated.aggregate_count())?);
        mean_val_loss(&zeros, &set, tcfg.execution)?
    };
    let target_loss = cfg.convergence_target * zero_loss;
    let curve = |schema: &Schema| -> Result<Vec<f64>> {
        let train_set = TrainingSet::build(&train, schema, &tcfg, |_| true)?;
        let val_set = TrainingSet::build(&val, schema, &tcfg, |_| true)?;
        let init = ModelWeights::init(tcfg.model_shape(schema.aggregate_count())?, tcfg.seed);
        let mut losses = Vec::new();
        train_from(
            init,
            &train_set,
            &tcfg,
            tcfg.learning_rate,
            cfg.convergence_max_epochs,
            |_, w| {
                losses.push(mean_val_loss(w, &val_set, tcfg.execution)?);
                Ok(())
            },
        )?;
        Ok(losses)
    };
    let first_below = |losses: &[f64]| {
        losses
            .iter()
            .position(|&l| l <= target_loss)
            .unwrap_or(cfg.convergence_max_epochs + 1)
    };
    let val_loss_aggregated = curve(&aggregated)?;
    let val_loss_disjoint = curve(&disjoint)?;
    Ok(ConvergenceOutcome {
        target_loss,
        epochs_aggregated: first_below(&val_loss_aggregated),
        epochs_disjoint: first_below(&val_loss_disjoint),
        val_loss_aggregated,
        val_loss_disjoint,
    })
}

fn mean_val_loss(w: &ModelWeights, set: &TrainingSet, exec: Execution) -> Result<f64> {
    let losses = crate::par::map_with(exec, &set.samples, |s| loss(&forward(w, &s.crop)?, &s.target))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for (name, make) in PRESETS {
            let cfg = make();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let json = serde_json::to_string(&cfg).unwrap();
            assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
        }
        assert!(ExperimentConfig::preset("nope").is_none());
    }

    #[test]
    fn smoke_suite_is_deterministic() {
        let cfg = ExperimentConfig::smoke();
        let a = run_ablation_suite(&cfg).unwrap();
        let b = run_ablation_suite(&cfg).unwrap();
        assert_eq!(a.runs.len(), 12);
        assert_eq!(a.report, b.report);
        assert_eq!(a.runs, b.runs);
        let gt = a.result("gt", false, false).unwrap();
        assert!((0.0..=1.0).contains(&gt.overall_ap));
    }

    #[test]
    fn smoke_convergence_runs() {
        let cfg = ExperimentConfig::smoke();
        let out = aggregation_convergence(&cfg).unwrap();
        assert_eq!(out.val_loss_aggregated.len(), cfg.convergence_max_epochs + 1);
        assert_eq!(out.val_loss_disjoint.len(), cfg.convergence_max_epochs + 1);
        assert!(out.target_loss > 0.0);
        // before training both start from a comparable loss scale
        assert!(out.val_loss_aggregated[0].is_finite() && out.val_loss_disjoint[0].is_finite());
    }
}
