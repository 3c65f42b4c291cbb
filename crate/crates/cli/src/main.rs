//! `clothmark` command-line driver.
//!
//! Every verb reads an experiment configuration (`--config file.json` or a
//! named `--preset`), applies the command-line overrides, writes its outputs
//! into `--out` and records a `manifest.json` next to them.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation error, 3 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use clothmark::dataset::deepfashion2::import_annotations;
use clothmark::dataset::{load_detections, save_detections, Dataset};
use clothmark::eval::{
    default_thresholds, evaluate, load_keypoint_detections, report_per_category, save_keypoint_detections,
    CategoryStats, EvalResult,
};
use clothmark::io::write_json;
use clothmark::model::{load_weights_for, save_weights, ModelWeights};
use clothmark::par::Execution;
use clothmark::pipeline::{
    aggregation_convergence, infer, run_ablation_suite, BoxSource, ExperimentConfig, InferConfig, InputDigest,
    Manifest, ModelSet,
};
use clothmark::schema::Schema;
use clothmark::train::{finetune_category, train_from, TrainConfig, TrainingSet};

#[derive(Parser)]
#[command(
    name = "clothmark",
    version,
    about = "Clothes landmark detection with landmark aggregation and per-category finetuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic training and validation sets.
    Synth(Common),
    /// Convert DeepFashion2-style annotation files into a dataset file.
    Import {
        #[command(flatten)]
        common: Common,
        /// Directory holding the annotation files (or an `annos/` subdirectory).
        #[arg(long)]
        root: PathBuf,
    },
    /// Train a universal model on every instance of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainOverrides,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finetune per-category specialists from a universal model.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainOverrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Categories to finetune; all categories with data when omitted.
        #[arg(long = "category")]
        categories: Vec<u32>,
    },
    /// Predict landmarks for every box.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Universal model; repeat for an ensemble.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Category specialist as `ID=PATH`; repeatable.
        #[arg(long = "specialist")]
        specialists: Vec<String>,
        /// Detection boxes; ground-truth boxes when omitted.
        #[arg(long, conflicts_with = "jitter")]
        boxes: Option<PathBuf>,
        /// Use ground-truth boxes perturbed by this relative jitter.
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long, default_value_t = 0.0, requires = "jitter")]
        drop_rate: f64,
        /// Average with the mirrored crop.
        #[arg(long)]
        hflip_test: bool,
    },
    /// Score landmark detections against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detections: PathBuf,
    },
    /// Simulate a detector by jittering ground-truth boxes.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Relative jitter; the configuration's light jitter when omitted.
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long)]
        drop_rate: Option<f64>,
    },
    /// Run the full box / finetune / test-flip ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainOverrides,
        /// Also compare aggregated and per-category landmark spaces.
        #[arg(long)]
        convergence: bool,
    },
    /// Per-category table from two evaluation results.
    Report {
        #[command(flatten)]
        common: Common,
        /// Results without finetuning.
        #[arg(long)]
        without: PathBuf,
        /// Results with finetuning.
        #[arg(long)]
        with: PathBuf,
        /// Box-level results for the AP_box column.
        #[arg(long)]
        box_results: Option<PathBuf>,
        /// Training set, for the instance counts.
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Validation set, for the instance counts.
        #[arg(long)]
        val_data: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named configuration used when no file is given.
    #[arg(long, default_value = "imbalanced")]
    preset: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Built-in schema name or schema file.
    #[arg(long)]
    schema: Option<String>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Mirror probability during training.
    #[arg(long)]
    hflip_train: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.finetune_epochs {
            t.finetune_epochs = Some(v);
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.hidden {
            t.hidden = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.hflip_train {
            cfg.ensemble_hflip_train = vec![v];
        }
    }
}

/// The resolved configuration of one invocation plus the files it read.
struct Run {
    command: &'static str,
    cfg: ExperimentConfig,
    schema: Schema,
    out: PathBuf,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, common: &Common, train: Option<&TrainOverrides>) -> Result<Run> {
        let mut inputs = Vec::new();
        let mut cfg = match &common.config {
            Some(path) => {
                inputs.push(path.clone());
                clothmark::io::read_json::<ExperimentConfig>(path)?
            }
            None => ExperimentConfig::preset(&common.preset)
                .ok_or_else(|| clothmark::Error::Config(format!("unknown preset {:?}", common.preset)))?,
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(schema) = &common.schema {
            cfg.schema = schema.clone();
        }
        if common.sequential {
            cfg.train.execution = Execution::Sequential;
        }
        if let Some(t) = train {
            t.apply(&mut cfg);
        }
        cfg.validate()?;
        if clothmark::schema::Schema::builtin(&cfg.schema).is_none() {
            inputs.push(PathBuf::from(&cfg.schema));
        }
        let schema = cfg.schema()?;
        std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        Ok(Run {
            command,
            cfg,
            schema,
            out: common.out.clone(),
            inputs,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset(&mut self, path: &Path) -> Result<Dataset> {
        self.inputs.push(path.to_path_buf());
        let ds = Dataset::load(path)?;
        ds.validate(&self.schema)?;
        Ok(ds)
    }

    fn model(&mut self, path: &Path, cfg: &TrainConfig) -> Result<ModelWeights> {
        self.inputs.push(path.to_path_buf());
        let shape = cfg.model_shape(self.schema.aggregate_count())?;
        Ok(load_weights_for(path, &shape)?)
    }

    fn finish(self) -> Result<()> {
        let digests = self
            .inputs
            .iter()
            .map(|p| InputDigest::of_file(p))
            .collect::<clothmark::Result<Vec<_>>>()?;
        let config = serde_json::to_value(&self.cfg)?;
        Manifest::new(self.command, self.cfg.seed, config, digests).save(&self.path("manifest.json"))?;
        Ok(())
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let run = Run::start("synth", &common, None)?;
            let (train, val) = run.cfg.datasets(&run.schema)?;
            train.save(&run.path("train.json"), &run.schema)?;
            val.save(&run.path("val.json"), &run.schema)?;
            println!(
                "{} training and {} validation instances",
                train.annotations.len(),
                val.annotations.len()
            );
            run.finish()
        }
        Command::Import { common, root } => {
            let mut run = Run::start("import", &common, None)?;
            let ds = import_annotations(&root, &run.schema)?;
            ds.validate(&run.schema)?;
            ds.save(&run.path("dataset.json"), &run.schema)?;
            for entry in std::fs::read_dir(annos_dir(&root)).with_context(|| format!("listing {}", root.display()))? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "json") {
                    run.inputs.push(path);
                }
            }
            println!(
                "imported {} instances from {} images",
                ds.annotations.len(),
                ds.images.len()
            );
            run.finish()
        }
        Command::Train { common, train, data } => {
            let mut run = Run::start("train", &common, Some(&train))?;
            let ds = run.dataset(&data)?;
            let tcfg = run.cfg.member_config(0);
            let set = TrainingSet::build(&ds, &run.schema, &tcfg, |_| true)?;
            let init = ModelWeights::init(tcfg.model_shape(run.schema.aggregate_count())?, tcfg.seed);
            let outcome = train_from(init, &set, &tcfg, tcfg.learning_rate, tcfg.epochs, |log, _| {
                log::info!("epoch {} loss {:.6}", log.epoch, log.mean_loss);
                Ok(())
            })?;
            save_weights(&outcome.weights, &run.path("universal.cmkw"))?;
            write_json(&run.path("trace.json"), &outcome.trace)?;
            println!(
                "final training loss {:.6}",
                outcome.trace.last().map_or(f64::NAN, |l| l.mean_loss)
            );
            run.finish()
        }
        Command::Finetune {
            common,
            train,
            data,
            model,
            categories,
        } => {
            let mut run = Run::start("finetune", &common, Some(&train))?;
            let ds = run.dataset(&data)?;
            let tcfg = run.cfg.member_config(0);
            let universal = run.model(&model, &tcfg)?;
            let categories: Vec<u32> = if categories.is_empty() {
                run.schema
                    .landmarks
                    .category_ids()
                    .filter(|&c| ds.count_by_category(c) > 0)
                    .collect()
            } else {
                categories
            };
            for c in categories {
                let outcome = finetune_category(&universal, &ds, &run.schema, c, &tcfg)?;
                save_weights(&outcome.weights, &run.path(&format!("specialist-{c}.cmkw")))?;
                write_json(&run.path(&format!("trace-{c}.json")), &outcome.trace)?;
                println!(
                    "category {c}: final loss {:.6}",
                    outcome.trace.last().map_or(f64::NAN, |l| l.mean_loss)
                );
            }
            run.finish()
        }
        Command::Infer {
            common,
            data,
            models,
            specialists,
            boxes,
            jitter,
            drop_rate,
            hflip_test,
        } => {
            let mut run = Run::start("infer", &common, None)?;
            let ds = run.dataset(&data)?;
            let tcfg = run.cfg.train.clone();
            let mut set = ModelSet::default();
            for path in &models {
                set.universal.push(run.model(path, &tcfg)?);
            }
            for spec in &specialists {
                let (id, path) = parse_specialist(spec)?;
                let w = run.model(&path, &tcfg)?;
                set.specialists.entry(id).or_default().push(w);
            }
            let source = match (boxes, jitter) {
                (Some(path), _) => {
                    run.inputs.push(path.clone());
                    BoxSource::Detections {
                        boxes: load_detections(&path)?,
                    }
                }
                (None, Some(jitter)) => BoxSource::Perturbed {
                    jitter,
                    drop_rate,
                    seed: run.cfg.derived_seed(10),
                },
                (None, None) => BoxSource::Gt,
            };
            let icfg = InferConfig {
                hflip_test,
                ..InferConfig::from(&tcfg)
            };
            let dets = infer(&set, &ds, &source.resolve(&ds)?, &run.schema, &icfg)?;
            save_keypoint_detections(&run.path("detections.json"), &dets)?;
            println!("{} detections", dets.len());
            run.finish()
        }
        Command::Eval {
            common,
            data,
            detections,
        } => {
            let mut run = Run::start("eval", &common, None)?;
            let ds = run.dataset(&data)?;
            run.inputs.push(detections.clone());
            let dets = load_keypoint_detections(&detections)?;
            let result = evaluate(&dets, &ds.annotations, &run.schema, &default_thresholds())?;
            result.save(&run.path("results.json"))?;
            println!("AP {:.4}", result.overall_ap);
            for c in &result.per_category {
                println!(
                    "  category {}: AP {:.4} ({} gt, {} det)",
                    c.category_id, c.ap, c.n_gt, c.n_det
                );
            }
            run.finish()
        }
        Command::Perturb {
            common,
            data,
            jitter,
            drop_rate,
        } => {
            let mut run = Run::start("perturb", &common, None)?;
            let ds = run.dataset(&data)?;
            let source = BoxSource::Perturbed {
                jitter: jitter.unwrap_or(run.cfg.light_jitter),
                drop_rate: drop_rate.unwrap_or(run.cfg.box_drop_rate),
                seed: run.cfg.derived_seed(10),
            };
            let boxes = source.resolve(&ds)?;
            save_detections(&run.path("boxes.json"), &boxes)?;
            println!("{} boxes", boxes.len());
            run.finish()
        }
        Command::Ablate {
            common,
            train,
            convergence,
        } => {
            let run = Run::start("ablate", &common, Some(&train))?;
            let outcome = run_ablation_suite(&run.cfg)?;
            let grid: Vec<_> = outcome
                .points
                .iter()
                .zip(&outcome.results)
                .map(|(p, r)| json!({ "point": p, "result": r }))
                .collect();
            write_json(
                &run.path("results.json"),
                &json!({ "report": outcome.report.json, "grid": grid }),
            )?;
            std::fs::write(run.path("report.txt"), &outcome.report.text)
                .with_context(|| format!("writing {}", run.path("report.txt").display()))?;
            print!("{}", outcome.report.text);
            if convergence {
                let c = aggregation_convergence(&run.cfg)?;
                write_json(&run.path("convergence.json"), &c)?;
                println!(
                    "epochs to target: aggregated {}, disjoint {}",
                    c.epochs_aggregated, c.epochs_disjoint
                );
            }
            run.finish()
        }
        Command::Report {
            common,
            without,
            with,
            box_results,
            train_data,
            val_data,
        } => {
            let mut run = Run::start("report", &common, None)?;
            let mut load = |path: &Path| -> Result<EvalResult> {
                run.inputs.push(path.to_path_buf());
                Ok(EvalResult::load(path)?)
            };
            let without = load(&without)?;
            let with = load(&with)?;
            let boxes = box_results.as_deref().map(&mut load).transpose()?;
            let train = train_data.as_deref().map(|p| run.dataset(p)).transpose()?;
            let val = val_data.as_deref().map(|p| run.dataset(p)).transpose()?;
            let stats: Vec<CategoryStats> = run
                .schema
                .landmarks
                .category_ids()
                .filter(|_| train.is_some() || val.is_some())
                .map(|id| CategoryStats {
                    category_id: id,
                    n_train: train.as_ref().map_or(0, |d| d.count_by_category(id)),
                    n_val: val.as_ref().map_or(0, |d| d.count_by_category(id)),
                })
                .collect();
            let table = report_per_category(&run.schema, &stats, &without, &with, boxes.as_ref());
            write_json(&run.path("report.json"), &table.json)?;
            std::fs::write(run.path("report.txt"), &table.text)
                .with_context(|| format!("writing {}", run.path("report.txt").display()))?;
            print!("{}", table.text);
            run.finish()
        }
    }
}

fn annos_dir(root: &Path) -> PathBuf {
    let nested = root.join("annos");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn parse_specialist(spec: &str) -> Result<(u32, PathBuf)> {
    let (id, path) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("specialist {spec:?} is not ID=PATH"))?;
    let id = id
        .trim()
        .parse()
        .with_context(|| format!("bad category id in {spec:?}"))?;
    if path.is_empty() {
        bail!("specialist {spec:?} has an empty path");
    }
    Ok((id, PathBuf::from(path)))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<clothmark::Error>().is_some_and(|e| e.is_numerical()));
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
