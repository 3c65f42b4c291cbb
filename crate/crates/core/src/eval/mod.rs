//! COCO-style average precision over object keypoint similarity (and over
//! box IoU for detector boxes).

mod report;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{bbox_area, bbox_iou, BBox, DetectionBox, InstanceAnnotation};
use crate::error::{Error, Result};
use crate::schema::Schema;

pub use report::{
    report_ablation, report_per_category, AblationRun, CategoryStats, PerCategoryRow, PerCategoryTable, Table,
};

/// COCO's ratio between segment area and box area.
pub const AREA_FACTOR: f64 = 0.53;

/// 0.50, 0.55, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Recall levels 0, 0.01, ..., 1.
pub fn recall_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// One predicted instance: local landmarks as `[x, y, score]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointDetection {
    pub image_id: u64,
    pub category_id: u32,
    pub keypoints: Vec<[f64; 3]>,
    pub score: f64,
    /// Box the landmarks were read from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

impl KeypointDetection {
    pub fn validate(&self) -> Result<()> {
        if !self.keypoints.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite keypoint in detection for image {}",
                self.image_id
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Numerical(format!(
                "instance score {} outside [0, 1] for image {}",
                self.score, self.image_id
            )));
        }
        Ok(())
    }
}

pub fn load_keypoint_detections(path: &Path) -> Result<Vec<KeypointDetection>> {
    let dets: Vec<KeypointDetection> = crate::io::read_json(path)?;
    for d in &dets {
        d.validate()?;
    }
    Ok(dets)
}

pub fn save_keypoint_detections(path: &Path, dets: &[KeypointDetection]) -> Result<()> {
    crate::io::write_json(path, &dets)
}

/// `sum_i exp(-d_i^2 / (2 s^2 k_i^2)) / n` over the `n` labeled ground-truth
/// landmarks, with `s^2 = 0.53 * box area`.
pub fn compute_oks(det: &[[f64; 3]], gt: &InstanceAnnotation, k: &[f64]) -> Result<f64> {
    if det.len() != gt.keypoints.len() || k.len() != gt.keypoints.len() {
        return Err(Error::Shape(format!(
            "{} detected and {} ground-truth landmarks with {} constants",
            det.len(),
            gt.keypoints.len(),
            k.len()
        )));
    }
    let s2 = bbox_area(&gt.bbox) * AREA_FACTOR;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((d, g), ki) in det.iter().zip(&gt.keypoints).zip(k) {
        if g.is_labeled() {
            let d2 = (d[0] - g.x).powi(2) + (d[1] - g.y).powi(2);
            sum += (-d2 / (2.0 * s2 * ki * ki)).exp();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Annotation {
            context: format!("instance {}", gt.id),
            detail: "no labeled landmarks to score".into(),
        });
    }
    Ok(sum / n as f64)
}

/// Precision/recall summary at one similarity threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPr {
    pub threshold: f64,
    pub ap: f64,
    /// Interpolated precision on [`recall_grid`].
    pub precision: Vec<f64>,
    /// Recall after all detections.
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category_id: u32,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
    #[serde(skip)]
    pub per_threshold: Vec<ThresholdPr>,
}

/// One detection's fate at one threshold; indices refer to the inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub threshold_index: usize,
    pub detection: usize,
    pub ground_truth: Option<usize>,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub overall_ap: f64,
    pub per_category: Vec<CategoryResult>,
    pub thresholds: Vec<f64>,
    /// Category means per threshold.
    pub per_threshold_pr: Vec<ThresholdPr>,
    #[serde(skip)]
    pub matches: Vec<MatchRecord>,
}

impl EvalResult {
    pub fn category_ap(&self, category_id: u32) -> Option<f64> {
        self.per_category
            .iter()
            .find(|c| c.category_id == category_id)
            .map(|c| c.ap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<EvalResult> {
        crate::io::read_json(path)
    }
}

/// Items of one category, with the pairwise similarity of same-image pairs.
struct CategoryProblem {
    det_indices: Vec<usize>,
    det_images: Vec<u64>,
    det_scores: Vec<f64>,
    gt_indices: Vec<usize>,
    gt_images: Vec<u64>,
    /// `sim[d][g]`, `None` across images.
    sim: Vec<Vec<Option<f64>>>,
}

/// Greedy matching at one threshold. Returns, per detection in score order,
/// `(detection position, matched gt position, similarity)`.
fn greedy_match(p: &CategoryProblem, order: &[usize], threshold: f64) -> Vec<(usize, Option<usize>, f64)> {
    let mut taken = vec![false; p.gt_indices.len()];
    order
        .iter()
        .map(|&d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, s) in p.sim[d].iter().enumerate() {
                let Some(s) = *s else { continue };
                if taken[g] || s < threshold {
                    continue;
                }
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((g, s));
                }
            }
            match best {
                Some((g, s)) => {
                    taken[g] = true;
                    (d, Some(g), s)
                }
                None => (d, None, 0.0),
            }
        })
        .collect()
}

/// 101-point interpolated AP from true-positive flags in score order.
pub fn interpolated_ap(tp: &[bool], n_gt: usize) -> (f64, Vec<f64>, f64) {
    let grid = recall_grid();
    if n_gt == 0 || tp.is_empty() {
        return (0.0, vec![0.0; grid.len()], 0.0);
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let interp: Vec<f64> = grid
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect();
    let ap = interp.iter().sum::<f64>() / grid.len() as f64;
    (ap, interp, *recall.last().unwrap())
}

fn evaluate_problems(problems: BTreeMap<u32, CategoryProblem>, thresholds: &[f64]) -> Result<EvalResult> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config(format!("invalid thresholds {thresholds:?}")));
    }
    let mut per_category = Vec::new();
    let mut matches = Vec::new();
    for (category_id, p) in problems {
        if p.gt_indices.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..p.det_indices.len()).collect();
        order.sort_by(|&a, &b| p.det_scores[b].total_cmp(&p.det_scores[a]));
        let mut per_threshold = Vec::with_capacity(thresholds.len());
        for (ti, &t) in thresholds.iter().enumerate() {
            let matched = greedy_match(&p, &order, t);
            let tp: Vec<bool> = matched.iter().map(|m| m.1.is_some()).collect();
            let (ap, precision, recall) = interpolated_ap(&tp, p.gt_indices.len());
            per_threshold.push(ThresholdPr {
                threshold: t,
                ap,
                precision,
                recall,
            });
            matches.extend(matched.into_iter().map(|(d, g, s)| MatchRecord {
                threshold_index: ti,
                detection: p.det_indices[d],
                ground_truth: g.map(|g| p.gt_indices[g]),
                similarity: s,
            }));
        }
        let ap = per_threshold.iter().map(|t| t.ap).sum::<f64>() / thresholds.len() as f64;
        per_category.push(CategoryResult {
            category_id,
            ap,
            n_gt: p.gt_indices.len(),
            n_det: p.det_indices.len(),
            per_threshold,
        });
    }
    if per_category.is_empty() {
        return Err(Error::Missing("no ground-truth instances to evaluate against".into()));
    }
    let n = per_category.len() as f64;
    let overall_ap = per_category.iter().map(|c| c.ap).sum::<f64>() / n;
    let per_threshold_pr = (0..thresholds.len())
        .map(|ti| {
            let grid_len = recall_grid().len();
            let mut precision = vec![0.0; grid_len];
            for c in &per_category {
                for (acc, v) in precision.iter_mut().zip(&c.per_threshold[ti].precision) {
                    *acc += v / n;
                }
            }
            ThresholdPr {
                threshold: thresholds[ti],
                ap: per_category.iter().map(|c| c.per_threshold[ti].ap).sum::<f64>() / n,
                precision,
                recall: per_category.iter().map(|c| c.per_threshold[ti].recall).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(EvalResult {
        overall_ap,
        per_category,
        thresholds: thresholds.to_vec(),
        per_threshold_pr,
        matches,
    })
}

/// Groups items by category; `sim(det, gt)` is only called for same-image pairs.
fn build_problems<D, G>(
    dets: &[D],
    gts: &[G],
    det_key: impl Fn(&D) -> (u32, u64, f64),
    gt_key: impl Fn(&G) -> (u32, u64),
    sim: impl Fn(&D, &G) -> Result<f64>,
) -> Result<BTreeMap<u32, CategoryProblem>> {
    let mut problems: BTreeMap<u32, CategoryProblem> = BTreeMap::new();
    let entry = |problems: &mut BTreeMap<u32, CategoryProblem>, c: u32| {
        problems.entry(c).or_insert_with(|| CategoryProblem {
            det_indices: Vec::new(),
            det_images: Vec::new(),
            det_scores: Vec::new(),
            gt_indices: Vec::new(),
            gt_images: Vec::new(),
            sim: Vec::new(),
        });
    };
    for (i, g) in gts.iter().enumerate() {
        let (c, image) = gt_key(g);
        entry(&mut problems, c);
        let p = problems.get_mut(&c).unwrap();
        p.gt_indices.push(i);
        p.gt_images.push(image);
    }
    for (i, d) in dets.iter().enumerate() {
        let (c, image, score) = det_key(d);
        if !score.is_finite() {
            return Err(Error::Numerical(format!("detection {i} has score {score}")));
        }
        entry(&mut problems, c);
        let p = problems.get_mut(&c).unwrap();
        let row = p
            .gt_indices
            .iter()
            .zip(&p.gt_images)
            .map(|(&gi, &gimg)| {
                if gimg == image {
                    sim(d, &gts[gi]).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        p.det_indices.push(i);
        p.det_images.push(image);
        p.det_scores.push(score);
        p.sim.push(row);
    }
    Ok(problems)
}

/// Keypoint AP. Ground truths without labeled landmarks are ignored; `k`
/// constants come from the schema.
pub fn evaluate(
    dets: &[KeypointDetection],
    gts: &[InstanceAnnotation],
    schema: &Schema,
    thresholds: &[f64],
) -> Result<EvalResult> {
    let scored: Vec<&InstanceAnnotation> = gts.iter().filter(|g| g.labeled_count() > 0).collect();
    let mut k_cache: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for c in schema.landmarks.category_ids() {
        k_cache.insert(c, schema.category_oks_k(c)?);
    }
    let k_for = |c: u32| {
        k_cache
            .get(&c)
            .ok_or_else(|| Error::Missing(format!("category {c} is not in the schema")))
    };
    let problems = build_problems(
        dets,
        &scored,
        |d| (d.category_id, d.image_id, d.score),
        |g| (g.category_id, g.image_id),
        |d, g| compute_oks(&d.keypoints, g, k_for(g.category_id)?),
    )?;
    let mut result = evaluate_problems(problems, thresholds)?;
    // Report ground-truth indices against the caller's list.
    let original: Vec<usize> = gts
        .iter()
        .enumerate()
        .filter(|(_, g)| g.labeled_count() > 0)
        .map(|(i, _)| i)
        .collect();
    for m in &mut result.matches {
        m.ground_truth = m.ground_truth.map(|g| original[g]);
    }
    Ok(result)
}

/// Box AP with IoU in place of OKS.
pub fn evaluate_boxes(dets: &[DetectionBox], gts: &[InstanceAnnotation], thresholds: &[f64]) -> Result<EvalResult> {
    let problems = build_problems(
        dets,
        gts,
        |d| (d.category_id, d.image_id, d.score),
        |g| (g.category_id, g.image_id),
        |d, g| Ok(bbox_iou(&d.bbox, &g.bbox)),
    )?;
    evaluate_problems(problems, thresholds)
}
