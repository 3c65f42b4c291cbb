//! Reference implementations used as test oracles. They are written from the
//! definitions, without sharing code paths with the library.
#![allow(dead_code)]

use clothmark::dataset::{InstanceAnnotation, Keypoint};
use clothmark::eval::KeypointDetection;
use clothmark::heatmap::HeatmapStack;
use clothmark::model::{forward, loss, ModelWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// OKS straight from the formula.
pub fn oks(det: &KeypointDetection, gt: &InstanceAnnotation, k: f64) -> f64 {
    let s2 = gt.bbox[2] * gt.bbox[3] * 0.53;
    let mut num = 0.0;
    let mut den = 0.0;
    for (d, g) in det.keypoints.iter().zip(&gt.keypoints) {
        if g.v > 0 {
            let d2 = (d[0] - g.x) * (d[0] - g.x) + (d[1] - g.y) * (d[1] - g.y);
            num += (-d2 / (2.0 * s2 * k * k)).exp();
            den += 1.0;
        }
    }
    num / den
}

/// Exhaustive matching: among all injective det -> gt assignments using only
/// same-image pairs at or above the threshold, the one whose sequence of
/// matched similarities (detections in score order, unmatched lowest) is
/// lexicographically largest.
/// Per-detection similarities and gt choices of the best assignment so far.
type Candidate = (Vec<Option<f64>>, Vec<Option<usize>>);

fn best_assignment(sim: &[Vec<Option<f64>>], n_gt: usize, threshold: f64) -> Vec<Option<usize>> {
    fn rec(
        d: usize,
        sim: &[Vec<Option<f64>>],
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        best: &mut Option<Candidate>,
        threshold: f64,
    ) {
        if d == sim.len() {
            let key: Vec<Option<f64>> = current
                .iter()
                .enumerate()
                .map(|(i, g)| g.map(|g| sim[i][g].unwrap()))
                .collect();
            let better = match best {
                None => true,
                Some((bk, _)) => lex_greater(&key, bk),
            };
            if better {
                *best = Some((key, current.clone()));
            }
            return;
        }
        for g in 0..used.len() {
            if let Some(s) = sim[d][g] {
                if !used[g] && s >= threshold {
                    used[g] = true;
                    current.push(Some(g));
                    rec(d + 1, sim, used, current, best, threshold);
                    current.pop();
                    used[g] = false;
                }
            }
        }
        current.push(None);
        rec(d + 1, sim, used, current, best, threshold);
        current.pop();
    }
    let mut best = None;
    rec(0, sim, &mut vec![false; n_gt], &mut Vec::new(), &mut best, threshold);
    best.map(|b| b.1).unwrap_or_default()
}

fn lex_greater(a: &[Option<f64>], b: &[Option<f64>]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (Some(x), Some(y)) if x != y => return x > y,
            (Some(_), None) => return true,
            (None, Some(_)) => return false,
            _ => {}
        }
    }
    false
}

/// Interpolated precision by definition: the best precision at any cutoff
/// whose recall reaches `r`, averaged over r = 0, 0.01, ..., 1.
fn ap_by_definition(tp: &[bool], n_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut hits = 0.0;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1.0;
        }
        points.push((hits / n_gt as f64, hits / (i + 1) as f64));
    }
    (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

/// Overall keypoint AP with a single OKS constant for every landmark.
pub fn brute_force_ap(dets: &[KeypointDetection], gts: &[InstanceAnnotation], k: f64, thresholds: &[f64]) -> f64 {
    let mut categories: Vec<u32> = gts
        .iter()
        .filter(|g| g.keypoints.iter().any(|p| p.v > 0))
        .map(|g| g.category_id)
        .collect();
    categories.sort_unstable();
    categories.dedup();
    let mut total = 0.0;
    for &c in &categories {
        let cg: Vec<&InstanceAnnotation> = gts
            .iter()
            .filter(|g| g.category_id == c && g.keypoints.iter().any(|p| p.v > 0))
            .collect();
        let mut cd: Vec<(usize, &KeypointDetection)> =
            dets.iter().enumerate().filter(|(_, d)| d.category_id == c).collect();
        // score descending, input order on ties
        cd.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
        let sim: Vec<Vec<Option<f64>>> = cd
            .iter()
            .map(|(_, d)| {
                cg.iter()
                    .map(|g| (g.image_id == d.image_id).then(|| oks(d, g, k)))
                    .collect()
            })
            .collect();
        let mut cat_ap = 0.0;
        for &t in thresholds {
            let assignment = best_assignment(&sim, cg.len(), t);
            let tp: Vec<bool> = (0..cd.len())
                .map(|i| assignment.get(i).copied().flatten().is_some())
                .collect();
            cat_ap += ap_by_definition(&tp, cg.len());
        }
        total += cat_ap / thresholds.len() as f64;
    }
    total / categories.len() as f64
}

/// A random small scene over categories with the given landmark counts:
/// up to `max_gt` ground truths and `max_det` detections across a few images.
pub fn random_scene(
    rng: &mut ChaCha8Rng,
    categories: &[(u32, usize)],
    max_gt: usize,
    max_det: usize,
) -> (Vec<KeypointDetection>, Vec<InstanceAnnotation>) {
    let n_images = rng.random_range(1..=3u64);
    let n_gt = rng.random_range(1..=max_gt);
    let gts: Vec<InstanceAnnotation> = (0..n_gt)
        .map(|i| {
            let (category_id, n) = categories[rng.random_range(0..categories.len())];
            let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
            let (w, h) = (rng.random_range(10.0..40.0), rng.random_range(10.0..40.0));
            let mut keypoints: Vec<Keypoint> = (0..n)
                .map(|_| Keypoint {
                    x: x + rng.random_range(0.0..w),
                    y: y + rng.random_range(0.0..h),
                    v: [0u8, 1, 2, 2][rng.random_range(0..4)],
                })
                .collect();
            keypoints[0].v = 2;
            InstanceAnnotation {
                id: i as u64 + 1,
                image_id: rng.random_range(1..=n_images),
                category_id,
                bbox: [x, y, w, h],
                keypoints,
            }
        })
        .collect();
    let n_det = rng.random_range(0..=max_det);
    let dets = (0..n_det)
        .map(|_| {
            let g = &gts[rng.random_range(0..gts.len())];
            let noise = [0.2, 0.8, 2.0, 5.0][rng.random_range(0..4)];
            let keypoints = g
                .keypoints
                .iter()
                .map(|k| {
                    [
                        k.x + noise * rng.random_range(-1.0..1.0),
                        k.y + noise * rng.random_range(-1.0..1.0),
                        rng.random(),
                    ]
                })
                .collect();
            // coarse scores so that ties occur
            let score = (rng.random_range(0..6) as f64) / 5.0;
            let image_id = if rng.random_bool(0.15) {
                rng.random_range(1..=n_images)
            } else {
                g.image_id
            };
            KeypointDetection {
                image_id,
                category_id: g.category_id,
                keypoints,
                score,
                bbox: None,
            }
        })
        .collect();
    (dets, gts)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite differences of the loss, computed through the public
/// forward pass only.
pub fn finite_difference(w: &ModelWeights, x: &[f32], t: &HeatmapStack, eps: f64) -> ModelWeights {
    let mut grad = ModelWeights::zeros(w.shape);
    let mut probe = w.clone();
    for ti in 0..4 {
        for i in 0..w.tensors()[ti].len() {
            let orig = w.tensors()[ti][i];
            probe.tensors_mut()[ti][i] = orig + eps;
            let up = loss(&forward(&probe, x).unwrap(), t).unwrap();
            probe.tensors_mut()[ti][i] = orig - eps;
            let down = loss(&forward(&probe, x).unwrap(), t).unwrap();
            probe.tensors_mut()[ti][i] = orig;
            grad.tensors_mut()[ti][i] = (up - down) / (2.0 * eps);
        }
    }
    grad
}

/// Largest `|a - b| / max(|a|, |b|, 1e-6)` over all parameters.
pub fn max_relative_deviation(a: &ModelWeights, b: &ModelWeights) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|(x, y)| x.iter().zip(y.iter()))
        .map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Weights whose output is exactly mirror-symmetric under the flip
/// permutation: every hidden unit sees a left-right symmetric filter and
/// output cells are averaged with their flipped partner.
pub fn flip_equivariant(shape: clothmark::model::ModelShape, perm: &[usize], seed: u64) -> ModelWeights {
    let mut w = ModelWeights::init(shape, seed);
    let (iw, n) = (shape.input_width, shape.input_len());
    for row in w.w1.chunks_exact_mut(n) {
        for r in 0..shape.input_height {
            for c in 0..iw / 2 {
                let (a, b) = (r * iw + c, r * iw + iw - 1 - c);
                let m = 0.5 * (row[a] + row[b]);
                row[a] = m;
                row[b] = m;
            }
        }
    }
    let (ow, plane, k) = (shape.output_width(), shape.plane_len(), shape.hidden);
    for o in 0..shape.output_len() {
        let (ch, rest) = (o / plane, o % plane);
        let (r, col) = (rest / ow, rest % ow);
        let p = perm[ch] * plane + r * ow + (ow - 1 - col);
        if p <= o {
            continue;
        }
        for j in 0..k {
            let m = 0.5 * (w.w2[o * k + j] + w.w2[p * k + j]);
            w.w2[o * k + j] = m;
            w.w2[p * k + j] = m;
        }
        let m = 0.5 * (w.b2[o] + w.b2[p]);
        w.b2[o] = m;
        w.b2[p] = m;
    }
    w
}

/// Box-normalized point that lands exactly on a quarter cell of the
/// heatmap grid for 48x64 crops with 0.25 padding around a loose box.
pub fn quarter_cell_point(nx: u32, ny: u32) -> [f64; 2] {
    [(f64::from(nx) - 1.25) / 8.0, (f64::from(ny) + 0.75) * 0.09375 - 0.25]
}

/// Two categories with outlines on quarter cells, sharing two slots.
pub fn quarter_cell_schema() -> clothmark::schema::Schema {
    let q = quarter_cell_point;
    let text = serde_json::json!({
        "name": "quarter_cells",
        "categories": [
            {"id": 1, "name": "block", "landmark_count": 4,
             "shape": [q(3, 2), q(8, 2), q(9, 12), q(2, 12)]},
            {"id": 2, "name": "kite", "landmark_count": 5,
             "shape": [q(4, 2), q(7, 2), q(10, 8), q(6, 13), q(1, 8)]}
        ],
        "aggregation": [0, 1, 2, 3, 0, 1, 4, 5, 6],
        "flip_pairs": [[0, 1], [2, 3], [4, 6]]
    })
    .to_string();
    clothmark::schema::Schema::from_json(&text, "quarter_cells").unwrap()
}
