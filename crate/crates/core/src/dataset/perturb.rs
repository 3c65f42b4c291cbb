use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{bbox_iou, DetectionBox, InstanceAnnotation};
use crate::error::{Error, Result};

/// Simulated detector output built from ground-truth boxes.
///
/// Each box is dropped with probability `drop_rate`; survivors get Gaussian
/// noise on center and size with standard deviation `jitter * (w, h)`. The
/// score is the IoU with the source box times `1 - drop_rate * u`, `u` uniform.
/// Images draw from independent streams seeded with `seed ^ image_id`.
pub fn perturb_boxes(gt: &[InstanceAnnotation], jitter: f64, drop_rate: f64, seed: u64) -> Result<Vec<DetectionBox>> {
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::Config(format!("box jitter {jitter} must be finite and >= 0")));
    }
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Config(format!("drop rate {drop_rate} must lie in [0, 1)")));
    }
    let mut order: Vec<&InstanceAnnotation> = gt.iter().collect();
    order.sort_by_key(|a| (a.image_id, a.id));

    let mut out = Vec::with_capacity(gt.len());
    let mut current: Option<(u64, ChaCha8Rng)> = None;
    for ann in order {
        let rng = match &mut current {
            Some((id, rng)) if *id == ann.image_id => rng,
            _ => {
                current = Some((ann.image_id, ChaCha8Rng::seed_from_u64(seed ^ ann.image_id)));
                &mut current.as_mut().unwrap().1
            }
        };
        let draws: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let keep_draw: f64 = rng.random();
        let score_draw: f64 = rng.random();
        if keep_draw < drop_rate {
            continue;
        }
        let [x, y, w, h] = ann.bbox;
        let cx = x + 0.5 * w + jitter * w * draws[0];
        let cy = y + 0.5 * h + jitter * h * draws[1];
        let nw = w * (1.0 + jitter * draws[2]).max(0.05);
        let nh = h * (1.0 + jitter * draws[3]).max(0.05);
        let bbox = if jitter == 0.0 {
            ann.bbox
        } else {
            [cx - 0.5 * nw, cy - 0.5 * nh, nw, nh]
        };
        let score = (bbox_iou(&bbox, &ann.bbox) * (1.0 - drop_rate * score_draw)).clamp(0.0, 1.0);
        out.push(DetectionBox {
            image_id: ann.image_id,
            category_id: ann.category_id,
            bbox,
            score,
        });
    }
    Ok(out)
}
