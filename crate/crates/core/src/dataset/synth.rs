//! Synthetic garment renderer.
//!
//! Every instance is a filled polygon whose vertices are its landmarks, drawn
//! from a per-category canonical outline placed in a random box. Categories
//! that share an aggregate landmark share the slot in the schema, so a
//! universal model sees pooled evidence for it, while each category keeps its
//! own canonical position for that slot.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, Dataset, ImageRecord, InstanceAnnotation, Keypoint};
use crate::error::{Error, Result};
use crate::schema::{CategorySchema, Schema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Instances to generate per category id.
    pub counts: BTreeMap<u32, usize>,
    pub image_width: usize,
    pub image_height: usize,
    /// Box height range as a fraction of the image height.
    pub box_scale: [f64; 2],
    /// Box width / height range.
    pub aspect: [f64; 2],
    /// Landmark noise standard deviation as a fraction of box size.
    pub landmark_jitter: f64,
    /// Probability a landmark is labeled but occluded (v = 1).
    pub occluded_rate: f64,
    /// Probability a landmark is left unlabeled (v = 0).
    pub unlabeled_rate: f64,
    /// Use the tight bounds of the landmarks as the instance box.
    pub tight_boxes: bool,
    /// Uniform background noise amplitude.
    pub background_noise: f64,
    pub first_image_id: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            counts: BTreeMap::new(),
            image_width: 96,
            image_height: 96,
            box_scale: [0.55, 0.8],
            aspect: [0.6, 0.85],
            landmark_jitter: 0.02,
            occluded_rate: 0.05,
            unlabeled_rate: 0.02,
            tight_boxes: true,
            background_noise: 0.0,
            first_image_id: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn with_counts(counts: impl IntoIterator<Item = (u32, usize)>) -> Self {
        SyntheticConfig {
            counts: counts.into_iter().collect(),
            ..SyntheticConfig::default()
        }
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_width < 4 || self.image_height < 4 {
            return bad(format!(
                "image size {}x{} too small",
                self.image_width, self.image_height
            ));
        }
        let [lo, hi] = self.box_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("box_scale {:?} must satisfy 0 < lo <= hi <= 1", self.box_scale));
        }
        let [alo, ahi] = self.aspect;
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return bad(format!("aspect {:?} must satisfy 0 < lo <= hi", self.aspect));
        }
        if !(self.landmark_jitter >= 0.0 && self.landmark_jitter.is_finite()) {
            return bad(format!("landmark_jitter {} must be >= 0", self.landmark_jitter));
        }
        for (name, p) in [
            ("occluded_rate", self.occluded_rate),
            ("unlabeled_rate", self.unlabeled_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} must lie in [0, 1]"));
            }
        }
        if self.occluded_rate + self.unlabeled_rate > 1.0 {
            return bad("occluded_rate + unlabeled_rate exceeds 1".into());
        }
        if !(0.0..=1.0).contains(&self.background_noise) {
            return bad(format!("background_noise {} must lie in [0, 1]", self.background_noise));
        }
        for id in self.counts.keys() {
            schema
                .category(*id)
                .map_err(|_| Error::Config(format!("counts name unknown category {id}")))?;
        }
        Ok(())
    }
}

/// Canonical outline of a category in box-normalized coordinates, in
/// polygon order, paired with the local landmark index of each vertex.
pub fn canonical_outline(schema: &Schema, category: &CategorySchema) -> Vec<(usize, [f64; 2])> {
    if let Some(shape) = &category.shape {
        return shape.iter().copied().enumerate().collect();
    }
    // Aggregates sit on an ellipse by id; each category squeezes it differently.
    let n_agg = schema.aggregate_count().max(1) as f64;
    let index = schema
        .landmarks
        .categories
        .iter()
        .position(|c| c.id == category.id)
        .unwrap_or(0) as f64;
    let squeeze = 0.55 + 0.4 * ((index * 0.618_033_988_75) % 1.0);
    let aggs = &schema.aggregation.map[category.global_range()];
    let mut points: Vec<(usize, [f64; 2])> = aggs
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            let theta = std::f64::consts::TAU * (a as f64 + 0.5) / n_agg;
            (j, [theta.cos(), squeeze * theta.sin() + 0.15 * (2.0 * theta).cos()])
        })
        .collect();
    if points.len() == 1 {
        return vec![(points[0].0, [0.5, 0.5])];
    }
    let (min_x, max_x, min_y, max_y) = points.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), (_, p)| (a.min(p[0]), b.max(p[0]), c.min(p[1]), d.max(p[1])),
    );
    let sx = (max_x - min_x).max(1e-9);
    let sy = (max_y - min_y).max(1e-9);
    for (_, p) in &mut points {
        p[0] = (p[0] - min_x) / sx;
        p[1] = (p[1] - min_y) / sy;
    }
    let (cx, cy) = points.iter().fold((0.0, 0.0), |(x, y), (_, p)| (x + p[0], y + p[1]));
    let (cx, cy) = (cx / points.len() as f64, cy / points.len() as f64);
    points.sort_by(|a, b| {
        let ta = (a.1[1] - cy).atan2(a.1[0] - cx);
        let tb = (b.1[1] - cy).atan2(b.1[0] - cx);
        ta.total_cmp(&tb)
    });
    points
}

fn category_tone(schema: &Schema, category_id: u32) -> f64 {
    let n = schema.landmarks.categories.len();
    let index = schema
        .landmarks
        .categories
        .iter()
        .position(|c| c.id == category_id)
        .unwrap_or(0);
    if n == 1 {
        0.75
    } else {
        0.55 + 0.35 * index as f64 / (n - 1) as f64
    }
}

/// Generates one image per instance; a pure function of `(schema, config, seed)`.
pub fn synth_generate(schema: &Schema, config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate(schema)?;
    let mut jobs = Vec::new();
    let mut next_id = config.first_image_id;
    for category in &schema.landmarks.categories {
        let count = config.counts.get(&category.id).copied().unwrap_or(0);
        for _ in 0..count {
            jobs.push((next_id, category));
            next_id += 1;
        }
    }
    let rendered = crate::par::map(&jobs, |&(image_id, category)| {
        render_instance(schema, config, category, image_id, seed ^ image_id)
    });
    let (images, annotations) = rendered.into_iter().unzip();
    Ok(Dataset::new(images, annotations))
}

fn render_instance(
    schema: &Schema,
    config: &SyntheticConfig,
    category: &CategorySchema,
    image_id: u64,
    image_seed: u64,
) -> (ImageRecord, InstanceAnnotation) {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
    let (iw, ih) = (config.image_width as f64, config.image_height as f64);
    let h = ih * rng.random_range(config.box_scale[0]..=config.box_scale[1]);
    let w = (h * rng.random_range(config.aspect[0]..=config.aspect[1])).min(iw * 0.95);
    let x0 = rng.random_range(0.0..=(iw - w).max(0.0));
    let y0 = rng.random_range(0.0..=(ih - h).max(0.0));

    let outline = canonical_outline(schema, category);
    let mut keypoints = vec![Keypoint { x: 0.0, y: 0.0, v: 0 }; category.landmark_count];
    let mut polygon = Vec::with_capacity(outline.len());
    for &(local, [u, v]) in &outline {
        let (dx, dy) = if config.landmark_jitter > 0.0 {
            let zx: f64 = rng.sample(StandardNormal);
            let zy: f64 = rng.sample(StandardNormal);
            (config.landmark_jitter * w * zx, config.landmark_jitter * h * zy)
        } else {
            (0.0, 0.0)
        };
        let (x, y) = (x0 + u * w + dx, y0 + v * h + dy);
        polygon.push((x, y));
        keypoints[local] = Keypoint { x, y, v: 2 };
    }
    let bbox: BBox = if config.tight_boxes && polygon.len() > 1 {
        let (min_x, max_x, min_y, max_y) = polygon.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
        );
        [min_x, min_y, (max_x - min_x).max(1.0), (max_y - min_y).max(1.0)]
    } else {
        [x0, y0, w, h]
    };
    for kp in &mut keypoints {
        let r: f64 = rng.random();
        if r < config.unlabeled_rate {
            *kp = Keypoint { x: 0.0, y: 0.0, v: 0 };
        } else if r < config.unlabeled_rate + config.occluded_rate {
            kp.v = 1;
        }
    }

    let tone = category_tone(schema, category.id) + rng.random_range(-0.03..=0.03);
    let (width, height) = (config.image_width, config.image_height);
    let mut pixels = vec![0f32; width * height];
    if config.background_noise > 0.0 {
        for p in &mut pixels {
            *p = (config.background_noise * rng.random::<f64>()) as f32;
        }
    }
    fill_polygon(&mut pixels, width, height, &polygon, tone.clamp(0.0, 1.0) as f32);

    let image = ImageRecord {
        id: image_id,
        width,
        height,
        pixels: Some(pixels),
    };
    let annotation = InstanceAnnotation {
        id: image_id,
        image_id,
        category_id: category.id,
        bbox,
        keypoints,
    };
    (image, annotation)
}

/// Even-odd fill sampled at pixel centers.
fn fill_polygon(pixels: &mut [f32], width: usize, height: usize, polygon: &[(f64, f64)], value: f32) {
    if polygon.len() < 3 {
        return;
    }
    for row in 0..height {
        let y = row as f64 + 0.5;
        let mut crossings: Vec<f64> = Vec::new();
        for k in 0..polygon.len() {
            let (x1, y1) = polygon[k];
            let (x2, y2) = polygon[(k + 1) % polygon.len()];
            if (y1 <= y) != (y2 <= y) {
                crossings.push(x1 + (y - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for span in crossings.chunks_exact(2) {
            let start = (span[0] - 0.5).ceil().max(0.0) as usize;
            let end = (span[1] - 0.5).floor();
            if end < 0.0 {
                continue;
            }
            let end = (end as usize).min(width - 1);
            for col in start..=end {
                pixels[row * width + col] = value;
            }
        }
    }
}
