//! Annotations, images, detection boxes and the canonical dataset file.

mod crop;
pub mod deepfashion2;
mod perturb;
pub mod synth;

use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::Schema;

pub use crop::{make_crop, mirror_crop, Crop, CropTransform};
pub use perturb::perturb_boxes;

/// Box as `[x, y, w, h]` in pixels.
pub type BBox = [f64; 4];

pub fn bbox_area(b: &BBox) -> f64 {
    b[2] * b[3]
}

pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (bbox_area(a) + bbox_area(b) - inter)
}

/// One annotated landmark. `v`: 0 unlabeled, 1 occluded, 2 visible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub fn is_labeled(&self) -> bool {
        self.v > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
    pub keypoints: Vec<Keypoint>,
}

impl InstanceAnnotation {
    pub fn labeled_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_labeled()).count()
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let context = || format!("instance {} (image {})", self.id, self.image_id);
        let category = schema.category(self.category_id).map_err(|_| Error::Annotation {
            context: context(),
            detail: format!("unknown category {}", self.category_id),
        })?;
        if !(self.bbox[2] > 0.0 && self.bbox[3] > 0.0) || self.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::Annotation {
                context: context(),
                detail: format!("degenerate box {:?}", self.bbox),
            });
        }
        if self.keypoints.len() != category.landmark_count {
            return Err(Error::Annotation {
                context: context(),
                detail: format!(
                    "{} keypoints, category {} has {} landmarks",
                    self.keypoints.len(),
                    self.category_id,
                    category.landmark_count
                ),
            });
        }
        for (j, kp) in self.keypoints.iter().enumerate() {
            if kp.v > 2 {
                return Err(Error::Annotation {
                    context: context(),
                    detail: format!("keypoint {j} has visibility {}", kp.v),
                });
            }
            if kp.is_labeled() && !(kp.x.is_finite() && kp.y.is_finite()) {
                return Err(Error::Annotation {
                    context: context(),
                    detail: format!("labeled keypoint {j} has non-finite coordinates"),
                });
            }
        }
        Ok(())
    }
}

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub pixels: Option<Vec<f32>>,
}

impl ImageRecord {
    pub fn new(id: u64, width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        let image = ImageRecord {
            id,
            width,
            height,
            pixels: Some(pixels),
        };
        image.validate()?;
        Ok(image)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Shape(format!(
                "image {} has size {}x{}",
                self.id, self.width, self.height
            )));
        }
        if let Some(p) = &self.pixels {
            if p.len() != self.width * self.height {
                return Err(Error::Shape(format!(
                    "image {} has {} pixels for {}x{}",
                    self.id,
                    p.len(),
                    self.width,
                    self.height
                )));
            }
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Shape(format!(
                    "image {} has intensities outside [0, 1]",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> Result<&[f32]> {
        self.pixels
            .as_deref()
            .ok_or_else(|| Error::Missing(format!("image {} has no pixel data", self.id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
    pub score: f64,
}

impl DetectionBox {
    pub fn validate(&self) -> Result<()> {
        if !(self.bbox[2] > 0.0 && self.bbox[3] > 0.0) {
            return Err(Error::Annotation {
                context: format!("detection on image {}", self.image_id),
                detail: format!("degenerate box {:?}", self.bbox),
            });
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Annotation {
                context: format!("detection on image {}", self.image_id),
                detail: format!("score {} outside [0, 1]", self.score),
            });
        }
        Ok(())
    }
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let boxes: Vec<DetectionBox> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    for b in &boxes {
        b.validate()?;
    }
    Ok(boxes)
}

pub fn save_detections(path: &Path, boxes: &[DetectionBox]) -> Result<()> {
    crate::io::write_json(path, &boxes)
}

/// Images plus instance annotations, sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<InstanceAnnotation>,
}

impl Dataset {
    pub fn new(mut images: Vec<ImageRecord>, mut annotations: Vec<InstanceAnnotation>) -> Self {
        images.sort_by_key(|i| i.id);
        annotations.sort_by_key(|a| a.id);
        Dataset { images, annotations }
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images
            .binary_search_by_key(&id, |i| i.id)
            .ok()
            .map(|i| &self.images[i])
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        for image in &self.images {
            image.validate()?;
        }
        for a in &self.annotations {
            a.validate(schema)?;
            if self.image(a.image_id).is_none() {
                return Err(Error::Annotation {
                    context: format!("instance {}", a.id),
                    detail: format!("references missing image {}", a.image_id),
                });
            }
        }
        Ok(())
    }

    pub fn count_by_category(&self, category_id: u32) -> usize {
        self.annotations.iter().filter(|a| a.category_id == category_id).count()
    }

    /// Keeps only annotations matching `keep`, and the images they live on.
    pub fn filter(&self, keep: impl Fn(&InstanceAnnotation) -> bool) -> Dataset {
        let annotations: Vec<_> = self.annotations.iter().filter(|a| keep(a)).cloned().collect();
        let images = self
            .images
            .iter()
            .filter(|i| annotations.iter().any(|a| a.image_id == i.id))
            .cloned()
            .collect();
        Dataset { images, annotations }
    }

    /// Ground-truth boxes as score-1 detections.
    pub fn gt_boxes(&self) -> Vec<DetectionBox> {
        self.annotations
            .iter()
            .map(|a| DetectionBox {
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: a.bbox,
                score: 1.0,
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Dataset::from_file(file, &path.display().to_string())
    }

    pub fn save(&self, path: &Path, schema: &Schema) -> Result<()> {
        crate::io::write_json(path, &self.to_file(schema))
    }

    pub fn to_file(&self, schema: &Schema) -> DatasetFile {
        DatasetFile {
            images: self
                .images
                .iter()
                .map(|i| ImageEntry {
                    id: i.id,
                    width: i.width,
                    height: i.height,
                    pixels: i.pixels.as_ref().map(|p| encode_pixels(p)),
                })
                .collect(),
            annotations: self
                .annotations
                .iter()
                .map(|a| AnnotationEntry {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox: a.bbox,
                    num_keypoints: a.labeled_count(),
                    keypoints: a.keypoints.iter().flat_map(|k| [k.x, k.y, f64::from(k.v)]).collect(),
                })
                .collect(),
            categories: schema
                .landmarks
                .categories
                .iter()
                .map(|c| CategoryRef {
                    id: c.id,
                    name: c.name.clone(),
                    landmark_count: c.landmark_count,
                })
                .collect(),
        }
    }

    pub fn from_file(file: DatasetFile, context: &str) -> Result<Dataset> {
        let images = file
            .images
            .into_iter()
            .map(|e| {
                let pixels = e.pixels.as_deref().map(decode_pixels).transpose()?;
                let image = ImageRecord {
                    id: e.id,
                    width: e.width,
                    height: e.height,
                    pixels,
                };
                image.validate()?;
                Ok(image)
            })
            .collect::<Result<Vec<_>>>()?;
        let annotations = file
            .annotations
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                Ok(InstanceAnnotation {
                    id: e.id,
                    image_id: e.image_id,
                    category_id: e.category_id,
                    bbox: e.bbox,
                    keypoints: keypoints_from_flat(&e.keypoints)
                        .map_err(|m| Error::parse(format!("{context}, annotation #{i}"), m))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(images, annotations))
    }
}

pub(crate) fn keypoints_from_flat(flat: &[f64]) -> std::result::Result<Vec<Keypoint>, String> {
    if !flat.len().is_multiple_of(3) {
        return Err(format!("keypoint array length {} is not a multiple of 3", flat.len()));
    }
    flat.chunks_exact(3)
        .map(|c| {
            let v = c[2];
            if v != 0.0 && v != 1.0 && v != 2.0 {
                return Err(format!("visibility {v} is not one of 0, 1, 2"));
            }
            Ok(Keypoint {
                x: c[0],
                y: c[1],
                v: v as u8,
            })
        })
        .collect()
}

fn encode_pixels(pixels: &[f32]) -> String {
    let bytes: Vec<u8> = pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
    BASE64.encode(bytes)
}

fn decode_pixels(text: &str) -> Result<Vec<f32>> {
    let bytes = BASE64.decode(text).map_err(|e| Error::parse("image pixels", e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::parse("image pixels", "byte length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Canonical single-file dataset layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    #[serde(default)]
    pub categories: Vec<CategoryRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    /// Base64 of little-endian `f32` intensities, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixels: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
    /// Flat `[x, y, v, ...]`.
    pub keypoints: Vec<f64>,
    #[serde(default)]
    pub num_keypoints: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryRef {
    pub id: u32,
    pub name: String,
    pub landmark_count: usize,
}
