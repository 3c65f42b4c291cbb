//! DeepFashion2 annotation layout: one JSON per image under `annos/`, with
//! items keyed `item1`, `item2`, ... Each item carries `category_id`,
//! `bounding_box` as `[x1, y1, x2, y2]` and flat `landmarks` `[x, y, v, ...]`.
//! Images, when present, live under `image/` with the same file stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{keypoints_from_flat, Dataset, ImageRecord, InstanceAnnotation};
use crate::error::{Error, Result};
use crate::schema::Schema;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Item {
    category_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category_name: Option<String>,
    bounding_box: [f64; 4],
    landmarks: Vec<f64>,
}

fn annos_dir(root: &Path) -> PathBuf {
    let nested = root.join("annos");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn image_path(root: &Path, stem: &str) -> Option<PathBuf> {
    let base = root.join("image");
    ["jpg", "jpeg", "png"]
        .iter()
        .map(|ext| base.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn decode_image(path: &Path, id: u64) -> Result<ImageRecord> {
    let img = image::open(path)
        .map_err(|e| Error::parse(path.display().to_string(), e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| f32::from(p.0[0]) / 255.0).collect();
    ImageRecord::new(id, w as usize, h as usize, pixels)
}

/// Reads every `*.json` annotation file under `root` (or `root/annos`).
pub fn import_annotations(root: &Path, schema: &Schema) -> Result<Dataset> {
    let dir = annos_dir(root);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();

    let mut images = Vec::with_capacity(files.len());
    let mut annotations = Vec::new();
    let mut next_instance = 1u64;
    for path in &files {
        let context = path.display().to_string();
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let image_id: u64 = stem
            .parse()
            .map_err(|_| Error::parse(&context, format!("file stem {stem:?} is not a numeric image id")))?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: BTreeMap<String, Value> = serde_json::from_str(&text).map_err(|e| Error::parse(&context, e))?;

        let mut items: Vec<(u64, &str, &Value)> = doc
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix("item")
                    .and_then(|n| n.parse().ok())
                    .map(|n| (n, k.as_str(), v))
            })
            .collect();
        items.sort_by_key(|(n, _, _)| *n);

        let mut extent = (1.0f64, 1.0f64);
        for (_, key, value) in items {
            let item: Item =
                serde_json::from_value(value.clone()).map_err(|e| Error::parse(format!("{context}, {key}"), e))?;
            let [x1, y1, x2, y2] = item.bounding_box;
            let keypoints =
                keypoints_from_flat(&item.landmarks).map_err(|m| Error::parse(format!("{context}, {key}"), m))?;
            let ann = InstanceAnnotation {
                id: next_instance,
                image_id,
                category_id: item.category_id,
                bbox: [x1, y1, x2 - x1, y2 - y1],
                keypoints,
            };
            ann.validate(schema).map_err(|e| match e {
                Error::Annotation { detail, .. } => Error::Annotation {
                    context: format!("{context}, {key}"),
                    detail,
                },
                other => other,
            })?;
            extent = (extent.0.max(x2), extent.1.max(y2));
            next_instance += 1;
            annotations.push(ann);
        }
        let image = match image_path(root, &stem) {
            Some(p) => decode_image(&p, image_id)?,
            None => ImageRecord {
                id: image_id,
                width: extent.0.ceil() as usize,
                height: extent.1.ceil() as usize,
                pixels: None,
            },
        };
        images.push(image);
    }
    Ok(Dataset::new(images, annotations))
}

/// Writes one annotation file per image into `root/annos`.
pub fn export_annotations(root: &Path, dataset: &Dataset, schema: &Schema) -> Result<()> {
    let dir = root.join("annos");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for image in &dataset.images {
        let mut doc = serde_json::Map::new();
        doc.insert("source".into(), Value::String("clothmark".into()));
        let items = dataset.annotations.iter().filter(|a| a.image_id == image.id);
        for (k, ann) in items.enumerate() {
            let [x, y, w, h] = ann.bbox;
            let item = Item {
                category_id: ann.category_id,
                category_name: schema.category(ann.category_id).ok().map(|c| c.name.clone()),
                bounding_box: [x, y, x + w, y + h],
                landmarks: ann.keypoints.iter().flat_map(|p| [p.x, p.y, f64::from(p.v)]).collect(),
            };
            doc.insert(
                format!("item{}", k + 1),
                serde_json::to_value(item).map_err(|e| Error::parse("export", e))?,
            );
        }
        crate::io::write_json(&dir.join(format!("{:06}.json", image.id)), &doc)?;
    }
    Ok(())
}
