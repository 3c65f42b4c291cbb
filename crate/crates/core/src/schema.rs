//! Landmark vocabularies, the category-local → aggregate landmark map and
//! left/right flip metadata.
//!
//! A schema file lists the categories in id order; their landmarks are laid
//! out category-major in one flat global index space. The aggregation map
//! assigns every global landmark an aggregate id. It must hit every aggregate
//! id at least once and may not send two landmarks of the same category to
//! the same aggregate id, so a category's landmarks can always be read back
//! out of an aggregate-space prediction.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{InstanceAnnotation, Keypoint};
use crate::error::{Error, Result};

/// Default per-landmark OKS falloff constant.
pub const DEFAULT_OKS_K: f64 = 0.05;

const MINIATURE: &str = include_str!("../schemas/miniature.json");
const DEEPFASHION2: &str = include_str!("../schemas/deepfashion2.json");
const GARMENTS3: &str = include_str!("../schemas/garments3.json");

/// Names accepted by [`Schema::builtin`].
pub const BUILTIN_SCHEMAS: [&str; 3] = ["miniature", "deepfashion2", "garments3"];

#[derive(Debug, Clone, PartialEq)]
pub struct CategorySchema {
    pub id: u32,
    pub name: String,
    pub landmark_count: usize,
    /// First slot of this category in the flat global landmark layout.
    pub global_offset: usize,
    pub landmark_names: Vec<String>,
    /// Canonical outline in box-normalized coordinates, in landmark order.
    pub shape: Option<Vec<[f64; 2]>>,
}

impl CategorySchema {
    pub fn global_range(&self) -> std::ops::Range<usize> {
        self.global_offset..self.global_offset + self.landmark_count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSchema {
    pub name: String,
    pub categories: Vec<CategorySchema>,
    pub total_landmarks: usize,
}

impl LandmarkSchema {
    pub fn category(&self, category_id: u32) -> Result<&CategorySchema> {
        self.categories
            .binary_search_by_key(&category_id, |c| c.id)
            .map(|i| &self.categories[i])
            .map_err(|_| Error::Missing(format!("unknown category id {category_id}")))
    }

    pub fn category_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.categories.iter().map(|c| c.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationMap {
    pub total_landmarks: usize,
    pub aggregate_count: usize,
    /// `map[g]` is the aggregate id of global landmark `g`.
    pub map: Vec<usize>,
    pub aggregate_names: Vec<String>,
    /// Per-aggregate OKS constant.
    pub oks_k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlipPairSet {
    pub pairs: Vec<(usize, usize)>,
}

impl FlipPairSet {
    /// Permutation swapping each pair and fixing every other id.
    pub fn permutation(&self, aggregate_count: usize) -> Vec<usize> {
        flip_permutation(self, aggregate_count)
    }
}

pub fn flip_permutation(pairs: &FlipPairSet, aggregate_count: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..aggregate_count).collect();
    for &(a, b) in &pairs.pairs {
        perm[a] = b;
        perm[b] = a;
    }
    perm
}

/// Keypoints of one instance laid out in aggregate space.
///
/// `None` marks an unsupervised slot: the instance's category has no landmark
/// mapped there. A supervised slot with `v == 0` is an unlabeled landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateKeypoints {
    pub slots: Vec<Option<Keypoint>>,
}

impl AggregateKeypoints {
    pub fn supervision_mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    pub fn supervised_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// On-disk schema format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaFile {
    #[serde(default)]
    pub name: String,
    pub categories: Vec<CategoryEntry>,
    pub aggregation: Vec<usize>,
    #[serde(default)]
    pub flip_pairs: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oks_k: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: u32,
    pub name: String,
    pub landmark_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<[f64; 2]>>,
}

/// The validated triple loaded from one schema file.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub landmarks: LandmarkSchema,
    pub aggregation: AggregationMap,
    pub flips: FlipPairSet,
}

pub fn load_schema(path: &Path) -> Result<(LandmarkSchema, AggregationMap, FlipPairSet)> {
    let schema = Schema::load(path)?;
    Ok((schema.landmarks, schema.aggregation, schema.flips))
}

impl Schema {
    pub fn load(path: &Path) -> Result<Schema> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Schema::from_json(&text, &path.display().to_string())
    }

    /// Loads a schema by built-in name, or from a file path otherwise.
    pub fn resolve(name_or_path: &str) -> Result<Schema> {
        match Schema::builtin(name_or_path) {
            Some(schema) => Ok(schema),
            None => Schema::load(Path::new(name_or_path)),
        }
    }

    pub fn builtin(name: &str) -> Option<Schema> {
        let text = match name {
            "miniature" => MINIATURE,
            "deepfashion2" => DEEPFASHION2,
            "garments3" => GARMENTS3,
            _ => return None,
        };
        Some(Schema::from_json(text, name).expect("built-in schema is valid"))
    }

    pub fn from_json(text: &str, context: &str) -> Result<Schema> {
        let file: SchemaFile = serde_json::from_str(text).map_err(|e| Error::parse(context, e))?;
        Schema::from_file(file)
    }

    pub fn from_file(file: SchemaFile) -> Result<Schema> {
        if file.categories.is_empty() {
            return Err(Error::schema("non-empty", "schema has no categories"));
        }
        let mut categories = Vec::with_capacity(file.categories.len());
        let mut offset = 0usize;
        let mut prev_id = 0u32;
        for (i, entry) in file.categories.iter().enumerate() {
            if entry.id <= prev_id {
                return Err(Error::schema(
                    "category order",
                    format!(
                        "category #{i} has id {} after id {prev_id}; ids must be positive and increasing",
                        entry.id
                    ),
                ));
            }
            prev_id = entry.id;
            if entry.landmark_count == 0 {
                return Err(Error::schema(
                    "landmark_count >= 1",
                    format!("category {} has no landmarks", entry.id),
                ));
            }
            let names = match &entry.landmark_names {
                Some(names) if names.len() != entry.landmark_count => {
                    return Err(Error::schema(
                        "landmark_names length",
                        format!(
                            "category {} lists {} names for {} landmarks",
                            entry.id,
                            names.len(),
                            entry.landmark_count
                        ),
                    ))
                }
                Some(names) => names.clone(),
                None => (0..entry.landmark_count)
                    .map(|j| format!("{}_{j}", entry.name))
                    .collect(),
            };
            if let Some(shape) = &entry.shape {
                if shape.len() != entry.landmark_count {
                    return Err(Error::schema(
                        "shape length",
                        format!("category {} shape has {} points", entry.id, shape.len()),
                    ));
                }
                if shape.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::schema("shape finite", format!("category {}", entry.id)));
                }
            }
            categories.push(CategorySchema {
                id: entry.id,
                name: entry.name.clone(),
                landmark_count: entry.landmark_count,
                global_offset: offset,
                landmark_names: names,
                shape: entry.shape.clone(),
            });
            offset += entry.landmark_count;
        }
        let total_landmarks = offset;
        let landmarks = LandmarkSchema {
            name: file.name.clone(),
            categories,
            total_landmarks,
        };

        if file.aggregation.len() != total_landmarks {
            return Err(Error::schema(
                "aggregation length",
                format!(
                    "aggregation lists {} ids but categories define {total_landmarks} landmarks",
                    file.aggregation.len()
                ),
            ));
        }
        let aggregate_count = match &file.aggregate_names {
            Some(names) => names.len(),
            None => file.aggregation.iter().max().map_or(0, |m| m + 1),
        };
        if let Some(g) = file.aggregation.iter().position(|&a| a >= aggregate_count) {
            return Err(Error::schema(
                "aggregate id range",
                format!(
                    "landmark {g} maps to {} >= aggregate_count {aggregate_count}",
                    file.aggregation[g]
                ),
            ));
        }
        let aggregate_names = file
            .aggregate_names
            .clone()
            .unwrap_or_else(|| (0..aggregate_count).map(|a| format!("agg{a}")).collect());
        let oks_k = match &file.oks_k {
            Some(k) if k.len() != aggregate_count => {
                return Err(Error::schema(
                    "oks_k length",
                    format!("{} constants for {aggregate_count} aggregates", k.len()),
                ))
            }
            Some(k) => {
                if let Some(a) = k.iter().position(|&v| !(v.is_finite() && v > 0.0)) {
                    return Err(Error::schema("oks_k positive", format!("aggregate {a}")));
                }
                k.clone()
            }
            None => vec![DEFAULT_OKS_K; aggregate_count],
        };
        let aggregation = AggregationMap {
            total_landmarks,
            aggregate_count,
            map: file.aggregation.clone(),
            aggregate_names,
            oks_k,
        };

        let mut pairs = Vec::with_capacity(file.flip_pairs.len());
        for (i, pair) in file.flip_pairs.iter().enumerate() {
            match pair.as_slice() {
                &[a, b] => pairs.push((a, b)),
                _ => {
                    return Err(Error::schema(
                        "flip pair arity",
                        format!("flip pair #{i} has {} entries", pair.len()),
                    ))
                }
            }
        }
        let schema = Schema {
            landmarks,
            aggregation,
            flips: FlipPairSet { pairs },
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Checks every structural invariant; reports the first violation.
    pub fn validate(&self) -> Result<()> {
        let mut expected_offset = 0;
        for c in &self.landmarks.categories {
            if c.global_offset != expected_offset {
                return Err(Error::schema(
                    "contiguous offsets",
                    format!(
                        "category {} starts at {} instead of {expected_offset}",
                        c.id, c.global_offset
                    ),
                ));
            }
            expected_offset += c.landmark_count;
        }
        if expected_offset != self.landmarks.total_landmarks || self.aggregation.map.len() != expected_offset {
            return Err(Error::schema(
                "partition",
                format!(
                    "landmark counts sum to {expected_offset}, total_landmarks {}, map length {}",
                    self.landmarks.total_landmarks,
                    self.aggregation.map.len()
                ),
            ));
        }

        let n_agg = self.aggregation.aggregate_count;
        let mut used = vec![false; n_agg];
        for c in &self.landmarks.categories {
            let mut owner: HashMap<usize, usize> = HashMap::new();
            for (j, g) in c.global_range().enumerate() {
                let a = self.aggregation.map[g];
                if a >= n_agg {
                    return Err(Error::schema(
                        "aggregate id range",
                        format!("landmark {g} maps to {a} >= {n_agg}"),
                    ));
                }
                used[a] = true;
                if let Some(prev) = owner.insert(a, j) {
                    return Err(Error::schema(
                        "per-category injectivity",
                        format!(
                            "category {} local landmarks {prev} and {j} (global {} and {g}) both map to aggregate {a}",
                            c.id,
                            c.global_offset + prev
                        ),
                    ));
                }
            }
        }
        if let Some(a) = used.iter().position(|u| !u) {
            return Err(Error::schema("surjectivity", format!("aggregate id {a} is never used")));
        }

        let mut seen = vec![false; n_agg];
        for (i, &(a, b)) in self.flips.pairs.iter().enumerate() {
            if a >= n_agg || b >= n_agg {
                return Err(Error::schema(
                    "flip pair range",
                    format!("flip pair #{i} ({a}, {b}) outside [0, {n_agg})"),
                ));
            }
            if a == b {
                return Err(Error::schema(
                    "flip pair irreflexive",
                    format!("flip pair #{i} is ({a}, {a})"),
                ));
            }
            for x in [a, b] {
                if std::mem::replace(&mut seen[x], true) {
                    return Err(Error::schema(
                        "flip pairs disjoint",
                        format!("aggregate {x} appears in more than one flip pair (pair #{i})"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn aggregate_count(&self) -> usize {
        self.aggregation.aggregate_count
    }

    pub fn category(&self, category_id: u32) -> Result<&CategorySchema> {
        self.landmarks.category(category_id)
    }

    pub fn aggregate_index(&self, category_id: u32, local_index: usize) -> Result<usize> {
        let c = self.category(category_id)?;
        if local_index >= c.landmark_count {
            return Err(Error::Missing(format!(
                "local landmark {local_index} out of range for category {category_id} ({} landmarks)",
                c.landmark_count
            )));
        }
        Ok(self.aggregation.map[c.global_offset + local_index])
    }

    /// Aggregate ids of a category's landmarks, in local order.
    pub fn category_aggregates(&self, category_id: u32) -> Result<&[usize]> {
        let c = self.category(category_id)?;
        Ok(&self.aggregation.map[c.global_range()])
    }

    /// Channel mask of the aggregates reachable from a category.
    pub fn category_mask(&self, category_id: u32) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.aggregate_count()];
        for &a in self.category_aggregates(category_id)? {
            mask[a] = true;
        }
        Ok(mask)
    }

    pub fn category_oks_k(&self, category_id: u32) -> Result<Vec<f64>> {
        Ok(self
            .category_aggregates(category_id)?
            .iter()
            .map(|&a| self.aggregation.oks_k[a])
            .collect())
    }

    pub fn flip_permutation(&self) -> Vec<usize> {
        self.flips.permutation(self.aggregate_count())
    }

    pub fn project_annotation(&self, instance: &InstanceAnnotation) -> Result<AggregateKeypoints> {
        let aggs = self.category_aggregates(instance.category_id)?;
        if instance.keypoints.len() != aggs.len() {
            return Err(Error::Annotation {
                context: format!("instance {}", instance.id),
                detail: format!(
                    "{} keypoints for category {} with {} landmarks",
                    instance.keypoints.len(),
                    instance.category_id,
                    aggs.len()
                ),
            });
        }
        let mut slots = vec![None; self.aggregate_count()];
        for (kp, &a) in instance.keypoints.iter().zip(aggs) {
            slots[a] = Some(*kp);
        }
        Ok(AggregateKeypoints { slots })
    }

    /// Reads a category's landmarks out of any per-aggregate array.
    pub fn lift_prediction<T: Clone>(&self, aggregate: &[T], category_id: u32) -> Result<Vec<T>> {
        if aggregate.len() != self.aggregate_count() {
            return Err(Error::Shape(format!(
                "aggregate array has {} slots, schema has {}",
                aggregate.len(),
                self.aggregate_count()
            )));
        }
        Ok(self
            .category_aggregates(category_id)?
            .iter()
            .map(|&a| aggregate[a].clone())
            .collect())
    }

    /// Recovers an instance's local keypoints from its projection.
    pub fn lift_keypoints(&self, aggregate: &AggregateKeypoints, category_id: u32) -> Result<Vec<Keypoint>> {
        self.lift_prediction(&aggregate.slots, category_id)?
            .into_iter()
            .enumerate()
            .map(|(j, slot)| {
                slot.ok_or_else(|| {
                    Error::Missing(format!(
                        "aggregate slot for local landmark {j} of category {category_id} is unsupervised"
                    ))
                })
            })
            .collect()
    }

    /// The same categories with every landmark given its own aggregate id.
    ///
    /// Flip pairs carry over between landmarks of one category whose
    /// aggregates were paired.
    pub fn disjoint(&self) -> Schema {
        let total = self.landmarks.total_landmarks;
        let mut names = Vec::with_capacity(total);
        let mut oks_k = Vec::with_capacity(total);
        let mut pairs = Vec::new();
        let perm = self.flip_permutation();
        for c in &self.landmarks.categories {
            let aggs = &self.aggregation.map[c.global_range()];
            for (j, &a) in aggs.iter().enumerate() {
                names.push(format!("{}:{}", c.name, c.landmark_names[j]));
                oks_k.push(self.aggregation.oks_k[a]);
                let partner = perm[a];
                if partner > a {
                    if let Some(jj) = aggs.iter().position(|&b| b == partner) {
                        pairs.push((c.global_offset + j, c.global_offset + jj));
                    }
                }
            }
        }
        Schema {
            landmarks: LandmarkSchema {
                name: format!("{}-disjoint", self.landmarks.name),
                ..self.landmarks.clone()
            },
            aggregation: AggregationMap {
                total_landmarks: total,
                aggregate_count: total,
                map: (0..total).collect(),
                aggregate_names: names,
                oks_k,
            },
            flips: FlipPairSet { pairs },
        }
    }

    pub fn to_file(&self) -> SchemaFile {
        SchemaFile {
            name: self.landmarks.name.clone(),
            categories: self
                .landmarks
                .categories
                .iter()
                .map(|c| CategoryEntry {
                    id: c.id,
                    name: c.name.clone(),
                    landmark_count: c.landmark_count,
                    landmark_names: Some(c.landmark_names.clone()),
                    shape: c.shape.clone(),
                })
                .collect(),
            aggregation: self.aggregation.map.clone(),
            flip_pairs: self.flips.pairs.iter().map(|&(a, b)| vec![a, b]).collect(),
            aggregate_names: Some(self.aggregation.aggregate_names.clone()),
            oks_k: Some(self.aggregation.oks_k.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn miniature() -> Schema {
        Schema::builtin("miniature").unwrap()
    }

    fn instance(category_id: u32, n: usize) -> InstanceAnnotation {
        InstanceAnnotation {
            id: 1,
            image_id: 1,
            category_id,
            bbox: [0.0, 0.0, 10.0, 10.0],
            keypoints: (0..n)
                .map(|j| Keypoint {
                    x: j as f64 + 0.5,
                    y: 2.0 * j as f64,
                    v: 2,
                })
                .collect(),
        }
    }

    fn mini_with(aggregation: &str, flips: &str) -> Result<Schema> {
        let text = format!(
            r#"{{"categories": [{{"id": 1, "name": "a", "landmark_count": 4}},
                               {{"id": 2, "name": "b", "landmark_count": 3}},
                               {{"id": 3, "name": "c", "landmark_count": 3}}],
                "aggregate_names": ["0","1","2","3","4","5"],
                "aggregation": {aggregation}, "flip_pairs": {flips}}}"#
        );
        Schema::from_json(&text, "test")
    }

    #[test]
    fn miniature_sizes() {
        let s = miniature();
        assert_eq!(s.landmarks.total_landmarks, 10);
        assert_eq!(s.aggregate_count(), 6);
        let offsets: Vec<_> = s.landmarks.categories.iter().map(|c| c.global_offset).collect();
        assert_eq!(offsets, vec![0, 4, 7]);
    }

    #[test]
    fn aggregate_index_examples() {
        let s = miniature();
        assert_eq!(s.aggregate_index(1, 0).unwrap(), 0);
        assert_eq!(s.aggregate_index(2, 0).unwrap(), 0);
        assert!(s.aggregate_index(3, 3).is_err());
        assert_eq!(s.aggregate_index(3, 2).unwrap(), 5);
        assert!(s.aggregate_index(4, 0).is_err());
        assert!(s.aggregate_index(1, 4).is_err());
    }

    #[test]
    fn shared_injectivity_is_rejected() {
        let err = mini_with("[0,0,2,3, 0,1,4, 2,3,5]", "[]").unwrap_err();
        match err {
            Error::Schema { invariant, detail } => {
                assert_eq!(invariant, "per-category injectivity");
                assert!(detail.contains("category 1"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unused_aggregate_is_rejected() {
        let err = mini_with("[0,1,2,3, 0,1,4, 2,3,1]", "[]").unwrap_err();
        match err {
            Error::Schema { invariant, detail } => {
                assert_eq!(invariant, "surjectivity");
                assert!(detail.contains('5'), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_flip_pairs_are_rejected() {
        assert!(mini_with("[0,1,2,3, 0,1,4, 2,3,5]", "[[0,0]]").is_err());
        assert!(mini_with("[0,1,2,3, 0,1,4, 2,3,5]", "[[0,1],[1,2]]").is_err());
        assert!(mini_with("[0,1,2,3, 0,1,4, 2,3,5]", "[[0,9]]").is_err());
        assert!(mini_with("[0,1,2,3, 0,1,4, 2,3,5]", "[[0,1,2]]").is_err());
    }

    #[test]
    fn wrong_aggregation_length_is_rejected() {
        assert!(mini_with("[0,1,2,3, 0,1,4, 2,3]", "[]").is_err());
    }

    #[test]
    fn flip_permutation_examples() {
        assert_eq!(flip_permutation(&FlipPairSet::default(), 4), vec![0, 1, 2, 3]);
        let p = flip_permutation(&FlipPairSet { pairs: vec![(0, 1)] }, 3);
        assert_eq!(p, vec![1, 0, 2]);
        let s = miniature();
        let p = s.flip_permutation();
        let data = [10, 11, 12, 13, 14, 15];
        let once: Vec<_> = p.iter().map(|&i| data[i]).collect();
        let twice: Vec<_> = p.iter().map(|&i| once[i]).collect();
        assert_eq!(twice, data);
        let fixed: Vec<_> = (0..6).filter(|&i| p[i] == i).collect();
        assert_eq!(fixed, vec![4, 5]);
    }

    #[test]
    fn projection_marks_supervision() {
        let s = miniature();
        let mut inst = instance(1, 4);
        inst.keypoints[2].v = 0;
        let agg = s.project_annotation(&inst).unwrap();
        assert_eq!(agg.supervised_count(), 4);
        assert_eq!(agg.supervision_mask(), vec![true, true, true, true, false, false]);
        assert_eq!(agg.slots[2].unwrap().v, 0);
        assert!(s.project_annotation(&instance(1, 3)).is_err());
    }

    #[test]
    fn roundtrip_every_category() {
        let s = miniature();
        for c in s.landmarks.categories.clone() {
            let inst = instance(c.id, c.landmark_count);
            let agg = s.project_annotation(&inst).unwrap();
            assert_eq!(s.lift_keypoints(&agg, c.id).unwrap(), inst.keypoints);
        }
    }

    #[test]
    fn lift_reads_category_lengths() {
        let s = miniature();
        let uniform = vec![0.25; 6];
        assert_eq!(s.lift_prediction(&uniform, 1).unwrap(), vec![0.25; 4]);
        assert_eq!(s.lift_prediction(&uniform, 2).unwrap(), vec![0.25; 3]);
        assert!(s.lift_prediction(&uniform, 7).is_err());
        assert!(s.lift_prediction(&uniform[..5], 1).is_err());
    }

    #[test]
    fn disjoint_keeps_categories_and_pairs() {
        let s = miniature();
        let d = s.disjoint();
        d.validate().unwrap();
        assert_eq!(d.aggregate_count(), 10);
        // category 1: locals 0<->1 and 2<->3; category 2: 0<->1; category 3: 0<->1
        assert_eq!(d.flips.pairs, vec![(0, 1), (2, 3), (4, 5), (7, 8)]);
    }

    #[test]
    fn builtin_schemas_validate() {
        for name in BUILTIN_SCHEMAS {
            let s = Schema::builtin(name).unwrap();
            s.validate().unwrap();
            let again = Schema::from_file(s.to_file()).unwrap();
            assert_eq!(again, s);
        }
        let g = Schema::builtin("garments3").unwrap();
        assert_eq!(g.aggregate_count(), 9);
        assert!(g.landmarks.categories.iter().all(|c| c.shape.is_some()));
    }
}
