//! COCO instance and caption annotation ingest.
//!
//! Only the `images`, `annotations` and `categories` arrays of an instance
//! document are read (plus `annotations` of a caption document); every
//! other field is ignored.

mod mask;

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use mask::{decode_rle, decode_rle_string, encode_rle, rasterize_polygon, BitMask};

/// Tolerance in pixels when checking that a bbox lies within its image.
const BBOX_SLACK: f64 = 1.0;

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("referential integrity: {0}")]
    Reference(String),
    #[error("run lengths sum to {actual}, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("segmentation format: {0}")]
    Format(String),
    #[error("not found: {0}")]
    NotFound(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub height: usize,
    pub width: usize,
    pub file_name: String,
}

/// Run-length counts, either as a plain list or in compressed string form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Raw(Vec<u32>),
    Compressed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { counts: RleCounts, size: [usize; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    #[serde(default)]
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    pub area: f64,
    pub bbox: [f64; 4],
    #[serde(default, deserialize_with = "de_flag")]
    pub iscrowd: bool,
}

fn de_flag<'de, D: serde::Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        B(bool),
        N(i64),
    }
    Ok(match Flag::deserialize(d)? {
        Flag::B(b) => b,
        Flag::N(n) => n != 0,
    })
}

impl InstanceAnnotation {
    /// Decode this instance's segmentation at the given image size.
    pub fn decode(&self, height: usize, width: usize) -> Result<BitMask, CocoError> {
        match &self.segmentation {
            Segmentation::Polygons(polys) => rasterize_polygon(polys, height, width),
            Segmentation::Rle { counts, size } => {
                if size[0] != height || size[1] != width {
                    return Err(CocoError::Format(format!(
                        "annotation {}: RLE size {}x{} differs from image {}x{}",
                        self.id, size[0], size[1], height, width
                    )));
                }
                match counts {
                    RleCounts::Raw(c) => decode_rle(c, height, width),
                    RleCounts::Compressed(s) => decode_rle(&decode_rle_string(s)?, height, width),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationIndex {
    pub images: BTreeMap<u64, ImageInfo>,
    pub instances: BTreeMap<u64, Vec<InstanceAnnotation>>,
    pub categories: BTreeMap<u64, String>,
    pub captions: BTreeMap<u64, Vec<String>>,
    /// Records skipped during loading, one message each.
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    height: usize,
    width: usize,
    #[serde(default)]
    file_name: String,
}

#[derive(Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct RawCaption {
    #[serde(default)]
    id: u64,
    image_id: u64,
    caption: String,
}

fn read_document(path: &Path) -> Result<Value, CocoError> {
    let text = std::fs::read_to_string(path).map_err(|source| CocoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CocoError::Parse(format!("{}: {e}", path.display())))
}

fn records<'a>(doc: &'a Value, key: &str, required: bool) -> Result<&'a [Value], CocoError> {
    match doc.get(key) {
        Some(Value::Array(items)) => Ok(items),
        Some(_) => Err(CocoError::Parse(format!("`{key}` is not an array"))),
        None if required => Err(CocoError::Parse(format!("missing `{key}` array"))),
        None => Ok(&[]),
    }
}

fn parse_record<T: DeserializeOwned>(key: &str, i: usize, v: &Value) -> Result<T, CocoError> {
    T::deserialize(v).map_err(|e| CocoError::Parse(format!("{key}[{i}]: {e}")))
}

impl AnnotationIndex {
    /// Parse an instance annotation document.
    pub fn load_instances(path: impl AsRef<Path>) -> Result<Self, CocoError> {
        let doc = read_document(path.as_ref())?;
        Self::from_instances_value(&doc)
    }

    pub fn from_instances_str(text: &str) -> Result<Self, CocoError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| CocoError::Parse(e.to_string()))?;
        Self::from_instances_value(&doc)
    }

    fn from_instances_value(doc: &Value) -> Result<Self, CocoError> {
        let mut index = AnnotationIndex::default();
        for (i, v) in records(doc, "images", true)?.iter().enumerate() {
            let img: RawImage = parse_record("images", i, v)?;
            if img.height == 0 || img.width == 0 {
                return Err(CocoError::Parse(format!(
                    "images[{i}]: image {} has zero size",
                    img.id
                )));
            }
            index.images.insert(
                img.id,
                ImageInfo {
                    height: img.height,
                    width: img.width,
                    file_name: img.file_name,
                },
            );
        }
        for (i, v) in records(doc, "categories", true)?.iter().enumerate() {
            let cat: RawCategory = parse_record("categories", i, v)?;
            index.categories.insert(cat.id, cat.name);
        }
        for (i, v) in records(doc, "annotations", true)?.iter().enumerate() {
            let ann: InstanceAnnotation = parse_record("annotations", i, v)?;
            let Some(img) = index.images.get(&ann.image_id) else {
                return Err(CocoError::Reference(format!(
                    "annotations[{i}] (id {}) references missing image {}",
                    ann.id, ann.image_id
                )));
            };
            if !index.categories.contains_key(&ann.category_id) {
                return Err(CocoError::Reference(format!(
                    "annotations[{i}] (id {}) references missing category {}",
                    ann.id, ann.category_id
                )));
            }
            if let Some(problem) = invalid_geometry(&ann, img) {
                index
                    .warnings
                    .push(format!("annotation {} skipped: {problem}", ann.id));
                continue;
            }
            index.instances.entry(ann.image_id).or_default().push(ann);
        }
        index.warnings.sort();
        for list in index.instances.values_mut() {
            list.sort_by(|a, b| {
                (a.id, a.category_id)
                    .cmp(&(b.id, b.category_id))
                    .then(a.area.total_cmp(&b.area))
                    .then_with(|| {
                        a.bbox
                            .iter()
                            .zip(&b.bbox)
                            .map(|(x, y)| x.total_cmp(y))
                            .find(|o| o.is_ne())
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
            });
        }
        Ok(index)
    }

    /// Attach captions from a caption document. Captions for unknown images
    /// are skipped with a warning.
    pub fn load_captions(mut self, path: impl AsRef<Path>) -> Result<Self, CocoError> {
        let doc = read_document(path.as_ref())?;
        self.attach_captions(&doc)?;
        Ok(self)
    }

    pub fn with_captions_str(mut self, text: &str) -> Result<Self, CocoError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| CocoError::Parse(e.to_string()))?;
        self.attach_captions(&doc)?;
        Ok(self)
    }

    fn attach_captions(&mut self, doc: &Value) -> Result<(), CocoError> {
        let mut parsed: Vec<RawCaption> = Vec::new();
        for (i, v) in records(doc, "annotations", true)?.iter().enumerate() {
            let cap: RawCaption = parse_record("annotations", i, v)?;
            if !self.images.contains_key(&cap.image_id) {
                self.warnings.push(format!(
                    "caption annotations[{i}] skipped: unknown image {}",
                    cap.image_id
                ));
                continue;
            }
            parsed.push(cap);
        }
        parsed.sort_by(|a, b| (a.image_id, a.id, &a.caption).cmp(&(b.image_id, b.id, &b.caption)));
        for cap in parsed {
            self.captions.entry(cap.image_id).or_default().push(cap.caption);
        }
        Ok(())
    }

    pub fn captions_for(&self, image_id: u64) -> &[String] {
        self.captions.get(&image_id).map_or(&[], Vec::as_slice)
    }

    pub fn instances_for(&self, image_id: u64) -> &[InstanceAnnotation] {
        self.instances.get(&image_id).map_or(&[], Vec::as_slice)
    }

    /// Category id for an exact category name.
    pub fn category_id(&self, name: &str) -> Option<u64> {
        self.categories
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .map(|(&id, _)| id)
    }

    /// Ids of categories with at least one non-crowd instance in the image.
    pub fn categories_present(&self, image_id: u64) -> Vec<u64> {
        let mut ids: Vec<u64> = self
            .instances_for(image_id)
            .iter()
            .filter(|a| !a.iscrowd)
            .map(|a| a.category_id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Union of every non-crowd instance mask of a category in one image.
    pub fn category_mask(&self, image_id: u64, category_id: u64) -> Result<BitMask, CocoError> {
        let img = self
            .images
            .get(&image_id)
            .ok_or_else(|| CocoError::NotFound(format!("image {image_id}")))?;
        let mut merged: Option<BitMask> = None;
        for ann in self
            .instances_for(image_id)
            .iter()
            .filter(|a| a.category_id == category_id && !a.iscrowd)
        {
            let m = ann.decode(img.height, img.width)?;
            match merged.as_mut() {
                Some(acc) => acc.union_with(&m)?,
                None => merged = Some(m),
            }
        }
        merged.ok_or_else(|| {
            CocoError::NotFound(format!(
                "no instance of category {category_id} in image {image_id}"
            ))
        })
    }
}

fn invalid_geometry(ann: &InstanceAnnotation, img: &ImageInfo) -> Option<String> {
    if !(ann.area > 0.0) {
        return Some(format!("non-positive area {}", ann.area));
    }
    let [x, y, w, h] = ann.bbox;
    let inside = x >= -BBOX_SLACK
        && y >= -BBOX_SLACK
        && w >= 0.0
        && h >= 0.0
        && x + w <= img.width as f64 + BBOX_SLACK
        && y + h <= img.height as f64 + BBOX_SLACK;
    if !inside {
        return Some(format!(
            "bbox {:?} outside {}x{} image",
            ann.bbox, img.width, img.height
        ));
    }
    None
}

/// Anything that can produce the pixel mask of a named object in an image.
pub trait MaskSource {
    fn object_mask(&self, image_id: u64, category: &str) -> Result<BitMask, CocoError>;
}

impl MaskSource for AnnotationIndex {
    fn object_mask(&self, image_id: u64, category: &str) -> Result<BitMask, CocoError> {
        let cat = self
            .category_id(category)
            .ok_or_else(|| CocoError::NotFound(format!("category {category:?}")))?;
        self.category_mask(image_id, cat)
    }
}

/// Several indices searched in order, e.g. a train and a val split.
impl MaskSource for [AnnotationIndex] {
    fn object_mask(&self, image_id: u64, category: &str) -> Result<BitMask, CocoError> {
        for index in self {
            if index.images.contains_key(&image_id) {
                return index.object_mask(image_id, category);
            }
        }
        Err(CocoError::NotFound(format!("image {image_id}")))
    }
}
