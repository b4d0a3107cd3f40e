//! Annotation JSON: `images`, `annotations` and `categories` arrays, boxes
//! as normalized `[cx, cy, w, h]`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;

use super::DataError;

/// One image's ground truth.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SceneAnnotation {
    pub image_id: u64,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

/// Everything stored in one split's `annotations.json`. `scenes[i]` belongs
/// to `images[i]`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AnnotationSet {
    pub images: Vec<ImageEntry>,
    pub scenes: Vec<SceneAnnotation>,
    pub categories: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    image_id: u64,
    class_id: usize,
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCategory {
    id: usize,
    name: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    images: Vec<ImageEntry>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

impl AnnotationSet {
    pub fn to_json(&self) -> String {
        let raw = RawFile {
            images: self.images.clone(),
            annotations: self
                .scenes
                .iter()
                .flat_map(|s| {
                    s.boxes.iter().zip(&s.labels).map(|(b, &l)| RawAnnotation {
                        image_id: s.image_id,
                        class_id: l,
                        bbox: b.to_array(),
                    })
                })
                .collect(),
            categories: self
                .categories
                .iter()
                .enumerate()
                .map(|(id, name)| RawCategory { id, name: name.clone() })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("annotation types serialize")
    }

    /// Parses and validates; `origin` names the source in error messages.
    pub fn from_json(text: &str, origin: &str) -> Result<Self, DataError> {
        let bad = |location: String, msg: String| DataError::Annotation {
            path: origin.to_string(),
            location,
            msg,
        };
        let raw: RawFile = serde_json::from_str(text).map_err(|e| {
            bad(format!("line {}, column {}", e.line(), e.column()), e.to_string())
        })?;
        let mut categories = Vec::with_capacity(raw.categories.len());
        for (i, c) in raw.categories.into_iter().enumerate() {
            if c.id != i {
                return Err(bad(format!("categories[{i}].id"), format!("expected id {i}, found {}", c.id)));
            }
            categories.push(c.name);
        }
        let mut by_id = HashMap::new();
        let mut scenes = Vec::with_capacity(raw.images.len());
        for (i, img) in raw.images.iter().enumerate() {
            if img.width == 0 || img.height == 0 {
                return Err(bad(format!("images[{i}]"), "zero image dimension".into()));
            }
            if by_id.insert(img.id, i).is_some() {
                return Err(bad(format!("images[{i}].id"), format!("duplicate image id {}", img.id)));
            }
            scenes.push(SceneAnnotation {
                image_id: img.id,
                ..Default::default()
            });
        }
        for (i, a) in raw.annotations.iter().enumerate() {
            let Some(&slot) = by_id.get(&a.image_id) else {
                return Err(bad(format!("annotations[{i}].image_id"), format!("unknown image id {}", a.image_id)));
            };
            if a.class_id >= categories.len() {
                return Err(bad(
                    format!("annotations[{i}].class_id"),
                    format!("class id {} but only {} categories", a.class_id, categories.len()),
                ));
            }
            let b = BBox::from_array(a.bbox).map_err(|e| bad(format!("annotations[{i}].bbox"), e.to_string()))?;
            if !b.inside_unit(1e-9) {
                return Err(bad(format!("annotations[{i}].bbox"), "box extends outside the image".into()));
            }
            scenes[slot].boxes.push(b);
            scenes[slot].labels.push(a.class_id);
        }
        Ok(Self {
            images: raw.images,
            scenes,
            categories,
        })
    }
}

pub fn save_annotations(path: &Path, set: &AnnotationSet) -> Result<(), DataError> {
    fs::write(path, set.to_json()).map_err(|e| DataError::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    AnnotationSet::from_json(&text, &path.display().to_string())
}
