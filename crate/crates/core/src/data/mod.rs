//! Synthetic long-tailed detection data: generator, annotation JSON and PPM
//! images, laid out as `{split}/images/*.ppm` plus `{split}/annotations.json`.

mod annotations;
mod ppm;
mod render;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::image::Image;
use crate::matching::GroundTruthSet;
use crate::rng::Rng;

pub use annotations::{load_annotations, save_annotations, AnnotationSet, ImageEntry, SceneAnnotation};
pub use ppm::{decode_ppm, encode_ppm, load_image, save_image};

/// Category names, in class-id order.
pub const CLASS_NAMES: [&str; 6] = ["Automotive", "Bike", "Dry Cell", "Laptop", "Smart Phone", "Toy"];

/// Instance counts the default class distribution is derived from.
pub const CLASS_COUNTS: [u32; 6] = [159, 6, 415, 60, 86, 226];

/// Placement attempts per object before it is dropped.
pub const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {location}: {msg}")]
    Annotation { path: String, location: String, msg: String },
    #[error("{path}: {msg}")]
    Image { path: String, msg: String },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub fn default_class_probs() -> Vec<f64> {
    let total: u32 = CLASS_COUNTS.iter().sum();
    CLASS_COUNTS.iter().map(|&c| c as f64 / total as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub image_size: usize,
    pub class_probs: Vec<f64>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
    /// Largest IoU allowed between two placed objects.
    pub overlap_allowance: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_images: 700,
            val_images: 200,
            test_images: 100,
            image_size: 64,
            class_probs: default_class_probs(),
            min_objects: 1,
            max_objects: 4,
            seed: 0,
            overlap_allowance: 0.1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.class_probs.len() != CLASS_NAMES.len() {
            return err(format!("class_probs needs {} entries, got {}", CLASS_NAMES.len(), self.class_probs.len()));
        }
        if self.class_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return err("class_probs must be finite and non-negative".into());
        }
        let sum: f64 = self.class_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return err(format!("class_probs sum to {sum}, expected 1"));
        }
        if self.min_objects > self.max_objects {
            return err(format!("min_objects {} > max_objects {}", self.min_objects, self.max_objects));
        }
        if self.image_size < 8 {
            return err(format!("image_size {} is below 8", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.overlap_allowance) {
            return err(format!("overlap_allowance {} outside [0, 1]", self.overlap_allowance));
        }
        Ok(())
    }

    pub fn split_len(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.train_images,
            SplitName::Val => self.val_images,
            SplitName::Test => self.test_images,
        }
    }
}

/// Images plus their annotations for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: SplitName,
    pub images: Vec<Image>,
    pub annotations: AnnotationSet,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ground_truth(&self, i: usize) -> GroundTruthSet {
        let s = &self.annotations.scenes[i];
        GroundTruthSet::new(s.boxes.clone(), s.labels.clone())
    }

    /// Instances per class across the split.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.annotations.categories.len()];
        for s in &self.annotations.scenes {
            for &l in &s.labels {
                counts[l] += 1;
            }
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

fn image_file(id: u64) -> String {
    format!("images/{id:05}.ppm")
}

/// Renders one scene. The stream depends only on `(seed, split, index)`, so
/// images can be produced in any order.
pub fn generate_image(cfg: &DatasetConfig, split: SplitName, index: usize) -> (Image, SceneAnnotation) {
    let mut rng = Rng::derived(cfg.seed, (split.index() << 32) | index as u64);
    let mut img = render::background(&mut rng, cfg.image_size);
    let n = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    let mut scene = SceneAnnotation {
        image_id: index as u64,
        ..Default::default()
    };
    for _ in 0..n {
        let class = rng.categorical(&cfg.class_probs);
        let (w, h) = render::sample_size(&mut rng, class);
        let placed = (0..MAX_PLACEMENT_TRIES).find_map(|_| {
            let cx = rng.range(w / 2.0, 1.0 - w / 2.0);
            let cy = rng.range(h / 2.0, 1.0 - h / 2.0);
            let b = BBox::new(cx, cy, w, h).ok()?;
            scene
                .boxes
                .iter()
                .all(|o| iou(o, &b) <= cfg.overlap_allowance)
                .then_some(b)
        });
        if let Some(b) = placed {
            render::draw(&mut img, &mut rng, class, &b);
            scene.boxes.push(b);
            scene.labels.push(class);
        }
    }
    render::quantize(&mut img);
    (img, scene)
}

pub fn generate_split(cfg: &DatasetConfig, split: SplitName) -> Split {
    let n = cfg.split_len(split);
    let mut images = Vec::with_capacity(n);
    let mut set = AnnotationSet {
        categories: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    for i in 0..n {
        let (img, scene) = generate_image(cfg, split, i);
        set.images.push(ImageEntry {
            id: scene.image_id,
            file: image_file(scene.image_id),
            width: cfg.image_size,
            height: cfg.image_size,
        });
        set.scenes.push(scene);
        images.push(img);
    }
    Split {
        name: split,
        images,
        annotations: set,
    }
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    debug_assert_eq!(render::NUM_GLYPHS, CLASS_NAMES.len());
    Ok(Dataset {
        train: generate_split(cfg, SplitName::Train),
        val: generate_split(cfg, SplitName::Val),
        test: generate_split(cfg, SplitName::Test),
    })
}

pub fn split_dir(root: &Path, split: SplitName) -> PathBuf {
    root.join(split.as_str())
}

pub fn save_split(root: &Path, split: &Split) -> Result<(), DataError> {
    let dir = split_dir(root, split.name);
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| DataError::io(&images, e))?;
    for (img, entry) in split.images.iter().zip(&split.annotations.images) {
        save_image(&dir.join(&entry.file), img)?;
    }
    save_annotations(&dir.join("annotations.json"), &split.annotations)
}

pub fn save_dataset(root: &Path, ds: &Dataset) -> Result<(), DataError> {
    for name in SplitName::ALL {
        save_split(root, ds.split(name))?;
    }
    Ok(())
}

pub fn load_split(root: &Path, name: SplitName) -> Result<Split, DataError> {
    let dir = split_dir(root, name);
    let annotations = load_annotations(&dir.join("annotations.json"))?;
    let mut images = Vec::with_capacity(annotations.images.len());
    for entry in &annotations.images {
        let path = dir.join(&entry.file);
        let img = load_image(&path)?;
        if img.size() != entry.width || img.size() != entry.height {
            return Err(DataError::Image {
                path: path.display().to_string(),
                msg: format!(
                    "image is {0}x{0}, annotation says {1}x{2}",
                    img.size(),
                    entry.width,
                    entry.height
                ),
            });
        }
        images.push(img);
    }
    Ok(Split { name, images, annotations })
}

pub fn load_dataset(root: &Path) -> Result<Dataset, DataError> {
    Ok(Dataset {
        train: load_split(root, SplitName::Train)?,
        val: load_split(root, SplitName::Val)?,
        test: load_split(root, SplitName::Test)?,
    })
}
