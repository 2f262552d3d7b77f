//! Synthetic detection data: ground-truth boxes, samples, on-disk layout and
//! class-balanced sample-set selection.
//!
//! A split lives in one directory:
//!
//! ```text
//! <split>/manifest.json
//! <split>/annotations.json     { sample_id: [[x_min, y_min, x_max, y_max, class_id], ...] }
//! <split>/images/<sample_id>.png
//! ```
//!
//! Coordinates are pixels with the origin at the top-left corner.

mod balance;
mod render;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

pub use balance::{imbalance_ratio, select_class_balanced, Selection};
pub use render::{generate_shapes_dataset, render_dataset, GenerateConfig, SizeMix, MAX_CLASSES};

/// Axis-aligned ground-truth box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "BoxRow", try_from = "BoxRow")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: usize,
}

#[derive(Serialize, Deserialize)]
struct BoxRow(f64, f64, f64, f64, usize);

impl From<BBox> for BoxRow {
    fn from(b: BBox) -> Self {
        BoxRow(b.x_min, b.y_min, b.x_max, b.y_max, b.class_id)
    }
}

impl TryFrom<BoxRow> for BBox {
    type Error = String;

    fn try_from(r: BoxRow) -> std::result::Result<Self, String> {
        BBox::new(r.0, r.1, r.2, r.3, r.4).map_err(|e| e.to_string())
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class_id: usize) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(Error::Contract(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Clip to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clamped(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
            self.class_id,
        )
        .ok()
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
            class_id: self.class_id,
        }
    }

    pub fn hflipped(&self, image_width: f64) -> BBox {
        BBox {
            x_min: image_width - self.x_max,
            x_max: image_width - self.x_min,
            ..*self
        }
    }
}

/// Object-size buckets by ground-truth pixel area: small `[0, small_max)`,
/// medium `[small_max, medium_max)`, large `[medium_max, inf)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaBuckets {
    pub small_max: f64,
    pub medium_max: f64,
}

impl Default for AreaBuckets {
    fn default() -> Self {
        Self {
            small_max: 32.0 * 32.0,
            medium_max: 96.0 * 96.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl AreaBuckets {
    /// The 32²/96² thresholds rescaled linearly in side length from a 640 px
    /// reference image.
    pub fn for_image_size(image_size: usize) -> Self {
        let f = image_size as f64 / 640.0;
        Self {
            small_max: (32.0 * f).powi(2),
            medium_max: (96.0 * f).powi(2),
        }
    }

    pub fn classify(&self, area: f64) -> SizeBucket {
        if area < self.small_max {
            SizeBucket::Small
        } else if area < self.medium_max {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }

    /// `[lo, hi)` area range of a bucket.
    pub fn range(&self, bucket: SizeBucket) -> (f64, f64) {
        match bucket {
            SizeBucket::Small => (0.0, self.small_max),
            SizeBucket::Medium => (self.small_max, self.medium_max),
            SizeBucket::Large => (self.medium_max, f64::INFINITY),
        }
    }
}

/// Ground truth for a split, keyed by sample id.
pub type Annotations = BTreeMap<String, Vec<BBox>>;

/// One image with its ground truth. The image is `1 x 3 x H x W`, values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct DetectionSample {
    pub sample_id: String,
    pub image: Tensor<f32>,
    pub boxes: Vec<BBox>,
}

impl DetectionSample {
    pub fn is_box_free(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image.height(), self.image.width())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub image_count: usize,
    pub instance_count: usize,
    pub class_counts: Vec<usize>,
    pub n_classes: usize,
    pub image_size: usize,
    pub seed: u64,
    pub size_mix: SizeMix,
}

impl DatasetManifest {
    pub fn from_annotations(
        split: &str,
        annotations: &Annotations,
        n_classes: usize,
        image_size: usize,
        seed: u64,
        size_mix: SizeMix,
    ) -> Self {
        let mut class_counts = vec![0usize; n_classes];
        for b in annotations.values().flatten() {
            class_counts[b.class_id] += 1;
        }
        Self {
            split: split.to_string(),
            image_count: annotations.len(),
            instance_count: class_counts.iter().sum(),
            class_counts,
            n_classes,
            image_size,
            seed,
            size_mix,
        }
    }
}

/// A fully loaded split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<DetectionSample>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

impl Dataset {
    pub fn annotations(&self) -> Annotations {
        self.samples
            .iter()
            .map(|s| (s.sample_id.clone(), s.boxes.clone()))
            .collect()
    }

    pub fn get(&self, sample_id: &str) -> Option<&DetectionSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Samples in the order of `ids`.
    pub fn subset(&self, ids: &[String]) -> Result<Vec<DetectionSample>> {
        let index: BTreeMap<&str, &DetectionSample> = self
            .samples
            .iter()
            .map(|s| (s.sample_id.as_str(), s))
            .collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::Config(format!("unknown sample id `{id}`")))
            })
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
        let annotations = read_annotations(&dir.join(ANNOTATION_FILE))?;
        let mut samples = Vec::with_capacity(annotations.len());
        for (id, boxes) in annotations {
            let path = image_path(dir, &id);
            let image = load_image(&path)?;
            samples.push(DetectionSample {
                sample_id: id,
                image,
                boxes,
            });
        }
        Ok(Self { manifest, samples })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(&dir.join(IMAGE_DIR))?;
        for s in &self.samples {
            save_image(&s.image, &image_path(dir, &s.sample_id))?;
        }
        write_annotations(&dir.join(ANNOTATION_FILE), &self.annotations())?;
        io::write_json(&dir.join(MANIFEST_FILE), &self.manifest)
    }
}

pub fn image_path(dir: &Path, sample_id: &str) -> PathBuf {
    dir.join(IMAGE_DIR).join(format!("{sample_id}.png"))
}

pub fn read_annotations(path: &Path) -> Result<Annotations> {
    io::read_json(path)
}

pub fn write_annotations(path: &Path, annotations: &Annotations) -> Result<()> {
    io::write_json(path, annotations)
}

/// Read an RGB PNG into a `1 x 3 x H x W` tensor scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let idx = t.index(0, c, y as usize, x as usize);
            t.data_mut()[idx] = px[c] as f32 / 255.0;
        }
    }
    Ok(t)
}

/// Quantize a `[0, 1]` value the way PNG storage does.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb_image(image: &Tensor<f32>) -> image::RgbImage {
    let (h, w) = (image.height(), image.width());
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| quantize(image.get(0, c, y as usize, x as usize));
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        io::ensure_dir(parent)?;
    }
    to_rgb_image(image).save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
