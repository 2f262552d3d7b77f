//! Procedural shapes-on-clutter detection data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AreaBuckets, BBox, Dataset, DatasetManifest, DetectionSample, SizeBucket};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of distinct shape classes the renderer knows.
pub const MAX_CLASSES: usize = 6;

/// Class 0 draws from the small bucket this many times more often.
const SMALL_CLASS_BIAS: f64 = 4.0;

const CLASS_COLORS: [[f32; 3]; MAX_CLASSES] = [
    [0.90, 0.15, 0.12],
    [0.15, 0.80, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.90],
];

/// Fractions of objects drawn from each area bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeMix {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

impl Default for SizeMix {
    fn default() -> Self {
        Self {
            small: 0.35,
            medium: 0.40,
            large: 0.25,
        }
    }
}

impl SizeMix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.small, self.medium, self.large];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(format!("size_mix has a negative part: {self:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "size_mix fractions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    fn skewed_small(&self) -> SizeMix {
        if self.small == 0.0 {
            return *self;
        }
        let s = self.small * SMALL_CLASS_BIAS;
        let total = s + self.medium + self.large;
        SizeMix {
            small: s / total,
            medium: self.medium / total,
            large: self.large / total,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> SizeBucket {
        let u: f64 = rng.random();
        if u < self.small {
            SizeBucket::Small
        } else if u < self.small + self.medium || self.large == 0.0 {
            if self.medium == 0.0 {
                SizeBucket::Small
            } else {
                SizeBucket::Medium
            }
        } else {
            SizeBucket::Large
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub split: String,
    pub n_images: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub size_mix: SizeMix,
    pub max_objects: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            split: "train".into(),
            n_images: 100,
            image_size: 128,
            n_classes: 3,
            seed: 0,
            size_mix: SizeMix::default(),
            max_objects: 4,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Config("n_images must be at least 1".into()));
        }
        if !(2..=MAX_CLASSES).contains(&self.n_classes) {
            return Err(Error::Config(format!(
                "n_classes must be in 2..={MAX_CLASSES}, got {}",
                self.n_classes
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be at least 32".into()));
        }
        if self.max_objects == 0 {
            return Err(Error::Config("max_objects must be at least 1".into()));
        }
        self.size_mix.validate()
    }

    fn area_range(&self, bucket: SizeBucket) -> (f64, f64) {
        let b = AreaBuckets::for_image_size(self.image_size);
        let s = self.image_size as f64;
        let (lo, hi) = match bucket {
            SizeBucket::Small => ((0.3 * b.small_max).max(4.0).min(0.8 * b.small_max), b.small_max),
            SizeBucket::Medium => (b.small_max, b.medium_max),
            SizeBucket::Large => (b.medium_max, (4.0 * b.medium_max).min((0.7 * s).powi(2))),
        };
        // Keep sampled areas strictly inside the bucket after float round-off.
        (lo * (1.0 + 1e-6), hi * (1.0 - 1e-6))
    }
}

fn image_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
        .wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Render a split in memory. Pixel values are quantized exactly as PNG storage
/// would, so a written-then-loaded split is identical to this one.
pub fn render_dataset(cfg: &GenerateConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples: Vec<DetectionSample> = (0..cfg.n_images)
        .map(|i| render_sample(cfg, i))
        .collect();
    let annotations = samples
        .iter()
        .map(|s| (s.sample_id.clone(), s.boxes.clone()))
        .collect();
    let manifest = DatasetManifest::from_annotations(
        &cfg.split,
        &annotations,
        cfg.n_classes,
        cfg.image_size,
        cfg.seed,
        cfg.size_mix,
    );
    Ok(Dataset { manifest, samples })
}

/// Render a split and write images, annotations and manifest under `dir`.
pub fn generate_shapes_dataset(cfg: &GenerateConfig, dir: &Path) -> Result<DatasetManifest> {
    let ds = render_dataset(cfg)?;
    ds.write(dir)?;
    Ok(ds.manifest)
}

fn render_sample(cfg: &GenerateConfig, index: usize) -> DetectionSample {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, index));
    let size = cfg.image_size;
    let mut canvas = Canvas::background(size, &mut rng);
    canvas.clutter(&mut rng);

    let n_objects = rng.random_range(1..=cfg.max_objects);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class_id = rng.random_range(0..cfg.n_classes);
        let mix = if class_id == 0 {
            cfg.size_mix.skewed_small()
        } else {
            cfg.size_mix
        };
        let bucket = mix.sample(&mut rng);
        if let Some(b) = place_box(cfg, bucket, class_id, &boxes, &mut rng) {
            canvas.draw_shape(&b, &mut rng);
            boxes.push(b);
        }
    }

    let image = canvas.into_tensor();
    DetectionSample {
        sample_id: format!("{}_{index:05}", cfg.split),
        image,
        boxes,
    }
}

fn place_box(
    cfg: &GenerateConfig,
    bucket: SizeBucket,
    class_id: usize,
    existing: &[BBox],
    rng: &mut impl Rng,
) -> Option<BBox> {
    let s = cfg.image_size as f64;
    let (lo, hi) = cfg.area_range(bucket);
    for _ in 0..40 {
        let area = lo * (hi / lo).powf(rng.random::<f64>());
        let aspect = (rng.random_range((0.75f64).ln()..(4.0f64 / 3.0).ln())).exp();
        let w = (area * aspect).sqrt();
        let h = area / w;
        if w >= s - 1.0 || h >= s - 1.0 {
            continue;
        }
        let x0 = rng.random_range(0.5..s - w - 0.5);
        let y0 = rng.random_range(0.5..s - h - 0.5);
        let Ok(b) = BBox::new(x0, y0, x0 + w, y0 + h, class_id) else {
            continue;
        };
        if b.area() >= hi || b.area() <= lo * (1.0 - 1e-6) {
            continue;
        }
        let clash = existing.iter().any(|e| {
            let (ex, ey) = e.center();
            let (bx, by) = b.center();
            crate::metrics::iou(e, &b) > 0.1
                || ((ex / 8.0).floor() == (bx / 8.0).floor() && (ey / 8.0).floor() == (by / 8.0).floor())
        });
        if !clash {
            return Some(b);
        }
    }
    None
}

struct Canvas {
    size: usize,
    rgb: Vec<[f32; 3]>,
}

impl Canvas {
    fn background(size: usize, rng: &mut impl Rng) -> Self {
        let g0: f32 = rng.random_range(0.25..0.6);
        let g1: f32 = rng.random_range(0.25..0.6);
        let tint: [f32; 3] = [
            rng.random_range(-0.04..0.04),
            rng.random_range(-0.04..0.04),
            rng.random_range(-0.04..0.04),
        ];
        let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let mut rgb = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let t = 0.5 + 0.5 * ((x as f32 / size as f32 - 0.5) * dx + (y as f32 / size as f32 - 0.5) * dy);
                let g = g0 + (g1 - g0) * t;
                let n: f32 = rng.random_range(-0.03..0.03);
                rgb.push([g + tint[0] + n, g + tint[1] + n, g + tint[2] + n]);
            }
        }
        Self { size, rgb }
    }

    /// Desaturated rectangles and strokes so the background is not trivially flat.
    fn clutter(&mut self, rng: &mut impl Rng) {
        let s = self.size as f32;
        let n = rng.random_range(3..9);
        for _ in 0..n {
            let gray: f32 = rng.random_range(0.15..0.75);
            let alpha: f32 = rng.random_range(0.3..0.6);
            if rng.random_bool(0.5) {
                let w = rng.random_range(0.05 * s..0.35 * s);
                let h = rng.random_range(0.05 * s..0.35 * s);
                let x0 = rng.random_range(0.0..s - w);
                let y0 = rng.random_range(0.0..s - h);
                self.blend_region(x0, y0, x0 + w, y0 + h, gray, alpha, |_, _| true);
            } else {
                let x0 = rng.random_range(0.0..s);
                let y0 = rng.random_range(0.0..s);
                let len = rng.random_range(0.2 * s..0.7 * s);
                let ang: f32 = rng.random_range(0.0..std::f32::consts::PI);
                let (ux, uy) = (ang.cos(), ang.sin());
                let thick = rng.random_range(0.8..2.0f32);
                let (xa, ya) = (x0, y0);
                let (xb, yb) = (x0 + ux * len, y0 + uy * len);
                self.blend_region(
                    xa.min(xb) - thick,
                    ya.min(yb) - thick,
                    xa.max(xb) + thick,
                    ya.max(yb) + thick,
                    gray,
                    alpha,
                    move |px, py| {
                        let t = ((px - xa) * ux + (py - ya) * uy).clamp(0.0, len);
                        let (cx, cy) = (xa + ux * t, ya + uy * t);
                        (px - cx).powi(2) + (py - cy).powi(2) <= thick * thick
                    },
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn blend_region(
        &mut self,
        x0: f32,
        y0: f32,
        x1: f32,
        y1: f32,
        gray: f32,
        alpha: f32,
        inside: impl Fn(f32, f32) -> bool,
    ) {
        let lim = self.size as isize - 1;
        let xs = (x0.floor() as isize).clamp(0, lim)..=(x1.ceil() as isize).clamp(0, lim);
        for y in (y0.floor() as isize).clamp(0, lim)..=(y1.ceil() as isize).clamp(0, lim) {
            for x in xs.clone() {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                if px >= x0 && px <= x1 && py >= y0 && py <= y1 && inside(px, py) {
                    let p = &mut self.rgb[y as usize * self.size + x as usize];
                    for v in p.iter_mut() {
                        *v = (1.0 - alpha) * *v + alpha * gray;
                    }
                }
            }
        }
    }

    fn draw_shape(&mut self, b: &BBox, rng: &mut impl Rng) {
        let base = CLASS_COLORS[b.class_id % MAX_CLASSES];
        let jitter: f32 = rng.random_range(-0.08..0.08);
        let color = base.map(|c| (c + jitter).clamp(0.0, 1.0));
        let lim = self.size as isize - 1;
        let (w, h) = (b.width() as f32, b.height() as f32);
        let (bx, by) = (b.x_min as f32, b.y_min as f32);
        const SUB: [f32; 2] = [0.25, 0.75];
        for y in (b.y_min.floor() as isize).clamp(0, lim)..=(b.y_max.ceil() as isize).clamp(0, lim) {
            for x in (b.x_min.floor() as isize).clamp(0, lim)..=(b.x_max.ceil() as isize).clamp(0, lim) {
                let mut hits = 0;
                for sy in SUB {
                    for sx in SUB {
                        let u = (x as f32 + sx - bx) / w;
                        let v = (y as f32 + sy - by) / h;
                        if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && shape_contains(b.class_id, u, v) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cov = hits as f32 / 4.0;
                let shade: f32 = 1.0 + rng.random_range(-0.06..0.06);
                let p = &mut self.rgb[y as usize * self.size + x as usize];
                for (v, c) in p.iter_mut().zip(color) {
                    *v = (1.0 - cov) * *v + cov * (c * shade);
                }
            }
        }
    }

    fn into_tensor(self) -> Tensor<f32> {
        let s = self.size;
        let mut t = Tensor::zeros([1, 3, s, s]);
        for (i, p) in self.rgb.iter().enumerate() {
            for (c, v) in p.iter().enumerate() {
                t.data_mut()[c * s * s + i] = super::quantize(*v) as f32 / 255.0;
            }
        }
        t
    }
}

/// Membership test in box-normalized coordinates `(u, v) in [0, 1]^2`. Every
/// shape touches all four sides of its box, so the box is tight.
fn shape_contains(class_id: usize, u: f32, v: f32) -> bool {
    let (du, dv) = (u - 0.5, v - 0.5);
    match class_id % MAX_CLASSES {
        0 => du * du + dv * dv <= 0.25,
        1 => true,
        2 => du.abs() <= 0.5 * v,
        3 => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
        4 => du.abs() + dv.abs() <= 0.5,
        _ => {
            let r2 = du * du + dv * dv;
            (0.09..=0.25).contains(&r2)
        }
    }
}
