//! Spatial reweighting masks built from ground-truth boxes: 1 inside a box,
//! a decaying ring in a margin proportional to the box size, 0 elsewhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    Power,
    #[serde(alias = "exp")]
    Exponential,
    #[serde(alias = "ftg")]
    FlatTopGaussian,
    /// Constant 1 over the whole ring.
    None,
}

impl std::str::FromStr for DecayKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power" => Ok(DecayKind::Power),
            "exp" | "exponential" => Ok(DecayKind::Exponential),
            "ftg" | "flat_top_gaussian" => Ok(DecayKind::FlatTopGaussian),
            "none" => Ok(DecayKind::None),
            other => Err(Error::Config(format!(
                "unknown decay `{other}` (expected power, exp, ftg or none)"
            ))),
        }
    }
}

/// Ring profile. Lengths `tau` and `sigma` are relative to the distance from
/// the box center to its nearest edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySpec {
    pub kind: DecayKind,
    /// Power exponent.
    pub s: f64,
    pub tau: f64,
    pub sigma: f64,
}

impl Default for DecaySpec {
    fn default() -> Self {
        Self {
            kind: DecayKind::Power,
            s: 1.0,
            tau: 0.5,
            sigma: 0.5,
        }
    }
}

impl DecaySpec {
    pub fn of_kind(kind: DecayKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("decay parameter {name} must be positive, got {v}")))
            }
        };
        positive("s", self.s)?;
        positive("tau", self.tau)?;
        positive("sigma", self.sigma)
    }
}

/// `min(1, a * sq_dist^-s)`.
pub fn decay_power(sq_dist: f64, a: f64, s: f64) -> Result<f64> {
    if !(sq_dist > 0.0) {
        return Err(Error::Domain(format!(
            "power decay is singular at squared distance {sq_dist}"
        )));
    }
    if !(a > 0.0 && s > 0.0) {
        return Err(Error::Domain(format!("power decay needs a > 0 and s > 0, got a={a} s={s}")));
    }
    Ok((a * sq_dist.powf(-s)).min(1.0))
}

/// Ring coefficient at squared distance `sq_dist` from a box center whose
/// nearest edge lies at distance `edge_dist`. Equals 1 for `r <= edge_dist`
/// and is non-increasing beyond.
pub fn decay_alternatives(sq_dist: f64, edge_dist: f64, spec: &DecaySpec) -> f64 {
    let r = sq_dist.sqrt();
    if r <= edge_dist {
        return 1.0;
    }
    let v = match spec.kind {
        DecayKind::Power => (edge_dist * edge_dist / sq_dist).powf(spec.s),
        DecayKind::Exponential => (-(r - edge_dist) / (spec.tau * edge_dist)).exp(),
        DecayKind::FlatTopGaussian => {
            let sigma = spec.sigma * edge_dist;
            (-(r - edge_dist).powi(2) / (2.0 * sigma * sigma)).exp()
        }
        DecayKind::None => 1.0,
    };
    v.clamp(0.0, 1.0)
}

/// Cell rectangle `[x0, x1) x [y0, y1)` on a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CellRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Feature-space footprint of one box: covered cells, relaxed cells, center
/// and nearest-edge distance, in cell units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxFootprint {
    pub inner: CellRect,
    pub relaxed: CellRect,
    pub center: (f64, f64),
    pub edge_dist: f64,
}

fn axis_span(lo: f64, hi: f64, stride: f64, len: usize) -> (usize, usize) {
    let (mut a, mut b) = if (hi - lo) / stride < 1.0 {
        let c = ((lo + hi) / 2.0 / stride).floor();
        (c, c + 1.0)
    } else {
        ((lo / stride).floor(), (hi / stride).ceil())
    };
    a = a.clamp(0.0, (len - 1) as f64);
    b = b.clamp(a + 1.0, len as f64);
    (a as usize, b as usize)
}

/// Map a box onto an `height x width` grid: corners rounded outwards, boxes
/// thinner than a cell snapped to the cell holding their center, margin of
/// `ceil(margin_ratio * side)` cells per side.
pub fn box_footprint(b: &BBox, height: usize, width: usize, stride: usize, margin_ratio: f64) -> BoxFootprint {
    let s = stride as f64;
    let (x0, x1) = axis_span(b.x_min, b.x_max, s, width);
    let (y0, y1) = axis_span(b.y_min, b.y_max, s, height);
    let mx = (margin_ratio * (x1 - x0) as f64).ceil() as usize;
    let my = (margin_ratio * (y1 - y0) as f64).ceil() as usize;
    BoxFootprint {
        inner: CellRect { x0, y0, x1, y1 },
        relaxed: CellRect {
            x0: x0.saturating_sub(mx),
            y0: y0.saturating_sub(my),
            x1: (x1 + mx).min(width),
            y1: (y1 + my).min(height),
        },
        center: ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0),
        edge_dist: ((x1 - x0) as f64).min((y1 - y0) as f64) / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightMask {
    pub layer: String,
    pub height: usize,
    pub width: usize,
    /// Row-major coefficients in `[0, 1]`.
    pub beta: Vec<f64>,
    /// Union of relaxed boxes.
    pub region: Vec<bool>,
    /// Union of box interiors.
    pub inside: Vec<bool>,
    /// Built from no boxes.
    pub empty: bool,
}

impl ReweightMask {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.beta[y * self.width + x]
    }

    pub fn region_len(&self) -> usize {
        self.region.iter().filter(|&&r| r).count()
    }

    /// Coefficient 1 on the whole map; every cell in the region.
    pub fn uniform(layer: &str, height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            layer: layer.to_string(),
            height,
            width,
            beta: vec![1.0; n],
            region: vec![true; n],
            inside: vec![true; n],
            empty: false,
        }
    }

    /// 8-bit grayscale PNG, 0 -> black, 1 -> white.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let pixels: Vec<u8> = self.beta.iter().map(|&b| (b * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, pixels).expect("buffer sized to map");
        if let Some(dir) = path.parent() {
            crate::io::ensure_dir(dir)?;
        }
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReweightConfig {
    pub margin_ratio: f64,
    pub decay: DecaySpec,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            margin_ratio: 0.25,
            decay: DecaySpec::default(),
        }
    }
}

impl ReweightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_ratio >= 0.0 && self.margin_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "margin ratio must be non-negative, got {}",
                self.margin_ratio
            )));
        }
        self.decay.validate()
    }
}

/// Reweighting mask of one `height x width` feature map at `stride`.
/// Overlapping boxes combine by pointwise maximum.
pub fn build_reweight_mask(
    layer: &str,
    boxes: &[BBox],
    height: usize,
    width: usize,
    stride: usize,
    cfg: &ReweightConfig,
) -> Result<ReweightMask> {
    cfg.validate()?;
    if stride == 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "invalid mask geometry {height}x{width} at stride {stride}"
        )));
    }
    let n = height * width;
    let mut mask = ReweightMask {
        layer: layer.to_string(),
        height,
        width,
        beta: vec![0.0; n],
        region: vec![false; n],
        inside: vec![false; n],
        empty: boxes.is_empty(),
    };
    for b in boxes {
        let fp = box_footprint(b, height, width, stride, cfg.margin_ratio);
        let r = fp.relaxed;
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let i = y * width + x;
                mask.region[i] = true;
                let v = if fp.inner.contains(y, x) {
                    mask.inside[i] = true;
                    1.0
                } else {
                    let dx = x as f64 + 0.5 - fp.center.0;
                    let dy = y as f64 + 0.5 - fp.center.1;
                    ring_value(dx * dx + dy * dy, fp.edge_dist, &cfg.decay)
                };
                mask.beta[i] = mask.beta[i].max(v);
            }
        }
    }
    Ok(mask)
}

/// Ring coefficients stay strictly positive: far ring cells of thin boxes
/// would otherwise underflow to 0 and fall out of the region's support.
fn ring_value(sq_dist: f64, edge_dist: f64, decay: &DecaySpec) -> f64 {
    let v = match decay.kind {
        DecayKind::Power => {
            let a = (edge_dist * edge_dist).powf(decay.s);
            decay_power(sq_dist, a, decay.s).expect("ring cells lie outside the box interior")
        }
        _ => decay_alternatives(sq_dist, edge_dist, decay),
    };
    v.max(f64::MIN_POSITIVE)
}
