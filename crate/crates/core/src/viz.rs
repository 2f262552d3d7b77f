//! Saliency heat maps over input images, with and without box reweighting.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{to_rgb_image, BBox, DetectionSample};
use crate::detector::{forward_with_taps, Detector};
use crate::error::{Error, Result};
use crate::reweight::{build_reweight_mask, ReweightMask};
use crate::saliency::{channel_saliency, ImportanceConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweightMode {
    Off,
    On,
}

impl ReweightMode {
    pub fn name(&self) -> &'static str {
        match self {
            ReweightMode::Off => "off",
            ReweightMode::On => "on",
        }
    }
}

/// Heat values in `[0, 1]` on the feature grid of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub channel: usize,
    pub mode: ReweightMode,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub values: Vec<f64>,
    /// Relaxed box region on the feature grid (empty in `Off` mode).
    pub region: Vec<bool>,
}

fn min_max_into(values: &mut [f64], src: &[f64], cells: impl Fn(usize) -> bool) {
    let (lo, hi) = src
        .iter()
        .enumerate()
        .filter(|(i, _)| cells(*i))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, &v)| (lo.min(v), hi.max(v)));
    for (i, v) in values.iter_mut().enumerate() {
        if cells(i) {
            *v = if hi > lo { (src[i] - lo) / (hi - lo) } else { 0.0 };
        }
    }
}

/// Heat maps of the requested channels of `layer`. `Off`: the whole-map
/// normalized `max(0, w * A)` with unweighted saliency `w`. `On`: identical
/// outside the relaxed boxes; inside them the response uses box-weighted
/// saliency and is normalized over the region only.
pub fn saliency_heatmaps<T: Scalar>(
    model: &Detector<T>,
    sample: &DetectionSample,
    layer: &str,
    channels: &[usize],
    cfg: &ImportanceConfig,
) -> Result<Vec<HeatMap>> {
    let pass = forward_with_taps(model, sample, &[layer.to_string()], cfg.loss, 1.0)?;
    let tap = &pass.taps[0];
    let [_, c, h, w] = tap.activation.shape();
    if let Some(&bad) = channels.iter().find(|&&k| k >= c) {
        return Err(Error::Config(format!("channel {bad} does not exist in `{layer}` ({c} channels)")));
    }
    let plane = h * w;
    let uniform = ReweightMask::uniform(layer, h, w);
    let mask = build_reweight_mask(layer, &sample.boxes, h, w, tap.stride, &cfg.reweight)?;
    if mask.empty {
        log::warn!("sample `{}` has no boxes; reweighted maps are all zero", sample.sample_id);
    }
    let mut out = Vec::new();
    for &k in channels {
        let act: Vec<f64> = tap.activation.data()[k * plane..(k + 1) * plane]
            .iter()
            .map(|a| a.as_f64())
            .collect();
        let grad = &tap.gradient.data()[k * plane..(k + 1) * plane];
        let w_plain = channel_saliency(grad, &uniform)?;
        let plain: Vec<f64> = act.iter().map(|a| (w_plain * a).max(0.0)).collect();
        let mut off = vec![0.0; plane];
        min_max_into(&mut off, &plain, |_| true);
        out.push(HeatMap {
            channel: k,
            mode: ReweightMode::Off,
            height: h,
            width: w,
            stride: tap.stride,
            values: off.clone(),
            region: vec![false; plane],
        });
        let on = if mask.empty {
            vec![0.0; plane]
        } else {
            let w_box = channel_saliency(grad, &mask)?;
            let weighted: Vec<f64> = act.iter().map(|a| (w_box * a).max(0.0)).collect();
            let mut on = off;
            min_max_into(&mut on, &weighted, |i| mask.region[i]);
            on
        };
        out.push(HeatMap {
            channel: k,
            mode: ReweightMode::On,
            height: h,
            width: w,
            stride: tap.stride,
            values: on,
            region: mask.region.clone(),
        });
    }
    Ok(out)
}

/// Piecewise-linear black -> red -> yellow -> white ramp.
pub fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let (r, g, b) = if v < 1.0 {
        (v, 0.0, 0.0)
    } else if v < 2.0 {
        (1.0, v - 1.0, 0.0)
    } else {
        (1.0, 1.0, v - 2.0)
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

const BOX_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

fn draw_box(img: &mut RgbImage, b: &BBox) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = (b.x_min.floor() as i64).clamp(0, w - 1);
    let x1 = ((b.x_max.ceil() as i64) - 1).clamp(0, w - 1);
    let y0 = (b.y_min.floor() as i64).clamp(0, h - 1);
    let y1 = ((b.y_max.ceil() as i64) - 1).clamp(0, h - 1);
    for x in x0..=x1 {
        img.put_pixel(x as u32, y0 as u32, BOX_COLOR);
        img.put_pixel(x as u32, y1 as u32, BOX_COLOR);
    }
    for y in y0..=y1 {
        img.put_pixel(x0 as u32, y as u32, BOX_COLOR);
        img.put_pixel(x1 as u32, y as u32, BOX_COLOR);
    }
}

/// Half-and-half blend of the image with the heat colors (nearest-neighbour
/// upsampled by the stride), ground-truth boxes drawn on top.
pub fn render_overlay(sample: &DetectionSample, heat: &HeatMap) -> RgbImage {
    let mut img = to_rgb_image(&sample.image);
    let (w, h) = img.dimensions();
    for y in 0..h {
        for x in 0..w {
            let cy = (y as usize / heat.stride).min(heat.height - 1);
            let cx = (x as usize / heat.stride).min(heat.width - 1);
            let c = heat_color(heat.values[cy * heat.width + cx]);
            let p = img.get_pixel_mut(x, y);
            for i in 0..3 {
                p.0[i] = ((p.0[i] as u16 + c[i] as u16) / 2) as u8;
            }
        }
    }
    for b in &sample.boxes {
        draw_box(&mut img, b);
    }
    img
}

/// Whether image pixel `(x, y)` falls in a relaxed-region cell of `heat`.
pub fn pixel_in_region(heat: &HeatMap, x: u32, y: u32) -> bool {
    let cy = (y as usize / heat.stride).min(heat.height - 1);
    let cx = (x as usize / heat.stride).min(heat.width - 1);
    heat.region[cy * heat.width + cx]
}
