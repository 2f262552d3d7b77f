//! Ablation harness: reweighting components, ring decay profiles and
//! sample-set size, each emitted as CSV rows and an SVG chart.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::baselines::Criterion;
use crate::data::Dataset;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::pipeline::{evaluate_row, run_pipeline, PipelineConfig};
use crate::reweight::{DecayKind, DecaySpec};
use crate::saliency::{Extent, Weighting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Components,
    Decay,
    SampleSize,
}

impl std::str::FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Study::Components),
            "decay" => Ok(Study::Decay),
            "sample_size" | "sample-size" => Ok(Study::SampleSize),
            other => Err(Error::Config(format!(
                "unknown study `{other}` (expected components, decay or sample_size)"
            ))),
        }
    }
}

impl Study {
    pub fn name(&self) -> &'static str {
        match self {
            Study::Components => "components",
            Study::Decay => "decay",
            Study::SampleSize => "sample_size",
        }
    }
}

pub const DEFAULT_SAMPLE_GRID: [usize; 5] = [8, 16, 32, 64, 128];

/// One arm; `config: None` is the unpruned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    /// Gradient saliency, box interior, box context.
    pub components: Option<[bool; 3]>,
    pub config: Option<PipelineConfig>,
}

/// Arms of a study derived from `base` (criterion forced to saliency).
pub fn study_arms(study: Study, base: &PipelineConfig, grid: &[usize]) -> Vec<Arm> {
    let mut base = base.clone();
    base.criterion.kind = Criterion::Saliency;
    let with = |f: &dyn Fn(&mut PipelineConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match study {
        Study::Components => vec![
            Arm {
                name: "unpruned".into(),
                components: Some([false, false, false]),
                config: None,
            },
            Arm {
                name: "gradients".into(),
                components: Some([true, false, false]),
                config: Some(with(&|c| {
                    c.importance.weighting = Weighting::Uniform;
                    c.importance.extent = Extent::Full;
                })),
            },
            Arm {
                name: "gradients+box".into(),
                components: Some([true, true, false]),
                config: Some(with(&|c| {
                    c.importance.weighting = Weighting::BoxAware;
                    c.importance.reweight.margin_ratio = 0.0;
                })),
            },
            Arm {
                name: "gradients+box+context".into(),
                components: Some([true, true, true]),
                config: Some(with(&|c| {
                    c.importance.weighting = Weighting::BoxAware;
                    if c.importance.reweight.margin_ratio == 0.0 {
                        c.importance.reweight.margin_ratio = 0.25;
                    }
                })),
            },
        ],
        Study::Decay => [
            DecayKind::None,
            DecayKind::FlatTopGaussian,
            DecayKind::Exponential,
            DecayKind::Power,
        ]
        .into_iter()
        .map(|kind| Arm {
            name: serde_json::to_value(kind).expect("enum serializes").as_str().unwrap_or("?").to_string(),
            components: None,
            config: Some(with(&|c| {
                c.importance.weighting = Weighting::BoxAware;
                c.importance.reweight.decay = DecaySpec {
                    kind,
                    ..c.importance.reweight.decay
                };
            })),
        })
        .collect(),
        Study::SampleSize => grid
            .iter()
            .map(|&n| Arm {
                name: format!("n={n}"),
                components: None,
                config: Some(with(&|c| c.n_samples = n)),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub n_samples: usize,
    pub rate: f64,
    pub params: u64,
    pub flops: u64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub study: Study,
    pub rows: Vec<AblationRow>,
}

/// Run every arm of `study` from the same baseline.
pub fn run_ablation(
    study: Study,
    baseline: &Detector<f32>,
    train_set: &Dataset,
    val: &Dataset,
    base: &PipelineConfig,
    grid: &[usize],
) -> Result<AblationResult> {
    if study == Study::SampleSize && grid.is_empty() {
        return Err(Error::Config("sample-size study needs a non-empty grid".into()));
    }
    let mut rows = Vec::new();
    for arm in study_arms(study, base, grid) {
        log::info!("ablation {}: arm {}", study.name(), arm.name);
        let (row, n) = match &arm.config {
            None => (evaluate_row(baseline, val, &arm.name, 0.0)?.1, 0),
            Some(cfg) => (run_pipeline(baseline, train_set, val, cfg)?.report.row, cfg.n_samples),
        };
        rows.push(AblationRow {
            arm: arm.name.clone(),
            n_samples: n,
            rate: row.pruning_rate,
            params: row.params,
            flops: row.flops,
            ap_small: row.ap_small,
            ap_medium: row.ap_medium,
            ap_large: row.ap_large,
            map: row.map,
        });
    }
    Ok(AblationResult { study, rows })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn to_csv(result: &AblationResult) -> String {
    let mut s = String::from("arm,n_samples,rate,params,flops,ap_s,ap_m,ap_l,map\n");
    for r in &result.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.arm,
            r.n_samples,
            r.rate,
            r.params,
            r.flops,
            opt(r.ap_small),
            opt(r.ap_medium),
            opt(r.ap_large),
            opt(r.map)
        );
    }
    s
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// mAP per arm: bars for categorical studies, a polyline over N for the
/// sample-size study.
pub fn to_svg(result: &AblationResult) -> String {
    let vals: Vec<f64> = result.rows.iter().map(|r| r.map.unwrap_or(0.0)).collect();
    let top = vals.iter().copied().fold(0.0, f64::max).max(1e-9) * 1.1;
    let n = vals.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let y_of = |v: f64| H - PAD - (v / top) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">mAP@0.5 by arm: {}</text>"#,
        W / 2.0,
        result.study.name()
    );
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD);
    for k in 0..=4 {
        let v = top * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.1}</text>"#,
            PAD - 6.0,
            y_of(v) + 4.0,
            100.0 * v
        );
    }
    let centers: Vec<f64> = (0..vals.len()).map(|i| PAD + slot * (i as f64 + 0.5)).collect();
    if result.study == Study::SampleSize {
        let pts: Vec<String> = centers
            .iter()
            .zip(&vals)
            .map(|(x, &v)| format!("{x:.1},{:.1}", y_of(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for (x, &v) in centers.iter().zip(&vals) {
            let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{:.1}" r="4" fill="steelblue"/>"#, y_of(v));
        }
    } else {
        for (x, &v) in centers.iter().zip(&vals) {
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="steelblue"/>"#,
                x - slot * 0.35,
                y_of(v),
                slot * 0.7,
                H - PAD - y_of(v)
            );
        }
    }
    for (x, r) in centers.iter().zip(&result.rows) {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
            H - PAD + 18.0,
            xml_escape(&r.arm)
        );
    }
    s.push_str("</svg>\n");
    s
}
