//! End-to-end runs: class-balanced sample selection, importance, plan,
//! pruning, fine-tuning and evaluation, plus versioned output directories.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::baselines::{l1_importance_set, random_importance_set, Criterion, CriterionSpec};
use crate::data::{select_class_balanced, AreaBuckets, Dataset, Selection};
use crate::detector::{default_taps, Detector};
use crate::error::{Error, Result};
use crate::io::fingerprint;
use crate::metrics::{measured_cost, EvalSummary, TableRow};
use crate::pruner::{apply_plan, make_plan, PlanConfig, PruningPlan};
use crate::saliency::{compute_importance, layer_id, ImportanceConfig, ImportanceSet};
use crate::train::{evaluate_model, train, Checkpoint, EpochLog, TrainConfig};

/// Environment variable overriding the output root.
pub const OUT_ENV: &str = "SALPRUNE_OUT";
const DEFAULT_OUT: &str = "runs";

/// `$SALPRUNE_OUT` or `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
}

/// `<root>/<command>-<first 12 hex digits of the config fingerprint>`.
pub fn run_dir<C: Serialize>(command: &str, config: &C) -> PathBuf {
    let fp = fingerprint(config);
    output_root().join(format!("{command}-{}", &fp[..12]))
}

/// Everything after the baseline model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Tapped and pruned layers; every prunable conv when `None`.
    #[serde(default)]
    pub taps: Option<Vec<String>>,
    pub criterion: CriterionSpec,
    #[serde(default)]
    pub importance: ImportanceConfig,
    pub rate: f64,
    /// Size of the class-balanced sample set.
    pub n_samples: usize,
    pub finetune: TrainConfig,
    /// Seeds sample selection.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            taps: None,
            criterion: CriterionSpec {
                kind: Criterion::Saliency,
                seed: 0,
            },
            importance: ImportanceConfig::default(),
            rate: 0.3,
            n_samples: 50,
            finetune: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Config(format!("pruning rate must be in [0, 1), got {}", self.rate)));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("sample-set size must be at least 1".into()));
        }
        self.importance.reweight.validate()?;
        if self.finetune.epochs > 0 {
            self.finetune.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub fingerprint: String,
    pub config: PipelineConfig,
    pub selection: Selection,
    pub plan: PruningPlan,
    /// Parameters and FLOPs recounted on the pruned model.
    pub measured_params: u64,
    pub measured_flops: u64,
    pub finetune_log: Vec<EpochLog>,
    pub eval: EvalSummary,
    pub row: TableRow,
    /// Learning-rate schedule used while fine-tuning.
    pub schedule: String,
}

pub struct PipelineOutcome {
    pub importance: ImportanceSet,
    pub model: Checkpoint,
    pub report: PipelineReport,
}

/// Tap ids in effect for a config.
pub fn resolve_taps(model: &Detector<f32>, cfg: &PipelineConfig) -> Vec<String> {
    cfg.taps.clone().unwrap_or_else(|| default_taps(model.graph()))
}

/// Importance tables for the chosen criterion.
pub fn importance_for(
    model: &Detector<f32>,
    train_set: &Dataset,
    cfg: &PipelineConfig,
) -> Result<(Selection, ImportanceSet)> {
    let n_classes = train_set.manifest.n_classes;
    let selection = select_class_balanced(&train_set.annotations(), n_classes, cfg.n_samples, cfg.seed)?;
    let taps = resolve_taps(model, cfg);
    let set = match cfg.criterion.kind {
        Criterion::Saliency => {
            let samples = train_set.subset(&selection.sample_ids)?;
            compute_importance(model, &samples, &taps, &cfg.importance)?
        }
        Criterion::L1 => l1_importance_set(model, &taps)?,
        Criterion::Random => random_importance_set(model.graph(), &taps, cfg.criterion.seed)?,
    };
    Ok((selection, set))
}

pub fn table_row(label: &str, rate: f64, params: u64, flops: u64, eval: &EvalSummary) -> TableRow {
    TableRow {
        label: label.to_string(),
        pruning_rate: rate,
        flops,
        params,
        ap_small: eval.ap_small,
        ap_medium: eval.ap_medium,
        ap_large: eval.ap_large,
        map: eval.map,
    }
}

/// Baseline evaluation with its cost, as a table row.
pub fn evaluate_row(model: &Detector<f32>, val: &Dataset, label: &str, rate: f64) -> Result<(EvalSummary, TableRow)> {
    let size = val.manifest.image_size;
    let buckets = AreaBuckets::for_image_size(size);
    let (eval, _) = evaluate_model(model, &val.samples, val.manifest.n_classes, &buckets)?;
    let (params, flops) = measured_cost(model, size, size)?;
    let row = table_row(label, rate, params, flops, &eval);
    Ok((eval, row))
}

/// Select, score, prune, fine-tune and evaluate.
pub fn run_pipeline(
    baseline: &Detector<f32>,
    train_set: &Dataset,
    val: &Dataset,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let (selection, importance) = importance_for(baseline, train_set, cfg)?;
    let size = val.manifest.image_size;
    let layers = match &cfg.taps {
        None => None,
        Some(t) => Some(
            t.iter()
                .map(|id| layer_id(baseline.graph(), id))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let mut plan = make_plan(
        baseline.graph(),
        &importance,
        &PlanConfig {
            rate: cfg.rate,
            layers,
            input_size: (size, size),
        },
    )?;
    let fp = fingerprint(cfg);
    plan.fingerprint = Some(fp.clone());
    let pruned = apply_plan(baseline, &plan)?;
    let mut ckpt = Checkpoint::fresh(pruned);
    let finetune_log = if cfg.finetune.epochs > 0 {
        train(&mut ckpt, &train_set.samples, &cfg.finetune, |_| {})?
    } else {
        Vec::new()
    };
    let label = format!("{} r={}", cfg.criterion.kind.name(), cfg.rate);
    let (eval, row) = evaluate_row(&ckpt.model, val, &label, cfg.rate)?;
    let (measured_params, measured_flops) = (row.params, row.flops);
    Ok(PipelineOutcome {
        importance,
        model: ckpt,
        report: PipelineReport {
            fingerprint: fp,
            config: cfg.clone(),
            selection,
            plan,
            measured_params,
            measured_flops,
            finetune_log,
            eval,
            row,
            schedule: "cosine decay to zero over the fine-tuning epochs".into(),
        },
    })
}
