//! Run configuration: JSON file first, then command-line flags on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use salprune::baselines::Criterion;
use salprune::detector::ToyDetectorConfig;
use salprune::pipeline::PipelineConfig;
use salprune::reweight::DecayKind;
use salprune::saliency::{Extent, NormScope, Weighting};
use salprune::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub model: ToyDetectorConfig,
    /// Baseline training.
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn train_data(&self) -> Result<&Path> {
        match &self.train_data {
            Some(p) if p.exists() => Ok(p),
            Some(p) => bail!("training data `{}` does not exist", p.display()),
            None => bail!("no training data given (--train-data or `train_data` in the config)"),
        }
    }

    pub fn val_data(&self) -> Result<&Path> {
        match &self.val_data {
            Some(p) if p.exists() => Ok(p),
            Some(p) => bail!("validation data `{}` does not exist", p.display()),
            None => bail!("no validation data given (--val-data or `val_data` in the config)"),
        }
    }
}

fn split_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| anyhow::anyhow!("bad list item `{t}`: {e}")))
        .collect()
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    split_list(s)
}

/// Flags shared by every model-level command. Each one overrides the
/// corresponding config key when present.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to a fingerprinted directory under `$SALPRUNE_OUT` or `./runs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub width: Option<f64>,
    /// Seeds model init, training order and sample selection.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs for `train`, and for `finetune`/`pipeline` fine-tuning.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub rate: Option<f64>,
    /// Class-balanced sample-set size.
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// saliency, l1 or random.
    #[arg(long)]
    pub criterion: Option<Criterion>,
    /// Seed of the random criterion.
    #[arg(long)]
    pub criterion_seed: Option<u64>,
    /// Comma-separated tap layers; every prunable conv by default.
    #[arg(long)]
    pub taps: Option<String>,
    /// power, exp, ftg or none.
    #[arg(long)]
    pub decay: Option<DecayKind>,
    #[arg(long)]
    pub decay_s: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// box-aware or uniform.
    #[arg(long, value_parser = parse_weighting)]
    pub weighting: Option<Weighting>,
    /// region or full.
    #[arg(long, value_parser = parse_extent)]
    pub importance_extent: Option<Extent>,
    /// channel or layer.
    #[arg(long, value_parser = parse_scope)]
    pub norm_scope: Option<NormScope>,
}

fn parse_weighting(s: &str) -> std::result::Result<Weighting, String> {
    match s {
        "box-aware" | "box_aware" => Ok(Weighting::BoxAware),
        "uniform" => Ok(Weighting::Uniform),
        _ => Err(format!("expected box-aware or uniform, got `{s}`")),
    }
}

fn parse_extent(s: &str) -> std::result::Result<Extent, String> {
    match s {
        "region" => Ok(Extent::Region),
        "full" => Ok(Extent::Full),
        _ => Err(format!("expected region or full, got `{s}`")),
    }
}

fn parse_scope(s: &str) -> std::result::Result<NormScope, String> {
    match s {
        "channel" => Ok(NormScope::Channel),
        "layer" => Ok(NormScope::Layer),
        _ => Err(format!("expected channel or layer, got `{s}`")),
    }
}

impl ConfigArgs {
    /// Config file (or defaults) with flags applied. `fine_tune` routes the
    /// optimizer flags to the fine-tuning settings instead of baseline training.
    pub fn resolve(&self, fine_tune: bool) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr => $($dst:tt)+) => {
                if let Some(v) = $flag.clone() {
                    $($dst)+ = v;
                }
            };
        }
        if self.train_data.is_some() {
            cfg.train_data = self.train_data.clone();
        }
        if self.val_data.is_some() {
            cfg.val_data = self.val_data.clone();
        }
        set!(self.n_classes => cfg.model.n_classes);
        set!(self.width => cfg.model.width_multiplier);
        if let Some(seed) = self.seed {
            cfg.model.seed = seed;
            cfg.train.seed = seed;
            cfg.pipeline.seed = seed;
            cfg.pipeline.finetune.seed = seed;
        }
        let opt = if fine_tune { &mut cfg.pipeline.finetune } else { &mut cfg.train };
        set!(self.epochs => opt.epochs);
        set!(self.batch_size => opt.batch_size);
        set!(self.lr => opt.lr);
        set!(self.momentum => opt.momentum);
        set!(self.weight_decay => opt.weight_decay);
        let p = &mut cfg.pipeline;
        set!(self.rate => p.rate);
        set!(self.n_samples => p.n_samples);
        set!(self.criterion => p.criterion.kind);
        set!(self.criterion_seed => p.criterion.seed);
        if let Some(t) = &self.taps {
            p.taps = Some(split_list::<String>(t)?);
        }
        set!(self.decay => p.importance.reweight.decay.kind);
        set!(self.decay_s => p.importance.reweight.decay.s);
        set!(self.margin => p.importance.reweight.margin_ratio);
        set!(self.weighting => p.importance.weighting);
        set!(self.importance_extent => p.importance.extent);
        set!(self.norm_scope => p.importance.norm_scope);
        cfg.pipeline.validate()?;
        Ok(cfg)
    }
}
