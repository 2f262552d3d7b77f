mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use salprune::ablate::{run_ablation, to_csv, to_svg, Study, DEFAULT_SAMPLE_GRID};
use salprune::data::{generate_shapes_dataset, select_class_balanced, AreaBuckets, Dataset, GenerateConfig, SizeMix};
use salprune::detector::build_toy_detector;
use salprune::io::{ensure_dir, read_json, write_json, write_text};
use salprune::metrics::format_table;
use salprune::pipeline::{evaluate_row, importance_for, resolve_taps, run_dir, run_pipeline, table_row};
use salprune::pruner::{apply_plan, make_plan, PlanConfig};
use salprune::saliency::{layer_id, ImportanceSet};
use salprune::train::{evaluate_model, train, Checkpoint};
use salprune::viz::{render_overlay, saliency_heatmaps};

use config::{parse_usize_list, ConfigArgs, RunConfig};

#[derive(Parser)]
#[command(name = "salprune", version, about = "Saliency-guided channel pruning for a toy single-stage detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic datasets.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train (or resume) the baseline detector.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score channels of a trained model.
    Importance {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Build a pruning plan from importance tables and apply it.
    Prune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        importance: PathBuf,
        /// Where to write the plan JSON (also written into the output directory).
        #[arg(long)]
        plan_out: Option<PathBuf>,
    },
    /// Fine-tune a (pruned) checkpoint.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Select, score, prune, fine-tune and evaluate in one go.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Saliency overlays with and without box reweighting.
    Viz(VizArgs),
    /// Ablation studies: components, decay or sample_size.
    Ablate {
        #[arg(value_parser = parse_study)]
        study: Study,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated sample-set sizes for the sample_size study.
        #[arg(long)]
        grid: Option<String>,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Render a synthetic split to disk.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 100)]
        n_images: usize,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long, default_value_t = 3)]
        n_classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        max_objects: usize,
        /// Small, medium and large fractions, comma-separated.
        #[arg(long)]
        size_mix: Option<String>,
    },
    /// Pick a class-balanced subset of a split.
    Balance {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Selection JSON; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct VizArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory holding the sample.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sample: String,
    #[arg(long)]
    layer: String,
    /// Comma-separated channel indices.
    #[arg(long)]
    channels: String,
}

fn parse_study(s: &str) -> std::result::Result<Study, String> {
    s.parse().map_err(|e: salprune::Error| e.to_string())
}

fn out_dir<C: Serialize>(explicit: &Option<PathBuf>, command: &str, config: &C) -> Result<PathBuf> {
    let dir = explicit.clone().unwrap_or_else(|| run_dir(command, config));
    ensure_dir(&dir)?;
    write_json(&dir.join("config.json"), config)?;
    log::info!("writing artifacts to {}", dir.display());
    Ok(dir)
}

fn load(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[derive(Serialize)]
struct Keyed<'a, T: Serialize> {
    #[serde(flatten)]
    run: &'a T,
    checkpoint: &'a Path,
}

fn cmd_data(cmd: DataCommand) -> Result<()> {
    match cmd {
        DataCommand::Gen {
            out,
            split,
            n_images,
            image_size,
            n_classes,
            seed,
            max_objects,
            size_mix,
        } => {
            let size_mix = match size_mix {
                None => SizeMix::default(),
                Some(s) => {
                    let v: Vec<f64> = s
                        .split(',')
                        .map(|t| t.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .context("size mix must be three numbers")?;
                    let [small, medium, large] = v[..] else {
                        bail!("size mix must be three numbers, got {}", v.len());
                    };
                    SizeMix { small, medium, large }
                }
            };
            let cfg = GenerateConfig {
                split,
                n_images,
                image_size,
                n_classes,
                seed,
                size_mix,
                max_objects,
            };
            let manifest = generate_shapes_dataset(&cfg, &out)?;
            write_json(&out.join("config.json"), &cfg)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        DataCommand::Balance {
            data,
            n_samples,
            seed,
            out,
        } => {
            let ds = load(&data)?;
            let sel = select_class_balanced(&ds.annotations(), ds.manifest.n_classes, n_samples, seed)?;
            match out {
                Some(p) => write_json(&p, &sel)?,
                None => println!("{}", serde_json::to_string_pretty(&sel)?),
            }
        }
    }
    Ok(())
}

fn cmd_train(args: ConfigArgs, resume: Option<PathBuf>) -> Result<()> {
    let cfg = args.resolve(false)?;
    let train_set = load(cfg.train_data()?)?;
    let val = load(cfg.val_data()?)?;
    if train_set.manifest.n_classes != cfg.model.n_classes {
        bail!(
            "dataset has {} classes but the model is configured for {}",
            train_set.manifest.n_classes,
            cfg.model.n_classes
        );
    }
    let dir = out_dir(&args.out, "train", &cfg)?;
    let mut ckpt = match &resume {
        Some(p) => load_checkpoint(p)?,
        None => Checkpoint::fresh(build_toy_detector(&cfg.model)?),
    };
    let log = train(&mut ckpt, &train_set.samples, &cfg.train, |e| {
        log::info!("epoch {} lr {:.5} loss {:.4}", e.epoch, e.lr, e.loss);
    })
    .context("baseline training failed")?;
    ckpt.save(&dir.join("checkpoint.json"))?;
    let (eval, row) = evaluate_row(&ckpt.model, &val, "baseline", 0.0)?;
    write_json(&dir.join("train_log.json"), &log)?;
    write_json(&dir.join("report.json"), &eval)?;
    let table = format_table(&[row]);
    write_text(&dir.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_importance(args: ConfigArgs, checkpoint: PathBuf) -> Result<()> {
    let cfg = args.resolve(true)?;
    let ckpt = load_checkpoint(&checkpoint)?;
    let train_set = load(cfg.train_data()?)?;
    let dir = out_dir(&args.out, "importance", &Keyed { run: &cfg, checkpoint: &checkpoint })?;
    let (selection, set) = importance_for(&ckpt.model, &train_set, &cfg.pipeline)?;
    write_json(&dir.join("selection.json"), &selection)?;
    write_json(&dir.join("importance.json"), &set)?;
    println!("{}", dir.join("importance.json").display());
    Ok(())
}

fn plan_layers(model: &salprune::Detector32, cfg: &RunConfig) -> Result<Option<Vec<String>>> {
    Ok(match &cfg.pipeline.taps {
        None => None,
        Some(_) => Some(
            resolve_taps(model, &cfg.pipeline)
                .iter()
                .map(|t| layer_id(model.graph(), t))
                .collect::<salprune::Result<_>>()?,
        ),
    })
}

fn cmd_prune(args: ConfigArgs, checkpoint: PathBuf, importance: PathBuf, plan_out: Option<PathBuf>) -> Result<()> {
    let cfg = args.resolve(true)?;
    let ckpt = load_checkpoint(&checkpoint)?;
    let set: ImportanceSet = read_json(&importance)?;
    let val = cfg.val_data.as_deref().map(load).transpose()?;
    let size = val.as_ref().map_or(128, |v| v.manifest.image_size);
    let dir = out_dir(&args.out, "prune", &Keyed { run: &cfg, checkpoint: &checkpoint })?;
    let mut plan = make_plan(
        ckpt.model.graph(),
        &set,
        &PlanConfig {
            rate: cfg.pipeline.rate,
            layers: plan_layers(&ckpt.model, &cfg)?,
            input_size: (size, size),
        },
    )?;
    plan.fingerprint = Some(salprune::io::fingerprint(&cfg));
    write_json(&dir.join("plan.json"), &plan)?;
    if let Some(p) = &plan_out {
        write_json(p, &plan)?;
    }
    let pruned = apply_plan(&ckpt.model, &plan)?;
    Checkpoint::fresh(pruned).save(&dir.join("checkpoint.json"))?;
    println!(
        "removed {} channels: params {} -> {}, flops {} -> {}",
        plan.removed_channels(),
        plan.before.params,
        plan.predicted.params,
        plan.before.flops,
        plan.predicted.flops
    );
    Ok(())
}

fn cmd_finetune(args: ConfigArgs, checkpoint: PathBuf) -> Result<()> {
    let cfg = args.resolve(true)?;
    let mut ckpt = load_checkpoint(&checkpoint)?;
    ckpt.epochs_trained = 0;
    ckpt.velocity = None;
    let train_set = load(cfg.train_data()?)?;
    let dir = out_dir(&args.out, "finetune", &Keyed { run: &cfg, checkpoint: &checkpoint })?;
    let log = train(&mut ckpt, &train_set.samples, &cfg.pipeline.finetune, |e| {
        log::info!("epoch {} lr {:.5} loss {:.4}", e.epoch, e.lr, e.loss);
    })?;
    ckpt.save(&dir.join("checkpoint.json"))?;
    write_json(&dir.join("train_log.json"), &log)?;
    println!("{}", dir.join("checkpoint.json").display());
    Ok(())
}

fn cmd_eval(args: ConfigArgs, checkpoint: PathBuf) -> Result<()> {
    let cfg = args.resolve(true)?;
    let ckpt = load_checkpoint(&checkpoint)?;
    let val = load(cfg.val_data()?)?;
    let dir = out_dir(&args.out, "eval", &Keyed { run: &cfg, checkpoint: &checkpoint })?;
    let size = val.manifest.image_size;
    let (eval, dets) = evaluate_model(
        &ckpt.model,
        &val.samples,
        val.manifest.n_classes,
        &AreaBuckets::for_image_size(size),
    )?;
    let (params, flops) = salprune::metrics::measured_cost(&ckpt.model, size, size)?;
    write_json(&dir.join("detections.json"), &dets)?;
    write_json(&dir.join("report.json"), &eval)?;
    let table = format_table(&[table_row("model", 0.0, params, flops, &eval)]);
    write_text(&dir.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_pipeline(args: ConfigArgs, checkpoint: PathBuf) -> Result<()> {
    let cfg = args.resolve(true)?;
    let ckpt = load_checkpoint(&checkpoint)?;
    let train_set = load(cfg.train_data()?)?;
    let val = load(cfg.val_data()?)?;
    let dir = out_dir(&args.out, "pipeline", &Keyed { run: &cfg, checkpoint: &checkpoint })?;
    let (_, base_row) = evaluate_row(&ckpt.model, &val, "baseline", 0.0)?;
    let outcome = run_pipeline(&ckpt.model, &train_set, &val, &cfg.pipeline)?;
    write_json(&dir.join("importance.json"), &outcome.importance)?;
    write_json(&dir.join("plan.json"), &outcome.report.plan)?;
    outcome.model.save(&dir.join("checkpoint.json"))?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    let table = format_table(&[base_row, outcome.report.row.clone()]);
    write_text(&dir.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_viz(a: VizArgs) -> Result<()> {
    let cfg = a.cfg.resolve(true)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let ds = load(&a.data)?;
    let sample = ds
        .get(&a.sample)
        .with_context(|| format!("sample `{}` not in {}", a.sample, a.data.display()))?;
    let channels = parse_usize_list(&a.channels)?;
    if channels.is_empty() {
        bail!("no channels requested");
    }
    let dir = out_dir(&a.cfg.out, "viz", &Keyed { run: &cfg, checkpoint: &a.checkpoint })?;
    let maps = saliency_heatmaps(&ckpt.model, sample, &a.layer, &channels, &cfg.pipeline.importance)?;
    let layer = a.layer.replace('.', "_");
    for m in &maps {
        let path = dir.join(format!("{layer}_c{}_{}.png", m.channel, m.mode.name()));
        render_overlay(sample, m)
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_ablate(study: Study, args: ConfigArgs, checkpoint: PathBuf, grid: Option<String>) -> Result<()> {
    let cfg = args.resolve(true)?;
    let grid = match grid {
        Some(g) => parse_usize_list(&g)?,
        None => DEFAULT_SAMPLE_GRID.to_vec(),
    };
    let ckpt = load_checkpoint(&checkpoint)?;
    let train_set = load(cfg.train_data()?)?;
    let val = load(cfg.val_data()?)?;
    #[derive(Serialize)]
    struct AblateKey<'a> {
        study: Study,
        grid: &'a [usize],
        #[serde(flatten)]
        run: Keyed<'a, RunConfig>,
    }
    let key = AblateKey {
        study,
        grid: &grid,
        run: Keyed { run: &cfg, checkpoint: &checkpoint },
    };
    let dir = out_dir(&args.out, &format!("ablate-{}", study.name()), &key)?;
    let result = run_ablation(study, &ckpt.model, &train_set, &val, &cfg.pipeline, &grid)?;
    write_json(&dir.join("ablation.json"), &result)?;
    let csv = to_csv(&result);
    write_text(&dir.join("ablation.csv"), &csv)?;
    write_text(&dir.join("ablation.svg"), &to_svg(&result))?;
    print!("{csv}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Data(c) => cmd_data(c),
        Command::Train { cfg, resume } => cmd_train(cfg, resume),
        Command::Importance { cfg, checkpoint } => cmd_importance(cfg, checkpoint),
        Command::Prune {
            cfg,
            checkpoint,
            importance,
            plan_out,
        } => cmd_prune(cfg, checkpoint, importance, plan_out),
        Command::Finetune { cfg, checkpoint } => cmd_finetune(cfg, checkpoint),
        Command::Eval { cfg, checkpoint } => cmd_eval(cfg, checkpoint),
        Command::Pipeline { cfg, checkpoint } => cmd_pipeline(cfg, checkpoint),
        Command::Viz(a) => cmd_viz(a),
        Command::Ablate {
            study,
            cfg,
            checkpoint,
            grid,
        } => cmd_ablate(study, cfg, checkpoint, grid),
    }
}
